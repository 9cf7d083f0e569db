//! Short-time objective intelligibility.
//!
//! Correlation of one-third-octave band envelopes between clean and
//! processed speech over 30-frame segments, after resampling to 10 kHz
//! and discarding frames more than 40 dB below the loudest clean frame.
//! Fixed constants: 256-sample frames with 50% overlap, 512-point FFT,
//! 15 bands starting at 150 Hz, and a -15 dB clipping bound.

use crate::audio::AudioSignal;
use crate::{Error, Result};

const TARGET_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const FFT: usize = 512;
const NUM_BANDS: usize = 15;
const FIRST_BAND_HZ: f64 = 150.0;
const SEGMENT_FRAMES: usize = 30;
const CLIP_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
/// Guard against zero-energy bands; far below any real signal level.
const EPS: f64 = 1e-20;

/// STOI score for `processed` against the `clean` reference. Both signals
/// must share a sample rate and length and must contain at least 30
/// active frames (roughly a second of speech) after silence removal.
pub fn stoi(clean: &AudioSignal, processed: &AudioSignal) -> Result<f64> {
    if clean.sample_rate != processed.sample_rate {
        return Err(Error::InvalidArg("sample rate mismatch".into()));
    }
    if clean.len() != processed.len() {
        return Err(Error::InvalidArg("length mismatch".into()));
    }
    let x = resample_to(clean, TARGET_RATE)?;
    let y = resample_to(processed, TARGET_RATE)?;

    let (x, y) = remove_silent_frames(&x, &y)?;
    let xs = band_envelopes(&x)?;
    let ys = band_envelopes(&y)?;
    let frames = xs[0].len();
    if frames < SEGMENT_FRAMES {
        return Err(Error::InsufficientSpeech);
    }

    let clip = 10f64.powf(-CLIP_DB / 20.0) + 1.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for end in SEGMENT_FRAMES..=frames {
        let start = end - SEGMENT_FRAMES;
        for band in 0..NUM_BANDS {
            let xseg = &xs[band][start..end];
            let yseg = &ys[band][start..end];
            let alpha = (sq_sum(xseg) / (sq_sum(yseg) + EPS)).sqrt();
            let clipped: Vec<f64> = xseg
                .iter()
                .zip(yseg)
                .map(|(&xv, &yv)| (alpha * yv).min(xv * clip))
                .collect();
            sum += correlation(xseg, &clipped);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

fn sq_sum(v: &[f64]) -> f64 {
    v.iter().map(|s| s * s).sum()
}

/// Zero-mean, unit-norm correlation of two equal-length vectors.
fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        dot += dx * dy;
        na += dx * dx;
        nb += dy * dy;
    }
    dot / (na.sqrt() * nb.sqrt() + EPS)
}

/// Symmetric Hann window without zero endpoints (the flavor the metric's
/// reference constants assume).
fn hanning(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).cos()))
        .collect()
}

/// Drops frames whose clean energy is more than 40 dB below the loudest
/// frame, overlap-adding the survivors back into shorter signals. Both
/// signals are masked by the clean signal's activity.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() < FRAME {
        return Err(Error::InsufficientSpeech);
    }
    let w = hanning(FRAME);
    let starts: Vec<usize> = (0..=(x.len() - FRAME)).step_by(HOP).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME).map(|i| (x[s + i] * w[i]).powi(2)).sum();
            20.0 * (e.sqrt() / (FRAME as f64).sqrt() + EPS).log10()
        })
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = starts
        .iter()
        .enumerate()
        .filter(|(j, _)| energies[*j] - max + DYN_RANGE_DB > 0.0)
        .map(|(_, &s)| s)
        .collect();
    if keep.len() < SEGMENT_FRAMES {
        return Err(Error::InsufficientSpeech);
    }
    let out_len = (keep.len() - 1) * HOP + FRAME;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (count, &s) in keep.iter().enumerate() {
        let o = count * HOP;
        for i in 0..FRAME {
            xs[o + i] += x[s + i] * w[i];
            ys[o + i] += y[s + i] * w[i];
        }
    }
    Ok((xs, ys))
}

/// One-third-octave band envelopes: per frame, the root of the summed
/// bin powers inside each band. Returns `NUM_BANDS` rows.
fn band_envelopes(x: &[f64]) -> Result<Vec<Vec<f64>>> {
    if x.len() < FRAME {
        return Err(Error::InsufficientSpeech);
    }
    let w = hanning(FRAME);
    let bands = third_octave_bins();
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT);
    let mut scratch = vec![num_complex::Complex64::default(); fft.get_inplace_scratch_len()];

    let mut rows = vec![Vec::new(); NUM_BANDS];
    let mut start = 0;
    while start + FRAME <= x.len() {
        let mut buf = vec![num_complex::Complex64::default(); FFT];
        for i in 0..FRAME {
            buf[i] = num_complex::Complex64::new(x[start + i] * w[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (band, &(lo, hi)) in bands.iter().enumerate() {
            let power: f64 = (lo..hi).map(|f| buf[f].norm_sqr()).sum();
            rows[band].push(power.sqrt());
        }
        start += HOP;
    }
    Ok(rows)
}

/// Bin ranges `[lo, hi)` of the 15 one-third-octave bands on the 512-point
/// grid at 10 kHz: centers `150 * 2^(k/3)`, edges a sixth-octave out,
/// snapped to the nearest bin.
fn third_octave_bins() -> Vec<(usize, usize)> {
    let bin_hz = TARGET_RATE as f64 / FFT as f64;
    let nearest = |hz: f64| -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for i in 0..=FFT / 2 {
            let d = (i as f64 * bin_hz - hz).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };
    (0..NUM_BANDS)
        .map(|k| {
            let cf = FIRST_BAND_HZ * 2f64.powf(k as f64 / 3.0);
            let lo = nearest(cf * 2f64.powf(-1.0 / 6.0));
            let hi = nearest(cf * 2f64.powf(1.0 / 6.0));
            (lo, hi)
        })
        .collect()
}

/// Polyphase rational resampler. The anti-aliasing filter is a 161-tap
/// (for 5/8) windowed sinc: Blackman window, cutoff at the lower of the
/// two Nyquist frequencies, gain compensated by the upsampling factor.
pub fn resample_to(signal: &AudioSignal, target_rate: u32) -> Result<Vec<f64>> {
    if signal.sample_rate == target_rate {
        return Ok(signal.samples.clone());
    }
    let g = gcd(signal.sample_rate as usize, target_rate as usize);
    let p = target_rate as usize / g;
    let q = signal.sample_rate as usize / g;
    let half = 10 * p.max(q);
    let taps = 2 * half + 1;
    let up_rate = signal.sample_rate as f64 * p as f64;
    let cutoff_hz = (signal.sample_rate.min(target_rate)) as f64 / 2.0;
    let wc = 2.0 * std::f64::consts::PI * cutoff_hz / up_rate;
    let h: Vec<f64> = (0..taps)
        .map(|k| {
            let m = k as f64 - half as f64;
            let sinc = if m == 0.0 {
                wc / std::f64::consts::PI
            } else {
                (wc * m).sin() / (std::f64::consts::PI * m)
            };
            let t = k as f64 / (taps - 1) as f64;
            let blackman = 0.42 - 0.5 * (2.0 * std::f64::consts::PI * t).cos()
                + 0.08 * (4.0 * std::f64::consts::PI * t).cos();
            sinc * blackman
        })
        .collect();

    let x = &signal.samples;
    let out_len = (x.len() * p).div_ceil(q);
    let mut out = vec![0.0; out_len];
    for (m, o) in out.iter_mut().enumerate() {
        let center = m * q + half;
        // Only every p-th upsampled slot is populated.
        let mut k = center % p;
        while k < taps && k <= center {
            let j = (center - k) / p;
            if j < x.len() {
                *o += h[k] * x[j];
            }
            k += p;
        }
        *o *= p as f64;
    }
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
