//! Deterministic signal-processing primitives: framing, windowing,
//! forward/inverse STFT, magnitude spectra, and SPL normalization.
//!
//! Conventions, fixed across the whole pipeline:
//! - periodic (DFT-even) Hann analysis and synthesis window;
//! - hop = fft_size / 4 (75% overlap), no centering or zero padding:
//!   frame `t` covers samples `[t*hop, t*hop + fft_size)` and a trailing
//!   partial frame is dropped;
//! - inverse transform is weighted overlap-add normalized per sample by
//!   the summed squared window.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// SPL reference added during power normalization, in dB.
pub const SPL_REFERENCE_DB: f64 = 90.302;
/// Floor applied to power values before taking logs, and to ratio
/// denominators. Keeps silence finite at 90.302 - 120 dB, far below any
/// hearing-threshold value.
pub const POWER_FLOOR: f64 = 1e-12;
/// Floor on the per-sample synthesis normalization (interior value is
/// 1.5). Caps the edge gain: a masked spectrogram carries unwindowed
/// content in its first and last partial-overlap samples, and dividing
/// by the raw window-power tail would amplify it without bound.
pub const SYNTHESIS_NORM_FLOOR: f64 = 1e-3;

/// Complex time-frequency matrix, `fft_size/2 + 1` rows by `T` columns.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    /// Center frequency of a bin in Hz.
    pub fn bin_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate as f64 / self.fft_size as f64
    }

    fn validate(&self) -> Result<()> {
        validate_params(self.fft_size, self.hop)?;
        if self.data.nrows() != self.fft_size / 2 + 1 {
            return Err(Error::Shape(format!(
                "{} bins for fft_size {}",
                self.data.nrows(),
                self.fft_size
            )));
        }
        if self.data.ncols() == 0 {
            return Err(Error::Shape("empty spectrogram".into()));
        }
        Ok(())
    }
}

/// Real F x T matrix of SPL-normalized power, in dB.
#[derive(Debug, Clone)]
pub struct PsdMatrix {
    pub values: Array2<f64>,
    /// The constant reference offset that was added, in dB.
    pub reference_offset: f64,
}

fn validate_params(fft_size: usize, hop: usize) -> Result<()> {
    if fft_size < 8 || !fft_size.is_power_of_two() {
        return Err(Error::InvalidArg(format!(
            "fft_size {fft_size} must be a power of two >= 8"
        )));
    }
    if hop != fft_size / 4 {
        return Err(Error::InvalidArg(format!(
            "hop {hop} must be fft_size/4 = {}",
            fft_size / 4
        )));
    }
    Ok(())
}

/// Periodic (DFT-even) Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Forward STFT. The signal must contain at least one full frame.
pub fn stft(signal: &crate::audio::AudioSignal, fft_size: usize, hop: usize) -> Result<Spectrogram> {
    validate_params(fft_size, hop)?;
    let n = signal.samples.len();
    if n < fft_size {
        return Err(Error::SignalTooShort);
    }
    let frames = (n - fft_size) / hop + 1;
    let bins = fft_size / 2 + 1;
    let window = hann_window(fft_size);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf = vec![Complex64::default(); fft_size];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];

    let mut data = Array2::default((bins, frames));
    for t in 0..frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(signal.samples[start + i] * window[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..bins {
            data[(f, t)] = buf[f];
        }
    }
    Ok(Spectrogram {
        data,
        fft_size,
        hop,
        sample_rate: signal.sample_rate,
    })
}

/// Inverse STFT by weighted overlap-add: each frame's inverse transform is
/// windowed again and accumulated, then every sample is divided by the
/// accumulated squared window (floored by [`SYNTHESIS_NORM_FLOOR`], which
/// only touches the outermost partial-overlap samples). Output length is
/// `(T-1)*hop + fft_size`.
pub fn istft(spec: &Spectrogram) -> Result<crate::audio::AudioSignal> {
    spec.validate()?;
    let fft_size = spec.fft_size;
    let hop = spec.hop;
    let frames = spec.frames();
    let bins = spec.bins();
    let window = hann_window(fft_size);
    let out_len = (frames - 1) * hop + fft_size;

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(fft_size);
    let mut buf = vec![Complex64::default(); fft_size];
    let mut scratch = vec![Complex64::default(); ifft.get_inplace_scratch_len()];

    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    for t in 0..frames {
        // Rebuild the conjugate-symmetric spectrum from the one-sided half.
        buf[0] = spec.data[(0, t)];
        buf[fft_size / 2] = spec.data[(fft_size / 2, t)];
        for f in 1..bins - 1 {
            buf[f] = spec.data[(f, t)];
            buf[fft_size - f] = spec.data[(f, t)].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * hop;
        for i in 0..fft_size {
            // rustfft's inverse is unnormalized; fold 1/N in here.
            let sample = buf[i].re / fft_size as f64;
            acc[start + i] += sample * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for (a, w) in acc.iter_mut().zip(&norm) {
        *a /= w.max(SYNTHESIS_NORM_FLOOR);
    }
    crate::audio::AudioSignal::new(acc, spec.sample_rate)
}

/// Element-wise modulus of a spectrogram.
pub fn magnitude(spec: &Spectrogram) -> Array2<f64> {
    spec.data.mapv(|c| c.norm())
}

/// SPL normalization: `P = 90.302 + 10*log10(max(|S|^2, floor))`.
pub fn power_spectral_density(spec: &Spectrogram) -> PsdMatrix {
    let values = spec
        .data
        .mapv(|c| SPL_REFERENCE_DB + 10.0 * c.norm_sqr().max(POWER_FLOOR).log10());
    PsdMatrix {
        values,
        reference_offset: SPL_REFERENCE_DB,
    }
}
