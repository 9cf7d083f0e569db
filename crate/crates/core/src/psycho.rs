//! Tonal masking model: absolute threshold of hearing, Bark mapping,
//! tonal-masker detection and decimation, spreading-function masking
//! curves, the per-frame global masking threshold, and the perceptual
//! weight matrix derived from it.
//!
//! Only tonal maskers are modeled; noise (non-tonal) maskers are out of
//! scope. All computation is per frame: a frame's threshold depends only
//! on that frame's PSD column, so frames can be processed in parallel.

use ndarray::{Array1, Array2};

use crate::dsp::PsdMatrix;
use crate::{Error, Result};

/// Maskers closer than this on the Bark axis are decimated to the
/// strongest one, preventing double-counting of wide spectral peaks.
pub const DECIMATION_BARK: f64 = 0.5;
/// ATH display/export cap in dB; threshold computation uses uncapped values.
pub const ATH_EXPORT_CAP_DB: f64 = 96.0;

/// Absolute threshold of hearing in dB SPL for a pure tone in quiet.
///
/// Frequencies below 20 Hz are clamped to the 20 Hz value.
pub fn absolute_threshold(freq_hz: f64) -> f64 {
    let khz = freq_hz.max(20.0) / 1000.0;
    3.64 * khz.powf(-0.8) - 6.5 * (-0.6 * (khz - 3.3).powi(2)).exp() + 1e-3 * khz.powi(4)
}

/// Critical-band rate: `z = 13*atan(0.00076 f) + 3.5*atan((f/7500)^2)`.
pub fn hz_to_bark(freq_hz: f64) -> f64 {
    13.0 * (0.00076 * freq_hz).atan() + 3.5 * (freq_hz / 7500.0).powi(2).atan()
}

/// Per-bin frequency and Bark positions for a fixed STFT grid.
#[derive(Debug, Clone)]
pub struct BarkScale {
    pub bin_to_bark: Vec<f64>,
    pub bin_to_hz: Vec<f64>,
}

impl BarkScale {
    pub fn new(fft_size: usize, sample_rate: u32) -> Self {
        let bins = fft_size / 2 + 1;
        let bin_to_hz: Vec<f64> = (0..bins)
            .map(|i| i as f64 * sample_rate as f64 / fft_size as f64)
            .collect();
        let bin_to_bark = bin_to_hz.iter().map(|&f| hz_to_bark(f)).collect();
        Self {
            bin_to_bark,
            bin_to_hz,
        }
    }

    pub fn bins(&self) -> usize {
        self.bin_to_hz.len()
    }

    /// Uncapped ATH per bin (bin 0 clamps to the 20 Hz value).
    pub fn ath_db(&self) -> Vec<f64> {
        self.bin_to_hz
            .iter()
            .map(|&f| absolute_threshold(f))
            .collect()
    }
}

/// A locally dominant spectral peak that masks its neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TonalMasker {
    pub bin: usize,
    /// SPL aggregated over bin-1..=bin+1, dB.
    pub spl: f64,
    pub bark: f64,
}

/// Prominence-test neighborhoods for the 16 kHz / 1024-point grid
/// (15.625 Hz per bin), keeping the Hz bandwidth of the classic
/// 44.1 kHz / 512-point table roughly intact.
fn neighborhood(bin: usize) -> &'static [usize] {
    match bin {
        3..=130 => &[2],
        131..=324 => &[2, 3],
        325..=505 => &[2, 3, 4, 5, 6],
        _ => &[],
    }
}

/// Finds the surviving tonal maskers in one PSD frame.
///
/// A bin is tonal when it is a local maximum (strictly above its left
/// neighbor, at or above its right) and sticks out by more than 7 dB over
/// its prominence neighborhood. Masker SPL pools the power of the peak and
/// its two direct neighbors. Sub-threshold maskers are dropped, and within
/// any 0.5-Bark window only the strongest survives.
pub fn find_tonal_maskers(psd_frame: &[f64], scale: &BarkScale) -> Vec<TonalMasker> {
    let n = psd_frame.len().min(scale.bins());
    let mut maskers = Vec::new();
    for k in 3..n.saturating_sub(6) {
        let p = psd_frame[k];
        if !(p > psd_frame[k - 1] && p >= psd_frame[k + 1]) {
            continue;
        }
        let deltas = neighborhood(k);
        if deltas.is_empty() {
            continue;
        }
        let prominent = deltas.iter().all(|&d| {
            k >= d && k + d < n && p > psd_frame[k - d] + 7.0 && p > psd_frame[k + d] + 7.0
        });
        if !prominent {
            continue;
        }
        let power: f64 = (k - 1..=k + 1)
            .map(|i| 10f64.powf(0.1 * psd_frame[i]))
            .sum();
        let spl = 10.0 * power.log10();
        if spl < absolute_threshold(scale.bin_to_hz[k]) {
            continue;
        }
        maskers.push(TonalMasker {
            bin: k,
            spl,
            bark: scale.bin_to_bark[k],
        });
    }
    decimate(maskers)
}

/// Keeps only the strongest masker inside each 0.5-Bark window.
fn decimate(mut maskers: Vec<TonalMasker>) -> Vec<TonalMasker> {
    // Input arrives sorted by bin, hence by bark; adjacent pairs suffice.
    loop {
        let Some(i) = (1..maskers.len())
            .find(|&i| maskers[i].bark - maskers[i - 1].bark < DECIMATION_BARK)
        else {
            return maskers;
        };
        if maskers[i].spl > maskers[i - 1].spl {
            maskers.remove(i - 1);
        } else {
            maskers.remove(i);
        }
    }
}

/// Evaluates one masker's masking curve across all bins, in dB.
///
/// Support is the Bark distance range [-3, 8); outside it the curve
/// contributes nothing (negative infinity here, zero power downstream).
pub fn masking_curve(masker: &TonalMasker, scale: &BarkScale) -> Vec<f64> {
    let spl = masker.spl;
    scale
        .bin_to_bark
        .iter()
        .map(|&z| {
            let dz = z - masker.bark;
            if !(-3.0..8.0).contains(&dz) {
                return f64::NEG_INFINITY;
            }
            let sf = if dz < -1.0 {
                17.0 * dz - 0.4 * spl + 11.0
            } else if dz < 0.0 {
                (0.4 * spl + 6.0) * dz
            } else if dz < 1.0 {
                -17.0 * dz
            } else {
                (0.15 * spl - 17.0) * dz - 0.15 * spl
            };
            spl - 0.275 * masker.bark + sf - 6.025
        })
        .collect()
}

/// Per-bin global masking threshold, dB SPL, one column per frame.
#[derive(Debug, Clone)]
pub struct GlobalThreshold {
    pub values: Array2<f64>,
}

/// Combines a frame's masking curves with the ATH in the power domain.
///
/// With no maskers the threshold IS the ATH, returned exactly (no
/// pow/log round trip).
pub fn threshold_from_maskers(
    maskers: &[TonalMasker],
    ath_db: &[f64],
    scale: &BarkScale,
) -> Array1<f64> {
    if maskers.is_empty() {
        return Array1::from_vec(ath_db.to_vec());
    }
    let mut power: Vec<f64> = ath_db.iter().map(|&a| 10f64.powf(0.1 * a)).collect();
    for masker in maskers {
        for (p, t) in power.iter_mut().zip(masking_curve(masker, scale)) {
            *p += 10f64.powf(0.1 * t);
        }
    }
    // The pow/log round trip can land an ulp below the ATH at bins no
    // curve reaches; the threshold never sits below the ATH by contract.
    Array1::from_iter(
        power
            .into_iter()
            .zip(ath_db)
            .map(|(p, &a)| (10.0 * p.log10()).max(a)),
    )
}

/// Global masking threshold of every frame in a PSD matrix.
pub fn global_threshold(psd: &PsdMatrix, scale: &BarkScale) -> GlobalThreshold {
    let ath = scale.ath_db();
    let (bins, frames) = psd.values.dim();
    let mut values = Array2::zeros((bins, frames));
    for t in 0..frames {
        let frame: Vec<f64> = psd.values.column(t).to_vec();
        let maskers = find_tonal_maskers(&frame, scale);
        values
            .column_mut(t)
            .assign(&threshold_from_maskers(&maskers, &ath, scale));
    }
    GlobalThreshold { values }
}

/// Unitless nonnegative weights, one per time-frequency bin.
#[derive(Debug, Clone)]
pub struct PerceptualWeights {
    pub values: Array2<f64>,
}

/// Weight matrix `H = log10(10^(0.1(P - G)) + 1)`.
///
/// Bins whose power sits far below the masking threshold get near-zero
/// weight; audible bins grow roughly linearly with the dB excess. Where
/// `P == G` the weight is exactly `log10(2)`.
pub fn perceptual_weights(psd: &PsdMatrix, g: &GlobalThreshold) -> Result<PerceptualWeights> {
    if psd.values.dim() != g.values.dim() {
        return Err(Error::Shape(format!(
            "psd {:?} vs threshold {:?}",
            psd.values.dim(),
            g.values.dim()
        )));
    }
    let mut values = Array2::zeros(psd.values.dim());
    for (h, (&p, &gv)) in values.iter_mut().zip(psd.values.iter().zip(g.values.iter())) {
        *h = (10f64.powf(0.1 * (p - gv)) + 1.0).log10();
    }
    Ok(PerceptualWeights { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn scale_16k() -> BarkScale {
        BarkScale::new(1024, 16_000)
    }

    #[test]
    fn ath_reference_points() {
        assert_abs_diff_eq!(absolute_threshold(1000.0), 3.369, epsilon = 0.01);
        // Direct evaluation at the exponential's peak:
        // 3.64*3.3^-0.8 - 6.5 + 1e-3*3.3^4 = -4.981.
        assert_abs_diff_eq!(absolute_threshold(3300.0), -4.981, epsilon = 0.05);
        assert_eq!(absolute_threshold(19.0), absolute_threshold(20.0));
        assert_eq!(absolute_threshold(5.0), absolute_threshold(20.0));
    }

    #[test]
    fn bark_reference_points() {
        assert_eq!(hz_to_bark(0.0), 0.0);
        assert_abs_diff_eq!(hz_to_bark(100.0), 0.987, epsilon = 0.005);
        assert_abs_diff_eq!(hz_to_bark(1000.0), 8.51, epsilon = 0.01);
    }

    #[test]
    fn bark_scale_strictly_increasing() {
        let scale = scale_16k();
        assert_eq!(scale.bins(), 513);
        for i in 1..scale.bins() {
            assert!(scale.bin_to_bark[i] > scale.bin_to_bark[i - 1]);
            assert!(scale.bin_to_hz[i] > scale.bin_to_hz[i - 1]);
        }
    }

    #[test]
    fn flat_frame_has_no_maskers() {
        let scale = scale_16k();
        let frame = vec![40.0; 513];
        assert!(find_tonal_maskers(&frame, &scale).is_empty());
    }

    #[test]
    fn three_equal_bins_pool_to_64_77_db() {
        let scale = scale_16k();
        let mut frame = vec![-30.0; 513];
        let delta = 1e-9;
        frame[99] = 60.0 - delta;
        frame[100] = 60.0;
        frame[101] = 60.0 - delta;
        let maskers = find_tonal_maskers(&frame, &scale);
        assert_eq!(maskers.len(), 1);
        assert_eq!(maskers[0].bin, 100);
        // 10*log10(3 * 10^6) as delta -> 0.
        assert_abs_diff_eq!(maskers[0].spl, 64.7712, epsilon = 1e-3);
    }

    #[test]
    fn two_tones_two_bark_apart_both_survive() {
        let scale = scale_16k();
        let mut frame = vec![0.0; 513];
        // Bins 40 (625 Hz, ~5.79 Bark) and 58 (906 Hz, ~7.90 Bark).
        frame[40] = 40.0;
        frame[58] = 40.0;
        let maskers = find_tonal_maskers(&frame, &scale);
        assert_eq!(maskers.len(), 2);
        assert_eq!(maskers[0].bin, 40);
        assert_eq!(maskers[1].bin, 58);
        assert!(maskers[1].bark - maskers[0].bark > 2.0);
    }

    #[test]
    fn close_peaks_decimate_to_strongest() {
        let scale = scale_16k();
        let mut frame = vec![0.0; 513];
        // Bins 40 and 43 are ~0.3 Bark apart at this grid position.
        frame[40] = 40.0;
        frame[43] = 46.0;
        assert!(scale.bin_to_bark[43] - scale.bin_to_bark[40] < DECIMATION_BARK);
        let maskers = find_tonal_maskers(&frame, &scale);
        assert_eq!(maskers.len(), 1);
        assert_eq!(maskers[0].bin, 43);
    }

    #[test]
    fn sub_threshold_maskers_are_dropped() {
        let scale = scale_16k();
        let mut frame = vec![-60.0; 513];
        // Pooled SPL ~ -40+4.77 dB, far below ATH (~3.4 dB at 1 kHz).
        frame[64] = -40.0;
        assert!(find_tonal_maskers(&frame, &scale).is_empty());
    }

    #[test]
    fn spreading_function_branches() {
        let scale = scale_16k();
        let masker = TonalMasker {
            bin: 64,
            spl: 70.0,
            bark: scale.bin_to_bark[64],
        };
        let curve = masking_curve(&masker, &scale);
        // At the apex the spreading term vanishes.
        let apex = masker.spl - 0.275 * masker.bark - 6.025;
        assert_abs_diff_eq!(curve[64], apex, epsilon = 1e-6);
        // Slope-4 branch at dz = 2: SF = (0.15*70 - 17)*2 - 0.15*70 = -23.5.
        let target = masker.bark + 2.0;
        let bin_dz2 = scale
            .bin_to_bark
            .iter()
            .position(|&z| z >= target)
            .unwrap();
        let dz = scale.bin_to_bark[bin_dz2] - masker.bark;
        let expected = masker.spl - 0.275 * masker.bark + (0.15 * 70.0 - 17.0) * dz - 0.15 * 70.0
            - 6.025;
        assert_abs_diff_eq!(curve[bin_dz2], expected, epsilon = 1e-9);
        // Outside [-3, 8) there is no contribution.
        let far = scale
            .bin_to_bark
            .iter()
            .position(|&z| z - masker.bark >= 8.0)
            .unwrap();
        assert_eq!(curve[far], f64::NEG_INFINITY);
        assert_eq!(curve[0], f64::NEG_INFINITY); // dz < -3 down at bin 0
    }

    #[test]
    fn silent_frame_threshold_is_exactly_ath() {
        let scale = scale_16k();
        let ath = scale.ath_db();
        let psd = PsdMatrix {
            values: Array2::from_elem((513, 2), -29.698),
            reference_offset: crate::dsp::SPL_REFERENCE_DB,
        };
        let g = global_threshold(&psd, &scale);
        for t in 0..2 {
            for (f, &a) in ath.iter().enumerate() {
                assert_eq!(g.values[(f, t)], a);
            }
        }
    }

    #[test]
    fn one_masker_lifts_threshold_above_ath_at_its_bin() {
        let scale = scale_16k();
        let ath = scale.ath_db();
        let mut frame = vec![-29.698; 513];
        frame[64] = 70.0;
        let mut values = Array2::zeros((513, 1));
        values.column_mut(0).assign(&Array1::from_vec(frame));
        let psd = PsdMatrix {
            values,
            reference_offset: crate::dsp::SPL_REFERENCE_DB,
        };
        let g = global_threshold(&psd, &scale);
        assert!(g.values[(64, 0)] > ath[64]);
        // And never below ATH anywhere.
        for (f, &a) in ath.iter().enumerate() {
            assert!(g.values[(f, 0)] >= a);
        }
    }

    #[test]
    fn extra_masker_never_lowers_threshold() {
        let scale = scale_16k();
        let ath = scale.ath_db();
        let a = TonalMasker {
            bin: 64,
            spl: 70.0,
            bark: scale.bin_to_bark[64],
        };
        let m = TonalMasker {
            bin: 200,
            spl: 55.0,
            bark: scale.bin_to_bark[200],
        };
        let base = threshold_from_maskers(&[a], &ath, &scale);
        let more = threshold_from_maskers(&[a, m], &ath, &scale);
        for f in 0..513 {
            assert!(more[f] >= base[f]);
        }
    }

    #[test]
    fn weight_reference_points() {
        let psd = PsdMatrix {
            values: Array2::from_elem((1, 3), 50.0),
            reference_offset: crate::dsp::SPL_REFERENCE_DB,
        };
        let mut gv = Array2::zeros((1, 3));
        gv[(0, 0)] = 50.0; // P = G
        gv[(0, 1)] = 20.0; // P - G = 30
        gv[(0, 2)] = 110.0; // P - G = -60
        let h = perceptual_weights(&psd, &GlobalThreshold { values: gv }).unwrap();
        assert_abs_diff_eq!(h.values[(0, 0)], 2f64.log10(), epsilon = 1e-15);
        assert_abs_diff_eq!(h.values[(0, 1)], 1001f64.log10(), epsilon = 1e-12);
        assert_abs_diff_eq!(h.values[(0, 2)], 4.3429e-7, epsilon = 1e-10);
    }

    #[test]
    fn weight_shape_mismatch_errors() {
        let psd = PsdMatrix {
            values: Array2::zeros((2, 2)),
            reference_offset: crate::dsp::SPL_REFERENCE_DB,
        };
        let g = GlobalThreshold {
            values: Array2::zeros((2, 3)),
        };
        assert!(perceptual_weights(&psd, &g).is_err());
    }

    #[test]
    fn weights_follow_spectral_density_on_voiced_frames() {
        // On voiced frames the average weight over the loudest-decile bins
        // must exceed the average over the quietest decile.
        let sig = crate::synth::speech_like(9, 1.0, 16_000);
        let spec = crate::dsp::stft(&sig, 1024, 256).unwrap();
        let psd = crate::dsp::power_spectral_density(&spec);
        let scale = scale_16k();
        let g = global_threshold(&psd, &scale);
        let h = perceptual_weights(&psd, &g).unwrap();
        let mut checked = 0;
        for t in 0..psd.values.ncols() {
            let frame: Vec<f64> = psd.values.column(t).to_vec();
            let mean = frame.iter().sum::<f64>() / frame.len() as f64;
            if mean < 0.0 {
                continue; // skip near-silent frames
            }
            let mut order: Vec<usize> = (0..frame.len()).collect();
            order.sort_by(|&a, &b| frame[a].total_cmp(&frame[b]));
            let decile = frame.len() / 10;
            let low: f64 = order[..decile].iter().map(|&f| h.values[(f, t)]).sum();
            let high: f64 = order[frame.len() - decile..]
                .iter()
                .map(|&f| h.values[(f, t)])
                .sum();
            assert!(high > low, "frame {t}");
            checked += 1;
        }
        assert!(checked > 10, "fixture produced too few voiced frames");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weights_positive_and_increasing_in_excess(d1 in -80.0f64..80.0, d2 in -80.0f64..80.0) {
            let h = |d: f64| (10f64.powf(0.1 * d) + 1.0).log10();
            prop_assert!(h(d1) > 0.0);
            if d1 < d2 {
                prop_assert!(h(d1) < h(d2));
            }
        }

        #[test]
        fn no_two_survivors_within_half_bark(peaks in proptest::collection::vec((10usize..500, 20.0f64..80.0), 1..12)) {
            let scale = scale_16k();
            let mut frame = vec![-10.0f64; 513];
            for &(bin, level) in &peaks {
                frame[bin] = frame[bin].max(level);
            }
            let maskers = find_tonal_maskers(&frame, &scale);
            for pair in maskers.windows(2) {
                prop_assert!(pair[1].bark - pair[0].bark >= DECIMATION_BARK);
            }
            for m in &maskers {
                prop_assert!(m.spl >= absolute_threshold(scale.bin_to_hz[m.bin]));
                prop_assert!((3..=506).contains(&m.bin));
            }
        }
    }
}
