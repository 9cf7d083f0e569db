//! Objective and perceptual evaluation: projection-based SDR/SIR/SAR,
//! scale-invariant SDR, STOI, and length-weighted corpus aggregation.
//!
//! The decomposition here is the zeroth-order variant: pure orthogonal
//! projections onto the reference signals, no allowed-distortion
//! filtering. Absolute values therefore differ from toolbox outputs, but
//! comparisons between systems evaluated the same way are meaningful.

mod stoi;

pub use stoi::{resample_to, stoi};

use rayon::prelude::*;

use crate::audio::AudioSignal;
use crate::data::UtteranceRecord;
use crate::net::{NetworkParams, TrainingConfig};
use crate::{Error, Result};

/// All ratio metrics are clamped to this range, so perfect reconstruction
/// reports +100 dB instead of infinity.
pub const CAP_DB: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `10*log10(num/den)` clamped to [-CAP_DB, CAP_DB], with zero num and
/// den mapping to the caps.
fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -CAP_DB;
    }
    if den <= 0.0 {
        return CAP_DB;
    }
    (10.0 * (num / den).log10()).clamp(-CAP_DB, CAP_DB)
}

/// Projection decomposition of an estimate against the clean-speech and
/// noise references: the estimate splits into a target component (its
/// projection onto the speech), an interference component (the rest of
/// its projection onto the speech/noise span), and an artifact remainder.
/// Returns `(sdr, sir, sar)` in dB.
pub fn bss_decompose(
    estimate: &AudioSignal,
    ref_speech: &AudioSignal,
    ref_noise: &AudioSignal,
) -> Result<(f64, f64, f64)> {
    let n = estimate.len();
    if ref_speech.len() != n || ref_noise.len() != n {
        return Err(Error::InvalidArg("signals must share a length".into()));
    }
    let e = &estimate.samples;
    let s = &ref_speech.samples;
    let w = &ref_noise.samples;
    let s_energy = dot(s, s);
    let w_energy = dot(w, w);
    if s_energy == 0.0 || w_energy == 0.0 {
        return Err(Error::Data("zero-energy reference".into()));
    }

    // Orthonormal basis of span{speech, noise}, with one re-orthogonalization
    // pass so the orthogonality survives near-parallel references.
    let inv_s = 1.0 / s_energy.sqrt();
    let u1: Vec<f64> = s.iter().map(|v| v * inv_s).collect();
    let mut u2: Vec<f64> = {
        let c = dot(w, &u1);
        w.iter().zip(&u1).map(|(v, u)| v - c * u).collect()
    };
    let c2 = dot(&u2, &u1);
    for (v, u) in u2.iter_mut().zip(&u1) {
        *v -= c2 * u;
    }
    let u2_energy = dot(&u2, &u2);
    let degenerate = u2_energy <= 1e-24 * w_energy;
    if !degenerate {
        let inv = 1.0 / u2_energy.sqrt();
        for v in &mut u2 {
            *v *= inv;
        }
    }

    let a1 = dot(e, &u1);
    let a2 = if degenerate { 0.0 } else { dot(e, &u2) };
    let mut target_energy = 0.0;
    let mut interf_energy = 0.0;
    let mut distortion_energy = 0.0;
    let mut artifact_energy = 0.0;
    let mut proj_energy = 0.0;
    for i in 0..n {
        let s_target = a1 * u1[i];
        let proj = s_target + if degenerate { 0.0 } else { a2 * u2[i] };
        let e_interf = proj - s_target;
        let e_artif = e[i] - proj;
        target_energy += s_target * s_target;
        interf_energy += e_interf * e_interf;
        artifact_energy += e_artif * e_artif;
        proj_energy += proj * proj;
        let d = e_interf + e_artif;
        distortion_energy += d * d;
    }
    Ok((
        ratio_db(target_energy, distortion_energy),
        ratio_db(target_energy, interf_energy),
        ratio_db(proj_energy, artifact_energy),
    ))
}

/// Scale-invariant SDR: project onto the optimally scaled reference.
pub fn si_sdr(estimate: &AudioSignal, reference: &AudioSignal) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::InvalidArg("signals must share a length".into()));
    }
    let r_energy = dot(&reference.samples, &reference.samples);
    if r_energy == 0.0 {
        return Err(Error::Data("zero-energy reference".into()));
    }
    let alpha = dot(&estimate.samples, &reference.samples) / r_energy;
    let mut err = 0.0;
    for (e, r) in estimate.samples.iter().zip(&reference.samples) {
        let d = e - alpha * r;
        err += d * d;
    }
    Ok(ratio_db(alpha * alpha * r_energy, err))
}

/// Per-utterance metric row. All values are finite, capped at +-100 dB.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub utterance_id: String,
    pub length_samples: usize,
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
    pub si_sdr_db: f64,
    pub stoi: f64,
}

/// A row in manifest order: either metrics or the failure that replaced
/// them. Failures never abort a corpus run.
#[derive(Debug, Clone)]
pub enum RowOutcome {
    Ok(EvalRow),
    Failed { utterance_id: String, error: String },
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<RowOutcome>,
}

/// Length-weighted aggregate means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub total_samples: usize,
    pub sdr_db: f64,
    pub sir_db: f64,
    pub sar_db: f64,
    pub si_sdr_db: f64,
    pub stoi: f64,
}

impl EvalReport {
    pub fn ok_rows(&self) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter_map(|r| match r {
            RowOutcome::Ok(row) => Some(row),
            RowOutcome::Failed { .. } => None,
        })
    }

    pub fn failed_rows(&self) -> impl Iterator<Item = (&str, &str)> {
        self.rows.iter().filter_map(|r| match r {
            RowOutcome::Ok(_) => None,
            RowOutcome::Failed {
                utterance_id,
                error,
            } => Some((utterance_id.as_str(), error.as_str())),
        })
    }

    pub fn has_failures(&self) -> bool {
        self.failed_rows().next().is_some()
    }

    /// `sum(len * metric) / sum(len)` over the successful rows.
    pub fn aggregates(&self) -> Option<Aggregates> {
        let mut total = 0usize;
        let mut acc = [0.0f64; 5];
        for row in self.ok_rows() {
            let len = row.length_samples as f64;
            total += row.length_samples;
            for (a, v) in acc.iter_mut().zip([
                row.sdr_db,
                row.sir_db,
                row.sar_db,
                row.si_sdr_db,
                row.stoi,
            ]) {
                *a += len * v;
            }
        }
        if total == 0 {
            return None;
        }
        let t = total as f64;
        Some(Aggregates {
            total_samples: total,
            sdr_db: acc[0] / t,
            sir_db: acc[1] / t,
            sar_db: acc[2] / t,
            si_sdr_db: acc[3] / t,
            stoi: acc[4] / t,
        })
    }

    /// CSV with the fixed header, one row per utterance in manifest order
    /// (failed rows carry `nan` metrics), and a final AGGREGATE row.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("utterance_id,length_samples,sdr_db,sir_db,sar_db,si_sdr_db,stoi\n");
        for row in &self.rows {
            match row {
                RowOutcome::Ok(r) => {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        r.utterance_id,
                        r.length_samples,
                        fmt_sig6(r.sdr_db),
                        fmt_sig6(r.sir_db),
                        fmt_sig6(r.sar_db),
                        fmt_sig6(r.si_sdr_db),
                        fmt_sig6(r.stoi),
                    ));
                }
                RowOutcome::Failed { utterance_id, .. } => {
                    out.push_str(&format!("{utterance_id},0,nan,nan,nan,nan,nan\n"));
                }
            }
        }
        if let Some(a) = self.aggregates() {
            out.push_str(&format!(
                "AGGREGATE,{},{},{},{},{},{}\n",
                a.total_samples,
                fmt_sig6(a.sdr_db),
                fmt_sig6(a.sir_db),
                fmt_sig6(a.sar_db),
                fmt_sig6(a.si_sdr_db),
                fmt_sig6(a.stoi),
            ));
        }
        out
    }
}

/// Formats with exactly six significant digits in plain decimal notation.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x == 0.0 {
        return "0.00000".into();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

/// Scores one estimate against its references.
pub fn evaluate_utterance(
    utterance_id: &str,
    estimate: &AudioSignal,
    clean: &AudioSignal,
    scaled_noise: &AudioSignal,
) -> Result<EvalRow> {
    let (sdr_db, sir_db, sar_db) = bss_decompose(estimate, clean, scaled_noise)?;
    let si_sdr_db = si_sdr(estimate, clean)?;
    let stoi_score = stoi(clean, estimate)?;
    Ok(EvalRow {
        utterance_id: utterance_id.to_string(),
        length_samples: clean.len(),
        sdr_db,
        sir_db,
        sar_db,
        si_sdr_db,
        stoi: stoi_score,
    })
}

fn evaluate_one(
    params: &NetworkParams,
    config: &TrainingConfig,
    record: &UtteranceRecord,
) -> Result<EvalRow> {
    let clean = crate::audio::read_wav(&record.clean_path)?;
    let noise = crate::audio::read_wav(&record.noise_path)?;
    let (mixture, scaled_noise) =
        crate::data::mix_at_snr(&clean, &noise, crate::data::MIX_SNR_DB, record.seed)?;
    let estimate = crate::net::denoise_signal(params, config.context_frames, &mixture)?;
    evaluate_utterance(&record.id(), &estimate, &clean, &scaled_noise)
}

/// Denoises and scores every record, fanning utterances across `jobs`
/// workers. Rows come back in record order regardless of completion
/// order; per-utterance failures become flagged rows.
pub fn evaluate_corpus(
    params: &NetworkParams,
    config: &TrainingConfig,
    records: &[UtteranceRecord],
    jobs: usize,
) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Data(format!("worker pool: {e}")))?;
    let rows: Vec<RowOutcome> = pool.install(|| {
        records
            .par_iter()
            .map(|record| match evaluate_one(params, config, record) {
                Ok(row) => RowOutcome::Ok(row),
                Err(e) => RowOutcome::Failed {
                    utterance_id: record.id(),
                    error: e.to_string(),
                },
            })
            .collect()
    });
    Ok(EvalReport { rows })
}
