//! Corpus ingestion and feature assembly: manifests, clean/noise mixing
//! at a target SNR, IRM and perceptual-weight target generation, context
//! windows, shuffled mini-batching, and the on-disk feature cache.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::AudioSignal;
use crate::dsp;
use crate::net::IrmMask;
use crate::psycho;
use crate::{Error, Result, FFT_SIZE, HOP, SAMPLE_RATE};

/// Target mixture SNR used by the preparation pipeline, dB.
pub const MIX_SNR_DB: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split '{other}'"))),
        }
    }
}

/// One corpus entry: a clean/noise pairing with its own mixing seed.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub split: Split,
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub seed: u64,
}

impl UtteranceRecord {
    /// Stable identifier used in reports and cache file names.
    pub fn id(&self) -> String {
        let stem = |p: &Path| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "unknown".into())
        };
        format!("{}__{}", stem(&self.clean_path), stem(&self.noise_path))
    }
}

/// Line-oriented manifest: `split<TAB>clean_path<TAB>noise_path<TAB>seed`.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Manifest(format!(
                    "{}:{}: expected 4 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )));
            }
            let resolve = |s: &str| {
                let p = PathBuf::from(s);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            records.push(UtteranceRecord {
                split: Split::parse(fields[0])?,
                clean_path: resolve(fields[1]),
                noise_path: resolve(fields[2]),
                seed: fields[3].parse().map_err(|_| {
                    Error::Manifest(format!(
                        "{}:{}: bad seed '{}'",
                        path.display(),
                        lineno + 1,
                        fields[3]
                    ))
                })?,
            });
        }
        if records.is_empty() {
            return Err(Error::Manifest(format!("{}: no records", path.display())));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.split.label(),
                r.clean_path.display(),
                r.noise_path.display(),
                r.seed
            ));
        }
        fs::write(path, out).map_err(Error::io(path))
    }

    pub fn split(&self, split: Split) -> Vec<&UtteranceRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Noise files used for testing must never appear in training rows.
    pub fn check_noise_disjoint(&self) -> Result<()> {
        let pool = |s: Split| -> BTreeSet<PathBuf> {
            self.split(s).iter().map(|r| r.noise_path.clone()).collect()
        };
        let train = pool(Split::Train);
        let test = pool(Split::Test);
        let shared: Vec<_> = train.intersection(&test).collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(format!(
                "noise files shared between train and test: {}",
                shared
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

/// Scales and length-fits `noise` against `clean`, then mixes so that
/// `10*log10(P_clean / P_noise) == snr_db`.
///
/// Shorter noise wraps around; longer noise is cropped starting at a
/// seeded random offset. Returns the mixture and the scaled noise that
/// actually went into it.
pub fn mix_at_snr(
    clean: &AudioSignal,
    noise: &AudioSignal,
    snr_db: f64,
    seed: u64,
) -> Result<(AudioSignal, AudioSignal)> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Data(format!(
            "sample rate mismatch: clean {} vs noise {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if clean.is_empty() || clean.energy() == 0.0 {
        return Err(Error::Data("silent clean signal: SNR undefined".into()));
    }
    if noise.is_empty() || noise.energy() == 0.0 {
        return Err(Error::Data("silent noise signal: SNR undefined".into()));
    }
    let n = clean.len();
    let fitted: Vec<f64> = if noise.len() >= n {
        let excess = noise.len() - n;
        let offset = if excess == 0 {
            0
        } else {
            ChaCha8Rng::seed_from_u64(seed).gen_range(0..=excess)
        };
        noise.samples[offset..offset + n].to_vec()
    } else {
        (0..n).map(|i| noise.samples[i % noise.len()]).collect()
    };
    let noise_energy: f64 = fitted.iter().map(|s| s * s).sum();
    if noise_energy == 0.0 {
        return Err(Error::Data("silent noise segment: SNR undefined".into()));
    }
    let scale = (clean.energy() / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = fitted.iter().map(|s| s * scale).collect();
    let mixture: Vec<f64> = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(c, w)| c + w)
        .collect();
    Ok((
        AudioSignal::new(mixture, clean.sample_rate)?,
        AudioSignal::new(scaled, clean.sample_rate)?,
    ))
}

/// Energy-based ideal ratio mask `|S|^2 / (|S|^2 + |N|^2)`, with the
/// denominator floored so all-zero bins map to 0.
pub fn compute_irm(clean_spec: &dsp::Spectrogram, noise_spec: &dsp::Spectrogram) -> Result<IrmMask> {
    if clean_spec.data.dim() != noise_spec.data.dim() {
        return Err(Error::Shape(format!(
            "clean {:?} vs noise {:?}",
            clean_spec.data.dim(),
            noise_spec.data.dim()
        )));
    }
    let mut values = Array2::zeros(clean_spec.data.dim());
    for (m, (s, w)) in values
        .iter_mut()
        .zip(clean_spec.data.iter().zip(noise_spec.data.iter()))
    {
        let sp = s.norm_sqr();
        let np = w.norm_sqr();
        *m = sp / (sp + np).max(dsp::POWER_FLOOR);
    }
    Ok(IrmMask { values })
}

/// Everything the trainer needs for one utterance, aligned F x T.
#[derive(Debug, Clone)]
pub struct UtteranceFeatures {
    /// Mixture magnitude spectrogram |X|.
    pub magnitude: Array2<f64>,
    /// IRM target M.
    pub irm: Array2<f64>,
    /// Perceptual weights H, computed from the clean speech only.
    pub weights: Array2<f64>,
    pub achieved_snr_db: f64,
}

impl UtteranceFeatures {
    pub fn frames(&self) -> usize {
        self.magnitude.ncols()
    }
}

/// Runs the whole per-utterance preprocessing chain: load, mix at 0 dB,
/// transform, mask and weight targets.
pub fn compute_features(record: &UtteranceRecord) -> Result<UtteranceFeatures> {
    let clean = crate::audio::read_wav(&record.clean_path)?;
    let noise = crate::audio::read_wav(&record.noise_path)?;
    if clean.sample_rate != SAMPLE_RATE {
        return Err(Error::Data(format!(
            "{}: sample rate {} (pipeline is fixed at {})",
            record.clean_path.display(),
            clean.sample_rate,
            SAMPLE_RATE
        )));
    }
    let (mixture, scaled_noise) = mix_at_snr(&clean, &noise, MIX_SNR_DB, record.seed)?;
    let achieved_snr_db = 10.0 * (clean.energy() / scaled_noise.energy()).log10();

    let clean_spec = dsp::stft(&clean, FFT_SIZE, HOP)?;
    let noise_spec = dsp::stft(&scaled_noise, FFT_SIZE, HOP)?;
    let mix_spec = dsp::stft(&mixture, FFT_SIZE, HOP)?;

    let irm = compute_irm(&clean_spec, &noise_spec)?;
    let scale = psycho::BarkScale::new(FFT_SIZE, SAMPLE_RATE);
    let psd = dsp::power_spectral_density(&clean_spec);
    let g = psycho::global_threshold(&psd, &scale);
    let weights = psycho::perceptual_weights(&psd, &g)?;

    Ok(UtteranceFeatures {
        magnitude: dsp::magnitude(&mix_spec),
        irm: irm.values,
        weights: weights.values,
        achieved_snr_db,
    })
}

/// One training example: an input feature column (one or three stacked
/// frames), its mask target and weight column.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: Array1<f64>,
    pub target: Array1<f64>,
    pub weight: Array1<f64>,
}

/// Stacks context windows column-wise: for context 3, column `t` becomes
/// the frames `t-1`, `t`, `t+1` concatenated, with edge frames replicated.
/// Context 1 is a plain copy.
pub fn stack_context(magnitude: &Array2<f64>, context: usize) -> Result<Array2<f64>> {
    if context != 1 && context != 3 {
        return Err(Error::InvalidArg(format!("context must be 1 or 3, got {context}")));
    }
    if context == 1 {
        return Ok(magnitude.clone());
    }
    let (bins, frames) = magnitude.dim();
    let mut out = Array2::zeros((3 * bins, frames));
    for t in 0..frames {
        let left = t.saturating_sub(1);
        let right = (t + 1).min(frames - 1);
        out.slice_mut(ndarray::s![0..bins, t]).assign(&magnitude.column(left));
        out.slice_mut(ndarray::s![bins..2 * bins, t]).assign(&magnitude.column(t));
        out.slice_mut(ndarray::s![2 * bins.., t]).assign(&magnitude.column(right));
    }
    Ok(out)
}

/// Expands an utterance into per-frame examples. `context` is 1 (single
/// frame) or 3 (previous/current/next stacked, edge frames replicated).
/// The target and weight always belong to the center frame.
pub fn build_examples(feat: &UtteranceFeatures, context: usize) -> Result<Vec<TrainingExample>> {
    let stacked = stack_context(&feat.magnitude, context)?;
    let frames = feat.frames();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        out.push(TrainingExample {
            input: stacked.column(t).to_owned(),
            target: feat.irm.column(t).to_owned(),
            weight: feat.weights.column(t).to_owned(),
        });
    }
    Ok(out)
}

/// Column-major dataset: one example per column.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub weights: Array2<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_examples(examples: &[TrainingExample]) -> Self {
        let n = examples.len();
        let in_dim = examples.first().map_or(0, |e| e.input.len());
        let out_dim = examples.first().map_or(0, |e| e.target.len());
        let mut inputs = Array2::zeros((in_dim, n));
        let mut targets = Array2::zeros((out_dim, n));
        let mut weights = Array2::zeros((out_dim, n));
        for (j, e) in examples.iter().enumerate() {
            inputs.column_mut(j).assign(&e.input);
            targets.column_mut(j).assign(&e.target);
            weights.column_mut(j).assign(&e.weight);
        }
        Self {
            inputs,
            targets,
            weights,
        }
    }

    /// Gathers the given columns into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let pick = |m: &Array2<f64>| {
            let mut out = Array2::zeros((m.nrows(), idx.len()));
            for (j, &i) in idx.iter().enumerate() {
                out.column_mut(j).assign(&m.column(i));
            }
            out
        };
        (pick(&self.inputs), pick(&self.targets), pick(&self.weights))
    }
}

/// Assembles the datasets for a list of utterances.
pub fn assemble_dataset(features: &[UtteranceFeatures], context: usize) -> Result<Dataset> {
    let mut all = Vec::new();
    for feat in features {
        all.extend(build_examples(feat, context)?);
    }
    Ok(Dataset::from_examples(&all))
}

/// Epoch-seeded uniform shuffle of `0..n`, chunked into batches. The final
/// partial batch is kept. The order is a pure function of `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

// ---------------------------------------------------------------------
// Feature cache: f32 matrices with a shape header, keyed by a content
// hash over the input WAV bytes and the mixing/transform parameters.
// ---------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"PDNZFT01";

/// Content hash tying a cache entry to its exact inputs.
pub fn content_hash(record: &UtteranceRecord) -> Result<String> {
    let mut hasher = Sha256::new();
    for path in [&record.clean_path, &record.noise_path] {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    hasher.update(record.seed.to_le_bytes());
    hasher.update((FFT_SIZE as u64).to_le_bytes());
    hasher.update((HOP as u64).to_le_bytes());
    hasher.update(MIX_SNR_DB.to_le_bytes());
    let digest = hasher.finalize();
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Cache path for a record inside `dir`.
pub fn cache_path(dir: impl AsRef<Path>, record: &UtteranceRecord) -> Result<PathBuf> {
    Ok(dir
        .as_ref()
        .join(format!("{}.{}.feat", record.id(), content_hash(record)?)))
}

fn write_f32_matrix(out: &mut impl Write, m: &Array2<f64>) -> std::io::Result<()> {
    for v in m.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32_matrix(input: &mut impl Read, rows: usize, cols: usize) -> std::io::Result<Array2<f64>> {
    let mut buf = vec![0u8; rows * cols * 4];
    input.read_exact(&mut buf)?;
    let values: Vec<f64> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("shape from header"))
}

/// Writes a feature cache entry; returns its path.
pub fn save_features(
    dir: impl AsRef<Path>,
    record: &UtteranceRecord,
    feat: &UtteranceFeatures,
) -> Result<PathBuf> {
    let path = cache_path(&dir, record)?;
    let (bins, frames) = feat.magnitude.dim();
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(bins as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&feat.achieved_snr_db.to_le_bytes());
    write_f32_matrix(&mut out, &feat.magnitude).expect("in-memory write");
    write_f32_matrix(&mut out, &feat.irm).expect("in-memory write");
    write_f32_matrix(&mut out, &feat.weights).expect("in-memory write");
    fs::write(&path, out).map_err(Error::io(&path))?;
    Ok(path)
}

/// Loads the cache entry for a record, verifying the content hash via the
/// file name. A missing entry means `prepare` has not been run (or inputs
/// changed since).
pub fn load_features(dir: impl AsRef<Path>, record: &UtteranceRecord) -> Result<UtteranceFeatures> {
    let path = cache_path(&dir, record)?;
    let bytes = fs::read(&path).map_err(|_| {
        Error::Cache(format!(
            "missing cache entry {} (run `prepare` first)",
            path.display()
        ))
    })?;
    let mut cur = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::Cache(format!("{}: truncated", path.display())))?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Cache(format!("{}: bad magic", path.display())));
    }
    let mut word = [0u8; 4];
    cur.read_exact(&mut word).map_err(|_| Error::Cache("truncated header".into()))?;
    let bins = u32::from_le_bytes(word) as usize;
    cur.read_exact(&mut word).map_err(|_| Error::Cache("truncated header".into()))?;
    let frames = u32::from_le_bytes(word) as usize;
    // Header sizes must agree with the actual payload before any
    // allocation happens (checked math: the header is untrusted input).
    let expected = (bins as u64)
        .checked_mul(frames as u64)
        .and_then(|n| n.checked_mul(12))
        .and_then(|n| n.checked_add(24));
    if bins == 0 || frames == 0 || expected != Some(bytes.len() as u64) {
        return Err(Error::Cache(format!(
            "{}: header ({bins} x {frames}) disagrees with file size {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut snr = [0u8; 8];
    cur.read_exact(&mut snr).map_err(|_| Error::Cache("truncated header".into()))?;
    let achieved_snr_db = f64::from_le_bytes(snr);
    let mut matrix = || -> Result<Array2<f64>> {
        read_f32_matrix(&mut cur, bins, frames)
            .map_err(|_| Error::Cache(format!("{}: truncated body", path.display())))
    };
    let magnitude = matrix()?;
    let irm = matrix()?;
    let weights = matrix()?;
    Ok(UtteranceFeatures {
        magnitude,
        irm,
        weights,
        achieved_snr_db,
    })
}
