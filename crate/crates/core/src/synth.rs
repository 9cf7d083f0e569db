//! Seeded generators for desk-scale test audio: speech-like harmonic
//! signals with formant envelopes, plus white, pink, and babble-like
//! noise. Everything is deterministic in the seed so fixtures and
//! acceptance runs are reproducible.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioSignal;
use crate::data::{Manifest, Split, UtteranceRecord};
use crate::Result;

/// Speech-like signal: a harmonic series under a three-formant spectral
/// envelope, with a slowly drifting fundamental and a syllabic gate that
/// leaves genuine pauses.
pub fn speech_like(seed: u64, duration_s: f64, sample_rate: u32) -> AudioSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let n = (duration_s * sample_rate as f64).round() as usize;
    let dt = 1.0 / sample_rate as f64;

    let f0_base = rng.gen_range(110.0..220.0);
    let f0_dev = rng.gen_range(8.0..30.0);
    let f0_rate = rng.gen_range(0.25..0.6);
    let f0_phase = rng.gen_range(0.0..2.0 * PI);

    // Formant centers and bandwidths, roughly vowel-like.
    let formants = [
        (rng.gen_range(600.0..850.0), 90.0, 1.0),
        (rng.gen_range(1000.0..1400.0), 130.0, 0.6),
        (rng.gen_range(2300.0..2700.0), 180.0, 0.3),
    ];
    let envelope = |f: f64| -> f64 {
        formants
            .iter()
            .map(|&(fc, bw, g): &(f64, f64, f64)| g / (1.0 + ((f - fc) / bw).powi(2)))
            .sum::<f64>()
            + 0.02
    };

    // Syllabic gate: raised sine pushed past saturation so troughs are
    // true silence.
    let syl_rate = rng.gen_range(2.2..3.6);
    let syl_phase = rng.gen_range(0.0..2.0 * PI);

    let harmonics = (4000.0 / f0_base) as usize;
    let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let f0 = f0_base + f0_dev * (2.0 * PI * f0_rate * t + f0_phase).sin();
        let gate = (1.6 * (2.0 * PI * syl_rate * t + syl_phase).sin() + 0.5).clamp(0.0, 1.0);
        let mut s = 0.0;
        for (k, phase) in phases.iter_mut().enumerate() {
            let fk = (k + 1) as f64 * f0;
            if fk < sample_rate as f64 / 2.0 - 200.0 {
                s += envelope(fk) * phase.sin();
            }
            *phase += 2.0 * PI * fk * dt;
        }
        samples.push(s * gate * gate);
    }
    let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs())).max(1e-12);
    for s in &mut samples {
        *s *= 0.4 / peak;
    }
    AudioSignal::new(samples, sample_rate).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    /// Speech-band noise with slow multi-rate amplitude modulation.
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];

    pub fn label(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        }
    }
}

/// Generates a noise signal of the given kind, RMS-normalized to 0.1.
pub fn noise(kind: NoiseKind, seed: u64, duration_s: f64, sample_rate: u32) -> AudioSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x51_7cc1_b727).wrapping_add(2));
    let n = (duration_s * sample_rate as f64).round() as usize;
    let mut samples: Vec<f64> = match kind {
        NoiseKind::White => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        NoiseKind::Pink => {
            // Kellet's pink filter over uniform white noise.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..n)
                .map(|_| {
                    let w: f64 = rng.gen_range(-1.0..1.0);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mods: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.gen_range(1.5..6.0), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            let mut lp = 0.0;
            let alpha = 0.35; // one-pole lowpass, rolls off the highs
            (0..n)
                .map(|i| {
                    let t = i as f64 / sample_rate as f64;
                    let w: f64 = rng.gen_range(-1.0..1.0);
                    lp += alpha * (w - lp);
                    let am: f64 = mods
                        .iter()
                        .map(|&(r, p)| (2.0 * PI * r * t + p).sin())
                        .sum::<f64>()
                        / 3.0;
                    lp * (0.6 + 0.4 * am)
                })
                .collect()
        }
    };
    let rms = (samples.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt().max(1e-12);
    for s in &mut samples {
        *s *= 0.1 / rms;
    }
    AudioSignal::new(samples, sample_rate).unwrap()
}

/// Layout of a generated desk corpus.
pub struct DeskCorpus {
    pub dir: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

/// Writes a small corpus of WAVs plus a manifest under `dir`.
///
/// Noise files are partitioned so the train and test splits never share
/// one. Each manifest record gets its own mixing seed.
pub fn write_desk_corpus(
    dir: impl AsRef<Path>,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<DeskCorpus> {
    let dir = dir.as_ref().to_path_buf();
    let clean_dir = dir.join("clean");
    let noise_dir = dir.join("noise");
    std::fs::create_dir_all(&clean_dir).map_err(crate::Error::io(&clean_dir))?;
    std::fs::create_dir_all(&noise_dir).map_err(crate::Error::io(&noise_dir))?;

    let total = n_train + n_val + n_test;
    let duration = 2.0;
    let sr = crate::SAMPLE_RATE;

    // One noise file per utterance keeps the split pools disjoint.
    let mut records = Vec::with_capacity(total);
    for i in 0..total {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let clean_path = clean_dir.join(format!("speech{i:03}.wav"));
        let kind = NoiseKind::ALL[i % 3];
        let noise_path = noise_dir.join(format!("{}{i:03}.wav", kind.label()));
        crate::audio::write_wav(&clean_path, &speech_like(seed.wrapping_add(i as u64), duration, sr))?;
        crate::audio::write_wav(
            &noise_path,
            &noise(kind, seed.wrapping_add(1000 + i as u64), duration, sr),
        )?;
        records.push(UtteranceRecord {
            split,
            clean_path,
            noise_path,
            seed: seed.wrapping_add(5000 + i as u64),
        });
    }
    let manifest = Manifest { records };
    let manifest_path = dir.join("manifest.tsv");
    // Rows are written relative to the manifest so the corpus directory
    // can be moved wholesale; the in-memory records keep full paths.
    let mut text = String::new();
    for r in &manifest.records {
        let rel = |p: &Path| {
            p.strip_prefix(&dir)
                .map(|q| q.to_path_buf())
                .unwrap_or_else(|_| p.to_path_buf())
        };
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.split.label(),
            rel(&r.clean_path).display(),
            rel(&r.noise_path).display(),
            r.seed
        ));
    }
    std::fs::write(&manifest_path, text).map_err(crate::Error::io(&manifest_path))?;
    Ok(DeskCorpus {
        dir,
        manifest_path,
        manifest,
    })
}
