//! Time-domain signals and 16-bit PCM WAV I/O.
//!
//! WAV support is deliberately narrow: mono, 16-bit signed little-endian
//! PCM. Integer samples map to floats by division by 32768, so file data
//! lands in [-1, 1). Anything else (multi-channel, other bit depths,
//! compressed formats) is rejected with an explicit error.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// A mono audio signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    /// Builds a signal, validating that the rate is positive and every
    /// sample is finite. Note that intermediate signals (e.g. mixtures)
    /// may legitimately exceed [-1, 1]; clamping happens only on WAV write.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }
}

const FMT_PCM: u16 = 1;

/// Reads a mono 16-bit PCM WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    parse_wav(&bytes).map_err(|msg| Error::Wav(format!("{}: {msg}", path.display())))
}

fn parse_wav(bytes: &[u8]) -> std::result::Result<AudioSignal, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = (pos + 8 + size).min(bytes.len());
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err("fmt chunk too short".into());
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos += 8 + size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or("missing fmt chunk")?;
    if format != FMT_PCM {
        return Err(format!("unsupported format tag {format} (PCM only)"));
    }
    if channels != 1 {
        return Err(format!("{channels} channels (mono only)"));
    }
    if bits != 16 {
        return Err(format!("{bits}-bit samples (16-bit only)"));
    }
    let data = data.ok_or("missing data chunk")?;
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    AudioSignal::new(samples, rate).map_err(|e| e.to_string())
}

/// Writes a mono 16-bit PCM WAV file. Samples are scaled by 32768 and
/// clamped to the i16 range.
pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    let path = path.as_ref();
    let n = signal.samples.len();
    let data_size = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_size).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FMT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // channels
    out.extend_from_slice(&signal.sample_rate.to_le_bytes());
    out.extend_from_slice(&(signal.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_size.to_le_bytes());
    for &s in &signal.samples {
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, out).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn wav_round_trip_exact_for_i16_grid() {
        let samples: Vec<f64> = (-5..5).map(|i| i as f64 * 1000.0 / 32768.0).collect();
        let sig = AudioSignal::new(samples.clone(), 16_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        write_wav(&path, &sig).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples, samples);
    }

    #[test]
    fn rejects_stereo() {
        // Patch the channel count in a valid mono file.
        let sig = AudioSignal::new(vec![0.0; 4], 16_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        write_wav(&path, &sig).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[22] = 2;
        fs::write(&path, bytes).unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("mono"), "{err}");
    }

    #[test]
    fn rejects_non_16_bit() {
        let sig = AudioSignal::new(vec![0.0; 4], 16_000).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        write_wav(&path, &sig).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[34] = 8;
        fs::write(&path, bytes).unwrap();
        assert!(read_wav(&path).is_err());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav(&path).is_err());
    }

    #[test]
    fn rejects_non_finite_samples() {
        assert!(AudioSignal::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(AudioSignal::new(vec![0.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn write_read_write_is_stable(raw in proptest::collection::vec(-1.0f64..1.0, 1..256)) {
            let dir = tempfile::tempdir().unwrap();
            let a = dir.path().join("a.wav");
            let b = dir.path().join("b.wav");
            write_wav(&a, &AudioSignal::new(raw, 16_000).unwrap()).unwrap();
            let first = read_wav(&a).unwrap();
            write_wav(&b, &first).unwrap();
            let second = read_wav(&b).unwrap();
            // Quantization happens once; a second pass is the identity.
            prop_assert_eq!(first.samples, second.samples);
        }
    }
}
