//! Mono WAV input and output. Reading accepts 16-bit PCM and 32-bit float;
//! writing always emits 32-bit float.

use crate::error::{Error, Result};
use crate::signal::Waveform;
use std::path::Path;

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Reads a mono WAV file. When `expected_rate` is given, a file at any
/// other rate is rejected; resampling is out of scope.
pub fn read_wav(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    let mut reader =
        hound::WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!(
                "{} channels; only mono input is supported, downmix before processing",
                spec.channels
            ),
        ));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(wav_err(
                path,
                format!(
                    "sample rate {} Hz; this pipeline requires {} Hz input (resampling is out of scope)",
                    spec.sample_rate, rate
                ),
            ));
        }
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e.to_string()))?,
        (fmt, bits) => {
            return Err(wav_err(
                path,
                format!("unsupported format {fmt:?}/{bits} bit; use 16-bit PCM or 32-bit float"),
            ))
        }
    };
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Writes a waveform as mono 32-bit float WAV. Samples are written as-is,
/// with no normalization.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for &s in &w.samples {
        writer
            .write_sample(s as f32)
            .map_err(|e| wav_err(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn float_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Includes out-of-range values: float wav preserves them.
        let mut samples: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        samples[0] = 1.75;
        samples[1] = -2.5;
        let w = Waveform::new(samples, 16000);
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path, Some(16000)).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.len(), w.len());
        for (a, b) in w.samples.iter().zip(&r.samples) {
            assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0));
        }
    }

    #[test]
    fn wrong_rate_rejected_with_guidance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = Waveform::new(vec![0.0; 100], 44100);
        write_wav(&path, &w).unwrap();
        match read_wav(&path, Some(16000)) {
            Err(Error::Wav { msg, .. }) => assert!(msg.contains("16000")),
            other => panic!("expected rate rejection, got {other:?}"),
        }
        assert!(read_wav(&path, None).is_ok());
    }

    #[test]
    fn pcm16_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pcm.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for v in [-32768i16, -1, 0, 1, 32767] {
            writer.write_sample(v).unwrap();
        }
        writer.finalize().unwrap();
        let r = read_wav(&path, Some(16000)).unwrap();
        assert_eq!(r.samples[0], -1.0);
        assert_eq!(r.samples[2], 0.0);
        assert!((r.samples[4] - 32767.0 / 32768.0).abs() < 1e-12);
    }

    #[test]
    fn missing_file_is_error() {
        assert!(read_wav(Path::new("/nonexistent/x.wav"), None).is_err());
    }
}
