//! Time-frequency analysis and synthesis.
//!
//! The STFT zero-pads the utterance by half a window on both ends, slides a
//! tapered window with the configured hop, and zero-pads each windowed
//! segment up to `fft_size` before the DFT. Synthesis is normalized
//! overlap-add with the canonical dual window, which reconstructs every
//! original sample exactly for consistent spectrograms.

use crate::error::{Error, Result};
use crate::fft;
use ndarray::Array2;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// A real-valued time-domain signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Unit impulse padded to one window length, used to render the operator
    /// kernel into the waveform domain.
    pub fn impulse(cfg: &StftConfig, sample_rate: u32) -> Self {
        let mut samples = vec![0.0; cfg.window_len];
        samples[0] = 1.0;
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.samples.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rect,
}

/// Analysis configuration. The default matches a 32 ms Hann window with an
/// 8 ms hop at 16 kHz, zero-padded by 50% for subband filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: 512,
            hop: 128,
            fft_size: 1024,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_len == 0 {
            return Err(Error::InvalidConfig("hop and window must be positive".into()));
        }
        if !(self.hop <= self.window_len && self.window_len <= self.fft_size) {
            return Err(Error::InvalidConfig(format!(
                "need hop <= window <= fft_size, got {}/{}/{}",
                self.hop, self.window_len, self.fft_size
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::InvalidConfig("fft_size must be even".into()));
        }
        if self.window == WindowKind::Hann && self.hop > self.window_len / 2 {
            return Err(Error::InvalidConfig(
                "hann synthesis needs hop <= window/2 for full overlap coverage".into(),
            ));
        }
        Ok(())
    }

    /// Number of stored frequency bins.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Zero-padding applied at both signal ends before framing.
    pub fn pad(&self) -> usize {
        self.window_len / 2
    }

    /// Number of analysis frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        (len + self.pad()).div_ceil(self.hop)
    }

    /// Canonical signal length whose analysis has exactly `frames` frames.
    pub fn len_for_frames(&self, frames: usize) -> usize {
        frames * self.hop - self.pad()
    }

    pub fn window_values(&self) -> Vec<f64> {
        let w = self.window_len;
        match self.window {
            WindowKind::Hann => (0..w)
                .map(|j| 0.5 * (1.0 - (std::f64::consts::TAU * j as f64 / w as f64).cos()))
                .collect(),
            WindowKind::Rect => vec![1.0; w],
        }
    }
}

/// Complex STFT matrix, frames by bins, along with the signal length it
/// analyzes so that synthesis can trim back exactly.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub data: Array2<Complex64>,
    pub len: usize,
    pub cfg: StftConfig,
}

impl Spectrogram {
    /// Wrap a raw matrix, assigning the canonical signal length for its
    /// frame count.
    pub fn from_data(data: Array2<Complex64>, cfg: StftConfig) -> Result<Self> {
        if data.ncols() != cfg.bins() {
            return Err(Error::ShapeMismatch {
                context: "spectrogram bins",
                expected: cfg.bins(),
                got: data.ncols(),
            });
        }
        let len = cfg.len_for_frames(data.nrows());
        Ok(Spectrogram { data, len, cfg })
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Windowed short-time Fourier transform.
pub fn stft(x: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    stft_samples(&x.samples, cfg)
}

pub fn stft_samples(x: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    if x.len() < cfg.window_len {
        return Err(Error::SignalTooShort {
            len: x.len(),
            min: cfg.window_len,
        });
    }
    let (w, hop, f) = (cfg.window_len, cfg.hop, cfg.fft_size);
    let pad = cfg.pad();
    let frames = cfg.frame_count(x.len());
    let window = cfg.window_values();

    let mut buf = vec![0.0f64; (frames - 1) * hop + w];
    buf[pad..pad + x.len()].copy_from_slice(x);

    let mut data = Array2::<Complex64>::default((frames, cfg.bins()));
    let mut grain = vec![0.0f64; f];
    for m in 0..frames {
        for j in 0..w {
            grain[j] = window[j] * buf[m * hop + j];
        }
        let spec = fft::rfft(&grain);
        data.row_mut(m)
            .iter_mut()
            .zip(spec.iter())
            .for_each(|(d, s)| *d = *s);
    }
    Ok(Spectrogram {
        data,
        len: x.len(),
        cfg: *cfg,
    })
}

/// Window-power envelope of the overlap-add grid for `frames` frames.
fn ola_denominator(cfg: &StftConfig, frames: usize) -> Vec<f64> {
    let (w, hop) = (cfg.window_len, cfg.hop);
    let window = cfg.window_values();
    let mut den = vec![0.0f64; (frames - 1) * hop + w];
    for m in 0..frames {
        for j in 0..w {
            den[m * hop + j] += window[j] * window[j];
        }
    }
    for d in den.iter_mut() {
        *d = d.max(1e-12);
    }
    den
}

/// Inverse STFT by normalized weighted overlap-add, trimmed to `S.len`
/// samples.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let samples = istft_samples(s, s.len)?;
    Ok(Waveform::new(samples, 0))
}

pub fn istft_samples(s: &Spectrogram, target_len: usize) -> Result<Vec<f64>> {
    s.cfg.validate()?;
    if s.bins() != s.cfg.bins() {
        return Err(Error::ShapeMismatch {
            context: "istft bins",
            expected: s.cfg.bins(),
            got: s.bins(),
        });
    }
    let (w, hop, f) = (s.cfg.window_len, s.cfg.hop, s.cfg.fft_size);
    let pad = s.cfg.pad();
    let frames = s.frames();
    if frames == 0 {
        return Err(Error::InvalidConfig("istft of empty spectrogram".into()));
    }
    let window = s.cfg.window_values();
    let den = ola_denominator(&s.cfg, frames);

    let mut num = vec![0.0f64; den.len()];
    let mut row = vec![Complex64::default(); s.cfg.bins()];
    for m in 0..frames {
        row.iter_mut()
            .zip(s.data.row(m).iter())
            .for_each(|(r, z)| *r = *z);
        let grain = fft::irfft(&row, f);
        for j in 0..w {
            num[m * hop + j] += window[j] * grain[j];
        }
    }

    let mut out = vec![0.0f64; target_len];
    for (t, o) in out.iter_mut().enumerate() {
        let p = pad + t;
        if p < num.len() {
            *o = num[p] / den[p];
        }
    }
    Ok(out)
}

/// Adjoint of [`istft_samples`] for a fixed frame count: maps a cotangent on
/// the output samples back to the spectrogram entries.
pub(crate) fn istft_adjoint(
    cot_out: &[f64],
    frames: usize,
    cfg: &StftConfig,
) -> Array2<Complex64> {
    let (w, hop, f) = (cfg.window_len, cfg.hop, cfg.fft_size);
    let pad = cfg.pad();
    let window = cfg.window_values();
    let den = ola_denominator(cfg, frames);

    let mut cot_num = vec![0.0f64; den.len()];
    for (t, &c) in cot_out.iter().enumerate() {
        let p = pad + t;
        if p < cot_num.len() {
            cot_num[p] = c / den[p];
        }
    }

    let mut cot = Array2::<Complex64>::default((frames, cfg.bins()));
    let mut cot_grain = vec![0.0f64; w];
    for m in 0..frames {
        for j in 0..w {
            cot_grain[j] = window[j] * cot_num[m * hop + j];
        }
        let cot_row = fft::irfft_adjoint(&cot_grain, f);
        cot.row_mut(m)
            .iter_mut()
            .zip(cot_row.iter())
            .for_each(|(d, s)| *d = *s);
    }
    cot
}

/// Adjoint of [`stft_samples`]: maps a cotangent on the spectrogram back to
/// the input samples.
pub(crate) fn stft_adjoint(cot_s: &Array2<Complex64>, cfg: &StftConfig, len: usize) -> Vec<f64> {
    let (w, hop, f) = (cfg.window_len, cfg.hop, cfg.fft_size);
    let pad = cfg.pad();
    let frames = cot_s.nrows();
    let window = cfg.window_values();

    let mut cot_buf = vec![0.0f64; (frames - 1) * hop + w];
    for m in 0..frames {
        let cot_grain = fft::rfft_adjoint(cot_s.row(m).as_slice().unwrap(), f);
        for j in 0..w {
            cot_buf[m * hop + j] += window[j] * cot_grain[j];
        }
    }
    let mut cot_x = vec![0.0f64; len];
    for (t, c) in cot_x.iter_mut().enumerate() {
        let p = pad + t;
        if p < cot_buf.len() {
            *c = cot_buf[p];
        }
    }
    cot_x
}

/// Projects a complex matrix onto the set of consistent spectrograms by a
/// synthesis/analysis round trip. Idempotent up to numerical tolerance.
pub fn consistency_project(s: &Spectrogram) -> Result<Spectrogram> {
    let time = istft_samples(s, s.len)?;
    let mut out = stft_samples(&time, &s.cfg)?;
    debug_assert_eq!(out.frames(), s.frames());
    out.len = s.len;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> StftConfig {
        StftConfig {
            window_len: 32,
            hop: 8,
            fft_size: 64,
            window: WindowKind::Hann,
        }
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000)
    }

    #[test]
    fn roundtrip_white_noise() {
        for cfg in [tiny_cfg(), StftConfig::default()] {
            let x = noise(cfg.window_len * 5 + 13, 7);
            let s = stft(&x, &cfg).unwrap();
            let y = istft(&s).unwrap();
            assert_eq!(y.len(), x.len());
            let num: f64 = x
                .samples
                .iter()
                .zip(&y.samples)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let den: f64 = x.samples.iter().map(|a| a * a).sum();
            assert!((num / den).sqrt() < 1e-10, "rel err {}", (num / den).sqrt());
        }
    }

    #[test]
    fn zero_input_zero_spectrogram() {
        let cfg = tiny_cfg();
        let x = Waveform::new(vec![0.0; 400], 16000);
        let s = stft(&x, &cfg).unwrap();
        assert!(s.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn too_short_rejected() {
        let cfg = tiny_cfg();
        let x = Waveform::new(vec![1.0; 8], 16000);
        match stft(&x, &cfg) {
            Err(Error::SignalTooShort { min, .. }) => assert_eq!(min, 32),
            other => panic!("expected sizing error, got {other:?}"),
        }
    }

    #[test]
    fn sine_at_bin_center_rect_window() {
        // No zero padding so a bin-centered sine occupies exactly one bin.
        let cfg = StftConfig {
            window_len: 64,
            hop: 16,
            fft_size: 64,
            window: WindowKind::Rect,
        };
        let k0 = 5;
        let x = Waveform::new(
            (0..640)
                .map(|t| (std::f64::consts::TAU * k0 as f64 * t as f64 / 64.0).sin())
                .collect(),
            16000,
        );
        let s = stft(&x, &cfg).unwrap();
        // Interior frames see the full sine; skip edge frames that overlap padding.
        for m in 4..s.frames() - 4 {
            let row = s.data.row(m);
            let total: f64 = row.iter().map(|z| z.norm_sqr()).sum();
            let peak = row[k0].norm_sqr();
            assert!(peak / total > 1.0 - 1e-9, "frame {m}: {}", peak / total);
        }
    }

    #[test]
    fn single_frame_is_one_windowed_grain() {
        let cfg = tiny_cfg();
        let frames = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let content: Vec<f64> = (0..cfg.window_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let window = cfg.window_values();
        let windowed: Vec<f64> = content.iter().zip(&window).map(|(c, w)| c * w).collect();
        let spec = fft::rfft(&{
            let mut g = windowed.clone();
            g.resize(cfg.fft_size, 0.0);
            g
        });

        let m0 = 4;
        let mut data = Array2::<Complex64>::default((frames, cfg.bins()));
        data.row_mut(m0).iter_mut().zip(&spec).for_each(|(d, s)| *d = *s);
        let s = Spectrogram::from_data(data, cfg).unwrap();
        let out = istft(&s).unwrap();

        let den = ola_denominator(&cfg, frames);
        let offset = m0 * cfg.hop;
        for (t, &o) in out.samples.iter().enumerate() {
            let p = cfg.pad() + t;
            let expect = if p >= offset && p < offset + cfg.window_len {
                window[p - offset] * windowed[p - offset] / den[p]
            } else {
                0.0
            };
            assert_relative_eq!(o, expect, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn consistency_projection_idempotent() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Array2::from_shape_fn((12, cfg.bins()), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let s = Spectrogram::from_data(data, cfg).unwrap();
        let p1 = consistency_project(&s).unwrap();
        let p2 = consistency_project(&p1).unwrap();
        let diff: f64 = (&p2.data - &p1.data).iter().map(|z| z.norm_sqr()).sum();
        let norm: f64 = p1.data.iter().map(|z| z.norm_sqr()).sum();
        assert!((diff / norm).sqrt() < 1e-10);
    }

    #[test]
    fn consistency_projection_fixes_consistent_input() {
        let cfg = tiny_cfg();
        let x = noise(300, 5);
        let s = stft(&x, &cfg).unwrap();
        let p = consistency_project(&s).unwrap();
        let diff: f64 = (&p.data - &s.data).iter().map(|z| z.norm_sqr()).sum();
        let norm: f64 = s.data.iter().map(|z| z.norm_sqr()).sum();
        assert!((diff / norm).sqrt() < 1e-10);
    }

    #[test]
    fn linearity() {
        let cfg = tiny_cfg();
        let x = noise(200, 1);
        let z = noise(200, 2);
        let (a, b) = (0.7, -1.3);
        let combo = Waveform::new(
            x.samples
                .iter()
                .zip(&z.samples)
                .map(|(xi, zi)| a * xi + b * zi)
                .collect(),
            16000,
        );
        let sc = stft(&combo, &cfg).unwrap();
        let sx = stft(&x, &cfg).unwrap();
        let sz = stft(&z, &cfg).unwrap();
        for (c, (xv, zv)) in sc.data.iter().zip(sx.data.iter().zip(sz.data.iter())) {
            let expect = xv * a + zv * b;
            assert!((c - expect).norm() <= 1e-10 * (1.0 + expect.norm()));
        }
    }

    #[test]
    fn parseval_energy_agreement() {
        // Signal supported away from the edges has uniform window coverage,
        // so spectral energy equals fft_size * coverage * time energy.
        let cfg = tiny_cfg();
        let mut samples = vec![0.0; 400];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in samples.iter_mut().take(350).skip(50) {
            *s = rng.random_range(-1.0..1.0);
        }
        let x = Waveform::new(samples.clone(), 16000);
        let s = stft(&x, &cfg).unwrap();

        let mut full_energy = 0.0;
        for m in 0..s.frames() {
            for k in 0..s.bins() {
                let e = s.data[(m, k)].norm_sqr();
                let mult = if k == 0 || k == cfg.fft_size / 2 { 1.0 } else { 2.0 };
                full_energy += mult * e;
            }
        }
        let window = cfg.window_values();
        let coverage: f64 = window.iter().map(|w| w * w).sum::<f64>() / cfg.hop as f64;
        let time_energy: f64 = samples.iter().map(|v| v * v).sum();
        assert_relative_eq!(
            full_energy,
            cfg.fft_size as f64 * coverage * time_energy,
            max_relative = 1e-9
        );
    }

    #[test]
    fn adjoints_match_inner_products() {
        // <A x, y> == <x, A^T y> for both stft and istft as real-linear maps.
        let cfg = tiny_cfg();
        let len = 250;
        let frames = cfg.frame_count(len);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = noise(len, 31);

        let s = stft(&x, &cfg).unwrap();
        let cot: Array2<Complex64> = Array2::from_shape_fn((frames, cfg.bins()), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let lhs: f64 = s
            .data
            .iter()
            .zip(cot.iter())
            .map(|(a, c)| a.re * c.re + a.im * c.im)
            .sum();
        let back = stft_adjoint(&cot, &cfg, len);
        let rhs: f64 = x.samples.iter().zip(&back).map(|(a, b)| a * b).sum();
        // DC and Nyquist imaginary parts are structurally zero in s, so the
        // pairing ignores any cotangent mass there.
        let mut correction = 0.0;
        for m in 0..frames {
            correction += s.data[(m, 0)].im * cot[(m, 0)].im;
            correction += s.data[(m, cfg.fft_size / 2)].im * cot[(m, cfg.fft_size / 2)].im;
        }
        assert_relative_eq!(lhs - correction, rhs, max_relative = 1e-9);

        let w = istft_samples(&s, len).unwrap();
        let cot_w: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs2: f64 = w.iter().zip(&cot_w).map(|(a, b)| a * b).sum();
        let back2 = istft_adjoint(&cot_w, frames, &cfg);
        let rhs2: f64 = s
            .data
            .iter()
            .zip(back2.iter())
            .map(|(a, c)| a.re * c.re + a.im * c.im)
            .sum();
        assert_relative_eq!(lhs2, rhs2, max_relative = 1e-9);
    }
}
