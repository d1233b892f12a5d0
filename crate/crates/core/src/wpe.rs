//! Single-channel weighted prediction error dereverberation: per-bin
//! iteratively reweighted linear prediction over delayed STFT frames.

use crate::error::{Error, Result};
use crate::signal::{self, Spectrogram, StftConfig, Waveform};
use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WpeConfig {
    pub iterations: usize,
    /// Prediction filter length in STFT frames.
    pub taps: usize,
    /// Prediction delay in STFT frames.
    pub delay: usize,
    pub variance_floor: f64,
    pub diagonal_loading: f64,
}

impl Default for WpeConfig {
    fn default() -> Self {
        WpeConfig {
            iterations: 5,
            taps: 50,
            delay: 2,
            variance_floor: 1e-10,
            diagonal_loading: 1e-10,
        }
    }
}

impl WpeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 {
            return Err(Error::InvalidConfig("wpe needs at least one tap".into()));
        }
        if self.variance_floor <= 0.0 {
            return Err(Error::InvalidConfig("wpe variance floor must be positive".into()));
        }
        Ok(())
    }
}

/// Cholesky solve of the Hermitian system `R g = p`, with escalating
/// diagonal loading instead of failure on near-singular systems.
fn solve_hermitian(r: &mut [Vec<Complex64>], p: &[Complex64], loading: f64) -> Vec<Complex64> {
    let n = p.len();
    let trace: f64 = (0..n).map(|i| r[i][i].re).sum();
    let mut load = loading * trace.max(1e-300) / n as f64;
    for _ in 0..16 {
        if let Some(g) = try_cholesky(r, p, load) {
            return g;
        }
        load = (load * 100.0).max(1e-200);
    }
    // Hopeless conditioning: no prediction at all.
    vec![Complex64::default(); n]
}

fn try_cholesky(r: &[Vec<Complex64>], p: &[Complex64], load: f64) -> Option<Vec<Complex64>> {
    let n = p.len();
    let mut l = vec![vec![Complex64::default(); n]; n];
    for j in 0..n {
        let mut d = r[j][j].re + load;
        for k in 0..j {
            d -= l[j][k].norm_sqr();
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[j][j] = Complex64::new(dj, 0.0);
        for i in j + 1..n {
            let mut v = r[i][j];
            for k in 0..j {
                v -= l[i][k] * l[j][k].conj();
            }
            l[i][j] = v / dj;
        }
    }
    // Forward then backward substitution.
    let mut z = vec![Complex64::default(); n];
    for i in 0..n {
        let mut v = p[i];
        for k in 0..i {
            v -= l[i][k] * z[k];
        }
        z[i] = v / l[i][i].re;
    }
    let mut g = vec![Complex64::default(); n];
    for i in (0..n).rev() {
        let mut v = z[i];
        for k in i + 1..n {
            v -= l[k][i].conj() * g[k];
        }
        g[i] = v / l[i][i].re;
    }
    Some(g)
}

struct BinResult {
    dereverbed: Vec<Complex64>,
    objective: Vec<f64>,
}

fn wpe_bin(y: &[Complex64], cfg: &WpeConfig) -> BinResult {
    let m_frames = y.len();
    let taps = cfg.taps;
    let delay = cfg.delay;
    let mut xhat: Vec<Complex64> = y.to_vec();
    let mut objective = Vec::with_capacity(cfg.iterations);

    let tap_vec = |m: usize, t: usize| -> Complex64 {
        let idx = m as i64 - delay as i64 - t as i64;
        if idx >= 0 {
            y[idx as usize]
        } else {
            Complex64::default()
        }
    };

    for _ in 0..cfg.iterations {
        let lambda: Vec<f64> = xhat
            .iter()
            .map(|x| x.norm_sqr().max(cfg.variance_floor))
            .collect();

        let mut r = vec![vec![Complex64::default(); taps]; taps];
        let mut p = vec![Complex64::default(); taps];
        let mut buf = vec![Complex64::default(); taps];
        for m in delay..m_frames {
            for (t, b) in buf.iter_mut().enumerate() {
                *b = tap_vec(m, t);
            }
            let w = 1.0 / lambda[m];
            for i in 0..taps {
                if buf[i].re == 0.0 && buf[i].im == 0.0 {
                    continue;
                }
                let biw = buf[i] * w;
                for j in i..taps {
                    r[i][j] += biw * buf[j].conj();
                }
                p[i] += biw * y[m].conj();
            }
        }
        for i in 0..taps {
            for j in 0..i {
                r[i][j] = r[j][i].conj();
            }
        }
        let trace: f64 = (0..taps).map(|i| r[i][i].re).sum();
        if trace <= 0.0 {
            // Silent bin; nothing to predict.
            objective.push(xhat.iter().map(|x| x.norm_sqr().max(cfg.variance_floor).ln()).sum());
            continue;
        }
        let g = solve_hermitian(&mut r, &p, cfg.diagonal_loading);

        let mut j_val = 0.0;
        for m in 0..m_frames {
            let mut pred = Complex64::default();
            if m >= delay {
                for (t, gt) in g.iter().enumerate() {
                    pred += gt.conj() * tap_vec(m, t);
                }
            }
            xhat[m] = y[m] - pred;
            j_val += xhat[m].norm_sqr() / lambda[m] + lambda[m].ln();
        }
        objective.push(j_val);
    }
    BinResult {
        dereverbed: xhat,
        objective,
    }
}

/// Dereverberates in the STFT domain, returning the enhanced spectrogram
/// and the per-iteration value of the internal prediction objective summed
/// over bins.
pub fn wpe_spectrogram(ys: &Spectrogram, cfg: &WpeConfig) -> Result<(Spectrogram, Vec<f64>)> {
    cfg.validate()?;
    let m_frames = ys.frames();
    if m_frames <= cfg.taps + cfg.delay {
        return Err(Error::SignalTooShort {
            len: m_frames,
            min: cfg.taps + cfg.delay + 1,
        });
    }
    let bins = ys.bins();
    let results: Vec<BinResult> = (0..bins)
        .into_par_iter()
        .map(|k| wpe_bin(&ys.data.column(k).to_vec(), cfg))
        .collect();

    let mut data = Array2::default((m_frames, bins));
    for (k, res) in results.iter().enumerate() {
        for (m, v) in res.dereverbed.iter().enumerate() {
            data[(m, k)] = *v;
        }
    }
    let mut objective = vec![0.0; cfg.iterations];
    for res in &results {
        for (i, v) in res.objective.iter().enumerate() {
            objective[i] += v;
        }
    }
    Ok((
        Spectrogram {
            data,
            len: ys.len,
            cfg: ys.cfg,
        },
        objective,
    ))
}

/// Waveform-level weighted prediction error dereverberation. The output has
/// the same length as the input.
pub fn wpe_dereverb(y: &Waveform, cfg: &WpeConfig, stft: &StftConfig) -> Result<Waveform> {
    let ys = signal::stft_samples(&y.samples, stft)?;
    let (xs, _) = wpe_spectrogram(&ys, cfg)?;
    let samples = signal::istft_samples(&xs, y.len())?;
    Ok(Waveform::new(samples, y.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::WindowKind;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_stft() -> StftConfig {
        StftConfig {
            window_len: 32,
            hop: 8,
            fft_size: 64,
            window: WindowKind::Hann,
        }
    }

    fn tiny_wpe() -> WpeConfig {
        WpeConfig {
            iterations: 4,
            taps: 8,
            delay: 1,
            ..WpeConfig::default()
        }
    }

    /// Speech-like test signal: bursts of band-limited noise.
    pub(crate) fn bursty_signal(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0f64; len];
        let mut lp = 0.0;
        for (t, v) in x.iter_mut().enumerate() {
            let env = 0.5 + 0.5 * (std::f64::consts::TAU * t as f64 / 997.0).sin().powi(2);
            let white: f64 = rng.random_range(-1.0..1.0);
            lp = 0.7 * lp + 0.3 * white;
            *v = env * lp;
        }
        x
    }

    #[test]
    fn zero_in_zero_out() {
        let stft = tiny_stft();
        let y = Waveform::new(vec![0.0; 600], 16000);
        let out = wpe_dereverb(&y, &tiny_wpe(), &stft).unwrap();
        assert_eq!(out.len(), 600);
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_length_matches_input() {
        let stft = tiny_stft();
        let y = Waveform::new(bursty_signal(777, 3), 16000);
        let out = wpe_dereverb(&y, &tiny_wpe(), &stft).unwrap();
        assert_eq!(out.len(), 777);
        assert!(out.all_finite());
    }

    #[test]
    fn too_short_rejected() {
        let stft = tiny_stft();
        let y = Waveform::new(vec![1.0; 40], 16000);
        let cfg = WpeConfig {
            taps: 50,
            ..tiny_wpe()
        };
        assert!(matches!(
            wpe_dereverb(&y, &cfg, &stft),
            Err(Error::SignalTooShort { .. })
        ));
    }

    #[test]
    fn zeroed_bin_stays_zero() {
        let stft = tiny_stft();
        let y = Waveform::new(bursty_signal(800, 5), 16000);
        let mut ys = signal::stft_samples(&y.samples, &stft).unwrap();
        let k0 = 7;
        for m in 0..ys.frames() {
            ys.data[(m, k0)] = Complex64::default();
        }
        let (xs, _) = wpe_spectrogram(&ys, &tiny_wpe()).unwrap();
        for m in 0..xs.frames() {
            assert_eq!(xs.data[(m, k0)], Complex64::default());
        }
    }

    #[test]
    fn objective_non_increasing() {
        let stft = tiny_stft();
        // Reverberant input: convolve bursts with a decaying tail.
        let x = bursty_signal(1200, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rir: Vec<f64> = std::iter::once(1.0)
            .chain((1..120).map(|t| 0.4 * rng.random_range(-1.0..1.0) * (-0.02 * t as f64).exp()))
            .collect();
        let mut y = vec![0.0; x.len()];
        for (i, xv) in x.iter().enumerate() {
            for (j, hv) in rir.iter().enumerate() {
                if i + j < y.len() {
                    y[i + j] += xv * hv;
                }
            }
        }
        let ys = signal::stft_samples(&y, &stft).unwrap();
        let (_, obj) = wpe_spectrogram(&ys, &tiny_wpe()).unwrap();
        for w in obj.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-6 * w[0].abs().max(1.0),
                "objective increased: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn anechoic_input_nearly_unchanged() {
        // Needs taps well below the frame count, otherwise the per-bin
        // regression has enough freedom to overfit the clean signal.
        let stft = StftConfig {
            window_len: 128,
            hop: 32,
            fft_size: 256,
            window: WindowKind::Hann,
        };
        let xw = crate::harness::speech_proxy(48000, 9, 16000, 0.05);
        let cfg = WpeConfig {
            iterations: 5,
            taps: 12,
            delay: 2,
            ..WpeConfig::default()
        };
        let out = wpe_dereverb(&xw, &cfg, &stft).unwrap();
        let lsd = crate::harness::lsd(&out, &xw, &stft).unwrap();
        assert!(lsd < 1.0, "lsd on anechoic input: {lsd} dB");
    }
}
