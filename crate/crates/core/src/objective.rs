//! Reconstruction cost in the compressed STFT domain, the likelihood-score
//! weighting, and the annealed noise regularizer on the RIR parameters.

use crate::error::{Error, Result};
use crate::operator::{self, OperatorConfig, RirGrads, RirParams};
use crate::signal::{self, Spectrogram, StftConfig, Waveform};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Magnitude compression applied before the squared error, to account for
/// the heavy-tailed amplitude statistics of speech.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub exponent: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig { exponent: 2.0 / 3.0 }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.exponent > 0.0 && self.exponent <= 1.0 && self.exponent.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "compression exponent must be in (0, 1], got {}",
                self.exponent
            )));
        }
        Ok(())
    }
}

/// Bounds for the annealed regularizer noise level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegularizerSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for RegularizerSchedule {
    fn default() -> Self {
        RegularizerSchedule {
            sigma_min: 5e-4,
            sigma_max: 1e-2,
        }
    }
}

impl RegularizerSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max) {
            return Err(Error::InvalidConfig(
                "regularizer bounds need 0 < sigma_min <= sigma_max".into(),
            ));
        }
        Ok(())
    }
}

/// Clamps the diffusion noise level into the regularizer bounds.
pub fn sigma_prime(sigma_n: f64, sched: &RegularizerSchedule) -> f64 {
    sigma_n.clamp(sched.sigma_min, sched.sigma_max)
}

fn compress_entry(z: Complex64, exponent: f64) -> Complex64 {
    let r = z.norm();
    if r == 0.0 {
        return Complex64::default();
    }
    z * r.powf(exponent - 1.0)
}

/// Magnitude-compressed spectrogram: `|S|^e * exp(i*angle(S))`.
pub fn compress(s: &Spectrogram, c: &CompressionConfig) -> Spectrogram {
    Spectrogram {
        data: s.data.mapv(|z| compress_entry(z, c.exponent)),
        len: s.len,
        cfg: s.cfg,
    }
}

fn compress_matrix(m: &Array2<Complex64>, exponent: f64) -> Array2<Complex64> {
    m.mapv(|z| compress_entry(z, exponent))
}

/// Pulls a cotangent through the compression. The fractional power has an
/// unbounded derivative at the origin; magnitudes are floored relative to
/// the matrix scale so near-empty cells cannot dominate the gradient.
fn compress_vjp(
    orig: &Array2<Complex64>,
    cot_out: &Array2<Complex64>,
    exponent: f64,
) -> Array2<Complex64> {
    let floor = compress_grad_floor()
        * orig.iter().map(|z| z.norm()).fold(0.0f64, f64::max).max(1e-300);
    Array2::from_shape_fn(orig.dim(), |idx| {
        let z = orig[idx];
        let g = cot_out[idx];
        let r = z.norm();
        if r < 1e-300 {
            return Complex64::default();
        }
        let rc = r.max(floor);
        let ra = rc.powf(exponent - 1.0);
        let rb = (exponent - 1.0) * rc.powf(exponent - 3.0);
        let dot = z.re * g.re + z.im * g.im;
        Complex64::new(ra * g.re + rb * dot * z.re, ra * g.im + rb * dot * z.im)
    })
}

fn compress_grad_floor() -> f64 {
    std::env::var("COMPRESS_FLOOR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-6)
}

/// Precomputed compressed reference spectrogram, shared across optimizer
/// iterations. `norm` is the divisor applied to the summed squared error.
#[derive(Debug, Clone)]
pub struct CompTarget {
    pub comp: Array2<Complex64>,
    pub len: usize,
    pub norm: f64,
    pub stft: StftConfig,
    pub exponent: f64,
}

/// Builds the compressed target for a reference signal zero-padded to
/// `target_len`. The normalizer is the padded frame count.
pub fn comp_target(
    reference: &[f64],
    target_len: usize,
    stft: &StftConfig,
    c: &CompressionConfig,
) -> Result<CompTarget> {
    c.validate()?;
    if reference.len() > target_len {
        return Err(Error::ShapeMismatch {
            context: "cost target length",
            expected: target_len,
            got: reference.len(),
        });
    }
    let mut padded = reference.to_vec();
    padded.resize(target_len, 0.0);
    let s = signal::stft_samples(&padded, stft)?;
    let frames = s.frames();
    Ok(CompTarget {
        comp: compress_matrix(&s.data, c.exponent),
        len: target_len,
        norm: frames as f64,
        stft: *stft,
        exponent: c.exponent,
    })
}

/// Squared distance between compressed spectrograms, averaged over frames.
/// Inputs of unequal length are zero-padded to the longer one.
pub fn cost(y: &Waveform, yhat: &Waveform, stft: &StftConfig, c: &CompressionConfig) -> Result<f64> {
    let target_len = y.len().max(yhat.len());
    let target = comp_target(&y.samples, target_len, stft, c)?;
    let mut padded = yhat.samples.clone();
    padded.resize(target_len, 0.0);
    let (value, _) = cost_forward(&padded, &target)?;
    Ok(value)
}

struct CostTape {
    s_yhat: Array2<Complex64>,
    diff: Array2<Complex64>,
    frames: usize,
}

fn cost_forward(yhat: &[f64], target: &CompTarget) -> Result<(f64, CostTape)> {
    if yhat.len() != target.len {
        return Err(Error::ShapeMismatch {
            context: "cost estimate length",
            expected: target.len,
            got: yhat.len(),
        });
    }
    let s = signal::stft_samples(yhat, &target.stft)?;
    let comp = compress_matrix(&s.data, target.exponent);
    let diff = &comp - &target.comp;
    let value = diff.iter().map(|z| z.norm_sqr()).sum::<f64>() / target.norm;
    let frames = s.frames();
    Ok((
        value,
        CostTape {
            s_yhat: s.data,
            diff,
            frames,
        },
    ))
}

/// Cost of an estimate waveform against a precomputed target.
pub fn cost_value(yhat: &[f64], target: &CompTarget) -> Result<f64> {
    Ok(cost_forward(yhat, target)?.0)
}

/// Cost value and its gradient with respect to the estimate waveform.
pub(crate) fn cost_grad_wave(yhat: &[f64], target: &CompTarget) -> Result<(f64, Vec<f64>)> {
    let (value, tape) = cost_forward(yhat, target)?;
    let cot_comp = tape.diff.mapv(|z| z * (2.0 / target.norm));
    let cot_s = compress_vjp(&tape.s_yhat, &cot_comp, target.exponent);
    let grad = signal::stft_adjoint(&cot_s, &target.stft, yhat.len());
    let _ = tape.frames;
    Ok((value, grad))
}

/// Cost of rendering `x0` through the unprojected operator for parameters
/// `p`, with gradients pulled back to every parameter class.
pub fn cost_grad_psi(
    p: &RirParams,
    cfg: &OperatorConfig,
    x0_spec: &Spectrogram,
    target: &CompTarget,
) -> Result<(f64, RirGrads)> {
    let tape = operator::operator_forward(x0_spec, p, cfg)?;
    let (value, cot_wave) = cost_grad_wave(&tape.y_wave, target)?;
    let grads = operator::operator_backward_psi(&tape, x0_spec, p, cfg, &cot_wave);
    Ok((value, grads))
}

/// Cost of rendering `x0` through a fixed kernel, with the gradient pulled
/// back to the input waveform.
pub fn cost_grad_x0(
    kernel: &Spectrogram,
    x0: &[f64],
    target: &CompTarget,
) -> Result<(f64, Vec<f64>)> {
    let x_spec = signal::stft_samples(x0, &target.stft)?;
    let y_spec = operator::subband_convolve(&x_spec, kernel)?;
    let yhat = signal::istft_samples(&y_spec, y_spec.len)?;
    let (value, cot_wave) = cost_grad_wave(&yhat, target)?;
    let grad = operator::operator_backward_x(
        kernel,
        y_spec.frames(),
        x_spec.frames(),
        x0.len(),
        &target.stft,
        &cot_wave,
    );
    Ok((value, grad))
}

/// Gradient-norm-normalized likelihood weight.
pub fn likelihood_weight(grad_norm: f64, n_elems: usize, zeta_prime: f64) -> f64 {
    zeta_prime * (n_elems as f64).sqrt() / (grad_norm + 1e-8)
}

/// How the likelihood gradient is scaled before entering the posterior
/// score.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaStrategy {
    /// Scale by `zeta' * sqrt(L) / ||grad||`.
    GradNorm { zeta_prime: f64 },
    /// Fixed weight, the theoretical `1/(2 eta^2)` form.
    Constant { value: f64 },
}

impl ZetaStrategy {
    pub fn weight(&self, grad_norm: f64, n_elems: usize) -> f64 {
        match *self {
            ZetaStrategy::GradNorm { zeta_prime } => {
                likelihood_weight(grad_norm, n_elems, zeta_prime)
            }
            ZetaStrategy::Constant { value } => value,
        }
    }
}

/// Noise regularizer on the rendered RIR: distance between the compressed
/// kernel waveform and a noisy frozen copy, with gradients flowing only
/// through the first term.
pub fn noise_regularizer(
    p: &RirParams,
    cfg: &OperatorConfig,
    c: &CompressionConfig,
    sigma_p: f64,
    seed: u64,
) -> Result<(f64, RirGrads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rir_len = rendered_rir_len(cfg);
    let noise: Vec<f64> = (0..rir_len)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    regularizer_with_noise(p, cfg, c, sigma_p, &noise)
}

/// Length of the waveform produced by rendering the kernel from a unit
/// impulse.
pub(crate) fn rendered_rir_len(cfg: &OperatorConfig) -> usize {
    let impulse_frames = cfg.stft.frame_count(cfg.stft.window_len);
    cfg.stft
        .len_for_frames(impulse_frames + cfg.n_frames - 1)
}

pub fn regularizer_with_noise(
    p: &RirParams,
    cfg: &OperatorConfig,
    c: &CompressionConfig,
    sigma_p: f64,
    noise: &[f64],
) -> Result<(f64, RirGrads)> {
    if sigma_p < 0.0 {
        return Err(Error::InvalidConfig("regularizer noise level must be >= 0".into()));
    }
    let delta = Waveform::impulse(&cfg.stft, 0);
    let delta_spec = signal::stft_samples(&delta.samples, &cfg.stft)?;
    let tape = operator::operator_forward(&delta_spec, p, cfg)?;
    let rendered = &tape.y_wave;
    if noise.len() != rendered.len() {
        return Err(Error::ShapeMismatch {
            context: "regularizer noise length",
            expected: rendered.len(),
            got: noise.len(),
        });
    }

    // Frozen copy: the rendered kernel plus scaled noise, held constant.
    let frozen: Vec<f64> = rendered
        .iter()
        .zip(noise)
        .map(|(h, v)| h + sigma_p * v)
        .collect();
    let mut target = comp_target(&frozen, frozen.len(), &cfg.stft, c)?;
    target.norm = cfg.n_frames as f64;

    let (value, cot_wave) = cost_grad_wave(rendered, &target)?;
    let grads = operator::operator_backward_psi(&tape, &delta_spec, p, cfg, &cot_wave);
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::BandLayout;
    use crate::signal::WindowKind;
    use approx::assert_relative_eq;
    use ndarray::Array2;
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

    fn tiny_cfg(n_frames: usize) -> OperatorConfig {
        OperatorConfig {
            n_frames,
            stft: tiny_stft(),
            bands: BandLayout {
                centers: vec![2, 9, 20, 30],
            },
        }
    }

    #[test]
    fn compress_examples() {
        let cfg = tiny_stft();
        let mut data = Array2::<Complex64>::default((6, cfg.bins()));
        data[(0, 0)] = Complex64::new(8.0, 0.0);
        data[(0, 1)] = Complex64::new(-8.0, 0.0);
        data[(1, 2)] = Complex64::new(0.0, 8.0);
        let s = Spectrogram::from_data(data, cfg).unwrap();

        let two_thirds = CompressionConfig::default();
        let c = compress(&s, &two_thirds);
        assert_relative_eq!(c.data[(0, 0)].re, 4.0, max_relative = 1e-12);
        assert_relative_eq!(c.data[(0, 1)].re, -4.0, max_relative = 1e-12);
        assert_relative_eq!(c.data[(1, 2)].im, 4.0, max_relative = 1e-12);
        assert_eq!(c.data[(3, 3)], Complex64::default());

        let ident = CompressionConfig { exponent: 1.0 };
        let c1 = compress(&s, &ident);
        assert_eq!(c1.data, s.data);
    }

    #[test]
    fn cost_zero_and_symmetry() {
        let cfg = tiny_stft();
        let c = CompressionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = Waveform::new((0..200).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000);
        let z = Waveform::new((0..200).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000);
        assert_eq!(cost(&y, &y, &cfg, &c).unwrap(), 0.0);
        let a = cost(&y, &z, &cfg, &c).unwrap();
        let b = cost(&z, &y, &cfg, &c).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
        assert!(a > 0.0);
    }

    #[test]
    fn cost_of_impulse_against_zero_closed_form() {
        // Every frame that sees the impulse contributes K * w^(2e) where w is
        // the window value at the impulse position.
        let cfg = tiny_stft();
        let c = CompressionConfig::default();
        let delta = Waveform::impulse(&cfg, 16000);
        let zero = Waveform::new(vec![0.0; delta.len()], 16000);
        let got = cost(&delta, &zero, &cfg, &c).unwrap();

        let window = cfg.window_values();
        let frames = cfg.frame_count(delta.len());
        let mut sum = 0.0;
        for m in 0..frames {
            let pos = cfg.pad() as i64 - (m * cfg.hop) as i64;
            if pos >= 0 && (pos as usize) < cfg.window_len {
                sum += window[pos as usize].powf(2.0 * c.exponent);
            }
        }
        let expect = cfg.bins() as f64 * sum / frames as f64;
        assert_relative_eq!(got, expect, max_relative = 1e-10);
    }

    #[test]
    fn exponent_one_cost_is_quadratic() {
        // With no compression the cost is a quadratic form, so scaling the
        // residual scales the cost by the square.
        let cfg = tiny_stft();
        let c = CompressionConfig { exponent: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..150).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..150).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mk = |scale: f64| {
            Waveform::new(
                y.iter().zip(&d).map(|(a, b)| a + scale * b).collect(),
                16000,
            )
        };
        let yw = Waveform::new(y.clone(), 16000);
        let c1 = cost(&yw, &mk(1.0), &cfg, &c).unwrap();
        let c2 = cost(&yw, &mk(2.0), &cfg, &c).unwrap();
        assert_relative_eq!(c2, 4.0 * c1, max_relative = 1e-10);
    }

    #[test]
    fn likelihood_weight_examples() {
        let n = 1024;
        let z = likelihood_weight((n as f64).sqrt(), n, 0.5);
        assert_relative_eq!(z, 0.5, max_relative = 1e-6);

        let degenerate = likelihood_weight(0.0, n, 0.5);
        assert!(degenerate.is_finite());
        assert_relative_eq!(degenerate, 0.5 * (n as f64).sqrt() / 1e-8, max_relative = 1e-9);

        let half = likelihood_weight(2.0, n, 0.5) / likelihood_weight(1.0, n, 0.5);
        assert_relative_eq!(half, 0.5, epsilon = 1e-7);
    }

    #[test]
    fn sigma_prime_clamps() {
        let sched = RegularizerSchedule::default();
        assert_eq!(sigma_prime(0.5, &sched), 1e-2);
        assert_eq!(sigma_prime(1e-4, &sched), 5e-4);
        assert_eq!(sigma_prime(5e-3, &sched), 5e-3);
    }

    #[test]
    fn regularizer_zero_noise_is_zero() {
        let cfg = tiny_cfg(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = RirParams::init(&cfg, &mut rng);
        let (value, grads) = noise_regularizer(&p, &cfg, &CompressionConfig::default(), 0.0, 9).unwrap();
        assert_eq!(value, 0.0);
        assert!(grads.weights_db.iter().all(|&g| g == 0.0));
        assert!(grads.decays.iter().all(|&g| g == 0.0));
        assert!(grads.phases.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn regularizer_deterministic_and_monotone_in_noise() {
        let cfg = tiny_cfg(6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = RirParams::init(&cfg, &mut rng);
        let c = CompressionConfig::default();

        let (v1, _) = noise_regularizer(&p, &cfg, &c, 5e-3, 42).unwrap();
        let (v2, _) = noise_regularizer(&p, &cfg, &c, 5e-3, 42).unwrap();
        assert_eq!(v1, v2);

        let mean = |sp: f64| -> f64 {
            (0..1000)
                .map(|s| noise_regularizer(&p, &cfg, &c, sp, s).unwrap().0)
                .sum::<f64>()
                / 1000.0
        };
        let lo = mean(1e-3);
        let mid = mean(5e-3);
        let hi = mean(2e-2);
        assert!(lo < mid && mid < hi, "{lo} {mid} {hi}");
    }

    #[test]
    fn likelihood_weight_depends_only_on_norm() {
        let g1 = [3.0, 4.0, 0.0];
        let g2 = [0.0, 4.0, 3.0];
        let n1 = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n2 = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_eq!(
            likelihood_weight(n1, 3, 0.5),
            likelihood_weight(n2, 3, 0.5)
        );
    }
}
