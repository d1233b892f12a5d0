//! Reverse-diffusion posterior sampling: the warped sigma ladder, the
//! stochastic Euler-Heun stepper, likelihood-score injection, and the full
//! blind loop alternating diffusion updates with RIR estimation.

use crate::error::{Error, Result};
use crate::objective::{self, CompTarget, CompressionConfig, RegularizerSchedule, ZetaStrategy};
use crate::operator::{self, OperatorConfig, RirParams};
use crate::optim::{self, AdamState, RirOptConfig};
use crate::prior::{self, ScoreModel};
use crate::signal::{self, Spectrogram, Waveform};
use crate::wpe::{self, WpeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
use serde::{Deserialize, Serialize};

/// Discrete noise-level ladder, strictly decreasing from `t_max` to `t_min`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub t_max: f64,
    pub t_min: f64,
    pub rho: f64,
    pub sigmas: Vec<f64>,
}

/// Warped discretization of the diffusion time axis. The endpoints are
/// pinned exactly.
pub fn build_schedule(t_max: f64, t_min: f64, n: usize, rho: f64) -> Result<DiffusionSchedule> {
    if !(t_max > t_min && t_min > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "schedule needs t_max > t_min > 0, got {t_max} and {t_min}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidConfig("schedule needs at least two steps".into()));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidConfig("schedule warp must be positive".into()));
    }
    let inv = 1.0 / rho;
    let (a, b) = (t_max.powf(inv), t_min.powf(inv));
    let mut sigmas: Vec<f64> = (0..n)
        .map(|i| {
            let frac = i as f64 / (n - 1) as f64;
            (a + frac * (b - a)).powf(rho)
        })
        .collect();
    sigmas[0] = t_max;
    sigmas[n - 1] = t_min;
    if !sigmas.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::Numerical("schedule is not strictly decreasing".into()));
    }
    Ok(DiffusionSchedule {
        t_max,
        t_min,
        rho,
        sigmas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmInit {
    /// Weighted prediction error output (the default).
    Wpe,
    /// The raw measurement.
    Measurement,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub s_churn: f64,
    pub s_noise: f64,
    /// Second-order Euler-Heun correction (skipped on the final step).
    pub heun: bool,
    pub zeta: ZetaStrategy,
    /// Normalize the denoised estimate to this standard deviation, when set.
    pub rescale_sigma_data: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            s_churn: 50.0,
            s_noise: 1.0,
            heun: true,
            zeta: ZetaStrategy::GradNorm { zeta_prime: 0.5 },
            rescale_sigma_data: Some(5e-2),
        }
    }
}

/// Noise re-injection raising the state from `sigma` to
/// `sigma * (1 + gamma)`.
pub fn churn_inflate<R: Rng>(
    x: &[f64],
    sigma: f64,
    s_churn: f64,
    s_noise: f64,
    n_steps: usize,
    rng: &mut R,
) -> (Vec<f64>, f64) {
    if s_churn <= 0.0 {
        return (x.to_vec(), sigma);
    }
    let gamma = (s_churn / n_steps as f64).min(std::f64::consts::SQRT_2 - 1.0);
    let sigma_hat = sigma * (1.0 + gamma);
    let spread = (sigma_hat * sigma_hat - sigma * sigma).sqrt() * s_noise;
    let out = x
        .iter()
        .map(|&v| v + spread * normal(rng))
        .collect();
    (out, sigma_hat)
}

/// The base update: `x - sigma_hat * (sigma_next - sigma_hat) * combined`,
/// where `combined` is the posterior score (prior score plus likelihood
/// term).
pub fn sampler_step(x: &[f64], sigma_hat: f64, sigma_next: f64, combined: &[f64]) -> Vec<f64> {
    let step = sigma_hat * (sigma_next - sigma_hat);
    x.iter().zip(combined).map(|(xi, ci)| xi - step * ci).collect()
}

/// Per-step record of the trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub sigma: f64,
    pub sigma_hat: f64,
    /// Measurement cost through the current kernel at the denoised estimate.
    pub cost: Option<f64>,
    /// Inner-loop cost before and after this step's RIR iterations.
    pub inner_cost_first: Option<f64>,
    pub inner_cost_last: Option<f64>,
    pub regularizer_last: Option<f64>,
    pub zeta: Option<f64>,
    pub grad_norm: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub x0: Waveform,
    pub psi: Option<RirParams>,
    /// Estimated time-domain RIR rendered from the final parameters.
    pub rir: Option<Vec<f64>>,
    pub steps: Vec<StepDiagnostics>,
    /// Measurement cost with the initial parameters and first denoised
    /// estimate, before any optimization.
    pub initial_cost: Option<f64>,
    /// Whether likelihood gradients chained through the score model
    /// ("exact") or treated the denoised estimate as a leaf ("identity").
    pub score_jacobian: &'static str,
}

/// Everything the pipelines need besides the measurement and the prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub sample_rate: u32,
    pub stft: signal::StftConfig,
    pub operator_frames: usize,
    /// Explicit band-center bins; `None` selects the 16 kHz layout.
    pub band_centers: Option<Vec<usize>>,
    pub compression: CompressionConfig,
    pub regularizer: RegularizerSchedule,
    pub adam: crate::optim::AdamConfig,
    pub inner_iterations: usize,
    pub projection_feedback: bool,
    pub t_max: f64,
    pub t_min: f64,
    pub steps: usize,
    pub rho: f64,
    pub sampler: SamplerConfig,
    pub wpe: WpeConfig,
    pub warm_init: WarmInit,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            sample_rate: 16000,
            stft: signal::StftConfig::default(),
            operator_frames: 100,
            band_centers: None,
            compression: CompressionConfig::default(),
            regularizer: RegularizerSchedule::default(),
            adam: crate::optim::AdamConfig::default(),
            inner_iterations: 10,
            projection_feedback: true,
            t_max: 0.5,
            t_min: 1e-4,
            steps: 200,
            rho: 10.0,
            sampler: SamplerConfig::default(),
            wpe: WpeConfig::default(),
            warm_init: WarmInit::Wpe,
        }
    }
}

impl Settings {
    pub fn operator_config(&self) -> Result<OperatorConfig> {
        let bands = match &self.band_centers {
            Some(centers) => operator::BandLayout {
                centers: centers.clone(),
            },
            None => operator::BandLayout::for_16khz(&self.stft),
        };
        let cfg = OperatorConfig {
            n_frames: self.operator_frames,
            stft: self.stft,
            bands,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.t_max, self.t_min, self.steps, self.rho)
    }

    pub fn rir_opt_config(&self) -> RirOptConfig {
        RirOptConfig {
            n_its: self.inner_iterations,
            adam: self.adam,
            projection_feedback: self.projection_feedback,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.operator_config()?;
        self.compression.validate()?;
        self.regularizer.validate()?;
        self.adam.validate()?;
        self.wpe.validate()?;
        self.schedule()?;
        if self.sampler.s_churn < 0.0 {
            return Err(Error::InvalidConfig("s_churn must be >= 0".into()));
        }
        if let Some(sd) = self.sampler.rescale_sigma_data {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::InvalidConfig("rescale target must be positive".into()));
            }
        }
        Ok(())
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_finite(x: &[f64], what: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

struct ScoreEval {
    score: Vec<f64>,
    x0: Vec<f64>,
    tape: Option<prior::RescaleTape>,
}

fn eval_score(
    model: &mut dyn ScoreModel,
    x: &[f64],
    sigma: f64,
    rescale: Option<f64>,
) -> Result<ScoreEval> {
    let score = model.score(x, sigma)?;
    if score.len() != x.len() {
        return Err(Error::ShapeMismatch {
            context: "score output",
            expected: x.len(),
            got: score.len(),
        });
    }
    check_finite(&score, "score output")?;
    let x0_raw: Vec<f64> = x
        .iter()
        .zip(&score)
        .map(|(xi, si)| xi + sigma * sigma * si)
        .collect();
    let (x0, tape) = match rescale {
        Some(sd) => {
            let (r, tape) = prior::rescale_forward(&x0_raw, sd);
            (r, Some(tape))
        }
        None => (x0_raw, None),
    };
    Ok(ScoreEval { score, x0, tape })
}

struct LikelihoodEval {
    g: Vec<f64>,
    cost: f64,
    zeta: f64,
    grad_norm: f64,
    exact_chain: bool,
}

fn eval_likelihood(
    model: &dyn ScoreModel,
    x: &[f64],
    sigma: f64,
    ev: &ScoreEval,
    kernel: &Spectrogram,
    target: &CompTarget,
    zeta: &ZetaStrategy,
) -> Result<LikelihoodEval> {
    let (cost, cot_x0) = objective::cost_grad_x0(kernel, &ev.x0, target)?;
    let cot_raw = match &ev.tape {
        Some(tape) => prior::rescale_vjp(tape, &cot_x0),
        None => cot_x0,
    };
    let (cot_x, exact_chain) = match model.denoise_vjp(x, sigma, &cot_raw) {
        Some(v) => (v, true),
        None => (cot_raw, false),
    };
    let grad_norm = cot_x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let z = zeta.weight(grad_norm, x.len());
    // The likelihood raises the posterior log-density as the cost falls, so
    // it enters the combined score downhill on the cost.
    let g = cot_x.iter().map(|v| -z * v).collect();
    Ok(LikelihoodEval {
        g,
        cost,
        zeta: z,
        grad_norm,
        exact_chain,
    })
}

/// Likelihood contribution to the posterior score at state `x_n`: the
/// weighted, negated gradient of the measurement cost chained through the
/// one-step denoiser. Also returns the cost value.
pub fn likelihood_score(
    x_n: &[f64],
    sigma: f64,
    model: &mut dyn ScoreModel,
    kernel: &Spectrogram,
    target: &CompTarget,
    cfg: &SamplerConfig,
) -> Result<(Vec<f64>, f64)> {
    let ev = eval_score(model, x_n, sigma, cfg.rescale_sigma_data)?;
    let lh = eval_likelihood(model, x_n, sigma, &ev, kernel, target, &cfg.zeta)?;
    Ok((lh.g, lh.cost))
}

enum OperatorMode {
    None,
    Fixed(Spectrogram),
    Blind {
        params: RirParams,
        adam: AdamState,
    },
}

struct RunOutput {
    x: Vec<f64>,
    psi: Option<RirParams>,
    steps: Vec<StepDiagnostics>,
    initial_cost: Option<f64>,
    score_jacobian: &'static str,
}

#[allow(clippy::too_many_arguments)]
fn run_reverse_loop(
    model: &mut dyn ScoreModel,
    x_init: &[f64],
    mut mode: OperatorMode,
    target: Option<&CompTarget>,
    settings: &Settings,
    op_cfg: &OperatorConfig,
    seed: u64,
) -> Result<RunOutput> {
    let sched = settings.schedule()?;
    let n = sched.sigmas.len();
    let cfg = settings.sampler;
    let mut rng_init = rng_stream(seed, 0);
    let mut rng_churn = rng_stream(seed, 2);
    let mut rng_reg = rng_stream(seed, 3);

    let mut x: Vec<f64> = x_init
        .iter()
        .map(|&v| v + sched.sigmas[0] * normal(&mut rng_init))
        .collect();

    let mut steps = Vec::with_capacity(n);
    let mut initial_cost = None;
    let mut score_jacobian = "identity";

    for i in 0..n {
        let body = |x: &mut Vec<f64>,
                    mode: &mut OperatorMode,
                    rng_churn: &mut ChaCha8Rng,
                    rng_reg: &mut ChaCha8Rng,
                    initial_cost: &mut Option<f64>,
                    score_jacobian: &mut &'static str,
                    model: &mut dyn ScoreModel|
         -> Result<StepDiagnostics> {
            let sigma = sched.sigmas[i];
            let sigma_next = if i + 1 < n { sched.sigmas[i + 1] } else { 0.0 };
            let (xh, sigma_hat) =
                churn_inflate(x, sigma, cfg.s_churn, cfg.s_noise, n, rng_churn);

            let ev = eval_score(model, &xh, sigma_hat, cfg.rescale_sigma_data)?;

            let mut diag = StepDiagnostics {
                sigma,
                sigma_hat,
                cost: None,
                inner_cost_first: None,
                inner_cost_last: None,
                regularizer_last: None,
                zeta: None,
                grad_norm: None,
            };

            // RIR estimation for the blind mode, then the operator kernel
            // used by the likelihood.
            let kernel = match mode {
                OperatorMode::None => None,
                OperatorMode::Fixed(k) => Some(k.clone()),
                OperatorMode::Blind { params, adam } => {
                    let target = target.expect("blind mode requires a target");
                    if initial_cost.is_none() {
                        let k0 = operator::assemble_rir(params, op_cfg)?;
                        let (c0, _) = objective::cost_grad_x0(&k0, &ev.x0, target)?;
                        *initial_cost = Some(c0);
                    }
                    if !settings.adam.persist_moments {
                        adam.reset();
                    }
                    let x0_spec = signal::stft_samples(&ev.x0, &op_cfg.stft)?;
                    let sp = objective::sigma_prime(sigma, &settings.regularizer);
                    let trace = optim::rir_opt_loop(
                        params,
                        adam,
                        &x0_spec,
                        target,
                        op_cfg,
                        &settings.compression,
                        sp,
                        settings.inner_iterations,
                        settings.projection_feedback,
                        rng_reg,
                    )?;
                    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                        diag.inner_cost_first = Some(first.cost);
                        diag.inner_cost_last = Some(last.cost);
                        diag.regularizer_last = Some(last.regularizer);
                    }
                    Some(operator::assemble_rir(params, op_cfg)?)
                }
            };

            let slope_at = |model: &mut dyn ScoreModel,
                            xq: &[f64],
                            sq: f64,
                            ev: &ScoreEval,
                            diag: Option<&mut StepDiagnostics>,
                            score_jacobian: &mut &'static str|
             -> Result<Vec<f64>> {
                let mut combined = ev.score.clone();
                if let (Some(k), Some(t)) = (kernel.as_ref(), target) {
                    let lh = eval_likelihood(model, xq, sq, ev, k, t, &cfg.zeta)?;
                    if lh.exact_chain {
                        *score_jacobian = "exact";
                    }
                    for (c, g) in combined.iter_mut().zip(&lh.g) {
                        *c += g;
                    }
                    if let Some(d) = diag {
                        d.cost = Some(lh.cost);
                        d.zeta = Some(lh.zeta);
                        d.grad_norm = Some(lh.grad_norm);
                    }
                }
                Ok(combined.iter().map(|c| -sq * c).collect())
            };

            let slope = slope_at(
                model,
                &xh,
                sigma_hat,
                &ev,
                Some(&mut diag),
                score_jacobian,
            )?;
            if mode_is_none(mode) && initial_cost.is_none() {
                *initial_cost = diag.cost;
            }
            let dt = sigma_next - sigma_hat;
            let euler: Vec<f64> = xh.iter().zip(&slope).map(|(v, d)| v + dt * d).collect();

            *x = if cfg.heun && sigma_next > 0.0 {
                let ev2 = eval_score(model, &euler, sigma_next, cfg.rescale_sigma_data)?;
                let slope2 = slope_at(model, &euler, sigma_next, &ev2, None, score_jacobian)?;
                xh.iter()
                    .zip(slope.iter().zip(&slope2))
                    .map(|(v, (d1, d2))| v + dt * 0.5 * (d1 + d2))
                    .collect()
            } else {
                euler
            };
            check_finite(x, "diffusion state")?;
            Ok(diag)
        };

        let diag = body(
            &mut x,
            &mut mode,
            &mut rng_churn,
            &mut rng_reg,
            &mut initial_cost,
            &mut score_jacobian,
            model,
        )
        .map_err(|e| e.at_step(n - i))?;
        steps.push(diag);
    }

    let psi = match mode {
        OperatorMode::Blind { params, .. } => Some(params),
        _ => None,
    };
    Ok(RunOutput {
        x,
        psi,
        steps,
        initial_cost,
        score_jacobian,
    })
}

fn mode_is_none(mode: &OperatorMode) -> bool {
    matches!(mode, OperatorMode::None)
}

fn warm_start(y: &Waveform, settings: &Settings) -> Result<Vec<f64>> {
    match settings.warm_init {
        WarmInit::Wpe => Ok(wpe::wpe_dereverb(y, &settings.wpe, &settings.stft)?.samples),
        WarmInit::Measurement => Ok(y.samples.clone()),
    }
}

/// Blind dereverberation: jointly samples the anechoic speech and estimates
/// the reverberation parameters.
pub fn run_blind_inference(
    y: &Waveform,
    model: &mut dyn ScoreModel,
    settings: &Settings,
    seed: u64,
) -> Result<InferenceResult> {
    settings.validate()?;
    check_finite(&y.samples, "measurement")?;
    let op_cfg = settings.operator_config()?;
    let x_init = warm_start(y, settings)?;

    let target_len = y.len() + (op_cfg.n_frames - 1) * op_cfg.stft.hop;
    let target = objective::comp_target(&y.samples, target_len, &op_cfg.stft, &settings.compression)?;

    let mut rng_psi = rng_stream(seed, 1);
    let params = RirParams::init(&op_cfg, &mut rng_psi);
    let adam = AdamState::new(settings.adam, &op_cfg);

    let out = run_reverse_loop(
        model,
        &x_init,
        OperatorMode::Blind { params, adam },
        Some(&target),
        settings,
        &op_cfg,
        seed,
    )?;

    let psi = out.psi.expect("blind run returns parameters");
    let kernel = operator::assemble_rir(&psi, &op_cfg)?;
    let rir = operator::projected_rir_waveform(&kernel, &op_cfg)?;
    Ok(InferenceResult {
        x0: Waveform::new(out.x, y.sample_rate),
        psi: Some(psi),
        rir: Some(rir),
        steps: out.steps,
        initial_cost: out.initial_cost,
        score_jacobian: out.score_jacobian,
    })
}

/// Posterior sampling with a known room impulse response; no inner
/// optimization.
pub fn run_informed_inference(
    y: &Waveform,
    rir: &Waveform,
    model: &mut dyn ScoreModel,
    settings: &Settings,
    seed: u64,
) -> Result<InferenceResult> {
    settings.validate()?;
    check_finite(&y.samples, "measurement")?;
    check_finite(&rir.samples, "rir")?;
    let op_cfg = settings.operator_config()?;
    let kernel = operator::measured_rir_to_kernel(&rir.samples, &op_cfg)?;
    let x_init = warm_start(y, settings)?;

    let target_len = y.len() + (kernel.frames() - 1) * op_cfg.stft.hop;
    let target = objective::comp_target(&y.samples, target_len, &op_cfg.stft, &settings.compression)?;

    let out = run_reverse_loop(
        model,
        &x_init,
        OperatorMode::Fixed(kernel),
        Some(&target),
        settings,
        &op_cfg,
        seed,
    )?;
    Ok(InferenceResult {
        x0: Waveform::new(out.x, y.sample_rate),
        psi: None,
        rir: None,
        steps: out.steps,
        initial_cost: out.initial_cost,
        score_jacobian: out.score_jacobian,
    })
}

/// Pure prior sampling from a given start, without any measurement term.
/// Validates the stepper against tractable priors.
pub fn sample_unconditional(
    model: &mut dyn ScoreModel,
    x_init: &[f64],
    settings: &Settings,
    seed: u64,
) -> Result<Vec<f64>> {
    let op_cfg = settings.operator_config()?;
    let out = run_reverse_loop(
        model,
        x_init,
        OperatorMode::None,
        None,
        settings,
        &op_cfg,
        seed,
    )?;
    Ok(out.x)
}
