//! Constrained Adam optimizer driving the RIR parameter search.

use crate::error::{Error, Result};
use crate::objective::{self, CompTarget, CompressionConfig};
use crate::operator::{self, OperatorConfig, RirGrads, RirParams};
use crate::signal::Spectrogram;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keep moment estimates across diffusion steps instead of resetting
    /// them with each warm start.
    pub persist_moments: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            persist_moments: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(
                "adam needs lr > 0, betas in [0, 1), eps > 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment accumulators for every parameter class.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    step: u64,
    m: RirGrads,
    v: RirGrads,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, op_cfg: &OperatorConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: RirGrads::zeros(op_cfg),
            v: RirGrads::zeros(op_cfg),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.weights_db.iter_mut().for_each(|x| *x = 0.0);
        self.m.decays.iter_mut().for_each(|x| *x = 0.0);
        self.m.phases.fill(0.0);
        self.v.weights_db.iter_mut().for_each(|x| *x = 0.0);
        self.v.decays.iter_mut().for_each(|x| *x = 0.0);
        self.v.phases.fill(0.0);
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn adam_update_slice(
    theta: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    cfg: &AdamConfig,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// One bias-corrected Adam update over all parameter classes.
pub fn adam_step(state: &mut AdamState, params: &mut RirParams, grads: &RirGrads) -> Result<()> {
    if !grads.weights_db.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient { class: "weights" });
    }
    if !grads.decays.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient { class: "decays" });
    }
    if !grads.phases.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFiniteGradient { class: "phases" });
    }
    state.step += 1;
    let cfg = state.cfg;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    adam_update_slice(
        &mut params.weights_db,
        &mut state.m.weights_db,
        &mut state.v.weights_db,
        &grads.weights_db,
        &cfg,
        bc1,
        bc2,
    );
    adam_update_slice(
        &mut params.decays,
        &mut state.m.decays,
        &mut state.v.decays,
        &grads.decays,
        &cfg,
        bc1,
        bc2,
    );
    adam_update_slice(
        params.phases.as_slice_mut().unwrap(),
        state.m.phases.as_slice_mut().unwrap(),
        state.v.phases.as_slice_mut().unwrap(),
        grads.phases.as_slice().unwrap(),
        &cfg,
        bc1,
        bc2,
    );
    Ok(())
}

fn wrap_phase(phi: f64) -> f64 {
    let r = phi.rem_euclid(std::f64::consts::TAU);
    if r > std::f64::consts::PI {
        r - std::f64::consts::TAU
    } else {
        r
    }
}

/// Clamps weights and decays into their constraint box and wraps phases to
/// `(-pi, pi]`. Idempotent.
pub fn project_params(p: &mut RirParams) {
    for w in p.weights_db.iter_mut() {
        *w = w.clamp(RirParams::WEIGHT_DB_MIN, RirParams::WEIGHT_DB_MAX);
    }
    for a in p.decays.iter_mut() {
        *a = a.clamp(RirParams::DECAY_MIN, RirParams::DECAY_MAX);
    }
    p.phases.mapv_inplace(wrap_phase);
}

/// Per-iteration values recorded by the inner loop.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InnerIteration {
    pub cost: f64,
    pub regularizer: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RirOptConfig {
    pub n_its: usize,
    pub adam: AdamConfig,
    /// Re-anchor the phase parameters on the projected kernel after every
    /// optimizer step.
    pub projection_feedback: bool,
}

impl Default for RirOptConfig {
    fn default() -> Self {
        RirOptConfig {
            n_its: 10,
            adam: AdamConfig::default(),
            projection_feedback: true,
        }
    }
}

/// The inner loop of the blind pipeline: `n_its` rounds of cost plus
/// regularizer evaluation, an Adam step, the box projection, and the kernel
/// projection realized as a phase refresh.
#[allow(clippy::too_many_arguments)]
pub fn rir_opt_loop<R: Rng>(
    params: &mut RirParams,
    state: &mut AdamState,
    x0_spec: &Spectrogram,
    target: &CompTarget,
    op_cfg: &OperatorConfig,
    comp_cfg: &CompressionConfig,
    sigma_p: f64,
    n_its: usize,
    projection_feedback: bool,
    rng: &mut R,
) -> Result<Vec<InnerIteration>> {
    let mut trace = Vec::with_capacity(n_its);
    let rir_len = objective::rendered_rir_len(op_cfg);
    for it in 0..n_its {
        let (c_val, mut grads) = objective::cost_grad_psi(params, op_cfg, x0_spec, target)?;
        // One fresh noise draw per optimizer iteration.
        let noise: Vec<f64> = (0..rir_len).map(|_| StandardNormal.sample(rng)).collect();
        let (r_val, r_grads) =
            objective::regularizer_with_noise(params, op_cfg, comp_cfg, sigma_p, &noise)?;
        grads.add_assign(&r_grads);
        adam_step(state, params, &grads)?;
        project_params(params);
        let _ = it;
        if projection_feedback {
            let h = operator::assemble_rir(params, op_cfg)?;
            let projected = operator::apply_projection(&h, op_cfg)?;
            params.phases = projected.data.mapv(|z| z.arg());
        }
        trace.push(InnerIteration {
            cost: c_val,
            regularizer: r_val,
        });
    }
    Ok(trace)
}
