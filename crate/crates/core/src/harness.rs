//! Synthetic acoustic scenarios and desk-scale evaluation metrics for
//! end-to-end validation without trained models.

use crate::error::{Error, Result};
use crate::objective;
use crate::operator::{self, OperatorConfig, RirParams};
use crate::prior::ScoreModel;
use crate::sampler::{self, Settings};
use crate::signal::{self, StftConfig, Waveform};
use crate::wav;
use crate::wpe;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Families of synthetic room impulse responses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RirFamily {
    /// Drawn from the operator's own parameter box: exponentially decaying
    /// subband magnitudes with projection-consistent phases.
    InFamily {
        weight_db: (f64, f64),
        decay: (f64, f64),
        /// Scale on the uniform random phases; zero gives zero phases.
        phase_scale: f64,
    },
    /// Gaussian-noise tail under a broadband exponential envelope, outside
    /// the subband decay model.
    OutOfFamily {
        decay_per_second: f64,
        tail_gain: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticRirSpec {
    pub family: RirFamily,
    pub seed: u64,
}

/// Draws a synthetic RIR. The first sample is exactly one. In-family draws
/// also return the generating parameters for oracle checks.
pub fn generate_rir(
    spec: &SyntheticRirSpec,
    cfg: &OperatorConfig,
    sample_rate: u32,
) -> Result<(Waveform, Option<RirParams>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.family {
        RirFamily::InFamily {
            weight_db,
            decay,
            phase_scale,
        } => {
            let b = cfg.bands.count();
            let mut params = RirParams {
                weights_db: (0..b).map(|_| rng.random_range(weight_db.0..=weight_db.1)).collect(),
                decays: (0..b).map(|_| rng.random_range(decay.0..=decay.1)).collect(),
                phases: ndarray::Array2::from_shape_fn((cfg.n_frames, cfg.stft.bins()), |_| {
                    phase_scale * rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
                }),
            };
            // Settle the phases on the projection manifold so the draw is a
            // near fixed point of the kernel projection.
            for _ in 0..2 {
                let h = operator::assemble_rir(&params, cfg)?;
                let projected = operator::apply_projection(&h, cfg)?;
                params.phases = projected.data.mapv(|z| z.arg());
            }
            let h = operator::assemble_rir(&params, cfg)?;
            let time = operator::projected_rir_waveform(&h, cfg)?;
            Ok((Waveform::new(time, sample_rate), Some(params)))
        }
        RirFamily::OutOfFamily {
            decay_per_second,
            tail_gain,
        } => {
            let len = cfg.rir_len();
            let mut h = vec![0.0f64; len];
            h[0] = 1.0;
            for (t, v) in h.iter_mut().enumerate().skip(1) {
                let envelope = (-decay_per_second * t as f64 / sample_rate as f64).exp();
                *v = tail_gain * envelope * rng.random_range(-1.0..1.0);
            }
            Ok((Waveform::new(h, sample_rate), None))
        }
    }
}

/// Speech-like test material: noise bursts gated by a random telegraph
/// envelope with sharp onsets, normalized to a target standard deviation.
pub fn speech_proxy(len: usize, seed: u64, sample_rate: u32, target_std: f64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0f64; len];
    let mut lp = 0.0;
    let mut env = 0.3f64;
    let mut target = 0.6f64;
    let mut next_switch = 0usize;
    for (t, v) in x.iter_mut().enumerate() {
        if t >= next_switch {
            target = if rng.random_bool(0.35) {
                0.08
            } else {
                rng.random_range(0.3..1.0)
            };
            next_switch = t + rng.random_range(300..1800);
        }
        env += 0.08 * (target - env);
        let white: f64 = rng.random_range(-1.0..1.0);
        lp = 0.5 * lp + 0.5 * white;
        *v = env * lp;
    }
    let n = len as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        let g = target_std / std;
        x.iter_mut().for_each(|v| *v *= g);
    }
    Waveform::new(x, sample_rate)
}

/// Log-spectral distance in dB: frame-averaged RMS difference of
/// log-magnitude spectra, with magnitudes floored at 1e-8.
pub fn lsd(x: &Waveform, reference: &Waveform, stft: &StftConfig) -> Result<f64> {
    if x.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            context: "lsd lengths",
            expected: reference.len(),
            got: x.len(),
        });
    }
    let sx = signal::stft_samples(&x.samples, stft)?;
    let sr = signal::stft_samples(&reference.samples, stft)?;
    let bins = sx.bins() as f64;
    let mut acc = 0.0;
    for m in 0..sx.frames() {
        let mut frame = 0.0;
        for k in 0..sx.bins() {
            let a = sx.data[(m, k)].norm().max(1e-8);
            let b = sr.data[(m, k)].norm().max(1e-8);
            let d = 20.0 * (a / b).log10();
            frame += d * d;
        }
        acc += (frame / bins).sqrt();
    }
    Ok(acc / sx.frames() as f64)
}

/// Scale-invariant signal-to-distortion ratio in dB, capped at +/-100.
pub fn si_sdr(x: &Waveform, reference: &Waveform) -> Result<f64> {
    if x.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            context: "si-sdr lengths",
            expected: reference.len(),
            got: x.len(),
        });
    }
    let ref_energy: f64 = reference.samples.iter().map(|v| v * v).sum();
    if ref_energy <= 0.0 {
        return Err(Error::InvalidConfig("si-sdr reference must be non-zero".into()));
    }
    let dot: f64 = x
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(a, b)| a * b)
        .sum();
    let alpha = dot / ref_energy;
    let proj_energy = alpha * alpha * ref_energy;
    let resid_energy: f64 = x
        .samples
        .iter()
        .zip(&reference.samples)
        .map(|(a, b)| {
            let r = a - alpha * b;
            r * r
        })
        .sum();
    let ratio = if resid_energy > 0.0 {
        proj_energy / resid_energy
    } else {
        f64::INFINITY
    };
    Ok((10.0 * ratio.log10()).clamp(-100.0, 100.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub id: String,
    pub lsd_db: f64,
    pub si_sdr_db: f64,
    pub cost_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Wpe,
    Informed,
    Blind,
}

/// How reverberant inputs are synthesized from a corpus RIR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthRoute {
    /// Direct time-domain convolution, truncated to the clean length.
    TimeDomain,
    /// Through the subband operator on the measured kernel.
    Subband,
}

/// Convolves and truncates to the clean signal's length.
pub fn synthesize_reverberant(
    clean: &Waveform,
    rir: &Waveform,
    route: SynthRoute,
    cfg: &OperatorConfig,
) -> Result<Waveform> {
    match route {
        SynthRoute::TimeDomain => {
            let mut y = vec![0.0f64; clean.len()];
            for (i, xv) in clean.samples.iter().enumerate() {
                for (j, hv) in rir.samples.iter().enumerate() {
                    if i + j >= y.len() {
                        break;
                    }
                    y[i + j] += xv * hv;
                }
            }
            Ok(Waveform::new(y, clean.sample_rate))
        }
        SynthRoute::Subband => {
            let kernel = operator::measured_rir_to_kernel(&rir.samples, cfg)?;
            let mut y = operator::apply_operator_kernel(clean, &kernel)?;
            y.samples.truncate(clean.len());
            Ok(y)
        }
    }
}

/// One corpus item located on disk.
struct CorpusItem {
    id: String,
    clean: std::path::PathBuf,
    rir: std::path::PathBuf,
}

fn scan_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let mut cleans: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    let mut rirs: BTreeMap<String, std::path::PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(id) = name.strip_suffix(".clean.wav") {
            cleans.insert(id.to_string(), path.clone());
        } else if let Some(id) = name.strip_suffix(".rir.wav") {
            rirs.insert(id.to_string(), path.clone());
        }
    }
    let mut items = Vec::new();
    for (id, clean) in cleans {
        if let Some(rir) = rirs.remove(&id) {
            items.push(CorpusItem { id, clean, rir });
        } else {
            log::warn!("corpus item `{id}` has no matching .rir.wav, skipped");
        }
    }
    for id in rirs.keys() {
        log::warn!("corpus item `{id}` has no matching .clean.wav, skipped");
    }
    Ok(items)
}

/// Runs the selected pipeline over a corpus of `<id>.clean.wav` and
/// `<id>.rir.wav` pairs. Unreadable items are reported and skipped; the
/// returned rows are per-item metrics in corpus order.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    corpus: &Path,
    mode: BenchMode,
    synth: SynthRoute,
    settings: &Settings,
    seed: u64,
    model_factory: &mut dyn FnMut(&Waveform) -> Result<Box<dyn ScoreModel>>,
) -> Result<Vec<MetricReport>> {
    settings.validate()?;
    let op_cfg = settings.operator_config()?;
    let items = scan_corpus(corpus)?;
    let mut rows = Vec::new();
    for (index, item) in items.iter().enumerate() {
        let loaded = (|| -> Result<(Waveform, Waveform)> {
            let clean = wav::read_wav(&item.clean, Some(settings.sample_rate))?;
            let rir = wav::read_wav(&item.rir, Some(settings.sample_rate))?;
            Ok((clean, rir))
        })();
        let (clean, rir) = match loaded {
            Ok(pair) => pair,
            Err(e) => {
                log::warn!("corpus item `{}` unreadable: {e}; continuing", item.id);
                continue;
            }
        };
        let y = synthesize_reverberant(&clean, &rir, synth, &op_cfg)?;
        let item_seed = seed.wrapping_add(index as u64);
        let row = process_item(&item.id, &clean, &rir, &y, mode, settings, item_seed, model_factory)?;
        rows.push(row);
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn process_item(
    id: &str,
    clean: &Waveform,
    rir: &Waveform,
    y: &Waveform,
    mode: BenchMode,
    settings: &Settings,
    seed: u64,
    model_factory: &mut dyn FnMut(&Waveform) -> Result<Box<dyn ScoreModel>>,
) -> Result<MetricReport> {
    let (x0, cost_c) = match mode {
        BenchMode::Wpe => {
            let out = wpe::wpe_dereverb(y, &settings.wpe, &settings.stft)?;
            let c = objective::cost(y, &out, &settings.stft, &settings.compression)?;
            (out, c)
        }
        BenchMode::Informed => {
            let mut model = model_factory(y)?;
            let res = sampler::run_informed_inference(y, rir, model.as_mut(), settings, seed)?;
            let c = last_cost(&res).unwrap_or(f64::NAN);
            (res.x0, c)
        }
        BenchMode::Blind => {
            let mut model = model_factory(y)?;
            let res = sampler::run_blind_inference(y, model.as_mut(), settings, seed)?;
            let c = last_cost(&res).unwrap_or(f64::NAN);
            (res.x0, c)
        }
    };
    Ok(MetricReport {
        id: id.to_string(),
        lsd_db: lsd(&x0, clean, &settings.stft)?,
        si_sdr_db: si_sdr(&x0, clean)?,
        cost_c,
    })
}

fn last_cost(res: &sampler::InferenceResult) -> Option<f64> {
    res.steps.iter().rev().find_map(|s| s.cost)
}

/// Mean metrics across rows, reported under the id `aggregate`.
pub fn aggregate(rows: &[MetricReport]) -> Option<MetricReport> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some(MetricReport {
        id: "aggregate".into(),
        lsd_db: rows.iter().map(|r| r.lsd_db).sum::<f64>() / n,
        si_sdr_db: rows.iter().map(|r| r.si_sdr_db).sum::<f64>() / n,
        cost_c: rows.iter().map(|r| r.cost_c).sum::<f64>() / n,
    })
}

/// Writes the fixed-header CSV report, per-item rows followed by the
/// aggregate.
pub fn write_csv<W: Write>(w: &mut W, rows: &[MetricReport]) -> std::io::Result<()> {
    writeln!(w, "id,lsd_db,si_sdr_db,cost_c")?;
    for r in rows {
        writeln!(w, "{},{:.6},{:.6},{:.6e}", r.id, r.lsd_db, r.si_sdr_db, r.cost_c)?;
    }
    if let Some(agg) = aggregate(rows) {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6e}",
            agg.id, agg.lsd_db, agg.si_sdr_db, agg.cost_c
        )?;
    }
    Ok(())
}
