//! The parametric reverberation operator: per-band exponentially decaying
//! magnitudes interpolated across frequency, free phases, subband convolution
//! along STFT frames, and the projection that keeps the estimated RIR
//! consistent, minimum-phase and unit-gain on the direct path.

use crate::error::{Error, Result};
use crate::fft;
use crate::signal::{self, Spectrogram, StftConfig, Waveform};
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

const LN10_OVER_20: f64 = std::f64::consts::LN_10 / 20.0;

/// Frequency bins at which the decay model is parameterized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandLayout {
    pub centers: Vec<usize>,
}

impl BandLayout {
    /// The 26-band layout for 16 kHz audio: 125 Hz spacing up to 1 kHz,
    /// 250 Hz up to 3 kHz, 500 Hz up to 8 kHz, DC excluded.
    pub fn for_16khz(stft: &StftConfig) -> Self {
        let bin_hz = 16000.0 / stft.fft_size as f64;
        let mut hz: Vec<f64> = Vec::new();
        hz.extend((1..=8).map(|i| 125.0 * i as f64));
        hz.extend((5..=12).map(|i| 250.0 * i as f64));
        hz.extend((7..=16).map(|i| 500.0 * i as f64));
        let centers = hz.iter().map(|f| (f / bin_hz).round() as usize).collect();
        BandLayout { centers }
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self, bins: usize) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::InvalidConfig("band layout needs at least one band".into()));
        }
        if !self.centers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig("band centers must be strictly ascending".into()));
        }
        if *self.centers.last().unwrap() >= bins {
            return Err(Error::InvalidConfig(format!(
                "band center {} beyond last bin {}",
                self.centers.last().unwrap(),
                bins - 1
            )));
        }
        if self.centers.len() >= bins {
            return Err(Error::InvalidConfig("more bands than frequency bins".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    /// Kernel length in STFT frames.
    pub n_frames: usize,
    pub stft: StftConfig,
    pub bands: BandLayout,
}

impl OperatorConfig {
    pub fn default_16khz() -> Self {
        let stft = StftConfig::default();
        let bands = BandLayout::for_16khz(&stft);
        OperatorConfig {
            n_frames: 100,
            stft,
            bands,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.bands.validate(self.stft.bins())?;
        if self.n_frames == 0 {
            return Err(Error::InvalidConfig("operator needs at least one frame".into()));
        }
        Ok(())
    }

    /// Time-domain length of the kernel rendered by [`subband_to_rir`].
    pub fn rir_len(&self) -> usize {
        self.stft.len_for_frames(self.n_frames)
    }
}

/// The optimization variable: per-band weights (stored in dB) and decay
/// rates, plus an unconstrained phase for every kernel entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RirParams {
    pub weights_db: Vec<f64>,
    pub decays: Vec<f64>,
    pub phases: Array2<f64>,
}

impl RirParams {
    pub const WEIGHT_DB_MIN: f64 = 0.0;
    pub const WEIGHT_DB_MAX: f64 = 40.0;
    pub const DECAY_MIN: f64 = 0.5;
    pub const DECAY_MAX: f64 = 28.0;

    /// Default initialization: unit weights, mid-box decays, uniform random
    /// phases drawn from the provided generator.
    pub fn init<R: Rng>(cfg: &OperatorConfig, rng: &mut R) -> Self {
        let b = cfg.bands.count();
        let phases = Array2::from_shape_fn((cfg.n_frames, cfg.stft.bins()), |_| {
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)
        });
        RirParams {
            weights_db: vec![0.0; b],
            decays: vec![10.0; b],
            phases,
        }
    }

    pub fn validate(&self, cfg: &OperatorConfig) -> Result<()> {
        let b = cfg.bands.count();
        if self.weights_db.len() != b {
            return Err(Error::ShapeMismatch {
                context: "rir weights",
                expected: b,
                got: self.weights_db.len(),
            });
        }
        if self.decays.len() != b {
            return Err(Error::ShapeMismatch {
                context: "rir decays",
                expected: b,
                got: self.decays.len(),
            });
        }
        if self.phases.dim() != (cfg.n_frames, cfg.stft.bins()) {
            return Err(Error::ShapeMismatch {
                context: "rir phases",
                expected: cfg.n_frames * cfg.stft.bins(),
                got: self.phases.len(),
            });
        }
        let finite = self.weights_db.iter().chain(self.decays.iter()).all(|v| v.is_finite())
            && self.phases.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("rir parameters"));
        }
        Ok(())
    }
}

/// Gradients with the same shape as [`RirParams`].
#[derive(Debug, Clone)]
pub struct RirGrads {
    pub weights_db: Vec<f64>,
    pub decays: Vec<f64>,
    pub phases: Array2<f64>,
}

impl RirGrads {
    pub fn zeros(cfg: &OperatorConfig) -> Self {
        RirGrads {
            weights_db: vec![0.0; cfg.bands.count()],
            decays: vec![0.0; cfg.bands.count()],
            phases: Array2::zeros((cfg.n_frames, cfg.stft.bins())),
        }
    }

    pub fn add_assign(&mut self, other: &RirGrads) {
        for (a, b) in self.weights_db.iter_mut().zip(&other.weights_db) {
            *a += b;
        }
        for (a, b) in self.decays.iter_mut().zip(&other.decays) {
            *a += b;
        }
        self.phases += &other.phases;
    }
}

/// Per-bin interpolation stencil: `(left band, right band, fraction)`.
fn lerp_table(bands: &BandLayout, bins: usize) -> Vec<(usize, usize, f64)> {
    let c = &bands.centers;
    let last = c.len() - 1;
    let mut table = Vec::with_capacity(bins);
    let mut seg = 0usize;
    for k in 0..bins {
        if k <= c[0] {
            table.push((0, 0, 0.0));
        } else if k >= c[last] {
            table.push((last, last, 0.0));
        } else {
            while k > c[seg + 1] {
                seg += 1;
            }
            let lam = (k - c[seg]) as f64 / (c[seg + 1] - c[seg]) as f64;
            table.push((seg, seg + 1, lam));
        }
    }
    table
}

/// Kernel magnitudes: per-band `w_b * exp(-alpha_b * n)` interpolated
/// log-linearly across frequency, with nearest-band extension outside the
/// band centers.
pub fn magnitude_from_params(p: &RirParams, cfg: &OperatorConfig) -> Array2<f64> {
    let bins = cfg.stft.bins();
    let table = lerp_table(&cfg.bands, bins);
    let log_w: Vec<f64> = p.weights_db.iter().map(|db| db * LN10_OVER_20).collect();
    let mut a = Array2::zeros((cfg.n_frames, bins));
    for n in 0..cfg.n_frames {
        let nf = n as f64;
        for (k, &(lb, rb, lam)) in table.iter().enumerate() {
            let left = log_w[lb] - p.decays[lb] * nf;
            let right = log_w[rb] - p.decays[rb] * nf;
            a[(n, k)] = ((1.0 - lam) * left + lam * right).exp();
        }
    }
    a
}

/// Pulls a cotangent on the magnitude matrix back to the band parameters.
fn magnitude_vjp(
    cfg: &OperatorConfig,
    a: &Array2<f64>,
    cot_a: &Array2<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let bins = cfg.stft.bins();
    let table = lerp_table(&cfg.bands, bins);
    let b = cfg.bands.count();
    let mut cot_log_w = vec![0.0; b];
    let mut cot_alpha = vec![0.0; b];
    for n in 0..cfg.n_frames {
        let nf = n as f64;
        for (k, &(lb, rb, lam)) in table.iter().enumerate() {
            let cot_log = cot_a[(n, k)] * a[(n, k)];
            cot_log_w[lb] += (1.0 - lam) * cot_log;
            cot_alpha[lb] -= (1.0 - lam) * nf * cot_log;
            if rb != lb {
                cot_log_w[rb] += lam * cot_log;
                cot_alpha[rb] -= lam * nf * cot_log;
            }
        }
    }
    let cot_db = cot_log_w.iter().map(|c| c * LN10_OVER_20).collect();
    (cot_db, cot_alpha)
}

/// Combines magnitudes and phases into the complex subband kernel.
pub fn assemble_rir(p: &RirParams, cfg: &OperatorConfig) -> Result<Spectrogram> {
    p.validate(cfg)?;
    let a = magnitude_from_params(p, cfg);
    Ok(assemble_from_magnitudes(&a, &p.phases, cfg))
}

pub(crate) fn assemble_from_magnitudes(
    a: &Array2<f64>,
    phases: &Array2<f64>,
    cfg: &OperatorConfig,
) -> Spectrogram {
    let data = Array2::from_shape_fn(a.dim(), |idx| {
        let (s, c) = phases[idx].sin_cos();
        Complex64::new(a[idx] * c, a[idx] * s)
    });
    Spectrogram {
        data,
        len: cfg.rir_len(),
        cfg: cfg.stft,
    }
}

fn assemble_vjp(
    a: &Array2<f64>,
    phases: &Array2<f64>,
    cot_h: &Array2<Complex64>,
) -> (Array2<f64>, Array2<f64>) {
    let cot_a = Array2::from_shape_fn(a.dim(), |idx| {
        let (s, c) = phases[idx].sin_cos();
        cot_h[idx].re * c + cot_h[idx].im * s
    });
    let cot_phi = Array2::from_shape_fn(a.dim(), |idx| {
        let (s, c) = phases[idx].sin_cos();
        a[idx] * (-cot_h[idx].re * s + cot_h[idx].im * c)
    });
    (cot_a, cot_phi)
}

/// Convolution along the time (frame) axis, independently per frequency bin.
/// The result has `M + N_h - 1` frames.
pub fn subband_convolve(x: &Spectrogram, h: &Spectrogram) -> Result<Spectrogram> {
    if x.bins() != h.bins() {
        return Err(Error::ShapeMismatch {
            context: "subband convolution bins",
            expected: x.bins(),
            got: h.bins(),
        });
    }
    let (m, nh, bins) = (x.frames(), h.frames(), x.bins());
    let out_frames = m + nh - 1;
    let cols: Vec<Vec<Complex64>> = (0..bins)
        .into_par_iter()
        .map(|k| {
            let xc: Vec<Complex64> = x.data.column(k).to_vec();
            let hc: Vec<Complex64> = h.data.column(k).to_vec();
            let mut out = vec![Complex64::default(); out_frames];
            for (n, hv) in hc.iter().enumerate() {
                if hv.re == 0.0 && hv.im == 0.0 {
                    continue;
                }
                for (i, xv) in xc.iter().enumerate() {
                    out[i + n] += hv * xv;
                }
            }
            out
        })
        .collect();
    let mut data = Array2::default((out_frames, bins));
    for (k, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[(i, k)] = *v;
        }
    }
    Ok(Spectrogram {
        data,
        len: x.len + (nh - 1) * x.cfg.hop,
        cfg: x.cfg,
    })
}

/// Cotangent on the kernel: correlation of the output cotangent with the
/// conjugated input.
pub(crate) fn conv_vjp_h(
    x: &Spectrogram,
    cot_y: &Array2<Complex64>,
    n_frames: usize,
) -> Array2<Complex64> {
    let (m, bins) = (x.frames(), x.bins());
    let cols: Vec<Vec<Complex64>> = (0..bins)
        .into_par_iter()
        .map(|k| {
            let xc: Vec<Complex64> = x.data.column(k).to_vec();
            let gc: Vec<Complex64> = cot_y.column(k).to_vec();
            let mut out = vec![Complex64::default(); n_frames];
            for (n, o) in out.iter_mut().enumerate() {
                let mut acc = Complex64::default();
                for (i, xv) in xc.iter().enumerate().take(m.min(gc.len().saturating_sub(n))) {
                    acc += gc[i + n] * xv.conj();
                }
                *o = acc;
            }
            out
        })
        .collect();
    let mut data = Array2::default((n_frames, bins));
    for (k, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[(i, k)] = *v;
        }
    }
    data
}

/// Cotangent on the input: correlation of the output cotangent with the
/// conjugated kernel.
pub(crate) fn conv_vjp_x(
    h: &Spectrogram,
    cot_y: &Array2<Complex64>,
    m_frames: usize,
) -> Array2<Complex64> {
    let (nh, bins) = (h.frames(), h.bins());
    let cols: Vec<Vec<Complex64>> = (0..bins)
        .into_par_iter()
        .map(|k| {
            let hc: Vec<Complex64> = h.data.column(k).to_vec();
            let gc: Vec<Complex64> = cot_y.column(k).to_vec();
            let mut out = vec![Complex64::default(); m_frames];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = Complex64::default();
                for (n, hv) in hc.iter().enumerate().take(nh.min(gc.len().saturating_sub(i))) {
                    acc += gc[i + n] * hv.conj();
                }
                *o = acc;
            }
            out
        })
        .collect();
    let mut data = Array2::default((m_frames, bins));
    for (k, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[(i, k)] = *v;
        }
    }
    data
}

/// Replaces a filter by its minimum-phase equivalent with the same magnitude
/// spectrum, via the real-cepstrum construction: fold the cepstrum onto
/// positive quefrencies and exponentiate back.
pub fn min_phase_project(h: &[f64]) -> Result<Vec<f64>> {
    if h.is_empty() {
        return Err(Error::InvalidConfig("min-phase projection of empty signal".into()));
    }
    if h.iter().all(|&v| v == 0.0) {
        return Err(Error::Numerical(
            "min-phase projection undefined for an all-zero signal".into(),
        ));
    }
    let nfft = (8 * h.len()).next_power_of_two().max(4096);
    let mut spec: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    spec.resize(nfft, Complex64::default());
    fft::fft_inplace(&mut spec);

    // Magnitude floor regularizes spectral zeros before the log.
    let mut cep: Vec<Complex64> = spec
        .iter()
        .map(|z| Complex64::new(z.norm().max(1e-8).ln(), 0.0))
        .collect();
    fft::ifft_inplace(&mut cep);

    let half = nfft / 2;
    let mut folded = vec![Complex64::default(); nfft];
    folded[0] = Complex64::new(cep[0].re, 0.0);
    folded[half] = Complex64::new(cep[half].re, 0.0);
    for q in 1..half {
        folded[q] = Complex64::new(2.0 * cep[q].re, 0.0);
    }
    fft::fft_inplace(&mut folded);
    let mut min_spec: Vec<Complex64> = folded.iter().map(|z| z.exp()).collect();
    fft::ifft_inplace(&mut min_spec);
    Ok(min_spec[..h.len()].iter().map(|z| z.re).collect())
}

/// Analyzes a time-domain kernel into the subband domain. The analysis
/// anchors lag zero at frame zero so that a unit impulse maps to the
/// identity kernel row and back.
pub fn rir_to_subband(h: &[f64], cfg: &OperatorConfig) -> Result<Spectrogram> {
    let mut s = signal::stft_samples(h, &cfg.stft)?;
    advance_phases(&mut s.data, &cfg.stft, 1.0);
    Ok(s)
}

/// Renders a subband kernel to its time-domain filter.
pub fn subband_to_rir(h: &Spectrogram, cfg: &OperatorConfig) -> Result<Vec<f64>> {
    let mut shifted = h.clone();
    advance_phases(&mut shifted.data, &cfg.stft, -1.0);
    let len = cfg.stft.len_for_frames(h.frames());
    signal::istft_samples(&shifted, len)
}

/// Per-bin linear phase of `sign * pad` samples, compensating the analysis
/// padding so kernel frame n corresponds to a lag of exactly n hops.
fn advance_phases(data: &mut Array2<Complex64>, cfg: &StftConfig, sign: f64) {
    let f = cfg.fft_size as f64;
    let pad = cfg.pad() as f64;
    let twiddle: Vec<Complex64> = (0..cfg.bins())
        .map(|k| Complex64::from_polar(1.0, sign * std::f64::consts::TAU * pad * k as f64 / f))
        .collect();
    for mut row in data.rows_mut() {
        for (z, t) in row.iter_mut().zip(&twiddle) {
            *z *= t;
        }
    }
}

/// The kernel projection: render to the time domain, force minimum phase,
/// pin the direct path to a unit first sample, and re-analyze.
pub fn apply_projection(h: &Spectrogram, cfg: &OperatorConfig) -> Result<Spectrogram> {
    let time = subband_to_rir(h, cfg)?;
    let mut min = min_phase_project(&time)?;
    min[0] = 1.0;
    let mut out = rir_to_subband(&min, cfg)?;
    // Re-analysis of the canonical length reproduces the frame count; guard
    // against off-by-one drift for unusual geometries.
    match out.frames().cmp(&cfg.n_frames) {
        std::cmp::Ordering::Equal => {}
        std::cmp::Ordering::Greater => {
            out.data = out.data.slice_move(ndarray::s![..cfg.n_frames, ..]);
        }
        std::cmp::Ordering::Less => {
            let mut data = Array2::default((cfg.n_frames, out.bins()));
            data.slice_mut(ndarray::s![..out.frames(), ..]).assign(&out.data);
            out.data = data;
        }
    }
    out.len = cfg.rir_len();
    Ok(out)
}

/// Time-domain RIR rendered by the projection, with `h[0] = 1` exact.
pub fn projected_rir_waveform(h: &Spectrogram, cfg: &OperatorConfig) -> Result<Vec<f64>> {
    let time = subband_to_rir(h, cfg)?;
    let mut min = min_phase_project(&time)?;
    min[0] = 1.0;
    Ok(min)
}

/// The full forward operator for explicit parameters (unprojected kernel).
pub fn apply_operator(x: &Waveform, p: &RirParams, cfg: &OperatorConfig) -> Result<Waveform> {
    let h = assemble_rir(p, cfg)?;
    apply_operator_kernel(x, &h)
}

/// The forward operator for a fixed subband kernel, such as the projected
/// kernel or a measured RIR representation.
pub fn apply_operator_kernel(x: &Waveform, h: &Spectrogram) -> Result<Waveform> {
    let xs = signal::stft_samples(&x.samples, &h.cfg)?;
    let y = subband_convolve(&xs, h)?;
    let samples = signal::istft_samples(&y, y.len)?;
    Ok(Waveform::new(samples, x.sample_rate))
}

/// Rect-window partition of a measured time-domain RIR into hop-aligned
/// chunks, one kernel frame per chunk. Unlike the overlapped analysis this
/// keeps a unit impulse exactly on the identity kernel.
pub fn measured_rir_to_kernel(h: &[f64], cfg: &OperatorConfig) -> Result<Spectrogram> {
    if h.is_empty() {
        return Err(Error::SignalTooShort { len: 0, min: 1 });
    }
    let hop = cfg.stft.hop;
    let frames = h.len().div_ceil(hop);
    let mut data = Array2::default((frames, cfg.stft.bins()));
    let mut chunk = vec![0.0f64; cfg.stft.fft_size];
    for n in 0..frames {
        chunk.iter_mut().for_each(|c| *c = 0.0);
        for t in 0..hop.min(h.len() - n * hop) {
            chunk[t] = h[n * hop + t];
        }
        let spec = fft::rfft(&chunk);
        data.row_mut(n).iter_mut().zip(&spec).for_each(|(d, s)| *d = *s);
    }
    Spectrogram::from_data(data, cfg.stft)
}

/// Waveform-domain kernel rendered through the unprojected operator from a
/// unit impulse.
pub fn operator_forward_value(p: &RirParams, cfg: &OperatorConfig) -> Result<Vec<f64>> {
    let delta = Waveform::impulse(&cfg.stft, 0);
    let x_spec = signal::stft_samples(&delta.samples, &cfg.stft)?;
    let tape = operator_forward(&x_spec, p, cfg)?;
    Ok(tape.y_wave)
}

/// Intermediates of one unprojected forward pass, kept for the backward
/// sweep.
pub(crate) struct OperatorTape {
    pub a: Array2<f64>,
    pub h: Spectrogram,
    pub y_spec: Spectrogram,
    pub y_wave: Vec<f64>,
}

pub(crate) fn operator_forward(
    x_spec: &Spectrogram,
    p: &RirParams,
    cfg: &OperatorConfig,
) -> Result<OperatorTape> {
    let a = magnitude_from_params(p, cfg);
    let h = assemble_from_magnitudes(&a, &p.phases, cfg);
    let y_spec = subband_convolve(x_spec, &h)?;
    let y_wave = signal::istft_samples(&y_spec, y_spec.len)?;
    Ok(OperatorTape {
        a,
        h,
        y_spec,
        y_wave,
    })
}

/// Backward sweep from a cotangent on the output waveform to the parameters.
pub(crate) fn operator_backward_psi(
    tape: &OperatorTape,
    x_spec: &Spectrogram,
    p: &RirParams,
    cfg: &OperatorConfig,
    cot_y_wave: &[f64],
) -> RirGrads {
    let cot_y_spec = signal::istft_adjoint(cot_y_wave, tape.y_spec.frames(), &cfg.stft);
    let cot_h = conv_vjp_h(x_spec, &cot_y_spec, cfg.n_frames);
    let (cot_a, cot_phi) = assemble_vjp(&tape.a, &p.phases, &cot_h);
    let (weights_db, decays) = magnitude_vjp(cfg, &tape.a, &cot_a);
    RirGrads {
        weights_db,
        decays,
        phases: cot_phi,
    }
}

/// Backward sweep from a cotangent on the output waveform to the input
/// waveform, for a fixed kernel.
pub(crate) fn operator_backward_x(
    h: &Spectrogram,
    out_frames: usize,
    in_frames: usize,
    in_len: usize,
    cfg: &StftConfig,
    cot_y_wave: &[f64],
) -> Vec<f64> {
    let cot_y_spec = signal::istft_adjoint(cot_y_wave, out_frames, cfg);
    let cot_x_spec = conv_vjp_x(h, &cot_y_spec, in_frames);
    signal::stft_adjoint(&cot_x_spec, cfg, in_len)
}

/// Exact reverse-mode gradients of [`apply_operator`] with respect to both
/// the input waveform and every parameter class.
pub fn operator_gradients(
    x: &Waveform,
    p: &RirParams,
    cfg: &OperatorConfig,
    cot_y: &[f64],
) -> Result<(Vec<f64>, RirGrads)> {
    let x_spec = signal::stft_samples(&x.samples, &cfg.stft)?;
    let tape = operator_forward(&x_spec, p, cfg)?;
    if cot_y.len() != tape.y_wave.len() {
        return Err(Error::ShapeMismatch {
            context: "operator cotangent",
            expected: tape.y_wave.len(),
            got: cot_y.len(),
        });
    }
    let grads = operator_backward_psi(&tape, &x_spec, p, cfg, cot_y);
    let grad_x = operator_backward_x(
        &tape.h,
        tape.y_spec.frames(),
        x_spec.frames(),
        x.len(),
        &cfg.stft,
        cot_y,
    );
    Ok((grad_x, grads))
}
