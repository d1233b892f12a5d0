//! Cached FFT plans and the real/half-spectrum transforms used by the STFT.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

struct PlanCache {
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
    planner: FftPlanner<f64>,
}

fn cache() -> &'static Mutex<PlanCache> {
    static CACHE: OnceLock<Mutex<PlanCache>> = OnceLock::new();
    CACHE.get_or_init(|| {
        Mutex::new(PlanCache {
            forward: HashMap::new(),
            inverse: HashMap::new(),
            planner: FftPlanner::new(),
        })
    })
}

pub(crate) fn plan_forward(n: usize) -> Arc<dyn Fft<f64>> {
    let mut c = cache().lock().unwrap();
    if let Some(p) = c.forward.get(&n) {
        return p.clone();
    }
    let p = c.planner.plan_fft_forward(n);
    c.forward.insert(n, p.clone());
    p
}

pub(crate) fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    let mut c = cache().lock().unwrap();
    if let Some(p) = c.inverse.get(&n) {
        return p.clone();
    }
    let p = c.planner.plan_fft_inverse(n);
    c.inverse.insert(n, p.clone());
    p
}

/// Forward DFT of a real buffer, returning the `n/2 + 1` non-redundant bins.
pub(crate) fn rfft(real: &[f64]) -> Vec<Complex64> {
    let n = real.len();
    let mut buf: Vec<Complex64> = real.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    plan_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    buf
}

/// Inverse of [`rfft`]: reconstructs the full spectrum by conjugate symmetry
/// and returns the real part. Imaginary components stored on the DC and
/// Nyquist bins cannot affect the (real) output and are dropped.
pub(crate) fn irfft(half: &[Complex64], n: usize) -> Vec<f64> {
    debug_assert_eq!(half.len(), n / 2 + 1);
    let mut buf = vec![Complex64::default(); n];
    buf[..half.len()].copy_from_slice(half);
    for k in 1..n / 2 {
        buf[n - k] = half[k].conj();
    }
    plan_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.into_iter().map(|z| z.re * scale).collect()
}

/// Adjoint of [`irfft`] as a real-linear map from the stored half-spectrum
/// (real and imaginary parts) to the time samples.
pub(crate) fn irfft_adjoint(cot_time: &[f64], n: usize) -> Vec<Complex64> {
    debug_assert!(cot_time.len() <= n);
    let mut buf: Vec<Complex64> = cot_time
        .iter()
        .map(|&x| Complex64::new(x, 0.0))
        .collect();
    buf.resize(n, Complex64::default());
    plan_forward(n).process(&mut buf);
    let bins = n / 2 + 1;
    let inv_n = 1.0 / n as f64;
    (0..bins)
        .map(|k| {
            let g = buf[k];
            if k == 0 || k == n / 2 {
                Complex64::new(g.re * inv_n, 0.0)
            } else {
                Complex64::new(2.0 * g.re * inv_n, 2.0 * g.im * inv_n)
            }
        })
        .collect()
}

/// Adjoint of [`rfft`]: maps a cotangent on the stored half-spectrum back to
/// the real input samples.
pub(crate) fn rfft_adjoint(cot_half: &[Complex64], n: usize) -> Vec<f64> {
    let mut buf = vec![Complex64::default(); n];
    buf[..cot_half.len()].copy_from_slice(cot_half);
    plan_inverse(n).process(&mut buf);
    // Unnormalized inverse: each stored bin is an independent functional.
    buf.into_iter().map(|z| z.re).collect()
}

/// In-place complex forward FFT.
pub(crate) fn fft_inplace(buf: &mut [Complex64]) {
    plan_forward(buf.len()).process(buf);
}

/// In-place complex inverse FFT, normalized by `1/n`.
pub(crate) fn ifft_inplace(buf: &mut [Complex64]) {
    let n = buf.len();
    plan_inverse(n).process(buf);
    let s = 1.0 / n as f64;
    for z in buf.iter_mut() {
        *z *= s;
    }
}
