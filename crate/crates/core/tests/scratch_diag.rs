use dereverb_core::objective::{comp_target, cost_grad_psi, CompressionConfig};
use dereverb_core::operator::{assemble_rir, apply_operator_kernel, BandLayout, OperatorConfig, RirParams};
use dereverb_core::signal::{stft_samples, StftConfig, WindowKind};
use rand::prelude::*;

#[test]
fn objective_at_truth() {
    let stft = StftConfig { window_len: 128, hop: 32, fft_size: 256, window: WindowKind::Hann };
    let cfg = OperatorConfig { n_frames: 24, stft, bands: BandLayout { centers: vec![6, 16, 32, 56, 88, 120] } };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(500);
    let b = cfg.bands.count();
    let psi_true = RirParams {
        weights_db: (0..b).map(|_| rng.random_range(4.0..14.0)).collect(),
        decays: (0..b).map(|_| rng.random_range(1.0..2.2)).collect(),
        phases: ndarray::Array2::from_shape_fn((cfg.n_frames, cfg.stft.bins()), |_| rng.random_range(-3.14159..3.14159)),
    };
    let x_clean = dereverb_core::harness::speech_proxy(8000, 900, 16000, 0.05);
    let kernel = assemble_rir(&psi_true, &cfg).unwrap();
    let y_full = apply_operator_kernel(&x_clean, &kernel).unwrap();
    let comp = CompressionConfig::default();
    let x0_spec = stft_samples(&x_clean.samples, &cfg.stft).unwrap();
    let tlen = x_clean.len() + (cfg.n_frames - 1) * stft.hop;

    for (name, trunc) in [("full-y", false), ("truncated-y", true)] {
        let mut y = y_full.samples.clone();
        if trunc { y.truncate(x_clean.len()); }
        let target = comp_target(&y, tlen, &stft, &comp).unwrap();
        let (c, grads) = cost_grad_psi(&psi_true, &cfg, &x0_spec, &target).unwrap();
        let gw: f64 = grads.weights_db.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let ga: f64 = grads.decays.iter().map(|v| v.abs()).fold(0.0, f64::max);
        println!("{name}: C(psi*) = {c:.4e}, max|dW| {gw:.3e}, max|dA| {ga:.3e}, alpha grads: {:?}",
                 grads.decays.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>());
    }
}
