//! Blind single-channel speech dereverberation by diffusion posterior
//! sampling with joint room-impulse-response estimation.
//!
//! The measurement is modeled as subband convolution in the STFT domain
//! with per-band exponentially decaying magnitudes and free phases. A
//! reverse-diffusion sampler refines the anechoic estimate under a clean
//! speech prior while an inner Adam loop fits the reverberation parameters
//! to the observed signal.

pub mod error;
mod fft;
pub mod harness;
pub mod objective;
pub mod operator;
pub mod optim;
pub mod prior;
pub mod protocol;
pub mod sampler;
pub mod signal;
pub mod wav;
pub mod wpe;

pub use error::{Error, Result};
pub use operator::{BandLayout, OperatorConfig, RirGrads, RirParams};
pub use prior::{ExternalScoreModel, GaussianPrior, ScoreModel};
pub use sampler::{DiffusionSchedule, InferenceResult, SamplerConfig, Settings};
pub use signal::{Spectrogram, StftConfig, Waveform, WindowKind};
