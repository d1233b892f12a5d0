//! Score-model abstraction: the denoising prior interface, an exact
//! analytic Gaussian prior, rescaling of the denoised estimate, and the
//! out-of-process score model speaking the wire protocol in
//! [`crate::protocol`].

use crate::error::{Error, Result, ScoreTransportError};
use crate::protocol;
use std::io::Write;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

/// A denoising prior exposing the score of the sigma-smoothed data
/// distribution.
pub trait ScoreModel {
    /// Returns the score (gradient of the log-density) at `x` for noise
    /// level `sigma`, with the same shape as `x`.
    fn score(&mut self, x: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// Pulls a cotangent on the one-step denoised estimate back to the
    /// diffusion state. `None` means the Jacobian is unavailable and the
    /// caller should treat the estimate as a leaf.
    fn denoise_vjp(&self, _x: &[f64], _sigma: f64, _cot: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn name(&self) -> &'static str;
}

/// One-step denoising estimate of the clean signal from the score.
pub fn denoise_one_step(x: &[f64], sigma: f64, model: &mut dyn ScoreModel) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(x.to_vec());
    }
    let s = model.score(x, sigma)?;
    if s.len() != x.len() {
        return Err(Error::ShapeMismatch {
            context: "score output",
            expected: x.len(),
            got: s.len(),
        });
    }
    Ok(x.iter().zip(&s).map(|(xi, si)| xi + sigma * sigma * si).collect())
}

/// Diagonal Gaussian prior with an exact score, the tractable stand-in for
/// a trained model. With per-sample variance `c`, the one-step denoised
/// estimate is the exact posterior mean `(c*x + sigma^2*mean) / (c + sigma^2)`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if mean.len() != variances.len() {
            return Err(Error::ShapeMismatch {
                context: "gaussian prior",
                expected: mean.len(),
                got: variances.len(),
            });
        }
        if !variances.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig("gaussian prior variances must be positive".into()));
        }
        Ok(GaussianPrior { mean, variances })
    }

    pub fn uniform(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![variance; n])
    }

    /// A prior pinned tightly to a known signal; its denoised estimate is
    /// that signal regardless of the diffusion state.
    pub fn pinned(signal: &[f64]) -> Self {
        GaussianPrior {
            mean: signal.to_vec(),
            variances: vec![1e-12; signal.len()],
        }
    }
}

impl ScoreModel for GaussianPrior {
    fn score(&mut self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        gaussian_score(self, x, sigma)
    }

    fn denoise_vjp(&self, _x: &[f64], sigma: f64, cot: &[f64]) -> Option<Vec<f64>> {
        Some(
            cot.iter()
                .zip(&self.variances)
                .map(|(c, v)| c * v / (v + sigma * sigma))
                .collect(),
        )
    }

    fn name(&self) -> &'static str {
        "gaussian"
    }
}

/// Exact score of the sigma-smoothed diagonal Gaussian.
pub fn gaussian_score(g: &GaussianPrior, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if x.len() != g.mean.len() {
        return Err(Error::ShapeMismatch {
            context: "gaussian score",
            expected: g.mean.len(),
            got: x.len(),
        });
    }
    Ok(x.iter()
        .zip(g.mean.iter().zip(&g.variances))
        .map(|(xi, (mi, vi))| -(xi - mi) / (vi + sigma * sigma))
        .collect())
}

pub(crate) struct RescaleTape {
    pub applied: bool,
    pub gain: f64,
    pub input: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub(crate) fn rescale_forward(x: &[f64], sigma_data: f64) -> (Vec<f64>, RescaleTape) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 0.0 || !std.is_finite() {
        log::warn!("rescale skipped: degenerate estimate with zero spread");
        return (
            x.to_vec(),
            RescaleTape {
                applied: false,
                gain: 1.0,
                input: x.to_vec(),
                mean,
                std,
            },
        );
    }
    let gain = sigma_data / std;
    (
        x.iter().map(|v| v * gain).collect(),
        RescaleTape {
            applied: true,
            gain,
            input: x.to_vec(),
            mean,
            std,
        },
    )
}

pub(crate) fn rescale_vjp(tape: &RescaleTape, cot: &[f64]) -> Vec<f64> {
    if !tape.applied {
        return cot.to_vec();
    }
    let n = tape.input.len() as f64;
    let dot: f64 = cot.iter().zip(&tape.input).map(|(c, u)| c * u).sum();
    let coeff = tape.gain * dot / (n * tape.std * tape.std);
    cot.iter()
        .zip(&tape.input)
        .map(|(c, u)| tape.gain * c - coeff * (u - tape.mean))
        .collect()
}

/// Normalizes the empirical standard deviation of the estimate to
/// `sigma_data`. Degenerate all-zero input is returned unchanged with a
/// warning.
pub fn rescale_estimate(x: &[f64], sigma_data: f64) -> Vec<f64> {
    rescale_forward(x, sigma_data).0
}

enum FrameResult {
    Scores(Vec<f32>),
    Failed(ScoreTransportError),
}

/// A score model running in another process, one synchronous request per
/// score evaluation over the framed stdio protocol.
pub struct ExternalScoreModel {
    child: Child,
    stdin: ChildStdin,
    rx: mpsc::Receiver<FrameResult>,
    timeout: Duration,
    broken: bool,
    cmd: String,
}

impl ExternalScoreModel {
    /// Spawns the peer command (whitespace-separated argv) and performs the
    /// empty-frame handshake.
    pub fn spawn(cmd: &str, timeout_secs: f64) -> Result<Self> {
        let parts: Vec<&str> = cmd.split_whitespace().collect();
        if parts.is_empty() {
            return Err(ScoreTransportError::Spawn {
                cmd: cmd.into(),
                msg: "empty command".into(),
            }
            .into());
        }
        let mut child = Command::new(parts[0])
            .args(&parts[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ScoreTransportError::Spawn {
                cmd: cmd.into(),
                msg: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");

        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || loop {
            match protocol::read_response(&mut stdout) {
                Ok(frame) => {
                    if tx.send(FrameResult::Scores(frame)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let fatal = !matches!(e, ScoreTransportError::PeerError(_));
                    let _ = tx.send(FrameResult::Failed(e));
                    if fatal {
                        break;
                    }
                }
            }
        });

        let mut model = ExternalScoreModel {
            child,
            stdin,
            rx,
            timeout: Duration::from_secs_f64(timeout_secs),
            broken: false,
            cmd: cmd.into(),
        };
        // Handshake: an empty request must echo back an empty score frame.
        let hello = model.request(&[], 0.0).map_err(|e| {
            ScoreTransportError::Handshake(format!("{} (peer `{}`)", e, model.cmd))
        })?;
        if !hello.is_empty() {
            return Err(ScoreTransportError::Handshake(format!(
                "expected empty response, got {} samples",
                hello.len()
            ))
            .into());
        }
        Ok(model)
    }

    fn request(
        &mut self,
        samples: &[f32],
        sigma: f64,
    ) -> std::result::Result<Vec<f32>, ScoreTransportError> {
        if self.broken {
            return Err(ScoreTransportError::PeerExited(" (transport marked broken)".into()));
        }
        protocol::write_request(&mut self.stdin, samples, sigma).map_err(|e| {
            self.broken = true;
            ScoreTransportError::PeerExited(format!(" (write failed: {e})"))
        })?;
        self.stdin.flush().map_err(|e| {
            self.broken = true;
            ScoreTransportError::PeerExited(format!(" (flush failed: {e})"))
        })?;
        match self.rx.recv_timeout(self.timeout) {
            Ok(FrameResult::Scores(v)) => Ok(v),
            Ok(FrameResult::Failed(e)) => {
                if !matches!(e, ScoreTransportError::PeerError(_)) {
                    self.broken = true;
                }
                Err(e)
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.broken = true;
                Err(ScoreTransportError::Timeout(self.timeout.as_secs_f64()))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                self.broken = true;
                Err(ScoreTransportError::PeerExited(String::new()))
            }
        }
    }
}

impl ScoreModel for ExternalScoreModel {
    fn score(&mut self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let samples: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let scores = self.request(&samples, sigma)?;
        if scores.len() != x.len() {
            return Err(ScoreTransportError::LengthMismatch {
                sent: x.len(),
                received: scores.len(),
            }
            .into());
        }
        Ok(scores.into_iter().map(|v| v as f64).collect())
    }

    fn name(&self) -> &'static str {
        "external"
    }
}

impl Drop for ExternalScoreModel {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
