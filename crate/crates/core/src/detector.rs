//! Test-time open-set decision.
//!
//! A sample is rejected as unknown when its latent falls outside every
//! per-class Gaussian (containment below `τ_l` for all classes) or when its
//! reconstruction error exceeds `τ_r`; otherwise it takes the classifier's
//! label.
//!
//! Containment of `z` in class `k` is the probability mass of the class
//! Gaussian lying outside the axis-aligned box centred on `m_k` whose corner
//! is `z`:
//!
//! ```text
//! P_k(z) = 1 − ∏_j erf(|z_j − m_j| / (σ_j·√2))
//! ```
//!
//! It is 1 at the mean and decays towards 0 as any coordinate moves away.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::model::{argmax, infer, Inference, OpenSetModel};

/// Lower bound on fitted per-dimension variances.
pub const VAR_FLOOR: f64 = 1e-6;
/// Softmax score below which the plain classifier rejects a sample.
pub const SOFTMAX_THRESHOLD: f64 = 0.5;
pub const DEFAULT_COVERAGE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub class_id: usize,
    pub m: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_l: f64,
    /// `+∞` for models without a decoder.
    pub tau_r: f64,
}

impl Thresholds {
    pub fn new(tau_l: f64, tau_r: f64) -> Result<Self> {
        if !(tau_l > 0.0 && tau_l < 1.0) {
            return Err(Error::config("tau_l", format!("must lie in (0, 1), got {tau_l}")));
        }
        if !(tau_r >= 0.0) {
            return Err(Error::config("tau_r", format!("must be non-negative, got {tau_r}")));
        }
        Ok(Thresholds { tau_l, tau_r })
    }
}

/// Which rejection signals are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMode {
    /// Max softmax score below [`SOFTMAX_THRESHOLD`].
    Softmax,
    /// Latent outside every class Gaussian.
    Cgd,
    /// Reconstruction error above `τ_r`.
    Re,
    /// `Cgd` or `Re`.
    Full,
}

impl DetectMode {
    pub fn uses_recon(self) -> bool {
        matches!(self, DetectMode::Re | DetectMode::Full)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Known(usize),
    Unknown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub verdict: Verdict,
    /// Classifier argmax, whatever the verdict.
    pub predicted: usize,
    pub max_score: f64,
    pub containment: Vec<f64>,
    pub reconstruction_error: Option<f64>,
}

/// Per-class mean and sample variance (denominator `count − 1`, floored at
/// [`VAR_FLOOR`]) of the latents whose prediction equals their label.
pub fn fit_class_gaussians(latents: &Tensor, labels: &[usize], predictions: &[usize], k: usize) -> Result<Vec<ClassGaussian>> {
    let (n, j) = match latents.shape() {
        &[n, j] => (n, j),
        s => return Err(Error::Shape(format!("latents must be [N, J], got {s:?}"))),
    };
    if labels.len() != n || predictions.len() != n {
        return Err(Error::Length(format!("{n} latents, {} labels, {} predictions", labels.len(), predictions.len())));
    }
    if k == 0 {
        return contract_err("at least one class is required");
    }
    (0..k)
        .map(|c| {
            let rows: Vec<&[f64]> = (0..n).filter(|&i| labels[i] == c && predictions[i] == c).map(|i| latents.row(i)).collect();
            if rows.len() < 2 {
                return Err(Error::InsufficientData { class: c, count: rows.len() });
            }
            let cnt = rows.len() as f64;
            let mut m = vec![0.0; j];
            for r in &rows {
                m.iter_mut().zip(*r).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= cnt);
            let mut var = vec![0.0; j];
            for r in &rows {
                var.iter_mut().zip(r.iter().zip(&m)).for_each(|(v, (x, mu))| *v += (x - mu).powi(2));
            }
            var.iter_mut().for_each(|v| *v = (*v / (cnt - 1.0)).max(VAR_FLOOR));
            Ok(ClassGaussian { class_id: c, m, var, count: rows.len() })
        })
        .collect()
}

/// `1 − ∏_j erf(|z_j − m_j| / (σ_j·√2))`.
pub fn containment_probability(z: &[f64], g: &ClassGaussian) -> f64 {
    let mut prod = 1.0;
    for ((zj, mj), vj) in z.iter().zip(&g.m).zip(&g.var) {
        prod *= libm::erf((zj - mj).abs() / (vj.sqrt() * std::f64::consts::SQRT_2));
        if prod == 0.0 {
            break;
        }
    }
    1.0 - prod
}

/// Nearest-rank quantile: the `⌈coverage·n⌉`-th smallest error.
pub fn calibrate_re_threshold(errors: &[f64], coverage: f64) -> Result<f64> {
    if errors.is_empty() {
        return contract_err("no training reconstruction errors to calibrate on");
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return contract_err(format!("coverage {coverage} outside (0, 1)"));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return contract_err("reconstruction errors contain NaN");
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((coverage * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// The decision rule on precomputed signals. Signals a mode does not use are
/// ignored.
pub fn decide(containment: &[f64], recon: Option<f64>, max_score: f64, t: &Thresholds, mode: DetectMode) -> bool {
    let outside = || containment.iter().all(|&p| p < t.tau_l);
    let too_far = || recon.is_some_and(|r| r > t.tau_r);
    match mode {
        DetectMode::Softmax => max_score < SOFTMAX_THRESHOLD,
        DetectMode::Cgd => outside(),
        DetectMode::Re => too_far(),
        DetectMode::Full => outside() || too_far(),
    }
}

/// Fitted class Gaussians plus thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub gaussians: Vec<ClassGaussian>,
    pub thresholds: Thresholds,
}

impl Detector {
    /// Fits on the training set: class Gaussians from correctly classified
    /// latents, `τ_r` at the given training coverage.
    pub fn fit(model: &dyn OpenSetModel, train: &Dataset, tau_l: f64, coverage: f64) -> Result<Detector> {
        let labels = train.class_indices(model.num_classes())?;
        let out = infer(model, train, true)?;
        Detector::fit_from(&out, &labels, model.num_classes(), tau_l, coverage)
    }

    /// [`Detector::fit`] from an existing inference pass.
    pub fn fit_from(out: &Inference, labels: &[usize], k: usize, tau_l: f64, coverage: f64) -> Result<Detector> {
        let gaussians = fit_class_gaussians(&out.latent, labels, &out.predictions(), k)?;
        let tau_r = match &out.recon_error {
            Some(r) => calibrate_re_threshold(r, coverage)?,
            None => f64::INFINITY,
        };
        Ok(Detector { gaussians, thresholds: Thresholds::new(tau_l, tau_r)? })
    }

    pub fn containment(&self, z: &[f64]) -> Vec<f64> {
        self.gaussians.iter().map(|g| containment_probability(z, g)).collect()
    }

    /// Decisions for every sample of an inference pass. Signals the mode does
    /// not use are left out of the results.
    pub fn decide_all(&self, out: &Inference, mode: DetectMode) -> Result<Vec<DetectionResult>> {
        let k = out.scores.shape()[1];
        if self.gaussians.len() != k {
            return contract_err(format!("detector has {} class Gaussians for {k} classes", self.gaussians.len()));
        }
        if mode.uses_recon() && out.recon_error.is_none() {
            return contract_err(format!("{mode:?} detection needs reconstruction errors"));
        }
        (0..out.len())
            .map(|i| {
                let scores = out.scores.row(i);
                let predicted = argmax(scores);
                let max_score = scores[predicted];
                let containment = if mode == DetectMode::Softmax { Vec::new() } else { self.containment(out.latent.row(i)) };
                let recon = out.recon_error.as_ref().filter(|_| mode.uses_recon()).map(|r| r[i]);
                let unknown = decide(&containment, recon, max_score, &self.thresholds, mode);
                Ok(DetectionResult {
                    verdict: if unknown { Verdict::Unknown } else { Verdict::Known(predicted) },
                    predicted,
                    max_score,
                    containment,
                    reconstruction_error: recon,
                })
            })
            .collect()
    }

    /// Runs the model on a batch and decides every sample.
    pub fn detect(&self, model: &dyn OpenSetModel, x: &Tensor, mode: DetectMode) -> Result<Vec<DetectionResult>> {
        let out = model.infer_batch(x, mode.uses_recon())?;
        self.decide_all(&out, mode)
    }

    /// Line-oriented export. After a `thresholds <tau_l> <tau_r>` line, one
    /// line per class: `class <id> <count> <m_1..m_J> <var_1..var_J>`.
    /// Values carry 17 significant digits, so parsing restores them exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# cpgm detector v1\n# class <id> <count> <m_1..m_J> <var_1..var_J>\n");
        let _ = writeln!(s, "thresholds {:.16e} {:.16e}", self.thresholds.tau_l, self.thresholds.tau_r);
        for g in &self.gaussians {
            let _ = write!(s, "class {} {}", g.class_id, g.count);
            for v in g.m.iter().chain(&g.var) {
                let _ = write!(s, " {v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Detector> {
        let bad = |line: usize, m: &str| Error::Format { offset: line as u64, message: m.to_string() };
        let mut thresholds = None;
        let mut gaussians = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let num = |t: Option<&str>| -> Result<f64> {
                t.ok_or_else(|| bad(ln, "missing value"))?.parse::<f64>().map_err(|e| bad(ln, &e.to_string()))
            };
            match it.next() {
                Some("thresholds") => {
                    let (a, b) = (num(it.next())?, num(it.next())?);
                    thresholds = Some(Thresholds::new(a, b)?);
                }
                Some("class") => {
                    let id = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad(ln, "bad class id"))?;
                    let count = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad(ln, "bad count"))?;
                    let vals = it.map(|t| t.parse::<f64>().map_err(|e| bad(ln, &e.to_string()))).collect::<Result<Vec<_>>>()?;
                    if vals.is_empty() || vals.len() % 2 != 0 {
                        return Err(bad(ln, "expected J means followed by J variances"));
                    }
                    let j = vals.len() / 2;
                    gaussians.push(ClassGaussian { class_id: id, m: vals[..j].to_vec(), var: vals[j..].to_vec(), count });
                }
                _ => return Err(bad(ln, "unrecognised record")),
            }
        }
        let thresholds = thresholds.ok_or_else(|| bad(0, "no thresholds record"))?;
        Ok(Detector { gaussians, thresholds })
    }
}
