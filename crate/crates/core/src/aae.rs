//! Conditional adversarial autoencoder and its two variants.
//!
//! | variant    | latent fed to decoder / detector      | classifier input | discriminator sees          |
//! |------------|---------------------------------------|------------------|-----------------------------|
//! | `cpgm`     | `z = α·yE + z0` / same                | `y`              | `z0` vs `N(0, I)`           |
//! | `variant1` | `z` / `z`                             | `z`              | `[z, onehot]` vs `[N(μ_k, I), onehot]` |
//! | `variant2` | `z = α·yE + z0` / `z0`                | `y`              | `z0` vs `N(0, I)`           |
//!
//! `E` is the bias-free center layer (`centers.weight`, `[K, J]`), so `yE` is
//! the class mean selected softly by the categorical head `y`. Training runs
//! four phases per mini-batch: reconstruction, regularization (discriminator
//! then generator), classification and center learning.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::init::he_uniform;
use crate::autodiff::{OptimizerState, ParameterSet, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::model::{argmax, check_trainable, minibatches, one_hot, row_sq_errors, Inference, ModelKind, OpenSetModel};
use crate::nn::{Deconv, Forward, LayerSpec, Linear, Prelu, RunningStats, Trunk};
use crate::rng;
use crate::vae::defaults;

/// Floor and ceiling applied to discriminator probabilities inside logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Squared distance below which two centers count as coincident.
const COINCIDENT: f64 = 1e-12;
const DISC_WIDTHS: [usize; 2] = [128, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AaeVariant {
    Cpgm,
    Variant1,
    Variant2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AaeConfig {
    pub num_classes: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: AaeVariant,
    /// Average the reconstruction loss over pixels as well as over the batch.
    #[serde(default = "defaults::yes")]
    pub pixel_mean_recon: bool,
    #[serde(default)]
    pub layer_spec: LayerSpec,
}

fn default_alpha() -> f64 {
    10.0
}
fn default_eta() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.1
}
fn default_variant() -> AaeVariant {
    AaeVariant::Cpgm
}

impl AaeConfig {
    pub fn new(num_classes: usize, variant: AaeVariant) -> Self {
        AaeConfig {
            num_classes,
            latent_dim: defaults::latent_dim(),
            alpha: default_alpha(),
            eta: default_eta(),
            learning_rate: default_lr(),
            momentum: 0.0,
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            seed: 0,
            variant,
            pixel_mean_recon: true,
            layer_spec: LayerSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(f, m));
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be positive");
        }
        if !(self.eta > 0.0) {
            return bad("eta", "must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.momentum >= 0.0) {
            return bad("momentum", "must be non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.layer_spec.channels.is_empty() {
            return bad("layer_spec.channels", "at least one layer is required");
        }
        self.layer_spec.feature_shapes().map_err(|e| Error::config("layer_spec", e.to_string()))?;
        Ok(())
    }
}

/// `α·μ_k + z0`.
pub fn compose_latent(z0: &[f64], mu_k: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z0.len() != mu_k.len() {
        return shape_err(format!("compose_latent: {} vs {} components", z0.len(), mu_k.len()));
    }
    Ok(z0.iter().zip(mu_k).map(|(z, m)| alpha * m + z).collect())
}

/// Squared distance of one center pair, zeroed beyond the hinge `η`.
pub fn pair_distance_loss(d2: f64, eta: f64) -> f64 {
    if d2 <= eta {
        d2
    } else {
        0.0
    }
}

/// Encoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub z0: Var,
    /// Softmax categorical head; `variant1` has none.
    pub y: Option<Var>,
}

#[derive(Clone, Debug)]
struct Discriminator {
    l1: Linear,
    a1: Prelu,
    l2: Linear,
    a2: Prelu,
    out: Linear,
}

impl Discriminator {
    fn new(d_in: usize) -> Self {
        let [w1, w2] = DISC_WIDTHS;
        Discriminator {
            l1: Linear::new("disc.1", d_in, w1),
            a1: Prelu { name: "disc.1.prelu".into(), channels: w1 },
            l2: Linear::new("disc.2", w1, w2),
            a2: Prelu { name: "disc.2.prelu".into(), channels: w2 },
            out: Linear::new("disc.out", w2, 1),
        }
    }

    fn init<R: Rng + ?Sized>(&self, p: &mut ParameterSet, rng: &mut R) -> Result<()> {
        self.l1.init(p, rng)?;
        self.a1.init(p)?;
        self.l2.init(p, rng)?;
        self.a2.init(p)?;
        self.out.init_zero(p)
    }

    /// Clamped probability `[N, 1]` that each row came from the prior.
    fn forward(&self, f: &mut Forward<'_>, z: Var) -> Result<Var> {
        let h = self.l1.forward(f, z)?;
        let h = self.a1.forward(f, h)?;
        let h = self.l2.forward(f, h)?;
        let h = self.a2.forward(f, h)?;
        let o = self.out.forward(f, h)?;
        let p = f.tape.sigmoid(o);
        Ok(f.tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
    }
}

/// `−mean ln p` (`positive`) or `−mean ln(1 − p)` over a `[N, 1]` column.
fn bce(tape: &mut Tape, p: Var, positive: bool) -> Var {
    let n = tape.shape(p)[0].max(1) as f64;
    let q = if positive { p } else { let neg = tape.scale(p, -1.0); tape.offset(neg, 1.0) };
    let l = tape.ln(q);
    let s = tape.sum(l);
    tape.scale(s, -1.0 / n)
}

fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len().max(1) as f64;
    let lp = tape.log_softmax(logits)?;
    let g = tape.gather(lp, labels)?;
    let s = tape.sum(g);
    Ok(tape.scale(s, -1.0 / n))
}

/// Parameter-name prefixes each phase updates.
pub mod phase {
    pub const RECON: &[&str] = &["enc.", "dec."];
    pub const DISC: &[&str] = &["disc."];
    pub const GEN: &[&str] = &["enc."];
    pub const CLS: &[&str] = &["enc.", "cls."];
    pub const CENTER: &[&str] = &["centers."];
}

/// Whether `name` belongs to a phase with the given prefixes.
pub fn in_phase(prefixes: &'static [&'static str]) -> impl Fn(&str) -> bool {
    move |name| prefixes.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct CpgmAae {
    pub config: AaeConfig,
    pub params: ParameterSet,
    pub running: RunningStats,
    trunk: Trunk,
    z_head: Linear,
    y_head: Option<Linear>,
    decoder: Deconv,
    cls: Linear,
    disc: Discriminator,
}

impl CpgmAae {
    pub fn new(config: AaeConfig) -> Result<Self> {
        let mut m = CpgmAae::skeleton(config)?;
        let mut r = rng::stream(m.config.seed, "init", 0);
        let k = m.config.num_classes;
        m.trunk.init(&mut m.params, &mut m.running, &mut r)?;
        m.z_head.init(&mut m.params, &mut r)?;
        if let Some(y) = &m.y_head {
            y.init(&mut m.params, &mut r)?;
        }
        m.decoder.init(&mut m.params, &mut r)?;
        m.cls.init(&mut m.params, &mut r)?;
        if m.y_head.is_some() {
            // Start with y read directly as the class posterior, so that no
            // two classes begin by competing for the same categorical vertex.
            let w = m.params.get_mut("cls.weight")?;
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                *v = if i % (k + 1) == 0 { 1.0 } else { 0.0 };
            }
        }
        m.disc.init(&mut m.params, &mut r)?;
        m.params.insert("centers.weight", he_uniform(&[k, m.config.latent_dim], k, &mut r))?;
        Ok(m)
    }

    pub(crate) fn skeleton(config: AaeConfig) -> Result<Self> {
        config.validate()?;
        let (j, k) = (config.latent_dim, config.num_classes);
        let trunk = Trunk::new("enc", &config.layer_spec)?;
        let width = trunk.top_width();
        let v1 = config.variant == AaeVariant::Variant1;
        Ok(CpgmAae {
            z_head: Linear::new("enc.z", width, j),
            y_head: (!v1).then(|| Linear::new("enc.y", width, k)),
            decoder: Deconv::new("dec", &config.layer_spec, j)?,
            cls: if v1 { Linear::new("cls", j, k) } else { Linear::new("cls", k, k) },
            disc: Discriminator::new(if v1 { j + k } else { j }),
            trunk,
            config,
            params: ParameterSet::new(),
            running: RunningStats::default(),
        })
    }

    pub fn variant(&self) -> AaeVariant {
        self.config.variant
    }

    pub fn encode(&self, f: &mut Forward<'_>, x: Var) -> Result<EncoderOutput> {
        let h = self.trunk.top(f, x)?;
        let z0 = self.z_head.forward(f, h)?;
        let y = match &self.y_head {
            Some(head) => {
                let logits = head.forward(f, h)?;
                Some(f.tape.softmax(logits)?)
            }
            None => None,
        };
        Ok(EncoderOutput { z0, y })
    }

    /// The latent the decoder reconstructs from.
    fn decoder_input(&self, f: &mut Forward<'_>, e: EncoderOutput) -> Result<Var> {
        match e.y {
            None => Ok(e.z0),
            Some(y) => {
                let centers = f.param("centers.weight")?;
                let mu = f.tape.matmul(y, centers)?;
                let mu = f.tape.scale(mu, self.config.alpha);
                f.tape.add(mu, e.z0)
            }
        }
    }

    /// The latent the unknown detector consumes.
    fn detector_input(&self, f: &mut Forward<'_>, e: EncoderOutput) -> Result<Var> {
        match self.config.variant {
            AaeVariant::Variant2 => Ok(e.z0),
            _ => self.decoder_input(f, e),
        }
    }

    fn logits(&self, f: &mut Forward<'_>, e: EncoderOutput) -> Result<Var> {
        let input = e.y.unwrap_or(e.z0);
        self.cls.forward(f, input)
    }

    /// `‖x − x̃‖²` averaged over the batch, and over pixels when
    /// `pixel_mean_recon` is set.
    pub fn recon_loss(&self, f: &mut Forward<'_>, x: &Tensor) -> Result<Var> {
        let n = if self.config.pixel_mean_recon { x.numel() } else { x.shape()[0] } as f64;
        let xv = f.tape.constant(x);
        let e = self.encode(f, xv)?;
        let z = self.decoder_input(f, e)?;
        let xr = self.decoder.forward(f, z)?;
        let d = f.tape.sub(xr, xv)?;
        let d2 = f.tape.square(d);
        let s = f.tape.sum(d2);
        Ok(f.tape.scale(s, 1.0 / n))
    }

    /// Encoder-side discriminator input, and the matching prior sample.
    fn adversarial_pair<R: Rng + ?Sized>(
        &self,
        f: &mut Forward<'_>,
        x: &Tensor,
        labels: &[usize],
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let (n, j, k) = (x.shape()[0], self.config.latent_dim, self.config.num_classes);
        let xv = f.tape.constant(x);
        let e = self.encode(f, xv)?;
        let noise = Tensor::from_fn(&[n, j], |_| rng.sample(StandardNormal));
        match self.config.variant {
            AaeVariant::Variant1 => {
                let oh = one_hot(labels, k);
                let centers = self.params.get("centers.weight")?.data();
                let mut prior = noise;
                for (i, &l) in labels.iter().enumerate() {
                    prior.data_mut()[i * j..(i + 1) * j].iter_mut().zip(&centers[l * j..(l + 1) * j]).for_each(|(p, c)| *p += c);
                }
                let ohv = f.tape.constant(&oh);
                let fake = f.tape.concat(e.z0, ohv)?;
                let pv = f.tape.constant(&prior);
                let real = f.tape.concat(pv, ohv)?;
                Ok((fake, real))
            }
            _ => Ok((e.z0, f.tape.constant(&noise))),
        }
    }

    /// Discriminator cross-entropy: prior samples labelled 1, encodings 0.
    /// Encodings are detached.
    pub fn disc_loss<R: Rng + ?Sized>(&self, f: &mut Forward<'_>, x: &Tensor, labels: &[usize], rng: &mut R) -> Result<Var> {
        let (fake, real) = self.adversarial_pair(f, x, labels, rng)?;
        let fake = f.tape.detach(fake);
        let pr = self.disc.forward(f, real)?;
        let pf = self.disc.forward(f, fake)?;
        let a = bce(f.tape, pr, true);
        let b = bce(f.tape, pf, false);
        f.tape.add(a, b)
    }

    /// Non-saturating generator loss `−mean ln D(encoding)`.
    pub fn gen_loss<R: Rng + ?Sized>(&self, f: &mut Forward<'_>, x: &Tensor, labels: &[usize], rng: &mut R) -> Result<Var> {
        let (fake, _) = self.adversarial_pair(f, x, labels, rng)?;
        let pf = self.disc.forward(f, fake)?;
        Ok(bce(f.tape, pf, true))
    }

    /// `−mean ln S_c` of the known classifier.
    pub fn cls_loss(&self, f: &mut Forward<'_>, x: &Tensor, labels: &[usize]) -> Result<(Var, Var)> {
        let xv = f.tape.constant(x);
        let e = self.encode(f, xv)?;
        let logits = self.logits(f, e)?;
        Ok((cross_entropy(f.tape, logits, labels)?, logits))
    }

    /// Center-learning objective. Returns the value to minimize (the negated
    /// hinge distance loss plus a tie-break for coincident pairs) and the
    /// hinge distance loss itself.
    pub fn center_objective(&self, f: &mut Forward<'_>, x: &Tensor, labels: &[usize]) -> Result<(Var, f64)> {
        let (j, k) = (self.config.latent_dim, self.config.num_classes);
        if k < 2 {
            return contract_err("center learning needs at least two classes");
        }
        // Per-class mean of the (detached) soft assignment.
        let assign: Vec<f64> = match self.config.variant {
            AaeVariant::Variant1 => one_hot(labels, k).into_data(),
            _ => {
                let xv = f.tape.constant(x);
                let e = self.encode(f, xv)?;
                f.tape.value(e.y.expect("categorical head")).to_vec()
            }
        };
        let mut present = Vec::new();
        let mut mean_rows = Vec::new();
        for c in 0..k {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if rows.is_empty() {
                continue;
            }
            present.push(c);
            let mut m = vec![0.0; k];
            for &i in &rows {
                m.iter_mut().zip(&assign[i * k..(i + 1) * k]).for_each(|(a, b)| *a += b / rows.len() as f64);
            }
            mean_rows.extend(m);
        }
        let p = present.len();
        let centers = f.param("centers.weight")?;
        let ybar = f.tape.constant(&Tensor::new(vec![p, k], mean_rows)?);
        let mu = f.tape.matmul(ybar, centers)?;
        let pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (a + 1..p).map(move |b| (a, b))).collect();
        if pairs.is_empty() {
            let zero = f.tape.constant(&Tensor::scalar(0.0));
            let s = f.tape.mul(zero, zero)?;
            return Ok((s, 0.0));
        }
        let mut sel = Tensor::zeros(&[pairs.len(), p]);
        for (r, &(a, b)) in pairs.iter().enumerate() {
            sel.data_mut()[r * p + a] = 1.0;
            sel.data_mut()[r * p + b] = -1.0;
        }
        let selv = f.tape.constant(&sel);
        let diff = f.tape.matmul(selv, mu)?;
        let d2v = f.tape.square(diff);
        let d2 = f.tape.sum_rows(d2v)?;
        let d2_vals = f.tape.value(d2).to_vec();
        let mask: Vec<f64> = d2_vals.iter().map(|&v| if v <= self.config.eta { 1.0 } else { 0.0 }).collect();
        let distance: f64 = d2_vals.iter().map(|&v| pair_distance_loss(v, self.config.eta)).sum();
        let maskv = f.tape.constant(&Tensor::new(vec![pairs.len()], mask)?);
        let hinged = f.tape.mul(d2, maskv)?;
        let hs = f.tape.sum(hinged);
        let mut objective = f.tape.scale(hs, -1.0);
        // The squared distance has zero gradient at coincidence; push such
        // pairs apart along a fixed axis instead.
        let mut tie = Tensor::zeros(&[pairs.len(), j]);
        let mut any = false;
        for (r, &(a, b)) in pairs.iter().enumerate() {
            if d2_vals[r] < COINCIDENT {
                tie.data_mut()[r * j + (present[a] + present[b]) % j] = 1.0;
                any = true;
            }
        }
        if any {
            let tv = f.tape.constant(&tie);
            let t = f.tape.mul(diff, tv)?;
            let ts = f.tape.sum(t);
            let ts = f.tape.scale(ts, -1.0);
            objective = f.tape.add(objective, ts)?;
        }
        Ok((objective, distance))
    }

    fn run_step<F>(&mut self, opt: &mut OptimizerState, select: &'static [&'static str], keep_bn: bool, build: F) -> Result<f64>
    where
        F: FnOnce(&Self, &mut Forward<'_>) -> Result<(Var, f64)>,
    {
        let mut tape = Tape::new();
        let (loss, value, updates) = {
            let mut f = Forward::train(&mut tape, &self.params);
            let (loss, value) = build(self, &mut f)?;
            (loss, value, f.bn_updates)
        };
        tape.backward(loss, &mut self.params)?;
        opt.step_where(&mut self.params, in_phase(select))?;
        if keep_bn {
            for (name, s) in &updates {
                self.running.update(name, s);
            }
        }
        Ok(value)
    }

    /// One SGD step of encoder and decoder on the reconstruction loss.
    pub fn reconstruction_phase_step(&mut self, x: &Tensor, opt: &mut OptimizerState) -> Result<f64> {
        self.run_step(opt, phase::RECON, true, |m, f| {
            let l = m.recon_loss(f, x)?;
            Ok((l, f.tape.scalar(l)))
        })
    }

    /// Discriminator step followed by a generator step; returns both losses.
    pub fn regularization_phase_step<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        opt: &mut OptimizerState,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let d = self.run_step(opt, phase::DISC, false, |m, f| {
            let l = m.disc_loss(f, x, labels, rng)?;
            Ok((l, f.tape.scalar(l)))
        })?;
        let g = self.run_step(opt, phase::GEN, false, |m, f| {
            let l = m.gen_loss(f, x, labels, rng)?;
            Ok((l, f.tape.scalar(l)))
        })?;
        Ok((d, g))
    }

    /// One step of encoder and classifier on the cross-entropy.
    pub fn classification_phase_step(&mut self, x: &Tensor, labels: &[usize], opt: &mut OptimizerState) -> Result<f64> {
        self.run_step(opt, phase::CLS, false, |m, f| {
            let (l, _) = m.cls_loss(f, x, labels)?;
            Ok((l, f.tape.scalar(l)))
        })
    }

    /// One step of the center layer pushing class means apart within `η`.
    /// Returns the hinge distance loss before the step.
    pub fn center_learning_step(&mut self, x: &Tensor, labels: &[usize], opt: &mut OptimizerState) -> Result<f64> {
        let first = labels.first().copied();
        if labels.iter().all(|&l| Some(l) == first) {
            return Ok(0.0);
        }
        self.run_step(opt, phase::CENTER, false, |m, f| m.center_objective(f, x, labels))
    }

    /// Class means `μ_k` (rows of the center layer).
    pub fn centers(&self) -> Result<Tensor> {
        Ok(self.params.get("centers.weight")?.clone())
    }

    /// Eval-mode encoder outputs `(z0, y)` for a batch.
    pub fn encode_eval(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &self.params, &self.running);
        let xv = f.tape.constant(x);
        let e = self.encode(&mut f, xv)?;
        Ok((f.tape.tensor(e.z0), e.y.map(|y| f.tape.tensor(y))))
    }
}

impl OpenSetModel for CpgmAae {
    fn kind(&self) -> ModelKind {
        match self.config.variant {
            AaeVariant::Cpgm => ModelKind::CpgmAae,
            AaeVariant::Variant1 => ModelKind::Variant1,
            AaeVariant::Variant2 => ModelKind::Variant2,
        }
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn input_shape(&self) -> [usize; 3] {
        self.config.layer_spec.input_shape
    }

    fn has_decoder(&self) -> bool {
        true
    }

    fn infer_batch(&self, x: &Tensor, with_recon: bool) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &self.params, &self.running);
        let xv = f.tape.constant(x);
        let e = self.encode(&mut f, xv)?;
        let latent = self.detector_input(&mut f, e)?;
        let logits = self.logits(&mut f, e)?;
        let scores = f.tape.softmax(logits)?;
        let recon_error = if with_recon {
            let z = self.decoder_input(&mut f, e)?;
            let xr = self.decoder.forward(&mut f, z)?;
            Some(row_sq_errors(f.tape.value(xr), x.data(), x.shape()[0]))
        } else {
            None
        };
        Ok(Inference { latent: f.tape.tensor(latent), scores: f.tape.tensor(scores), recon_error })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AaeEpoch {
    pub epoch: usize,
    pub recon: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub cls: f64,
    pub distance: f64,
    /// Accuracy of the training-mode predictions of the classification phase.
    pub batch_accuracy: f64,
}

/// Per mini-batch: reconstruction, regularization, classification, center
/// learning.
pub fn train_cpgm_aae(data: &Dataset, config: &AaeConfig) -> Result<(CpgmAae, Vec<AaeEpoch>)> {
    let mut model = CpgmAae::new(config.clone())?;
    let labels = check_trainable(data, config.num_classes, config.layer_spec.input_shape)?;
    let mut opt = OptimizerState::new(config.learning_rate, config.momentum)?;
    let mut trace = Vec::with_capacity(config.epochs);
    let k = config.num_classes;
    for epoch in 0..config.epochs {
        let mut shuffle = rng::stream(config.seed, "shuffle", epoch as u64);
        let mut prior = rng::stream(config.seed, "prior", epoch as u64);
        let mut row = AaeEpoch { epoch, recon: 0.0, d_loss: 0.0, g_loss: 0.0, cls: 0.0, distance: 0.0, batch_accuracy: 0.0 };
        let mut correct = 0;
        for batch in minibatches(data.len(), config.batch_size, &mut shuffle) {
            let x = data.batch(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let w = batch.len() as f64;
            row.recon += model.reconstruction_phase_step(&x, &mut opt)? * w;
            let (d, g) = model.regularization_phase_step(&x, &y, &mut opt, &mut prior)?;
            row.d_loss += d * w;
            row.g_loss += g * w;
            let mut logits = Vec::new();
            row.cls += model.run_step(&mut opt, phase::CLS, false, |m, f| {
                let (l, lg) = m.cls_loss(f, &x, &y)?;
                logits = f.tape.value(lg).to_vec();
                Ok((l, f.tape.scalar(l)))
            })? * w;
            correct += y.iter().enumerate().filter(|(i, &l)| argmax(&logits[i * k..(i + 1) * k]) == l).count();
            row.distance += model.center_learning_step(&x, &y, &mut opt)? * w;
        }
        let n = data.len() as f64;
        row.recon /= n;
        row.d_loss /= n;
        row.g_loss /= n;
        row.cls /= n;
        row.distance /= n;
        row.batch_accuracy = correct as f64 / n;
        if ![row.recon, row.d_loss, row.g_loss, row.cls, row.distance].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("adversarial training diverged at epoch {epoch}")));
        }
        trace.push(row);
    }
    Ok((model, trace))
}
