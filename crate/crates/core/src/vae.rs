//! Conditional ladder VAE.
//!
//! The encoder runs a convolutional trunk upward and reads a diagonal Gaussian
//! `(μ_l, σ²_l)` off every level. The decoder starts from the top latent and
//! walks back down: at each level it predicts a top-down Gaussian
//! `(μ̃_l, σ̃²_l)`, merges it with the bottom-up one by precision weighting and
//! continues from the merged latent. The top posterior is pulled towards a
//! learned class mean `μ_k` with unit variance, and a linear classifier reads
//! the top latent.
//!
//! With `ladder: false` only the top level is stochastic: the decoder is a
//! plain transposed-convolution stack and only the top KL term is kept, which
//! is the plain conditional VAE.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::init::he_uniform;
use crate::autodiff::{OptimizerState, ParameterSet, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::gaussian::{kl_conditional_tape, kl_gaussian_tape, merge_gaussian_tape};
use crate::model::{argmax, check_trainable, minibatches, one_hot, row_sq_errors, Inference, ModelKind, OpenSetModel};
use crate::nn::{ConvTBlock, Deconv, Forward, LayerSpec, Linear, RunningStats, Trunk};
use crate::rng;

/// Added to every softplus variance.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub num_classes: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    /// Merge bottom-up and top-down statistics below the top level.
    #[serde(default = "defaults::yes")]
    pub ladder: bool,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::vae_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub layer_spec: LayerSpec,
}

pub(crate) mod defaults {
    pub fn latent_dim() -> usize {
        32
    }
    pub fn yes() -> bool {
        true
    }
    pub fn lambda() -> f64 {
        100.0
    }
    pub fn vae_lr() -> f64 {
        0.001
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn epochs() -> usize {
        30
    }
}

impl VaeConfig {
    pub fn new(num_classes: usize) -> Self {
        VaeConfig {
            num_classes,
            latent_dim: defaults::latent_dim(),
            ladder: true,
            lambda: defaults::lambda(),
            learning_rate: defaults::vae_lr(),
            momentum: 0.0,
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            seed: 0,
            layer_spec: LayerSpec::default(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_spec.channels.len()
    }

    /// KL weight for `epoch` (0-based): linear from 0 at the first epoch to 1
    /// at the last. A single-epoch run uses 1.
    pub fn beta(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            1.0
        } else {
            (epoch as f64 / (self.epochs - 1) as f64).min(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(f, m));
        if self.num_layers() < 2 {
            return bad("layer_spec.channels", "at least two ladder layers are required");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda", "must be positive");
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
        self.layer_spec.feature_shapes().map_err(|e| Error::config("layer_spec", e.to_string()))?;
        Ok(())
    }
}

/// Gaussian heads reading one flattened feature map.
#[derive(Clone, Debug)]
struct Heads {
    mu: Linear,
    var: Linear,
}

impl Heads {
    fn new(prefix: &str, width: usize, j: usize) -> Self {
        Heads { mu: Linear::new(format!("{prefix}.mu"), width, j), var: Linear::new(format!("{prefix}.var"), width, j) }
    }

    fn init<R: Rng + ?Sized>(&self, p: &mut ParameterSet, rng: &mut R) -> Result<()> {
        self.mu.init(p, rng)?;
        self.var.init(p, rng)
    }

    fn forward(&self, f: &mut Forward<'_>, h: Var) -> Result<(Var, Var)> {
        let mu = self.mu.forward(f, h)?;
        let v = self.var.forward(f, h)?;
        let v = f.tape.softplus(v);
        Ok((mu, f.tape.offset(v, VAR_FLOOR)))
    }
}

/// One downward step: `z_{l+1}` → feature map `l` → `(μ̃_l, σ̃²_l)`.
#[derive(Clone, Debug)]
struct DownStage {
    fc: Linear,
    src: [usize; 3],
    convt: ConvTBlock,
    heads: Option<Heads>,
}

/// Per-level statistics of one decoder pass, bottom (level 1) first.
#[derive(Clone, Copy, Debug)]
pub struct LadderLayerStats {
    pub bottom_up: (Var, Var),
    pub top_down: (Var, Var),
    pub merged: (Var, Var),
}

#[derive(Clone, Debug)]
enum Decoder {
    Ladder { down: Vec<DownStage>, out: DownStage },
    Plain(Deconv),
}

/// Loss value and its parts, each averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub cls: f64,
}

/// Tape handles of one [`CpgmVae::loss`] evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub cls: Var,
    pub logits: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> VaeLoss {
        VaeLoss {
            total: tape.scalar(self.total),
            recon: tape.scalar(self.recon),
            kl: tape.scalar(self.kl),
            cls: tape.scalar(self.cls),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CpgmVae {
    pub config: VaeConfig,
    pub params: ParameterSet,
    pub running: RunningStats,
    trunk: Trunk,
    up_heads: Vec<Option<Heads>>,
    decoder: Decoder,
    cls: Linear,
}

impl CpgmVae {
    /// Builds the architecture and draws initial weights from the config seed.
    pub fn new(config: VaeConfig) -> Result<Self> {
        let mut m = CpgmVae::skeleton(config)?;
        let mut r = rng::stream(m.config.seed, "init", 0);
        m.trunk.init(&mut m.params, &mut m.running, &mut r)?;
        for h in m.up_heads.iter().flatten() {
            h.init(&mut m.params, &mut r)?;
        }
        match &m.decoder {
            Decoder::Ladder { down, out } => {
                for s in down.iter().chain(std::iter::once(out)) {
                    s.fc.init(&mut m.params, &mut r)?;
                    s.convt.init(&mut m.params, &mut r)?;
                    if let Some(h) = &s.heads {
                        h.init(&mut m.params, &mut r)?;
                    }
                }
            }
            Decoder::Plain(d) => d.init(&mut m.params, &mut r)?,
        }
        m.cls.init(&mut m.params, &mut r)?;
        let k = m.config.num_classes;
        m.params.insert("centers.weight", he_uniform(&[k, m.config.latent_dim], k, &mut r))?;
        Ok(m)
    }

    /// Architecture without weights; checkpoint loading fills them in.
    pub(crate) fn skeleton(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let spec = &config.layer_spec;
        let j = config.latent_dim;
        let l_count = config.num_layers();
        let trunk = Trunk::new("enc", spec)?;
        let shapes = trunk.shapes.clone();
        let width = |s: [usize; 3]| s.iter().product::<usize>();
        let up_heads = (0..l_count)
            .map(|l| (config.ladder || l + 1 == l_count).then(|| Heads::new(&format!("enc.{}", l + 1), width(shapes[l]), j)))
            .collect();
        let stage = |l: usize, heads: bool, dst: [usize; 3], act: bool, name: String| -> Result<DownStage> {
            let src = shapes[l];
            let op = spec.output_padding(src[1], dst[1])?;
            Ok(DownStage {
                fc: Linear::new(format!("{name}.fc"), j, width(src)),
                src,
                convt: ConvTBlock::new(&name, src[0], dst[0], spec, op, act),
                heads: heads.then(|| Heads::new(&name, width(dst), j)),
            })
        };
        let decoder = if config.ladder {
            // Stage producing level l (1-based) from level l+1, top first.
            let mut down = Vec::with_capacity(l_count - 1);
            for l in (1..l_count).rev() {
                down.push(stage(l, true, shapes[l - 1], true, format!("dec.{l}"))?);
            }
            let out = stage(0, false, spec.input_shape, false, "dec.out".into())?;
            Decoder::Ladder { down, out }
        } else {
            Decoder::Plain(Deconv::new("dec", spec, j)?)
        };
        let cls = Linear::new("cls", j, config.num_classes);
        Ok(CpgmVae { config, params: ParameterSet::new(), running: RunningStats::default(), trunk, up_heads, decoder, cls })
    }

    /// Bottom-up `(μ_l, σ²_l)` for `l = 1..L`; levels without heads (no
    /// ladder) are `None`.
    pub fn encode_upward(&self, f: &mut Forward<'_>, x: Var) -> Result<Vec<Option<(Var, Var)>>> {
        let maps = self.trunk.forward(f, x)?;
        let mut out = Vec::with_capacity(maps.len());
        for (map, heads) in maps.into_iter().zip(&self.up_heads) {
            out.push(match heads {
                Some(h) => {
                    let flat = f.tape.flatten(map)?;
                    Some(h.forward(f, flat)?)
                }
                None => None,
            });
        }
        Ok(out)
    }

    fn expand(&self, f: &mut Forward<'_>, s: &DownStage, z: Var) -> Result<Var> {
        let n = f.tape.shape(z)[0];
        let h = s.fc.forward(f, z)?;
        let [c, hh, ww] = s.src;
        let h = f.tape.unflatten(h, &[n, c, hh, ww])?;
        s.convt.forward(f, h)
    }

    /// Runs the decoder from the top latent `z_top`. `rng` samples each merged
    /// level during training; `None` propagates merged means instead.
    pub fn decode_downward<R: Rng + ?Sized>(
        &self,
        f: &mut Forward<'_>,
        z_top: Var,
        upward: &[Option<(Var, Var)>],
        mut rng: Option<&mut R>,
    ) -> Result<(Var, Vec<LadderLayerStats>)> {
        let l_count = self.config.num_layers();
        if upward.len() != l_count {
            return contract_err(format!("{} upward levels for a {l_count}-level model", upward.len()));
        }
        let (down, out) = match &self.decoder {
            Decoder::Plain(d) => return Ok((d.forward(f, z_top)?, Vec::new())),
            Decoder::Ladder { down, out } => (down, out),
        };
        let mut z = z_top;
        let mut stats = Vec::with_capacity(l_count - 1);
        for (i, s) in down.iter().enumerate() {
            let level = l_count - 1 - i; // 1-based level produced by this stage
            let map = self.expand(f, s, z)?;
            let flat = f.tape.flatten(map)?;
            let (mu_t, var_t) = s.heads.as_ref().expect("downward stages carry heads").forward(f, flat)?;
            let Some((mu, var)) = upward[level - 1] else {
                return contract_err(format!("no bottom-up statistics at level {level}"));
            };
            let (q_mu, q_var) = merge_gaussian_tape(f.tape, mu, var, mu_t, var_t)?;
            z = match rng.as_deref_mut() {
                Some(r) => f.tape.reparameterize(q_mu, q_var, r)?,
                None => q_mu,
            };
            stats.push(LadderLayerStats { bottom_up: (mu, var), top_down: (mu_t, var_t), merged: (q_mu, q_var) });
        }
        stats.reverse();
        let h = self.expand(f, out, z)?;
        Ok((f.tape.sigmoid(h), stats))
    }

    /// Row `k` of the class-mean embedding, selected by a one-hot vector.
    pub fn class_mean(&self, label: &[f64]) -> Result<Vec<f64>> {
        let k = self.config.num_classes;
        let ones = label.iter().filter(|&&v| v == 1.0).count();
        if label.len() != k || ones != 1 || label.iter().any(|&v| v != 0.0 && v != 1.0) {
            return contract_err(format!("class_mean expects a one-hot vector of length {k}, got {label:?}"));
        }
        let c = argmax(label);
        let j = self.config.latent_dim;
        Ok(self.params.get("centers.weight")?.data()[c * j..(c + 1) * j].to_vec())
    }

    /// Softmax class scores for top latents `z` (`[N, J]`).
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &self.params, &self.running);
        let zv = f.tape.constant(z);
        let logits = self.cls.forward(&mut f, zv)?;
        let s = f.tape.softmax(logits)?;
        Ok(f.tape.tensor(s))
    }

    /// The training objective `recon + β·KL + λ·CE` on one batch.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        f: &mut Forward<'_>,
        x: &Tensor,
        labels: &[usize],
        beta: f64,
        rng: &mut R,
    ) -> Result<LossVars> {
        if !(0.0..=1.0).contains(&beta) {
            return contract_err(format!("beta {beta} outside [0, 1]"));
        }
        let n = x.shape()[0];
        let xv = f.tape.constant(x);
        let up = self.encode_upward(f, xv)?;
        let (mu_top, var_top) = up.last().copied().flatten().expect("top level always has heads");
        let z_top = f.tape.reparameterize(mu_top, var_top, rng)?;
        let (xr, stats) = self.decode_downward(f, z_top, &up, Some(rng))?;

        let d = f.tape.sub(xr, xv)?;
        let d2 = f.tape.square(d);
        let s = f.tape.sum(d2);
        let recon = f.tape.scale(s, 1.0 / n as f64);

        let onehot = f.tape.constant(&one_hot(labels, self.config.num_classes));
        let centers = f.param("centers.weight")?;
        let mu_k = f.tape.matmul(onehot, centers)?;
        let mut kl = kl_conditional_tape(f.tape, mu_top, var_top, mu_k)?;
        if self.config.ladder {
            for st in &stats {
                let (q_mu, q_var) = st.merged;
                let term = kl_gaussian_tape(f.tape, q_mu, q_var, st.top_down.0, st.top_down.1)?;
                kl = f.tape.add(kl, term)?;
            }
            kl = f.tape.scale(kl, 1.0 / self.config.num_layers() as f64);
        }

        let logits = self.cls.forward(f, z_top)?;
        let logp = f.tape.log_softmax(logits)?;
        let picked = f.tape.gather(logp, labels)?;
        let s = f.tape.sum(picked);
        let cls = f.tape.scale(s, -1.0 / n as f64);

        let bk = f.tape.scale(kl, beta);
        let lc = f.tape.scale(cls, self.config.lambda);
        let total = f.tape.add(recon, bk)?;
        let total = f.tape.add(total, lc)?;
        Ok(LossVars { total, recon, kl, cls, logits })
    }
}

impl OpenSetModel for CpgmVae {
    fn kind(&self) -> ModelKind {
        ModelKind::CpgmVae
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

    /// Latent is the top posterior mean; the decoder propagates merged means.
    fn infer_batch(&self, x: &Tensor, with_recon: bool) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &self.params, &self.running);
        let xv = f.tape.constant(x);
        let up = self.encode_upward(&mut f, xv)?;
        let (mu_top, _) = up.last().copied().flatten().expect("top level always has heads");
        let logits = self.cls.forward(&mut f, mu_top)?;
        let scores = f.tape.softmax(logits)?;
        let recon_error = if with_recon {
            let (xr, _) = self.decode_downward::<rand_chacha::ChaCha8Rng>(&mut f, mu_top, &up, None)?;
            Some(row_sq_errors(f.tape.value(xr), x.data(), x.shape()[0]))
        } else {
            None
        };
        Ok(Inference { latent: f.tape.tensor(mu_top), scores: f.tape.tensor(scores), recon_error })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub beta: f64,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub cls: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub batch_accuracy: f64,
}

/// Shuffled mini-batch SGD on every parameter, class means included.
pub fn train_cpgm_vae(data: &Dataset, config: &VaeConfig) -> Result<(CpgmVae, Vec<VaeEpoch>)> {
    let mut model = CpgmVae::new(config.clone())?;
    let labels = check_trainable(data, config.num_classes, config.layer_spec.input_shape)?;
    let mut opt = OptimizerState::new(config.learning_rate, config.momentum)?;
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let beta = config.beta(epoch);
        let mut shuffle = rng::stream(config.seed, "shuffle", epoch as u64);
        let mut noise = rng::stream(config.seed, "reparam", epoch as u64);
        let mut acc = VaeEpoch { epoch, beta, total: 0.0, recon: 0.0, kl: 0.0, cls: 0.0, batch_accuracy: 0.0 };
        let mut correct = 0;
        for batch in minibatches(data.len(), config.batch_size, &mut shuffle) {
            let x = data.batch(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (vars, updates) = {
                let mut f = Forward::train(&mut tape, &model.params);
                let vars = model.loss(&mut f, &x, &y, beta, &mut noise)?;
                (vars, f.bn_updates)
            };
            let w = batch.len() as f64;
            let v = vars.values(&tape);
            acc.total += v.total * w;
            acc.recon += v.recon * w;
            acc.kl += v.kl * w;
            acc.cls += v.cls * w;
            let logits = tape.value(vars.logits);
            let k = config.num_classes;
            correct += y.iter().enumerate().filter(|(i, &l)| argmax(&logits[i * k..(i + 1) * k]) == l).count();
            tape.backward(vars.total, &mut model.params)?;
            opt.step(&mut model.params)?;
            for (name, s) in &updates {
                model.running.update(name, s);
            }
        }
        let n = data.len() as f64;
        acc.total /= n;
        acc.recon /= n;
        acc.kl /= n;
        acc.cls /= n;
        acc.batch_accuracy = correct as f64 / n;
        if !acc.total.is_finite() {
            return Err(Error::Domain(format!("training loss diverged at epoch {epoch}")));
        }
        trace.push(acc);
    }
    Ok((model, trace))
}
