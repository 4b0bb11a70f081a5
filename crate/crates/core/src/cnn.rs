//! Plain discriminative baseline: the encoder trunk, a `J`-wide feature layer
//! and the linear classifier, trained on `λ·CE` alone. It shares the VAE
//! configuration so the two are trained under identical settings; the
//! ladder flag is ignored.

use serde::{Deserialize, Serialize};

use crate::autodiff::{OptimizerState, ParameterSet, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, check_trainable, minibatches, Inference, ModelKind, OpenSetModel};
use crate::nn::{Forward, Linear, RunningStats, Trunk};
use crate::rng;
use crate::vae::VaeConfig;

pub struct Cnn {
    pub config: VaeConfig,
    pub params: ParameterSet,
    pub running: RunningStats,
    trunk: Trunk,
    feature: Linear,
    cls: Linear,
}

impl Cnn {
    pub fn new(config: VaeConfig) -> Result<Self> {
        let mut m = Cnn::skeleton(config)?;
        let mut r = rng::stream(m.config.seed, "init", 0);
        m.trunk.init(&mut m.params, &mut m.running, &mut r)?;
        m.feature.init(&mut m.params, &mut r)?;
        m.cls.init(&mut m.params, &mut r)?;
        Ok(m)
    }

    pub(crate) fn skeleton(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let trunk = Trunk::new("enc", &config.layer_spec)?;
        let feature = Linear::new("enc.z", trunk.top_width(), config.latent_dim);
        let cls = Linear::new("cls", config.latent_dim, config.num_classes);
        Ok(Cnn { config, params: ParameterSet::new(), running: RunningStats::default(), trunk, feature, cls })
    }

    /// `(features, logits)`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<(Var, Var)> {
        let h = self.trunk.top(f, x)?;
        let z = self.feature.forward(f, h)?;
        let logits = self.cls.forward(f, z)?;
        Ok((z, logits))
    }
}

impl OpenSetModel for Cnn {
    fn kind(&self) -> ModelKind {
        ModelKind::Cnn
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
        false
    }

    fn infer_batch(&self, x: &Tensor, _with_recon: bool) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut f = Forward::eval(&mut tape, &self.params, &self.running);
        let xv = f.tape.constant(x);
        let (z, logits) = self.forward(&mut f, xv)?;
        let scores = f.tape.softmax(logits)?;
        Ok(Inference { latent: f.tape.tensor(z), scores: f.tape.tensor(scores), recon_error: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnEpoch {
    pub epoch: usize,
    pub cls: f64,
    pub batch_accuracy: f64,
}

pub fn train_cnn(data: &Dataset, config: &VaeConfig) -> Result<(Cnn, Vec<CnnEpoch>)> {
    let mut model = Cnn::new(config.clone())?;
    let labels = check_trainable(data, config.num_classes, config.layer_spec.input_shape)?;
    let mut opt = OptimizerState::new(config.learning_rate, config.momentum)?;
    let k = config.num_classes;
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut shuffle = rng::stream(config.seed, "shuffle", epoch as u64);
        let (mut total, mut correct) = (0.0, 0);
        for batch in minibatches(data.len(), config.batch_size, &mut shuffle) {
            let x = data.batch(&batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let (loss, logits, updates) = {
                let mut f = Forward::train(&mut tape, &model.params);
                let xv = f.tape.constant(&x);
                let (_, logits) = model.forward(&mut f, xv)?;
                let logp = f.tape.log_softmax(logits)?;
                let picked = f.tape.gather(logp, &y)?;
                let s = f.tape.sum(picked);
                let loss = f.tape.scale(s, -config.lambda / y.len() as f64);
                (loss, logits, f.bn_updates)
            };
            total += tape.scalar(loss) / config.lambda * y.len() as f64;
            let l = tape.value(logits);
            correct += y.iter().enumerate().filter(|(i, &c)| argmax(&l[i * k..(i + 1) * k]) == c).count();
            tape.backward(loss, &mut model.params)?;
            opt.step(&mut model.params)?;
            for (name, s) in &updates {
                model.running.update(name, s);
            }
        }
        let n = data.len() as f64;
        if !total.is_finite() {
            return Err(Error::Domain(format!("training loss diverged at epoch {epoch}")));
        }
        trace.push(CnnEpoch { epoch, cls: total / n, batch_accuracy: correct as f64 / n });
    }
    Ok((model, trace))
}
