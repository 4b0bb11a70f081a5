//! Named layers over the tape. Each layer owns only its hyperparameters and a
//! name prefix; weights live in the model's [`ParameterSet`].

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::init::{he_uniform, PRELU_INIT};
use crate::autodiff::{BatchStats, BnMode, ParameterSet, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running batch-norm statistics keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats {
    stats: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl RunningStats {
    pub fn register(&mut self, name: &str, channels: usize) {
        self.stats.insert(name.to_string(), (vec![0.0; channels], vec![1.0; channels]));
    }

    pub fn get(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.stats.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn insert(&mut self, name: String, mean: Vec<f64>, var: Vec<f64>) {
        self.stats.insert(name, (mean, var));
    }

    /// `running ← 0.9·running + 0.1·batch`.
    pub fn update(&mut self, name: &str, batch: &BatchStats) {
        if let Some((m, v)) = self.stats.get_mut(name) {
            for (r, b) in m.iter_mut().zip(&batch.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in v.iter_mut().zip(&batch.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.stats.iter().map(|(k, (m, v))| (k.as_str(), m.as_slice(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

/// Everything a forward pass needs besides its inputs.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParameterSet,
    /// `None` selects training mode (batch statistics).
    pub running: Option<&'a RunningStats>,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Forward<'a> {
    pub fn train(tape: &'a mut Tape, params: &'a ParameterSet) -> Self {
        Forward { tape, params, running: None, bn_updates: Vec::new() }
    }

    pub fn eval(tape: &'a mut Tape, params: &'a ParameterSet, running: &'a RunningStats) -> Self {
        Forward { tape, params, running: Some(running), bn_updates: Vec::new() }
    }

    pub fn training(&self) -> bool {
        self.running.is_none()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.params, name)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Linear { name: name.into(), d_in, d_out, bias: true }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<()> {
        params.insert(format!("{}.weight", self.name), he_uniform(&[self.d_out, self.d_in], self.d_in, rng))?;
        if self.bias {
            params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.d_out]))?;
        }
        Ok(())
    }

    /// Zero weights and bias; used for output layers that must start neutral.
    pub fn init_zero(&self, params: &mut ParameterSet) -> Result<()> {
        params.insert(format!("{}.weight", self.name), Tensor::zeros(&[self.d_out, self.d_in]))?;
        if self.bias {
            params.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.d_out]))?;
        }
        Ok(())
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.weight", self.name))?;
        let b = if self.bias { Some(f.param(&format!("{}.bias", self.name))?) } else { None };
        f.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Prelu {
    pub name: String,
    pub channels: usize,
}

impl Prelu {
    pub fn init(&self, params: &mut ParameterSet) -> Result<()> {
        params.insert(format!("{}.slope", self.name), Tensor::filled(&[self.channels], PRELU_INIT))
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let s = f.param(&format!("{}.slope", self.name))?;
        f.tape.prelu(x, s)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn init(&self, params: &mut ParameterSet, running: &mut RunningStats) -> Result<()> {
        params.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.channels]))?;
        params.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]))?;
        running.register(&self.name, self.channels);
        Ok(())
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = f.param(&format!("{}.gamma", self.name))?;
        let b = f.param(&format!("{}.beta", self.name))?;
        match f.running {
            None => {
                let (y, stats) = f.tape.batchnorm(x, g, b, BnMode::Train)?;
                if let Some(s) = stats {
                    f.bn_updates.push((self.name.clone(), s));
                }
                Ok(y)
            }
            Some(r) => {
                let Some((mean, var)) = r.get(&self.name) else {
                    return shape_err(format!("no running statistics for `{}`", self.name));
                };
                Ok(f.tape.batchnorm(x, g, b, BnMode::Eval { mean, var })?.0)
            }
        }
    }
}

/// Convolution geometry shared by a ladder of stride-reducing layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// Input `[channels, height, width]`.
    pub input_shape: [usize; 3],
    /// Output channels of each convolutional layer, bottom to top.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Default for LayerSpec {
    fn default() -> Self {
        LayerSpec { input_shape: [1, 16, 16], channels: vec![16, 32, 64], kernel: 3, stride: 2, padding: 1 }
    }
}

impl LayerSpec {
    /// Feature-map shape after each layer, bottom to top.
    pub fn feature_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [_, mut h, mut w] = self.input_shape;
        let mut out = Vec::with_capacity(self.channels.len());
        for &c in &self.channels {
            if self.kernel > h + 2 * self.padding || self.kernel > w + 2 * self.padding || self.stride == 0 {
                return shape_err(format!("layer spec {self:?} shrinks the input below the kernel size"));
            }
            h = (h + 2 * self.padding - self.kernel) / self.stride + 1;
            w = (w + 2 * self.padding - self.kernel) / self.stride + 1;
            out.push([c, h, w]);
        }
        Ok(out)
    }

    /// Output padding that makes a transposed convolution restore `target`
    /// from `source` spatial size.
    pub fn output_padding(&self, source: usize, target: usize) -> Result<usize> {
        let base = (source - 1) * self.stride + self.kernel;
        let base = base.checked_sub(2 * self.padding).unwrap_or(0);
        match target.checked_sub(base) {
            Some(op) if op < self.stride => Ok(op),
            _ => shape_err(format!("transposed convolution cannot map size {source} back to {target}")),
        }
    }
}

/// Convolution → batch norm → PReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    bn: BatchNorm,
    act: Prelu,
}

impl ConvBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, spec: &LayerSpec) -> Self {
        ConvBlock {
            name: name.to_string(),
            in_ch,
            out_ch,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            bn: BatchNorm { name: format!("{name}.bn"), channels: out_ch },
            act: Prelu { name: format!("{name}.prelu"), channels: out_ch },
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, running: &mut RunningStats, rng: &mut R) -> Result<()> {
        let k = self.kernel;
        let fan_in = self.in_ch * k * k;
        params.insert(format!("{}.conv.weight", self.name), he_uniform(&[self.out_ch, self.in_ch, k, k], fan_in, rng))?;
        params.insert(format!("{}.conv.bias", self.name), Tensor::zeros(&[self.out_ch]))?;
        self.bn.init(params, running)?;
        self.act.init(params)
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.conv.weight", self.name))?;
        let b = f.param(&format!("{}.conv.bias", self.name))?;
        let y = f.tape.conv2d(x, w, Some(b), self.stride, self.padding)?;
        let y = self.bn.forward(f, y)?;
        self.act.forward(f, y)
    }
}

/// Transposed convolution, optionally followed by PReLU.
#[derive(Clone, Debug)]
pub struct ConvTBlock {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    act: Option<Prelu>,
}

impl ConvTBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, spec: &LayerSpec, output_padding: usize, activate: bool) -> Self {
        ConvTBlock {
            name: name.to_string(),
            in_ch,
            out_ch,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            output_padding,
            act: activate.then(|| Prelu { name: format!("{name}.prelu"), channels: out_ch }),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<()> {
        let k = self.kernel;
        let fan_in = self.in_ch * k * k;
        params.insert(format!("{}.convt.weight", self.name), he_uniform(&[self.in_ch, self.out_ch, k, k], fan_in, rng))?;
        params.insert(format!("{}.convt.bias", self.name), Tensor::zeros(&[self.out_ch]))?;
        match &self.act {
            Some(a) => a.init(params),
            None => Ok(()),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(&format!("{}.convt.weight", self.name))?;
        let b = f.param(&format!("{}.convt.bias", self.name))?;
        let y = f.tape.conv_transpose2d(x, w, Some(b), self.stride, self.padding, self.output_padding)?;
        match &self.act {
            Some(a) => a.forward(f, y),
            None => Ok(y),
        }
    }
}

/// Stack of [`ConvBlock`]s named `{prefix}.1 … {prefix}.L`.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub blocks: Vec<ConvBlock>,
    /// Feature-map shape after each block.
    pub shapes: Vec<[usize; 3]>,
}

impl Trunk {
    pub fn new(prefix: &str, spec: &LayerSpec) -> Result<Self> {
        let shapes = spec.feature_shapes()?;
        let mut in_ch = spec.input_shape[0];
        let mut blocks = Vec::with_capacity(shapes.len());
        for (l, s) in shapes.iter().enumerate() {
            blocks.push(ConvBlock::new(&format!("{prefix}.{}", l + 1), in_ch, s[0], spec));
            in_ch = s[0];
        }
        Ok(Trunk { blocks, shapes })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, running: &mut RunningStats, rng: &mut R) -> Result<()> {
        self.blocks.iter().try_for_each(|b| b.init(params, running, rng))
    }

    /// Every intermediate feature map, bottom to top.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Vec<Var>> {
        let mut maps = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(f, h)?;
            maps.push(h);
        }
        Ok(maps)
    }

    /// Flattened top feature map.
    pub fn top(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let maps = self.forward(f, x)?;
        f.tape.flatten(*maps.last().expect("trunk has at least one block"))
    }

    pub fn top_width(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }
}

/// Latent vector → image: a linear map onto the top feature map, then
/// transposed convolutions back down to the input, ending in a sigmoid.
#[derive(Clone, Debug)]
pub struct Deconv {
    fc: Linear,
    top: [usize; 3],
    stages: Vec<ConvTBlock>,
}

impl Deconv {
    pub fn new(prefix: &str, spec: &LayerSpec, latent_dim: usize) -> Result<Self> {
        let shapes = spec.feature_shapes()?;
        let top = *shapes.last().ok_or_else(|| crate::Error::Shape("layer spec has no layers".into()))?;
        let fc = Linear::new(format!("{prefix}.fc"), latent_dim, top.iter().product());
        let mut stages = Vec::with_capacity(shapes.len());
        for l in (0..shapes.len()).rev() {
            let src = shapes[l];
            let dst = if l == 0 { spec.input_shape } else { shapes[l - 1] };
            let op = spec.output_padding(src[1], dst[1])?;
            stages.push(ConvTBlock::new(&format!("{prefix}.{}", l + 1), src[0], dst[0], spec, op, l > 0));
        }
        Ok(Deconv { fc, top, stages })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<()> {
        self.fc.init(params, rng)?;
        self.stages.iter().try_for_each(|s| s.init(params, rng))
    }

    pub fn forward(&self, f: &mut Forward<'_>, z: Var) -> Result<Var> {
        let n = f.tape.shape(z)[0];
        let h = self.fc.forward(f, z)?;
        let [c, hh, ww] = self.top;
        let mut h = f.tape.unflatten(h, &[n, c, hh, ww])?;
        for s in &self.stages {
            h = s.forward(f, h)?;
        }
        Ok(f.tape.sigmoid(h))
    }
}
