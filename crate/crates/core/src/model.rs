//! What the detector and the experiment harness need from a trained model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    CpgmVae,
    CpgmAae,
    Variant1,
    Variant2,
    Cnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CpgmVae => "cpgm_vae",
            ModelKind::CpgmAae => "cpgm_aae",
            ModelKind::Variant1 => "variant1",
            ModelKind::Variant2 => "variant2",
            ModelKind::Cnn => "cnn",
        }
    }
}

/// Deterministic inference outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    /// `[N, J]` latent fed to the unknown detector.
    pub latent: Tensor,
    /// `[N, K]` softmax scores of the known classifier.
    pub scores: Tensor,
    /// `‖x − x̃‖²` per sample, when requested and a decoder exists.
    pub recon_error: Option<Vec<f64>>,
}

impl Inference {
    pub fn len(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.scores.row(i))).collect()
    }
}

pub trait OpenSetModel {
    fn kind(&self) -> ModelKind;
    fn num_classes(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn input_shape(&self) -> [usize; 3];
    fn has_decoder(&self) -> bool;
    /// Eval-mode forward pass over one batch `[N, C, H, W]`.
    fn infer_batch(&self, x: &Tensor, with_recon: bool) -> Result<Inference>;
}

const INFER_CHUNK: usize = 256;

/// [`OpenSetModel::infer_batch`] over a whole dataset in fixed-size chunks.
pub fn infer(model: &dyn OpenSetModel, ds: &Dataset, with_recon: bool) -> Result<Inference> {
    if ds.image_shape() != model.input_shape() {
        return shape_err(format!("model expects {:?} images, dataset has {:?}", model.input_shape(), ds.image_shape()));
    }
    let (j, k) = (model.latent_dim(), model.num_classes());
    let mut latent = Vec::with_capacity(ds.len() * j);
    let mut scores = Vec::with_capacity(ds.len() * k);
    let mut recon: Option<Vec<f64>> = (with_recon && model.has_decoder()).then(Vec::new);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(INFER_CHUNK) {
        let out = model.infer_batch(&ds.batch(chunk)?, with_recon)?;
        latent.extend_from_slice(out.latent.data());
        scores.extend_from_slice(out.scores.data());
        if let (Some(acc), Some(r)) = (recon.as_mut(), out.recon_error) {
            acc.extend(r);
        }
    }
    Ok(Inference {
        latent: Tensor::new(vec![ds.len(), j], latent)?,
        scores: Tensor::new(vec![ds.len(), k], scores)?,
        recon_error: recon,
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Shuffled index batches. A trailing batch of one sample is folded into the
/// previous batch, since training-mode batch norm needs two samples.
pub(crate) fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

pub(crate) fn check_trainable(ds: &Dataset, k: usize, input_shape: [usize; 3]) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if ds.image_shape() != input_shape {
        return shape_err(format!("model expects {input_shape:?} images, dataset has {:?}", ds.image_shape()));
    }
    ds.class_indices(k)
}

/// One-hot rows for `labels`.
pub(crate) fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    t
}

/// Per-row `Σ (a − b)²` of two equal-length flat buffers with `n` rows.
pub(crate) fn row_sq_errors(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let stride = a.len().checked_div(n).unwrap_or(0);
    (0..n)
        .map(|i| a[i * stride..(i + 1) * stride].iter().zip(&b[i * stride..(i + 1) * stride]).map(|(x, y)| (x - y).powi(2)).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn minibatches_cover_and_avoid_singletons() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = minibatches(65, 64, &mut r);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 65);
        let mut all: Vec<usize> = minibatches(130, 64, &mut r).concat();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }
}
