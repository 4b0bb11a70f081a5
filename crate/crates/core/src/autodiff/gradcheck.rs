//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::ParameterSet;
use crate::error::{contract_err, Result};

/// Coordinates whose error reaches this level are reported as broken.
pub const FLAG_THRESHOLD: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<ParamCheck>,
    /// Parameters with at least one coordinate at or above [`FLAG_THRESHOLD`].
    pub flagged: Vec<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter; smaller tensors are checked in full.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, coords_per_param: 8, seed: 0 }
    }
}

fn eval<F>(f: &mut F, params: &ParameterSet) -> Result<f64>
where
    F: FnMut(&ParameterSet, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    Ok(tape.scalar(loss))
}

/// Compares tape gradients of `loss_fn` against central differences.
///
/// The error for one coordinate is `|analytic − numeric| / max(1, |numeric|)`;
/// the report carries the maximum over all sampled coordinates. `loss_fn`
/// must be deterministic: any randomness has to be re-seeded on every call.
pub fn finite_difference_check<F>(loss_fn: F, params: &ParameterSet, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterSet, &mut Tape) -> Result<Var>,
{
    finite_difference_check_where(loss_fn, params, opts, |_| true)
}

/// [`finite_difference_check`] restricted to the parameters `select` accepts,
/// for objectives that deliberately stop gradients into the others.
pub fn finite_difference_check_where<F, S>(mut loss_fn: F, params: &ParameterSet, opts: GradCheckOptions, select: S) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterSet, &mut Tape) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    if !(opts.step > 0.0) {
        return contract_err(format!("finite-difference step must be positive, got {}", opts.step));
    }
    let mut work = params.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&work, &mut tape)?;
    let base = tape.scalar(loss);
    tape.backward(loss, &mut work)?;
    if eval(&mut loss_fn, &work)?.to_bits() != base.to_bits() {
        return contract_err("loss is not deterministic under a fixed seed");
    }
    let analytic: Vec<(String, Option<Vec<f64>>)> = work
        .iter()
        .filter(|(n, _)| select(n))
        .map(|(n, t)| (n.to_string(), t.grad().map(<[f64]>::to_vec)))
        .collect();
    work.zero_grad();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_param = Vec::new();
    for (name, grad) in analytic {
        let numel = work.get(&name)?.numel();
        let idx: Vec<usize> = if numel <= opts.coords_per_param {
            (0..numel).collect()
        } else {
            let mut v = sample(&mut rng, numel, opts.coords_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + opts.step;
            let plus = eval(&mut loss_fn, &work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - opts.step;
            let minus = eval(&mut loss_fn, &work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        per_param.push(ParamCheck { name, coords: idx.len(), max_rel_error: worst });
    }
    let max_rel_error = per_param.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    let flagged = per_param
        .iter()
        .filter(|p| p.max_rel_error >= FLAG_THRESHOLD)
        .map(|p| p.name.clone())
        .collect();
    Ok(GradCheckReport { max_rel_error, per_param, flagged })
}
