//! Diagonal-Gaussian algebra: precision-weighted merging and KL divergences,
//! as plain functions and as tape operations over `[N, J]` batches.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{domain_err, shape_err, Result};

fn check_positive(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().find(|x| !(**x > 0.0)) {
        Some(x) => domain_err(format!("{what}: variance {x} is not positive")),
        None => Ok(()),
    }
}

fn check_len(what: &str, lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return shape_err(format!("{what}: operand lengths {lens:?} differ"));
    }
    Ok(())
}

/// Precision-weighted combination of `N(mu, var)` and `N(mu_t, var_t)`:
/// `q_var = 1/(1/var + 1/var_t)`, `q_mu = (mu_t/var_t + mu/var)·q_var`.
pub fn merge_gaussian(mu: &[f64], var: &[f64], mu_t: &[f64], var_t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("merge_gaussian", &[mu.len(), var.len(), mu_t.len(), var_t.len()])?;
    check_positive("merge_gaussian", var)?;
    check_positive("merge_gaussian", var_t)?;
    let mut q_mu = Vec::with_capacity(mu.len());
    let mut q_var = Vec::with_capacity(mu.len());
    for j in 0..mu.len() {
        let (p, pt) = (1.0 / var[j], 1.0 / var_t[j]);
        let v = 1.0 / (p + pt);
        q_var.push(v);
        q_mu.push((mu_t[j] * pt + mu[j] * p) * v);
    }
    Ok((q_mu, q_var))
}

/// `KL(N(mu, var) ‖ N(mu_k, I)) = −½ Σ (1 + ln var − (mu − mu_k)² − var)`.
pub fn kl_conditional(mu: &[f64], var: &[f64], mu_k: &[f64]) -> Result<f64> {
    check_len("kl_conditional", &[mu.len(), var.len(), mu_k.len()])?;
    check_positive("kl_conditional", var)?;
    Ok(-0.5 * (0..mu.len()).map(|j| 1.0 + var[j].ln() - (mu[j] - mu_k[j]).powi(2) - var[j]).sum::<f64>())
}

/// `KL(N(q_mu, q_var) ‖ N(p_mu, p_var)) = ½ Σ (ln(p_var/q_var) + (q_var + (q_mu − p_mu)²)/p_var − 1)`.
pub fn kl_gaussian(q_mu: &[f64], q_var: &[f64], p_mu: &[f64], p_var: &[f64]) -> Result<f64> {
    check_len("kl_gaussian", &[q_mu.len(), q_var.len(), p_mu.len(), p_var.len()])?;
    check_positive("kl_gaussian", q_var)?;
    check_positive("kl_gaussian", p_var)?;
    Ok(0.5
        * (0..q_mu.len())
            .map(|j| (p_var[j] / q_var[j]).ln() + (q_var[j] + (q_mu[j] - p_mu[j]).powi(2)) / p_var[j] - 1.0)
            .sum::<f64>())
}

fn ones_like(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    tape.constant(&Tensor::ones(&shape))
}

fn batch_rows(tape: &Tape, v: Var) -> f64 {
    tape.shape(v).first().copied().unwrap_or(1).max(1) as f64
}

/// Tape version of [`merge_gaussian`]; all four operands share one shape.
pub fn merge_gaussian_tape(tape: &mut Tape, mu: Var, var: Var, mu_t: Var, var_t: Var) -> Result<(Var, Var)> {
    check_positive("merge_gaussian", tape.value(var))?;
    check_positive("merge_gaussian", tape.value(var_t))?;
    let one = ones_like(tape, var);
    let p = tape.div(one, var)?;
    let pt = tape.div(one, var_t)?;
    let total = tape.add(p, pt)?;
    let q_var = tape.div(one, total)?;
    let a = tape.mul(mu_t, pt)?;
    let b = tape.mul(mu, p)?;
    let s = tape.add(a, b)?;
    let q_mu = tape.mul(s, q_var)?;
    Ok((q_mu, q_var))
}

/// Batch mean over rows of [`kl_conditional`].
pub fn kl_conditional_tape(tape: &mut Tape, mu: Var, var: Var, mu_k: Var) -> Result<Var> {
    check_positive("kl_conditional", tape.value(var))?;
    let n = batch_rows(tape, mu);
    let numel = tape.value(mu).len() as f64;
    let d = tape.sub(mu, mu_k)?;
    let d2 = tape.square(d);
    let lv = tape.ln(var);
    let t = tape.sub(d2, lv)?;
    let t = tape.add(t, var)?;
    let s = tape.sum(t);
    let s = tape.offset(s, -numel);
    Ok(tape.scale(s, 0.5 / n))
}

/// Batch mean over rows of [`kl_gaussian`].
pub fn kl_gaussian_tape(tape: &mut Tape, q_mu: Var, q_var: Var, p_mu: Var, p_var: Var) -> Result<Var> {
    check_positive("kl_gaussian", tape.value(q_var))?;
    check_positive("kl_gaussian", tape.value(p_var))?;
    let n = batch_rows(tape, q_mu);
    let numel = tape.value(q_mu).len() as f64;
    let lp = tape.ln(p_var);
    let lq = tape.ln(q_var);
    let d = tape.sub(q_mu, p_mu)?;
    let d2 = tape.square(d);
    let num = tape.add(q_var, d2)?;
    let ratio = tape.div(num, p_var)?;
    let t = tape.sub(lp, lq)?;
    let t = tape.add(t, ratio)?;
    let s = tape.sum(t);
    let s = tape.offset(s, -numel);
    Ok(tape.scale(s, 0.5 / n))
}
