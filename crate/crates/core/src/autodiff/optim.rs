use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::ParameterSet;
use crate::error::{contract_err, Result};

/// Plain stochastic gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(skip)]
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return contract_err(format!("learning rate must be positive, got {learning_rate}"));
        }
        if !(momentum >= 0.0) {
            return contract_err(format!("momentum must be non-negative, got {momentum}"));
        }
        Ok(OptimizerState { learning_rate, momentum, velocity: BTreeMap::new() })
    }

    /// Updates every parameter; each must carry a gradient. Gradients are
    /// zeroed afterwards.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return contract_err(format!("parameter `{name}` has no gradient"));
        }
        self.step_where(params, |_| true)
    }

    /// Updates the parameters selected by `select` that carry a gradient and
    /// zeroes all gradients. Fails when no selected parameter has one.
    pub fn step_where(&mut self, params: &mut ParameterSet, select: impl Fn(&str) -> bool) -> Result<()> {
        let mut touched = 0;
        for (name, t) in params.iter_mut() {
            if !select(name) {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            touched += 1;
            let lr = self.learning_rate;
            if self.momentum == 0.0 {
                t.data_mut().iter_mut().zip(&g).for_each(|(w, gv)| *w -= lr * gv);
            } else {
                let v = self.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                for ((w, vv), gv) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                    *vv = self.momentum * *vv + gv;
                    *w -= lr * *vv;
                }
            }
        }
        params.zero_grad();
        if touched == 0 {
            return contract_err("no selected parameter has a gradient");
        }
        Ok(())
    }
}
