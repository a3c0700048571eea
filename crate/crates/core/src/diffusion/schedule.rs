use serde::{Deserialize, Serialize};

use crate::error::{CsdmError, Result};

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA: f64 = 1e-5;

/// `alpha_t = (1 - beta)^t` and the side-information weights `c_t`, stored
/// for `t = 0..=T` with `alpha_0 = 1` and `c_0 = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub beta: f64,
    alphas: Vec<f64>,
    cs: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta: f64) -> Result<Schedule> {
    if steps < 2 {
        return Err(CsdmError::Validation(format!(
            "need at least 2 diffusion steps, got {steps}"
        )));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CsdmError::Validation(format!(
            "beta must be in (0, 1), got {beta}"
        )));
    }
    let mut alphas = Vec::with_capacity(steps + 1);
    alphas.push(1.0);
    for t in 1..=steps {
        alphas.push((1.0 - beta).powi(t as i32));
    }
    // c_t is a normalised partial sum of alpha_k^{-1/2}.
    let mut partial = Vec::with_capacity(steps + 1);
    partial.push(0.0);
    let mut acc = 0.0;
    for a in &alphas[1..] {
        acc += 1.0 / a.sqrt();
        partial.push(acc);
    }
    let total = acc;
    let mut cs: Vec<f64> = partial.iter().map(|p| p / total).collect();
    cs[steps] = 1.0;
    Ok(Schedule {
        steps,
        beta,
        alphas,
        cs,
    })
}

impl Schedule {
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn c(&self, t: usize) -> f64 {
        self.cs[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn cs(&self) -> &[f64] {
        &self.cs
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(CsdmError::Validation(format!(
                "step {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }
}
