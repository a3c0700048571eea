//! Forward and reverse process on batches of hidden states (`[n, k]`, one
//! state per row).

use super::schedule::Schedule;
use crate::error::{CsdmError, Result};
use crate::numcore::{SplitRng, Tensor};

/// Anything that predicts the noise in `z_t`, one step per row.
pub trait Denoise {
    fn predict_noise(&self, z_t: &Tensor, steps: &[usize]) -> Result<Tensor>;
}

/// A denoiser that always predicts zero noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDenoiser;

impl Denoise for ZeroDenoiser {
    fn predict_noise(&self, z_t: &Tensor, _steps: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(z_t.shape()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, ctx: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CsdmError::dim(a.shape(), b.shape(), ctx));
    }
    Ok(())
}

/// Inverted dropout on a tensor; survivors are scaled by `1 / (1 - p)`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut SplitRng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(CsdmError::Validation(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(x.shape(), |_| if rng.bernoulli(p) { 0.0 } else { keep });
    x.zip_map(&mask, |a, m| a * m)
}

/// `z_t = sqrt(a_t) z0 + sqrt(c_t) h + sqrt(1 - a_t) eps`, evaluated row-wise
/// with the given noise.
pub fn forward_with_noise(
    s: &Schedule,
    z0: &Tensor,
    h: &Tensor,
    eps: &Tensor,
    steps: &[usize],
) -> Result<Tensor> {
    same_shape(z0, h, "forward z0/h")?;
    same_shape(z0, eps, "forward z0/eps")?;
    if steps.len() != z0.rows() {
        return Err(CsdmError::dim(z0.shape(), &[steps.len()], "forward steps"));
    }
    let mut out = Tensor::zeros(z0.shape());
    for (r, &t) in steps.iter().enumerate() {
        s.check_step(t)?;
        let (a, c) = (s.alpha(t), s.c(t));
        let (sa, sc, sn) = (a.sqrt(), c.sqrt(), (1.0 - a).sqrt());
        let (zr, hr, er) = (z0.row(r), h.row(r), eps.row(r));
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = sa * zr[j] + sc * hr[j] + sn * er[j];
        }
    }
    Ok(out)
}

/// Draws `z_t` given `z0` and `h`; returns `(z_t, eps)`. When training, `h`
/// passes through dropout with probability `dropout_p` first.
pub fn forward_sample(
    s: &Schedule,
    z0: &Tensor,
    h: &Tensor,
    steps: &[usize],
    rng: &mut SplitRng,
    training: bool,
    dropout_p: f64,
) -> Result<(Tensor, Tensor)> {
    let eps = Tensor::from_fn(z0.shape(), |_| rng.normal());
    let h = if training {
        dropout(h, dropout_p, rng)?
    } else {
        h.clone()
    };
    let z = forward_with_noise(s, z0, &h, &eps, steps)?;
    Ok((z, eps))
}

/// Coefficients `(kappa, lambda, nu)` of the posterior mean
/// `kappa z_t + lambda z0 + nu h` for the step `t -> t - 1`.
pub fn posterior_coeffs(s: &Schedule, t: usize, sigma: f64) -> Result<(f64, f64, f64)> {
    if t < 2 || t > s.steps {
        return Err(CsdmError::Validation(format!(
            "posterior step {t} outside 2..={}",
            s.steps
        )));
    }
    coeffs_between(s, t, t - 1, sigma)
}

fn coeffs_between(s: &Schedule, t: usize, prev: usize, sigma: f64) -> Result<(f64, f64, f64)> {
    let (a_t, a_p) = (s.alpha(t), s.alpha(prev));
    let room = 1.0 - a_p - sigma * sigma;
    if sigma < 0.0 || room < 0.0 {
        return Err(CsdmError::Validation(format!(
            "sigma {sigma} too large for step {t}: sigma^2 must not exceed {}",
            1.0 - a_p
        )));
    }
    let kappa = (room / (1.0 - a_t)).sqrt();
    let lambda = a_p.sqrt() - a_t.sqrt() * kappa;
    let nu = s.c(prev).sqrt() - s.c(t).sqrt() * kappa;
    Ok((kappa, lambda, nu))
}

/// One draw of `z_{t-1} ~ N(kappa z_t + lambda z0 + nu h, sigma^2 I)`.
pub fn posterior_sample(
    s: &Schedule,
    z_t: &Tensor,
    z0: &Tensor,
    h: &Tensor,
    t: usize,
    sigma: f64,
    rng: &mut SplitRng,
) -> Result<Tensor> {
    same_shape(z_t, z0, "posterior z_t/z0")?;
    same_shape(z_t, h, "posterior z_t/h")?;
    let (kappa, lambda, nu) = posterior_coeffs(s, t, sigma)?;
    let mut out = z_t.clone();
    for ((o, &a), &b) in out.data_mut().iter_mut().zip(z0.data()).zip(h.data()) {
        *o = kappa * *o + lambda * a + nu * b;
        if sigma > 0.0 {
            *o += sigma * rng.normal();
        }
    }
    Ok(out)
}

/// `g = (z_t - sqrt(c_t) h - sqrt(1 - a_t) eps_hat) / sqrt(a_t)`, row-wise.
pub fn denoised_from_noise(
    s: &Schedule,
    z_t: &Tensor,
    h: &Tensor,
    eps_hat: &Tensor,
    steps: &[usize],
) -> Result<Tensor> {
    same_shape(z_t, h, "predict z_t/h")?;
    same_shape(z_t, eps_hat, "predict z_t/eps")?;
    if steps.len() != z_t.rows() {
        return Err(CsdmError::dim(z_t.shape(), &[steps.len()], "predict steps"));
    }
    let k = z_t.cols();
    let mut g = Tensor::zeros(z_t.shape());
    for (r, &t) in steps.iter().enumerate() {
        s.check_step(t)?;
        let (a, c) = (s.alpha(t), s.c(t));
        let (sa, sc, sn) = (a.sqrt(), c.sqrt(), (1.0 - a).sqrt());
        for j in 0..k {
            g.row_mut(r)[j] = (z_t.row(r)[j] - sc * h.row(r)[j] - sn * eps_hat.row(r)[j]) / sa;
        }
    }
    Ok(g)
}

pub fn predict_z0(
    den: &impl Denoise,
    s: &Schedule,
    z_t: &Tensor,
    h: &Tensor,
    steps: &[usize],
) -> Result<Tensor> {
    let eps_hat = den.predict_noise(z_t, steps)?;
    denoised_from_noise(s, z_t, h, &eps_hat, steps)
}

/// Moves every row from step `t` to `prev < t`. With `sigma = 0` the step is
/// deterministic; `prev = 0` returns the denoised prediction itself.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    den: &impl Denoise,
    s: &Schedule,
    z_t: &Tensor,
    t: usize,
    prev: usize,
    h: &Tensor,
    sigma: f64,
    rng: &mut SplitRng,
) -> Result<Tensor> {
    if prev >= t {
        return Err(CsdmError::Validation(format!(
            "reverse step must go down, got {t} -> {prev}"
        )));
    }
    s.check_step(t)?;
    let steps = vec![t; z_t.rows()];
    let eps_hat = den.predict_noise(z_t, &steps)?;
    let g = denoised_from_noise(s, z_t, h, &eps_hat, &steps)?;
    if prev == 0 {
        return Ok(g);
    }
    let a_p = s.alpha(prev);
    let room = 1.0 - a_p - sigma * sigma;
    if sigma < 0.0 || room < 0.0 {
        return Err(CsdmError::Validation(format!(
            "sigma {sigma} too large for step {t} -> {prev}"
        )));
    }
    let (sa, sr, sc) = (a_p.sqrt(), room.sqrt(), s.c(prev).sqrt());
    let mut out = g;
    for ((o, &e), &hv) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(h.data()) {
        *o = sa * *o + sr * e + sc * hv;
        if sigma > 0.0 {
            *o += sigma * rng.normal();
        }
    }
    Ok(out)
}

/// `[T, T - s, T - 2s, ...]` down to the smallest positive index, then 0.
pub fn subsequence(steps: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > steps {
        return Err(CsdmError::Validation(format!(
            "stride {stride} outside 1..={steps}"
        )));
    }
    let mut seq: Vec<usize> = (1..=steps).rev().step_by(stride).collect();
    seq.push(0);
    Ok(seq)
}

/// Runs the reverse chain from `z_start` (at step `T`) along the
/// sub-sequence with stride `stride`. `sigma_frac` in `[0, 1)` sets
/// `sigma = sigma_frac * sqrt(1 - a_prev)` for each hop.
pub fn sample_chain(
    den: &impl Denoise,
    s: &Schedule,
    z_start: &Tensor,
    h: &Tensor,
    stride: usize,
    sigma_frac: f64,
    rng: &mut SplitRng,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&sigma_frac) {
        return Err(CsdmError::Validation(format!(
            "sigma fraction must be in [0, 1), got {sigma_frac}"
        )));
    }
    let seq = subsequence(s.steps, stride)?;
    let mut z = z_start.clone();
    for w in seq.windows(2) {
        let sigma = sigma_frac * (1.0 - s.alpha(w[1])).sqrt();
        z = reverse_step(den, s, &z, w[0], w[1], h, sigma, rng)?;
    }
    Ok(z)
}

/// Mean over rows of `|eps - eps_hat|^2`, with `t` drawn uniformly per row.
pub fn diffusion_loss(
    den: &impl Denoise,
    s: &Schedule,
    z0: &Tensor,
    h: &Tensor,
    rng: &mut SplitRng,
    dropout_p: f64,
) -> Result<f64> {
    let steps: Vec<usize> = (0..z0.rows())
        .map(|_| rng.int_inclusive(1, s.steps))
        .collect();
    let (z_t, eps) = forward_sample(s, z0, h, &steps, rng, true, dropout_p)?;
    let eps_hat = den.predict_noise(&z_t, &steps)?;
    same_shape(&eps, &eps_hat, "denoiser output")?;
    let sq: f64 = eps
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / z0.rows().max(1) as f64)
}
