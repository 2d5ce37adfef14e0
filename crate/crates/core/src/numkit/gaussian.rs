//! Diagonal-Gaussian helpers, each in a taped and a plain-value form.
//!
//! None of these clamp `logvar`; models clamp their own log-variances before
//! handing them over.

use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::rng::{standard_normal, Rng};
use super::tensor::Tensor2;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn same_shape(what: &str, ts: &[&Tensor2]) -> Result<()> {
    let s = ts[0].shape();
    if ts.iter().any(|t| t.shape() != s) {
        let shapes: Vec<_> = ts.iter().map(|t| t.shape()).collect();
        return Err(Error::Dimension(format!("{what}: shapes differ {shapes:?}")));
    }
    Ok(())
}

/// Per-row `Σ_d −½((x−μ)²/σ² + logvar + ln 2π)`.
pub fn gaussian_logpdf(x: &Tensor2, mean: &Tensor2, logvar: &Tensor2) -> Result<Vec<f64>> {
    same_shape("gaussian_logpdf", &[x, mean, logvar])?;
    Ok((0..x.rows())
        .map(|r| {
            x.row(r)
                .iter()
                .zip(mean.row(r))
                .zip(logvar.row(r))
                .map(|((&xv, &m), &lv)| -0.5 * ((xv - m).powi(2) / lv.exp() + lv + LN_2PI))
                .sum()
        })
        .collect())
}

/// Taped version of [`gaussian_logpdf`]; returns an `n×1` node.
pub fn gaussian_logpdf_var(g: &mut Graph, x: Var, mean: Var, logvar: Var) -> Var {
    let diff = g.sub(x, mean);
    let sq = g.square(diff);
    let neg_lv = g.neg(logvar);
    let inv_var = g.exp(neg_lv);
    let mahal = g.mul(sq, inv_var);
    let inner = g.add(mahal, logvar);
    let inner = g.add_scalar(inner, LN_2PI);
    let per_dim = g.scale(inner, -0.5);
    g.sum_cols(per_dim)
}

/// Per-row `KL(N(μq, σq²) ‖ N(μp, σp²))` for diagonal covariances.
pub fn kl_diag_gaussians(mean_q: &Tensor2, logvar_q: &Tensor2, mean_p: &Tensor2, logvar_p: &Tensor2) -> Result<Vec<f64>> {
    same_shape("kl_diag_gaussians", &[mean_q, logvar_q, mean_p, logvar_p])?;
    Ok((0..mean_q.rows())
        .map(|r| {
            let mut kl = 0.0;
            for d in 0..mean_q.cols() {
                let (mq, lq, mp, lp) = (mean_q.get(r, d), logvar_q.get(r, d), mean_p.get(r, d), logvar_p.get(r, d));
                kl += 0.5 * (lp - lq + ((lq - lp).exp() + (mq - mp).powi(2) / lp.exp()) - 1.0);
            }
            kl
        })
        .collect())
}

/// Taped version of [`kl_diag_gaussians`]; returns an `n×1` node.
pub fn kl_diag_gaussians_var(g: &mut Graph, mean_q: Var, logvar_q: Var, mean_p: Var, logvar_p: Var) -> Var {
    let dlv = g.sub(logvar_q, logvar_p);
    let ratio = g.exp(dlv);
    let dm = g.sub(mean_q, mean_p);
    let dm2 = g.square(dm);
    let neg_lp = g.neg(logvar_p);
    let inv_p = g.exp(neg_lp);
    let mahal = g.mul(dm2, inv_p);
    let a = g.add(ratio, mahal);
    let b = g.sub(a, dlv);
    let c = g.add_scalar(b, -1.0);
    let per_dim = g.scale(c, 0.5);
    g.sum_cols(per_dim)
}

/// Draws `mean + exp(½·logvar) ⊙ ξ`, `ξ ~ N(0, I)`.
pub fn reparam_sample(mean: &Tensor2, logvar: &Tensor2, rng: &mut Rng) -> Result<Tensor2> {
    same_shape("reparam_sample", &[mean, logvar])?;
    let noise: Vec<f64> = (0..mean.len()).map(|_| standard_normal(rng)).collect();
    let data = mean
        .data()
        .iter()
        .zip(logvar.data())
        .zip(&noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(Tensor2::raw(mean.rows(), mean.cols(), data))
}

/// Taped reparameterized sample; differentiable in `mean` and `logvar`.
pub fn reparam_sample_var(g: &mut Graph, mean: Var, logvar: Var, rng: &mut Rng) -> Var {
    let (r, c) = g.shape(mean);
    let noise: Vec<f64> = (0..r * c).map(|_| standard_normal(rng)).collect();
    let xi = g.constant(Tensor2::raw(r, c, noise));
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, xi);
    g.add(mean, scaled)
}

/// Scalar density, used by quadrature checks.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}
