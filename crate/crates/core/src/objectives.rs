//! Losses, batch latent statistics, evaluation metrics and error maps.
//!
//! Plain functions work on slices in any scalar type; the `*_graph` builders
//! append the same expressions to a [`Graph`] for training.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Scale-invariance weight of the log loss.
    pub gamma: f64,
    /// KL weight in the caption branch.
    pub alpha: f64,
    /// KL weight in the image branch.
    pub beta: f64,
    /// Lower bound on the batch standard deviation of the epsilon grid.
    pub sigma_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.85,
            alpha: 1e-3,
            beta: 1e-3,
            sigma_floor: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("KL weights must be non-negative"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::config("sigma floor must be positive"));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(op: &str, y: &[T], target: &[T], mask: &[bool]) -> Result<usize> {
    if y.len() != target.len() || y.len() != mask.len() {
        return Err(Error::contract(
            op,
            format!("lengths {} / {} / {} differ", y.len(), target.len(), mask.len()),
        ));
    }
    let mut n = 0;
    for ((&a, &b), &m) in y.iter().zip(target).zip(mask) {
        if m {
            if !(a > T::zero() && b > T::zero()) {
                return Err(Error::contract(op, format!("non-positive depth under mask ({a}, {b})")));
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::contract(op, "mask selects no pixels"));
    }
    Ok(n)
}

/// Scale-invariant log loss over masked pixels.
pub fn si_loss<T: Scalar>(y: &[T], target: &[T], mask: &[bool], gamma: T) -> Result<T> {
    let n = T::lit(check_pair("si_loss", y, target, mask)? as f64);
    let (mut s1, mut s2) = (T::zero(), T::zero());
    for ((&a, &b), &m) in y.iter().zip(target).zip(mask) {
        if m {
            let e = a.ln() - b.ln();
            s1 += e;
            s2 += e * e;
        }
    }
    Ok(s2 / n - gamma * (s1 / n) * (s1 / n))
}

/// KL divergence of a diagonal Gaussian from the standard normal, averaged over dimensions.
pub fn kl_loss<T: Scalar>(mu: &[T], sigma: &[T]) -> Result<T> {
    if mu.len() != sigma.len() || mu.is_empty() {
        return Err(Error::contract(
            "kl_loss",
            "mu and sigma must be non-empty and equal length",
        ));
    }
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > T::zero()) {
            return Err(Error::contract("kl_loss", format!("sigma {s} is not positive")));
        }
        acc += -s.ln() + (s * s + m * m) * half - half;
    }
    Ok(acc / T::lit(mu.len() as f64))
}

/// Per-dimension mean and floored population std of an epsilon batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

/// Statistics of a `[b, d, h, w]` batch over all `b·h·w` cells.
pub fn batch_eps_stats<T: Scalar>(eps: &[T], shape: [usize; 4], floor: T) -> Result<BatchStats<T>> {
    let [b, d, h, w] = shape;
    if eps.len() != b * d * h * w {
        return Err(Error::contract("batch_eps_stats", "data does not match shape"));
    }
    let cells = b * h * w;
    if cells < 2 {
        return Err(Error::contract(
            "batch_eps_stats",
            format!("{cells} cells, need at least 2"),
        ));
    }
    let plane = h * w;
    let count = T::lit(cells as f64);
    let channel = |k: usize| (0..b).flat_map(move |i| eps[(i * d + k) * plane..][..plane].iter().copied());
    let mut mu = Vec::with_capacity(d);
    let mut sigma = Vec::with_capacity(d);
    for k in 0..d {
        let m = channel(k).sum::<T>() / count;
        let var = channel(k).map(|v| (v - m) * (v - m)).sum::<T>() / count;
        mu.push(m);
        sigma.push(var.sqrt().max(floor));
    }
    Ok(BatchStats { mu, sigma })
}

/// Caption-branch objective for one sample.
pub fn vae_objective<T: Scalar>(
    target: &[T],
    pred: &[T],
    mask: &[bool],
    mu: &[T],
    sigma: &[T],
    cfg: &LossConfig,
) -> Result<T> {
    Ok(si_loss(pred, target, mask, T::lit(cfg.gamma))? + T::lit(cfg.alpha) * kl_loss(mu, sigma)?)
}

/// Image-branch objective for one sample with the statistics of its batch.
pub fn cs_objective<T: Scalar>(
    target: &[T],
    pred: &[T],
    mask: &[bool],
    stats: &BatchStats<T>,
    cfg: &LossConfig,
) -> Result<T> {
    Ok(si_loss(pred, target, mask, T::lit(cfg.gamma))? + T::lit(cfg.beta) * kl_loss(&stats.mu, &stats.sigma)?)
}

/// Graph inputs describing the ground truth of a batch.
#[derive(Clone, Copy, Debug)]
pub struct TargetNodes {
    /// `ln y*` where valid, 0 elsewhere; `[n, 1, H, W]`.
    pub log_target: NodeId,
    /// 1 where valid, 0 elsewhere; `[n, 1, H, W]`.
    pub mask: NodeId,
    /// `1 / N_e` per sample; `[n]`.
    pub inv_count: NodeId,
}

/// Batch mean of the per-sample scale-invariant loss. `pred` is `[n, 1, H, W]`.
pub fn si_loss_graph(g: &mut Graph, pred: NodeId, t: TargetNodes, gamma: f64) -> Result<NodeId> {
    let log_pred = g.ln(pred);
    let diff = g.sub(log_pred, t.log_target)?;
    let e = g.mul(diff, t.mask)?;
    let e2 = g.square(e);
    let s1 = g.sum(e, &[1, 2, 3])?;
    let s2 = g.sum(e2, &[1, 2, 3])?;
    let mean_e = g.mul(s1, t.inv_count)?;
    let mean_e2 = g.mul(s2, t.inv_count)?;
    let sq = g.square(mean_e);
    let pen = g.scale(sq, gamma);
    let per_sample = g.sub(mean_e2, pen)?;
    let loss = g.mean_all(per_sample)?;
    g.set_label(loss, "si_loss");
    Ok(loss)
}

/// KL term averaged over every element of `mu`/`sigma`.
pub fn kl_graph(g: &mut Graph, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    let log_sigma = g.ln(sigma);
    let s2 = g.square(sigma);
    let m2 = g.square(mu);
    let quad = g.add(s2, m2)?;
    let half = g.scale(quad, 0.5);
    let t = g.sub(half, log_sigma)?;
    let t = g.add_const(t, -0.5);
    let kl = g.mean_all(t)?;
    g.set_label(kl, "kl");
    Ok(kl)
}

/// Batch statistics nodes `(mu, sigma)`, each `[d]`, of an `[n, d, h, w]` grid.
pub fn batch_stats_graph(g: &mut Graph, eps: NodeId, floor: f64) -> Result<(NodeId, NodeId)> {
    let s = g.shape(eps).to_vec();
    if s.len() != 4 || s[0] * s[2] * s[3] < 2 {
        return Err(Error::contract(
            "batch_eps_stats",
            format!("grid shape {s:?} has fewer than 2 cells"),
        ));
    }
    let mu = g.mean(eps, &[0, 2, 3])?;
    let mu4 = g.reshape(mu, &[1, s[1], 1, 1])?;
    let mu_b = g.broadcast(mu4, &s)?;
    let centered = g.sub(eps, mu_b)?;
    let sq = g.square(centered);
    let var = g.mean(sq, &[0, 2, 3])?;
    let var = g.max_const(var, floor * floor);
    let sigma = g.sqrt(var);
    g.set_label(mu, "mu_tilde");
    g.set_label(sigma, "sigma_tilde");
    Ok((mu, sigma))
}

/// Standard monocular depth metrics over the masked pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub log10: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: u64,
}

/// Running sums for metrics pooled over many images.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    abs_rel: f64,
    sq: f64,
    log10: f64,
    sq_log: f64,
    hits: [u64; 3],
    pixels: u64,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: Scalar>(&mut self, y: &[T], target: &[T], mask: &[bool]) -> Result<()> {
        check_pair("compute_metrics", y, target, mask)?;
        let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
        for ((&a, &b), &m) in y.iter().zip(target).zip(mask) {
            if !m {
                continue;
            }
            let (p, t) = (a.to_f64_lossy(), b.to_f64_lossy());
            self.abs_rel += (p - t).abs() / t;
            self.sq += (p - t) * (p - t);
            self.log10 += (p.log10() - t.log10()).abs();
            self.sq_log += (p.ln() - t.ln()).powi(2);
            let ratio = (p / t).max(t / p);
            for (hit, thr) in self.hits.iter_mut().zip(thresholds) {
                *hit += (ratio < thr) as u64;
            }
            self.pixels += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.pixels == 0 {
            return Err(Error::contract("compute_metrics", "mask selects no pixels"));
        }
        let n = self.pixels as f64;
        Ok(MetricsReport {
            abs_rel: self.abs_rel / n,
            rmse: (self.sq / n).sqrt(),
            log10: self.log10 / n,
            rmse_log: (self.sq_log / n).sqrt(),
            delta1: self.hits[0] as f64 / n,
            delta2: self.hits[1] as f64 / n,
            delta3: self.hits[2] as f64 / n,
            pixels: self.pixels,
        })
    }
}

pub fn compute_metrics<T: Scalar>(y: &[T], target: &[T], mask: &[bool]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.add(y, target, mask)?;
    acc.report()
}

/// Per-pixel absolute relative error, 0 outside the mask.
pub fn error_map<T: Scalar>(y: &[T], target: &[T], mask: &[bool]) -> Result<Vec<T>> {
    check_pair("error_map", y, target, mask)?;
    Ok(y.iter()
        .zip(target)
        .zip(mask)
        .map(|((&a, &b), &m)| if m { (b - a).abs() / b } else { T::zero() })
        .collect())
}
