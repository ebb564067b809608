//! Normalization layers and losses with fused backward rules.

use super::{Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{sigmoid, softplus, Real};

/// Per-group statistics cache used by the backward pass.
struct NormCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
}

/// Normalizes `x` laid out as `[samples][positions][channels]`, one
/// statistic per (sample, group).
fn normalize<S: Real>(
    x: &[S],
    samples: usize,
    positions: usize,
    channels: usize,
    groups: usize,
    eps: S,
) -> NormCache<S> {
    let cg = channels / groups;
    let m = S::from_usize_lossy(positions * cg);
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); samples * groups];
    for n in 0..samples {
        let base = n * positions * channels;
        for g in 0..groups {
            let members = || {
                (0..positions).flat_map(move |p| {
                    (g * cg..(g + 1) * cg).map(move |c| base + p * channels + c)
                })
            };
            let mean = members().map(|i| x[i]).sum::<S>() / m;
            let var = members().map(|i| (x[i] - mean) * (x[i] - mean)).sum::<S>() / m;
            let is = S::one() / (var + eps).sqrt();
            inv_std[n * groups + g] = is;
            for i in members() {
                xhat[i] = (x[i] - mean) * is;
            }
        }
    }
    NormCache { xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
fn normalize_backward<S: Real>(
    g: &[S],
    cache: &NormCache<S>,
    gamma: &[S],
    samples: usize,
    positions: usize,
    channels: usize,
    groups: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let cg = channels / groups;
    let m = S::from_usize_lossy(positions * cg);
    let mut dx = vec![S::zero(); g.len()];
    let mut dgamma = vec![S::zero(); channels];
    let mut dbeta = vec![S::zero(); channels];
    for (i, (&gv, &xh)) in g.iter().zip(&cache.xhat).enumerate() {
        let c = i % channels;
        dgamma[c] = dgamma[c] + gv * xh;
        dbeta[c] = dbeta[c] + gv;
    }
    for n in 0..samples {
        let base = n * positions * channels;
        for gr in 0..groups {
            let members = || {
                (0..positions).flat_map(move |p| {
                    (gr * cg..(gr + 1) * cg).map(move |c| (base + p * channels + c, c))
                })
            };
            let mut mean_d = S::zero();
            let mut mean_dx = S::zero();
            for (i, c) in members() {
                let d = g[i] * gamma[c];
                mean_d = mean_d + d;
                mean_dx = mean_dx + d * cache.xhat[i];
            }
            mean_d = mean_d / m;
            mean_dx = mean_dx / m;
            let is = cache.inv_std[n * groups + gr];
            for (i, c) in members() {
                let d = g[i] * gamma[c];
                dx[i] = is * (d - mean_d - cache.xhat[i] * mean_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl<'t, S: Real> Var<'t, S> {
    /// Group normalization for `x` shaped `[N, ..., C]`: each sample `n` and
    /// channel group is normalized over all middle positions, then scaled by
    /// `gamma[C]` and shifted by `beta[C]`.
    pub fn group_norm(
        self,
        groups: usize,
        gamma: Var<'t, S>,
        beta: Var<'t, S>,
        eps: S,
    ) -> Result<Var<'t, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err("group_norm", format!("rank {} < 2", shape.len())));
        }
        let samples = shape[0];
        let channels = shape[shape.len() - 1];
        let positions = shape[1..shape.len() - 1].iter().product::<usize>();
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.shape() != [channels] || bt.shape() != [channels] {
            return Err(shape_err(
                "group_norm",
                format!("affine {:?}/{:?} for {channels} channels", gm.shape(), bt.shape()),
            ));
        }
        let cache = normalize(x.data(), samples, positions, channels, groups, eps);
        let data: Vec<S> = cache
            .xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| {
                let c = i % channels;
                gm.data()[c] * xh + bt.data()[c]
            })
            .collect();
        let out = Tensor::from_parts(shape.clone(), data);
        self.tape
            .record("group_norm", out, &[self, gamma, beta], move |g, needs| {
                let (dx, dg, db) = normalize_backward(
                    g.data(),
                    &cache,
                    gm.data(),
                    samples,
                    positions,
                    channels,
                    groups,
                );
                vec![
                    needs[0].then(|| Tensor::from_parts(shape.clone(), dx)),
                    needs[1].then(|| Tensor::from_parts(vec![channels], dg)),
                    needs[2].then(|| Tensor::from_parts(vec![channels], db)),
                ]
            })
    }

    /// Layer normalization over the last axis of every row.
    pub fn layer_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let c = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        let rows = if c == 0 { 0 } else { shape.iter().product::<usize>() / c };
        self.reshape(vec![rows, c])?
            .group_norm(1, gamma, beta, eps)?
            .reshape(shape)
    }

    /// Mean softmax cross-entropy of `[B, K]` (or `[K]`) logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        let k = *x.shape().last().unwrap_or(&0);
        if k < 2 {
            return Err(shape_err("cross_entropy", format!("need K >= 2, got {k}")));
        }
        let b = x.numel() / k;
        if labels.len() != b {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![S::zero(); x.numel()];
        let mut loss = S::zero();
        for (r, (row, &label)) in x.data().chunks(k).zip(labels).enumerate() {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
            loss = loss + lse - row[label];
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let inv_b = S::one() / S::from_usize_lossy(b);
        let out = Tensor::scalar(loss * inv_b);
        let shape = x.shape().to_vec();
        let labels = labels.to_vec();
        self.tape.record("cross_entropy", out, &[self], move |g, _| {
            let scale = g.data()[0] * inv_b;
            let mut d = probs.clone();
            for (r, &label) in labels.iter().enumerate() {
                d[r * k + label] = d[r * k + label] - S::one();
            }
            for v in d.iter_mut() {
                *v = *v * scale;
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        })
    }

    /// Mean independent binary cross-entropy of logits against {0,1} targets.
    pub fn bce_multilabel(self, targets: &Tensor<S>) -> Result<Var<'t, S>> {
        let z = self.value();
        let loss = bce_multilabel_value(&z, targets)?;
        let n = S::from_usize_lossy(z.numel());
        let targets = targets.clone();
        self.tape
            .record("bce_multilabel", Tensor::scalar(loss), &[self], move |g, _| {
                let scale = g.data()[0] / n;
                vec![Some(
                    z.zip_map(&targets, |zv, y| (sigmoid(zv) - y) * scale)
                        .unwrap(),
                )]
            })
    }
}

/// Mean binary cross-entropy in the stable logit form
/// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_multilabel_value<S: Real>(logits: &Tensor<S>, targets: &Tensor<S>) -> Result<S> {
    if logits.shape() != targets.shape() {
        return Err(shape_err(
            "bce_multilabel",
            format!("{:?} vs {:?}", logits.shape(), targets.shape()),
        ));
    }
    if logits.numel() == 0 {
        return Err(shape_err("bce_multilabel", "empty input"));
    }
    if targets
        .data()
        .iter()
        .any(|&y| y != S::zero() && y != S::one())
    {
        return Err(Error::InvalidArgument("BCE targets must be 0 or 1".into()));
    }
    let total: S = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&z, &y)| softplus(z) - z * y)
        .sum();
    Ok(total / S::from_usize_lossy(logits.numel()))
}

/// Cross-entropy of one logit row, without a tape.
pub fn cross_entropy_value<S: Real>(logits: &[S], label: usize) -> Result<S> {
    if logits.len() < 2 || label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} for {} logits",
            logits.len()
        )));
    }
    let mx = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = mx + logits.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
    Ok(lse - logits[label])
}
