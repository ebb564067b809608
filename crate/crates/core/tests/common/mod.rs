#![allow(dead_code)]

use hydraview::tensor::{Tape, Tensor, Var};
use hydraview::evaluation::EventRecord;
use hydraview::Result;

pub fn eval_scalar<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone()).unwrap()).collect();
    let out = f(&tape, &vars).unwrap();
    let v = out.value().item().unwrap();
    v
}

pub fn analytic_grad<F>(inputs: &[Tensor<f64>], f: &F) -> Vec<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone()).unwrap()).collect();
    let out = f(&tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    vars.iter()
        .map(|&v| grads.get_or_zeros(v).unwrap().data().to_vec())
        .collect()
}

/// Central finite-difference gradient of `f` with respect to every input entry.
pub fn numeric_grad<F>(inputs: &[Tensor<f64>], h: f64, f: &F) -> Vec<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut out = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let mut g = Vec::with_capacity(x.numel());
        for j in 0..x.numel() {
            let mut shifted = inputs.to_vec();
            let mut d = x.data().to_vec();
            d[j] = x.data()[j] + h;
            shifted[i] = Tensor::new(x.shape(), d.clone()).unwrap();
            let fp = eval_scalar(&shifted, f);
            d[j] = x.data()[j] - h;
            shifted[i] = Tensor::new(x.shape(), d).unwrap();
            let fm = eval_scalar(&shifted, f);
            g.push((fp - fm) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between analytic and finite-difference gradients.
pub fn max_grad_rel_err<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let a = analytic_grad(inputs, &f);
    let n = numeric_grad(inputs, h, &f);
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

pub fn rand_tensor(rng: &mut impl rand::Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Every `(input, entry, analytic, numeric, rel_err)` whose error exceeds `tol`.
pub fn grad_mismatches<F>(
    inputs: &[Tensor<f64>],
    h: f64,
    floor: f64,
    tol: f64,
    f: F,
) -> Vec<(usize, usize, f64, f64, f64)>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let a = analytic_grad(inputs, &f);
    let n = numeric_grad(inputs, h, &f);
    let mut out = Vec::new();
    for (i, (ga, gn)) in a.iter().zip(&n).enumerate() {
        for (j, (&x, &y)) in ga.iter().zip(gn).enumerate() {
            let e = rel_err(x, y, floor);
            if e > tol {
                out.push((i, j, x, y, e));
            }
        }
    }
    out
}

/// Token-by-token recurrence written from the definition.
pub fn scan_oracle(u: &Tensor<f64>, p: &[Tensor<f64>]) -> Vec<f64> {
    let (s, l, c) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = p[0].shape()[1];
    let mut y = vec![0.0; s * l * c];
    for si in 0..s {
        let mut h = vec![vec![0.0f64; n]; c];
        for t in 0..l {
            let tok: Vec<f64> = (0..c).map(|i| u.at(&[si, t, i])).collect();
            let proj = |w: &Tensor<f64>, col: usize| (0..c).map(|i| tok[i] * w.at(&[i, col])).sum::<f64>();
            let bt: Vec<f64> = (0..n).map(|k| proj(&p[1], k)).collect();
            let ct: Vec<f64> = (0..n).map(|k| proj(&p[2], k)).collect();
            for ch in 0..c {
                let z = proj(&p[3], ch);
                let delta = if z > 30.0 { z } else { z.exp().ln_1p() };
                let mut acc = 0.0;
                for k in 0..n {
                    let a = -p[0].at(&[ch, k]).exp();
                    h[ch][k] = (delta * a).exp() * h[ch][k] + delta * bt[k] * tok[ch];
                    acc += ct[k] * h[ch][k];
                }
                y[(si * l + t) * c + ch] = acc + p[4].at(&[ch]) * tok[ch];
            }
        }
    }
    y
}

/// Explicit double sum over view and time kernel offsets.
pub fn conv_oracle(m: &Tensor<f64>, w: &Tensor<f64>, kv: usize, kt: usize, sv: usize) -> (Vec<usize>, Vec<f64>) {
    let (v, t, c) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let co = w.shape()[1];
    let vo = (v + sv - 1) / sv;
    let total = ((vo - 1) * sv + kv).saturating_sub(v) as isize;
    let (pv, pt) = (total / 2, (kt as isize - 1) / 2);
    let mut out = vec![0.0; vo * t * co];
    for k in 0..vo {
        for x in 0..t {
            for o in 0..co {
                let mut acc = 0.0;
                for i in 0..kv {
                    for j in 0..kt {
                        let (src_v, src_t) = ((k * sv + i) as isize - pv, (x + j) as isize - pt);
                        if src_v < 0 || src_v >= v as isize || src_t < 0 || src_t >= t as isize {
                            continue;
                        }
                        for ci in 0..c {
                            acc += w.at(&[(i * kt + j) * c + ci, o]) * m.at(&[src_v as usize, src_t as usize, ci]);
                        }
                    }
                }
                out[(k * t + x) * co + o] = acc;
            }
        }
    }
    (vec![vo, t, co], out)
}

/// Greedy matching re-derived with explicit loops, scored with the
/// "max precision at recall ≥ k/n" form of all-points AP.
pub fn oracle_ap(dets: &[EventRecord], gts: &[EventRecord], iou: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].conf.partial_cmp(&dets[a].conf).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut table = Vec::new();
    let mut tp = 0;
    for (rank, &i) in order.iter().enumerate() {
        let d = &dets[i];
        let mut best = usize::MAX;
        let mut best_iou = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.seq != d.seq {
                continue;
            }
            let inter = d.end.min(gt.end) as f64 - d.start.max(gt.start) as f64;
            let inter = inter.max(0.0);
            let o = inter / ((d.end - d.start) as f64 + (gt.end - gt.start) as f64 - inter);
            if o > best_iou {
                best_iou = o;
                best = g;
            }
        }
        if best != usize::MAX && best_iou >= iou {
            used[best] = true;
            tp += 1;
        }
        table.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    (1..=gts.len())
        .map(|k| {
            let need = k as f64 / gts.len() as f64 - 1e-12;
            table.iter().filter(|(r, _)| *r >= need).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / gts.len() as f64
}
