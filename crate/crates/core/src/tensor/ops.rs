//! Differentiable operations on [`Var`].

use super::kernels::{matmul, matmul_nt, matmul_tn};
use super::{axis_split, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{softplus, sigmoid, Real};

fn same_shape<S: Real>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t, S: Real> Var<'t, S> {
    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        self.tape.record("add", out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        self.tape.record("sub", out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        })
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        self.tape.record("mul", out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |x, y| x * y).unwrap()),
                needs[1].then(|| g.zip_map(&a, |x, y| x * y).unwrap()),
            ]
        })
    }

    pub fn scale(self, factor: S) -> Result<Var<'t, S>> {
        let out = self.value().map(|x| x * factor);
        self.tape
            .record("scale", out, &[self], move |g, _| vec![Some(g.map(|x| x * factor))])
    }

    pub fn neg(self) -> Result<Var<'t, S>> {
        self.scale(-S::one())
    }

    pub fn square(self) -> Result<Var<'t, S>> {
        self.mul(self)
    }

    /// Adds `bias[C]` to every row of a tensor whose last axis is `C`.
    pub fn add_bias(self, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap_or(&1);
        if b.shape() != [c] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for input {:?}", b.shape(), x.shape()),
            ));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.tape.record("add_bias", out, &[self, bias], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![S::zero(); c];
                for row in g.data().chunks(c) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                Tensor::from_parts(vec![c], acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Multiplies each last-axis row `r` by the constant `weights[r]`.
    pub fn scale_rows(self, weights: &[S]) -> Result<Var<'t, S>> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&1);
        if c == 0 || x.numel() / c != weights.len() {
            return Err(shape_err(
                "scale_rows",
                format!("{} weights for shape {:?}", weights.len(), x.shape()),
            ));
        }
        let scale = move |t: &Tensor<S>, w: &[S]| {
            let mut data = t.data().to_vec();
            for (row, &wv) in data.chunks_mut(c).zip(w) {
                for v in row.iter_mut() {
                    *v = *v * wv;
                }
            }
            Tensor::from_parts(t.shape().to_vec(), data)
        };
        let out = scale(&x, weights);
        let w = weights.to_vec();
        self.tape
            .record("scale_rows", out, &[self], move |g, _| vec![Some(scale(g, &w))])
    }

    pub fn relu(self) -> Result<Var<'t, S>> {
        let x = self.value();
        let out = x.map(|v| v.max(S::zero()));
        self.tape.record("relu", out, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&x, |gv, xv| if xv > S::zero() { gv } else { S::zero() })
                    .unwrap(),
            )]
        })
    }

    pub fn softplus(self) -> Result<Var<'t, S>> {
        let x = self.value();
        let out = x.map(softplus);
        self.tape.record("softplus", out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| gv * sigmoid(xv)).unwrap())]
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t, S>> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.tape.record("sigmoid", out, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&y, |gv, yv| gv * yv * (S::one() - yv)).unwrap(),
            )]
        })
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(shape_err(
                "matmul",
                format!("{:?} · {:?} (both must be 2-D)", a.shape(), b.shape()),
            ));
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}×{k}] · [{k2}×{n}]")));
        }
        let out = Tensor::from_parts(vec![m, n], matmul(a.data(), b.data(), m, k, n));
        self.tape.record("matmul", out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| {
                    Tensor::from_parts(vec![m, k], matmul_nt(g.data(), b.data(), m, n, k))
                }),
                needs[1].then(|| {
                    Tensor::from_parts(vec![k, n], matmul_tn(a.data(), g.data(), m, k, n))
                }),
            ]
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        self.tape.record("reshape", out, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, S>> {
        let x = self.value();
        let out = permute_tensor(&x, perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape.record("permute", out, &[self], move |g, _| {
            vec![Some(permute_tensor(g, &inverse).unwrap())]
        })
    }

    /// Selects positions along `axis`; `None` entries produce zeros (padding).
    pub fn gather(self, axis: usize, index: &[Option<usize>]) -> Result<Var<'t, S>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(shape_err("gather", format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= len) {
            return Err(shape_err("gather", format!("index {bad} out of range {len}")));
        }
        let mut data = vec![S::zero(); outer * index.len() * inner];
        for o in 0..outer {
            for (j, src) in index.iter().enumerate() {
                if let Some(src) = *src {
                    let from = (o * len + src) * inner;
                    let to = (o * index.len() + j) * inner;
                    data[to..to + inner].copy_from_slice(&x.data()[from..from + inner]);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = index.len();
        let out = Tensor::from_parts(shape, data);
        let in_shape = x.shape().to_vec();
        let index = index.to_vec();
        self.tape.record("gather", out, &[self], move |g, _| {
            let mut acc = vec![S::zero(); outer * len * inner];
            let gd = g.data();
            for o in 0..outer {
                for (j, src) in index.iter().enumerate() {
                    if let Some(src) = *src {
                        let to = (o * len + src) * inner;
                        let from = (o * index.len() + j) * inner;
                        for (a, &v) in acc[to..to + inner].iter_mut().zip(&gd[from..from + inner])
                        {
                            *a = *a + v;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), acc))]
        })
    }

    /// Selects positions along `axis` (no padding).
    pub fn select(self, axis: usize, index: &[usize]) -> Result<Var<'t, S>> {
        let idx: Vec<Option<usize>> = index.iter().map(|&i| Some(i)).collect();
        self.gather(axis, &idx)
    }

    pub fn sum_all(self) -> Result<Var<'t, S>> {
        let x = self.value();
        let out = Tensor::scalar(x.sum());
        let shape = x.shape().to_vec();
        self.tape.record("sum_all", out, &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0]))]
        })
    }

    pub fn mean_all(self) -> Result<Var<'t, S>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(shape_err("mean_all", "empty tensor"));
        }
        self.sum_all()?.scale(S::one() / S::from_usize_lossy(n))
    }

    /// Sums out `axis`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let from = (o * len + l) * inner;
                for (a, &v) in data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(&x.data()[from..from + inner])
                {
                    *a = *a + v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, data);
        let in_shape = x.shape().to_vec();
        self.tape.record("sum_axis", out, &[self], move |g, _| {
            let mut acc = vec![S::zero(); outer * len * inner];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let to = (o * len + l) * inner;
                    acc[to..to + inner].copy_from_slice(src);
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), acc))]
        })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, S>> {
        let len = self.shape().get(axis).copied().unwrap_or(0);
        if len == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} empty or missing")));
        }
        self.sum_axis(axis)?.scale(S::one() / S::from_usize_lossy(len))
    }

    /// Mixes the joint axis with a constant `adj[J×J]`:
    /// `y[.., j, c] = Σ_k adj[j, k] · x[.., k, c]` for `x` shaped `[.., J, C]`.
    pub fn joint_mix(self, adj: &Tensor<S>) -> Result<Var<'t, S>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        if r < 2 || adj.shape() != [shape[r - 2], shape[r - 2]] {
            return Err(shape_err(
                "joint_mix",
                format!("adjacency {:?} for input {:?}", adj.shape(), shape),
            ));
        }
        let (j, c) = (shape[r - 2], shape[r - 1]);
        let blocks = x.numel() / (j * c);
        let mut data = Vec::with_capacity(x.numel());
        for b in 0..blocks {
            let blk = &x.data()[b * j * c..(b + 1) * j * c];
            data.extend(matmul(adj.data(), blk, j, j, c));
        }
        let out = Tensor::from_parts(shape.clone(), data);
        let adj = adj.clone();
        self.tape.record("joint_mix", out, &[self], move |g, _| {
            let mut acc = Vec::with_capacity(g.numel());
            for b in 0..blocks {
                let blk = &g.data()[b * j * c..(b + 1) * j * c];
                acc.extend(matmul_tn(adj.data(), blk, j, j, c));
            }
            vec![Some(Tensor::from_parts(shape.clone(), acc))]
        })
    }
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<'t, S: Real>(parts: &[Var<'t, S>], axis: usize) -> Result<Var<'t, S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let tape: &'t Tape<S> = first.tape;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err("concat", format!("{s:?} vs {base:?}")));
        }
    }
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = axis_split(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base.clone();
    shape[axis] = total;
    let out = Tensor::from_parts(shape, data);
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    tape.record("concat", out, parts, move |g, needs| {
        let mut grads: Vec<Vec<S>> = lens
            .iter()
            .map(|&l| Vec::with_capacity(outer * l * inner))
            .collect();
        let gd = g.data();
        let mut off = 0;
        for _ in 0..outer {
            for (acc, &len) in grads.iter_mut().zip(&lens) {
                acc.extend_from_slice(&gd[off..off + len * inner]);
                off += len * inner;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .zip(needs)
            .map(|((d, s), &need)| need.then(|| Tensor::from_parts(s.clone(), d)))
            .collect()
    })
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<'t, S: Real>(parts: &[Var<'t, S>]) -> Result<Var<'t, S>> {
    let reshaped = parts
        .iter()
        .map(|p| {
            let mut s = p.shape();
            s.insert(0, 1);
            p.reshape(s)
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&reshaped, 0)
}

pub(crate) fn permute_tensor<S: Real>(x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let shape = x.shape();
    let r = shape.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err("permute", format!("perm {perm:?} for {shape:?}")));
    }
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(x.data()[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}
