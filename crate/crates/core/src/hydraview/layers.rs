//! View-strided convolution, temporal strands and the four-direction scan.

use super::scan::{selective_scan, BoundScan};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::{concat, Var};

/// Output view count and leading view padding for a strided view axis.
pub fn view_padding(views: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = views.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(views);
    (out, total / 2)
}

/// Strided convolution over the `V × T` grid of `m` shaped `[V, T, C]`:
/// `M'[k, t] = Σ_{i<K_v} Σ_{j<K_t} W_{i,j} · M[k·s_v + i − p_v, t + j − p_t]`,
/// with zero padding (`p_t = (K_t − 1)/2`, `p_v` from [`view_padding`]).
/// `w` is `[K_v·K_t·C, C']`, row `(i·K_t + j)·C + c`. Output `[⌈V/s_v⌉, T, C']`.
pub fn view_strided_conv<'t, S: Real>(
    m: Var<'t, S>,
    w: Var<'t, S>,
    kernel: (usize, usize),
    view_stride: usize,
) -> Result<Var<'t, S>> {
    let shape = m.shape();
    let &[v, t, c] = shape.as_slice() else {
        return Err(shape_err("view_strided_conv", format!("expected [V, T, C], got {shape:?}")));
    };
    let (kv, kt) = kernel;
    if view_stride == 0 {
        return Err(Error::InvalidArgument("view stride must be >= 1".into()));
    }
    if kv == 0 || kt == 0 || v == 0 || t == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel {kv}×{kt} on a {v}×{t} grid"
        )));
    }
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != kv * kt * c {
        return Err(shape_err(
            "view_strided_conv",
            format!("weight {ws:?} for kernel {kv}×{kt} and {c} channels"),
        ));
    }
    let (vo, pv) = view_padding(v, kv, view_stride);
    let pt = (kt - 1) / 2;
    let mut taps = Vec::with_capacity(kv * kt);
    for i in 0..kv {
        let vidx: Vec<Option<usize>> = (0..vo)
            .map(|k| (k * view_stride + i).checked_sub(pv).filter(|&s| s < v))
            .collect();
        let rows = m.gather(0, &vidx)?;
        for j in 0..kt {
            let tidx: Vec<Option<usize>> = (0..t)
                .map(|x| (x + j).checked_sub(pt).filter(|&s| s < t))
                .collect();
            taps.push(rows.gather(1, &tidx)?);
        }
    }
    let stacked = if taps.len() == 1 { taps[0] } else { concat(&taps, 2)? };
    stacked
        .reshape(vec![vo * t, kv * kt * c])?
        .matmul(w)?
        .reshape(vec![vo, t, ws[1]])
}

/// Validity after the view conv: an output cell is valid when any view in
/// its receptive window is valid at that time step.
pub fn conv_validity(valid: &[bool], views: usize, kernel_v: usize, stride: usize) -> Vec<bool> {
    let t = valid.len() / views.max(1);
    let (vo, pv) = view_padding(views, kernel_v, stride);
    let mut out = vec![false; vo * t];
    for k in 0..vo {
        for i in 0..kernel_v {
            let Some(src) = (k * stride + i).checked_sub(pv).filter(|&s| s < views) else {
                continue;
            };
            for x in 0..t {
                out[k * t + x] |= valid[src * t + x];
            }
        }
    }
    out
}

/// Strand `r` holds time indices `r, r + s, r + 2s, …`.
pub fn strand_indices(len: usize, stride: usize) -> Result<Vec<Vec<usize>>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("temporal dilation must be >= 1".into()));
    }
    Ok((0..stride.min(len.max(1)))
        .map(|r| (r..len).step_by(stride).collect())
        .filter(|s: &Vec<usize>| !s.is_empty())
        .collect())
}

pub fn strand_split<T: Clone>(xs: &[T], stride: usize) -> Result<Vec<Vec<T>>> {
    Ok(strand_indices(xs.len(), stride)?
        .into_iter()
        .map(|idx| idx.into_iter().map(|i| xs[i].clone()).collect())
        .collect())
}

/// Inverse of [`strand_split`].
pub fn strand_merge<T: Clone>(strands: &[Vec<T>], stride: usize) -> Result<Vec<T>> {
    let len: usize = strands.iter().map(Vec::len).sum();
    let idx = strand_indices(len, stride)?;
    if idx.len() != strands.len() || idx.iter().zip(strands).any(|(i, s)| i.len() != s.len()) {
        return Err(Error::InvalidArgument("strand lengths do not match the stride".into()));
    }
    let mut out: Vec<Option<T>> = vec![None; len];
    for (i, s) in idx.iter().zip(strands) {
        for (&pos, x) in i.iter().zip(s) {
            out[pos] = Some(x.clone());
        }
    }
    Ok(out.into_iter().map(|x| x.expect("strands partition the indices")).collect())
}

fn reversed(len: usize) -> Vec<usize> {
    (0..len).rev().collect()
}

/// Sum of four selective scans over `x` shaped `[V, T, C]`: along time
/// forwards and backwards (one sequence per view row) and along views
/// forwards and backwards (one sequence per time column). Invalid cells are
/// zeroed on input and output. `dirs` order: time →, time ←, view →, view ←.
pub fn ss2d_scan<'t, S: Real>(
    x: Var<'t, S>,
    valid: &[bool],
    dirs: &[BoundScan<'t, S>; 4],
) -> Result<Var<'t, S>> {
    let shape = x.shape();
    let &[v, t, _] = shape.as_slice() else {
        return Err(shape_err("ss2d_scan", format!("expected [V, T, C], got {shape:?}")));
    };
    if valid.len() != v * t {
        return Err(shape_err("ss2d_scan", format!("mask of {} for {v}×{t}", valid.len())));
    }
    let mask: Vec<S> = valid.iter().map(|&b| if b { S::one() } else { S::zero() }).collect();
    let all_valid = valid.iter().all(|&b| b);
    let x = if all_valid { x } else { x.scale_rows(&mask)? };

    let time_fwd = selective_scan(x, &dirs[0])?;
    let rt = reversed(t);
    let time_bwd = selective_scan(x.select(1, &rt)?, &dirs[1])?.select(1, &rt)?;
    let xv = x.permute(&[1, 0, 2])?;
    let rv = reversed(v);
    let view_fwd = selective_scan(xv, &dirs[2])?.permute(&[1, 0, 2])?;
    let view_bwd = selective_scan(xv.select(1, &rv)?, &dirs[3])?
        .select(1, &rv)?
        .permute(&[1, 0, 2])?;
    let y = time_fwd.add(time_bwd)?.add(view_fwd)?.add(view_bwd)?;
    if all_valid {
        Ok(y)
    } else {
        y.scale_rows(&mask)
    }
}

/// Dilated scan at scale `s`: the time axis is split into `s` interleaved
/// strands, each scanned independently, then restored to time order.
pub fn dilated_ss2d<'t, S: Real>(
    x: Var<'t, S>,
    valid: &[bool],
    dirs: &[BoundScan<'t, S>; 4],
    scale: usize,
) -> Result<Var<'t, S>> {
    let shape = x.shape();
    let &[v, t, _] = shape.as_slice() else {
        return Err(shape_err("dilated_ss2d", format!("expected [V, T, C], got {shape:?}")));
    };
    let strands = strand_indices(t, scale)?;
    if strands.len() == 1 {
        return ss2d_scan(x, valid, dirs);
    }
    let mut outs = Vec::with_capacity(strands.len());
    for idx in &strands {
        let sub_valid: Vec<bool> = (0..v)
            .flat_map(|row| idx.iter().map(move |&i| valid[row * t + i]))
            .collect();
        outs.push(ss2d_scan(x.select(1, idx)?, &sub_valid, dirs)?);
    }
    let joined = concat(&outs, 1)?;
    // position of original time i inside the concatenated strands
    let order: Vec<usize> = strands.iter().flatten().copied().collect();
    let mut inverse = vec![0; t];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    joined.select(1, &inverse)
}

/// Masked mean over the view axis of `x` shaped `[V, T, C]` → `[T, C]`.
/// Time steps with no valid view pool to zero.
pub fn masked_view_mean<'t, S: Real>(x: Var<'t, S>, valid: &[bool]) -> Result<Var<'t, S>> {
    let shape = x.shape();
    let &[v, t, _] = shape.as_slice() else {
        return Err(shape_err("masked_view_mean", format!("expected [V, T, C], got {shape:?}")));
    };
    if valid.len() != v * t {
        return Err(shape_err("masked_view_mean", format!("mask of {} for {v}×{t}", valid.len())));
    }
    let counts: Vec<usize> = (0..t).map(|i| (0..v).filter(|&r| valid[r * t + i]).count()).collect();
    let weights: Vec<S> = (0..v * t)
        .map(|cell| {
            let n = counts[cell % t];
            if valid[cell] && n > 0 {
                S::one() / S::from_usize_lossy(n)
            } else {
                S::zero()
            }
        })
        .collect();
    x.scale_rows(&weights)?.sum_axis(0)
}
