//! Selective state-space recurrence, discretized with `Ā = exp(Δ·A)` and
//! `B̄ = Δ·B`, as one fused tape operation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Real;
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

/// Parameter ids of one scan direction for `C` channels and state size `N`.
#[derive(Clone, Copy, Debug)]
pub struct ScanParams {
    /// `[C, N]`, holding `ln(−A)` so that `A` stays negative.
    pub a_log: ParamId,
    /// `[C, N]` projection of a token to its input matrix `B_t`.
    pub w_b: ParamId,
    /// `[C, N]` projection of a token to its output matrix `C_t`.
    pub w_c: ParamId,
    /// `[C, C]` projection to the per-channel step `Δ_t` (before softplus).
    pub w_delta: ParamId,
    /// `[C]` skip gain.
    pub d: ParamId,
}

impl ScanParams {
    /// Registers a fresh direction set: `A[c, n] = −(n + 1)`, `D = 1`, small
    /// random projections.
    pub fn init<S: Real>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        state: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        let mut uniform = |shape: Vec<usize>, b: f64| {
            Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-b..b)))
        };
        let w_b = uniform(vec![channels, state], bound);
        let w_c = uniform(vec![channels, state], bound);
        let w_delta = uniform(vec![channels, channels], 0.5 * bound);
        Self {
            a_log: store.add(
                format!("{prefix}.a_log"),
                Tensor::from_fn(vec![channels, state], |i| S::lit(((i % state) as f64 + 1.0).ln())),
            ),
            w_b: store.add(format!("{prefix}.w_b"), w_b),
            w_c: store.add(format!("{prefix}.w_c"), w_c),
            w_delta: store.add(format!("{prefix}.w_delta"), w_delta),
            d: store.add(format!("{prefix}.d"), Tensor::full(vec![channels], S::one())),
        }
    }

    pub fn bind<'t, S: Real>(&self, bound: &[Var<'t, S>]) -> BoundScan<'t, S> {
        BoundScan {
            a_log: bound[self.a_log.0],
            w_b: bound[self.w_b.0],
            w_c: bound[self.w_c.0],
            w_delta: bound[self.w_delta.0],
            d: bound[self.d.0],
        }
    }
}

/// One direction's parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct BoundScan<'t, S: Real> {
    pub a_log: Var<'t, S>,
    pub w_b: Var<'t, S>,
    pub w_c: Var<'t, S>,
    pub w_delta: Var<'t, S>,
    pub d: Var<'t, S>,
}

/// `x[.., C_in] · w[C_in, C_out]` over the last axis.
pub(crate) fn linear<'t, S: Real>(x: Var<'t, S>, w: Var<'t, S>) -> Result<Var<'t, S>> {
    let mut shape = x.shape();
    let cin = *shape.last().ok_or_else(|| shape_err("linear", "scalar input"))?;
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != cin {
        return Err(shape_err("linear", format!("input {shape:?}, weight {ws:?}")));
    }
    let rows = shape.iter().product::<usize>() / cin.max(1);
    let y = x.reshape(vec![rows, cin])?.matmul(w)?;
    *shape.last_mut().unwrap() = ws[1];
    y.reshape(shape)
}

/// Runs the selective scan over `u` shaped `[S, L, C]`: `S` independent
/// sequences of length `L`, each token a `C`-vector.
///
/// Per channel `c` and state `n`, with `Δ = softplus(W_Δ u_t)`,
/// `B_t = W_B u_t` and `C_t = W_C u_t`:
/// `h_t = exp(Δ_c A_cn) h_{t−1} + Δ_c B_tn u_tc`, `y_tc = Σ_n C_tn h_tn + D_c u_tc`.
pub fn selective_scan<'t, S: Real>(u: Var<'t, S>, p: &BoundScan<'t, S>) -> Result<Var<'t, S>> {
    let shape = u.shape();
    let &[_, _, c] = shape.as_slice() else {
        return Err(shape_err("selective_scan", format!("expected [S, L, C], got {shape:?}")));
    };
    let delta = linear(u, p.w_delta)?.softplus()?;
    let b = linear(u, p.w_b)?;
    let cm = linear(u, p.w_c)?;
    let n = p.a_log.shape().get(1).copied().unwrap_or(0);
    if p.a_log.shape() != [c, n] || b.shape()[2] != n || p.d.shape() != [c] {
        return Err(shape_err(
            "selective_scan",
            format!(
                "A {:?}, B {:?}, D {:?} for {c} channels",
                p.a_log.shape(),
                b.shape(),
                p.d.shape()
            ),
        ));
    }
    scan_core(u, delta, p.a_log, b, cm, p.d)
}

struct Dims {
    s: usize,
    l: usize,
    c: usize,
    n: usize,
}

/// Fused recurrence on precomputed `Δ [S,L,C]`, `B [S,L,N]`, `C [S,L,N]`.
/// The backward pass runs the adjoint recurrence in reverse time using the
/// saved states.
pub fn scan_core<'t, S: Real>(
    u: Var<'t, S>,
    delta: Var<'t, S>,
    a_log: Var<'t, S>,
    b: Var<'t, S>,
    cm: Var<'t, S>,
    d: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (uv, dv, av, bv, cv, dd) = (u.value(), delta.value(), a_log.value(), b.value(), cm.value(), d.value());
    let us = uv.shape();
    let &[s, l, c] = us else {
        return Err(shape_err("scan_core", format!("u {us:?}")));
    };
    let n = av.shape().get(1).copied().unwrap_or(0);
    if dv.shape() != us
        || av.shape() != [c, n]
        || bv.shape() != [s, l, n]
        || cv.shape() != [s, l, n]
        || dd.shape() != [c]
    {
        return Err(shape_err(
            "scan_core",
            format!(
                "u {us:?}, Δ {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                dv.shape(),
                av.shape(),
                bv.shape(),
                cv.shape(),
                dd.shape()
            ),
        ));
    }
    let dims = Dims { s, l, c, n };
    let a: Vec<S> = av.data().iter().map(|&x| -x.exp()).collect();
    let keep = [u, delta, a_log, b, cm, d].iter().any(|v| v.requires_grad());
    let (y, states) = scan_forward(&dims, uv.data(), dv.data(), &a, bv.data(), cv.data(), dd.data(), keep);
    let out = Tensor::from_parts(vec![s, l, c], y);
    u.tape().record("selective_scan", out, &[u, delta, a_log, b, cm, d], move |g, _| {
        let grads = scan_backward(
            &dims,
            g.data(),
            uv.data(),
            dv.data(),
            &a,
            bv.data(),
            cv.data(),
            dd.data(),
            &states,
        );
        vec![
            Some(Tensor::from_parts(vec![dims.s, dims.l, dims.c], grads.u)),
            Some(Tensor::from_parts(vec![dims.s, dims.l, dims.c], grads.delta)),
            Some(Tensor::from_parts(vec![dims.c, dims.n], grads.a_log)),
            Some(Tensor::from_parts(vec![dims.s, dims.l, dims.n], grads.b)),
            Some(Tensor::from_parts(vec![dims.s, dims.l, dims.n], grads.cm)),
            Some(Tensor::from_parts(vec![dims.c], grads.d)),
        ]
    })
}

/// Returns outputs and, when `keep`, every state `h_t` laid out `[S, C, L, N]`.
#[allow(clippy::too_many_arguments)]
fn scan_forward<S: Real>(
    dm: &Dims,
    u: &[S],
    delta: &[S],
    a: &[S],
    b: &[S],
    cm: &[S],
    d: &[S],
    keep: bool,
) -> (Vec<S>, Vec<S>) {
    let Dims { s, l, c, n } = *dm;
    let mut y = vec![S::zero(); s * l * c];
    let mut states = if keep { vec![S::zero(); s * c * l * n] } else { Vec::new() };
    let mut h = vec![S::zero(); n];
    for si in 0..s {
        for ci in 0..c {
            h.fill(S::zero());
            let arow = &a[ci * n..(ci + 1) * n];
            for t in 0..l {
                let tok = (si * l + t) * c + ci;
                let (dt, ut) = (delta[tok], u[tok]);
                let bt = &b[(si * l + t) * n..(si * l + t + 1) * n];
                let ct = &cm[(si * l + t) * n..(si * l + t + 1) * n];
                let du = dt * ut;
                let mut acc = S::zero();
                for k in 0..n {
                    h[k] = (dt * arow[k]).exp() * h[k] + du * bt[k];
                    acc = acc + ct[k] * h[k];
                }
                y[tok] = acc + d[ci] * ut;
                if keep {
                    let off = ((si * c + ci) * l + t) * n;
                    states[off..off + n].copy_from_slice(&h);
                }
            }
        }
    }
    (y, states)
}

struct ScanGrads<S> {
    u: Vec<S>,
    delta: Vec<S>,
    a_log: Vec<S>,
    b: Vec<S>,
    cm: Vec<S>,
    d: Vec<S>,
}

#[allow(clippy::too_many_arguments)]
fn scan_backward<S: Real>(
    dm: &Dims,
    gy: &[S],
    u: &[S],
    delta: &[S],
    a: &[S],
    b: &[S],
    cm: &[S],
    d: &[S],
    states: &[S],
) -> ScanGrads<S> {
    let Dims { s, l, c, n } = *dm;
    let mut g = ScanGrads {
        u: vec![S::zero(); s * l * c],
        delta: vec![S::zero(); s * l * c],
        a_log: vec![S::zero(); c * n],
        b: vec![S::zero(); s * l * n],
        cm: vec![S::zero(); s * l * n],
        d: vec![S::zero(); c],
    };
    let mut gh = vec![S::zero(); n];
    let mut ga = vec![S::zero(); n];
    for si in 0..s {
        for ci in 0..c {
            gh.fill(S::zero());
            ga.fill(S::zero());
            let arow = &a[ci * n..(ci + 1) * n];
            let hist = &states[(si * c + ci) * l * n..(si * c + ci + 1) * l * n];
            for t in (0..l).rev() {
                let tok = (si * l + t) * c + ci;
                let row = (si * l + t) * n;
                let (dt, ut, gyt) = (delta[tok], u[tok], gy[tok]);
                g.d[ci] = g.d[ci] + gyt * ut;
                let mut gu = gyt * d[ci];
                let mut gdelta = S::zero();
                let h_t = &hist[t * n..(t + 1) * n];
                for k in 0..n {
                    g.cm[row + k] = g.cm[row + k] + gyt * h_t[k];
                    gh[k] = gh[k] + gyt * cm[row + k];
                    let h_prev = if t > 0 { hist[(t - 1) * n + k] } else { S::zero() };
                    let da = (dt * arow[k]).exp();
                    // ∂h_t/∂Ā through the decay term
                    let g_da = gh[k] * h_prev * da;
                    gdelta = gdelta + g_da * arow[k] + gh[k] * b[row + k] * ut;
                    ga[k] = ga[k] + g_da * dt;
                    g.b[row + k] = g.b[row + k] + gh[k] * dt * ut;
                    gu = gu + gh[k] * dt * b[row + k];
                    gh[k] = gh[k] * da;
                }
                g.u[tok] = g.u[tok] + gu;
                g.delta[tok] = g.delta[tok] + gdelta;
            }
            // A = −exp(a_log) ⇒ ∂A/∂a_log = A
            for k in 0..n {
                g.a_log[ci * n + k] = g.a_log[ci * n + k] + ga[k] * arow[k];
            }
        }
    }
    g
}

/// Value-only scan on plain slices (`u` and outputs `[L, C]`) for
/// benchmarking and long-horizon checks; no tape, no saved states.
#[allow(clippy::too_many_arguments)]
pub fn scan_values<S: Real>(
    l: usize,
    c: usize,
    n: usize,
    u: &[S],
    delta: &[S],
    a: &[S],
    b: &[S],
    cm: &[S],
    d: &[S],
) -> Vec<S> {
    scan_forward(&Dims { s: 1, l, c, n }, u, delta, a, b, cm, d, false).0
}

/// Wall-clock seconds of `trials` forward `selective_scan` calls on one
/// random `[1, L, C]` sequence with state size `N`, without gradients.
pub fn time_selective_scan(length: usize, channels: usize, state: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let params = ScanParams::init(&mut store, "bench", channels, state, &mut rng);
    let u = Tensor::from_fn(vec![1, length, channels], |_| rng.gen_range(-1.0..1.0));
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let tape = crate::tensor::Tape::new();
        let bound: Vec<_> = store.values().iter().map(|v| tape.constant(v.clone())).collect::<Result<_>>()?;
        let x = tape.constant(u.clone())?;
        let start = std::time::Instant::now();
        let y = selective_scan(x, &params.bind(&bound))?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(y.value());
    }
    Ok(times)
}
