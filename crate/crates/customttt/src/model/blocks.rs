//! Differentiable building blocks with hand-written backward passes.
//!
//! Each forward returns a cache holding exactly what its backward needs.
//! Weight gradients are handed back to the caller, which owns routing them
//! to base parameters or adapter factors. `dw` flags let the caller skip
//! weight-gradient gemms for frozen matrices.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};

use crate::real::Real;

pub(crate) const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Layer norm (no affine), per row over the channel axis
// ---------------------------------------------------------------------------

pub(crate) struct LnCache<A: Real> {
    /// Normalized output; also the forward result.
    pub xhat: Array2<A>,
    pub inv_std: Array1<A>,
}

pub(crate) fn ln_fwd<A: Real>(x: &Array2<A>) -> LnCache<A> {
    let cf = A::real(x.ncols() as f64);
    let eps = A::real(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::<A>::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / cf;
        row.mapv_inplace(|v| v - mean);
        let var = row.fold(A::zero(), |acc, &v| acc + v * v) / cf;
        let istd = A::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * istd);
        *is = istd;
    }
    LnCache { xhat, inv_std }
}

pub(crate) fn ln_bwd<A: Real>(cache: &LnCache<A>, dy: &Array2<A>) -> Array2<A> {
    let cf = A::real(dy.ncols() as f64);
    let mut dx = dy.clone();
    for ((mut drow, xrow), &istd) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let m1 = drow.sum() / cf;
        let m2 = drow
            .iter()
            .zip(xrow.iter())
            .fold(A::zero(), |acc, (&d, &h)| acc + d * h)
            / cf;
        for (d, &h) in drow.iter_mut().zip(xrow.iter()) {
            *d = istd * (*d - m1 - h * m2);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// SiLU
// ---------------------------------------------------------------------------

pub(crate) fn silu_fwd<A: Real>(x: &Array2<A>) -> Array2<A> {
    x.mapv(|v| v * sigmoid(v))
}

pub(crate) fn silu_bwd<A: Real>(x: &Array2<A>, dy: &Array2<A>) -> Array2<A> {
    let mut dx = dy.clone();
    for (d, &v) in dx.iter_mut().zip(x.iter()) {
        let s = sigmoid(v);
        *d = *d * s * (A::one() + v * (A::one() - s));
    }
    dx
}

fn sigmoid<A: Real>(v: A) -> A {
    A::one() / (A::one() + (-v).exp())
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

pub(crate) struct AttnView<'a, A: Real> {
    pub wq: ArrayView2<'a, A>,
    pub wk: ArrayView2<'a, A>,
    pub wv: ArrayView2<'a, A>,
    pub wo: ArrayView2<'a, A>,
}

#[derive(Debug, Default)]
pub(crate) struct AttnGrads<A: Real> {
    pub dwq: Option<Array2<A>>,
    pub dwk: Option<Array2<A>>,
    pub dwv: Option<Array2<A>>,
    pub dwo: Option<Array2<A>>,
}

/// Which weight gradients the caller wants computed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DwMask {
    pub wq: bool,
    pub wk: bool,
    pub wv: bool,
    pub wo: bool,
}

impl DwMask {
    pub fn all(on: bool) -> Self {
        Self {
            wq: on,
            wk: on,
            wv: on,
            wo: on,
        }
    }
}

fn softmax_rows_inplace<A: Real>(m: &mut Array2<A>, valid: usize) {
    for mut row in m.rows_mut() {
        let mut mx = A::real(f64::NEG_INFINITY);
        for &v in row.slice(s![..valid]).iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = A::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < valid {
                *v = (*v - mx).exp();
                sum = sum + *v;
            } else {
                *v = A::zero();
            }
        }
        if sum > A::zero() {
            let inv = A::one() / sum;
            row.mapv_inplace(|v| v * inv);
        }
    }
}

/// `ds = p * (dp - rowsum(dp * p))`, written into `dp`.
fn softmax_bwd_inplace<A: Real>(p: &Array2<A>, dp: &mut Array2<A>) {
    for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
        let dot = drow
            .iter()
            .zip(prow.iter())
            .fold(A::zero(), |acc, (&d, &q)| acc + d * q);
        for (d, &q) in drow.iter_mut().zip(prow.iter()) {
            *d = q * (*d - dot);
        }
    }
}

/// Residual self-attention over `groups` contiguous row blocks of equal size.
/// Spatial layers group by frame; temporal layers group by spatial location
/// and pass `pos` (group_size x C), added to the q/k inputs only.
pub(crate) struct SelfAttnCache<A: Real> {
    ln: LnCache<A>,
    /// LN output plus positional rows; `None` when no `pos` was given.
    qk_in: Option<Array2<A>>,
    q: Array2<A>,
    k: Array2<A>,
    v: Array2<A>,
    probs: Vec<Array2<A>>,
    ctx: Array2<A>,
    groups: usize,
}

pub(crate) fn self_attn_fwd<A: Real>(
    x: &Array2<A>,
    groups: usize,
    pos: Option<&Array2<A>>,
    w: &AttnView<'_, A>,
) -> (Array2<A>, SelfAttnCache<A>) {
    let n = x.nrows();
    debug_assert!(n % groups == 0);
    let size = n / groups;
    let d = w.wq.ncols();
    let scale = A::real(1.0 / (d as f64).sqrt());

    let ln = ln_fwd(x);
    let qk_in = pos.map(|p| {
        debug_assert_eq!(p.dim(), (size, x.ncols()));
        let mut m = ln.xhat.clone();
        for g in 0..groups {
            let mut block = m.slice_mut(s![g * size..(g + 1) * size, ..]);
            block += p;
        }
        m
    });
    let qk_src = qk_in.as_ref().unwrap_or(&ln.xhat);

    let q = qk_src.dot(&w.wq);
    let k = qk_src.dot(&w.wk);
    let v = ln.xhat.dot(&w.wv);

    let mut ctx = Array2::<A>::zeros((n, d));
    let mut probs = Vec::with_capacity(groups);
    for g in 0..groups {
        let rows = s![g * size..(g + 1) * size, ..];
        let (qg, kg, vg) = (q.slice(rows), k.slice(rows), v.slice(rows));
        let mut p = qg.dot(&kg.t());
        p.mapv_inplace(|v| v * scale);
        softmax_rows_inplace(&mut p, size);
        ctx.slice_mut(rows).assign(&p.dot(&vg));
        probs.push(p);
    }

    let y = x + &ctx.dot(&w.wo);
    (
        y,
        SelfAttnCache {
            ln,
            qk_in,
            q,
            k,
            v,
            probs,
            ctx,
            groups,
        },
    )
}

pub(crate) fn self_attn_bwd<A: Real>(
    cache: &SelfAttnCache<A>,
    w: &AttnView<'_, A>,
    dy: &Array2<A>,
    dw: DwMask,
) -> (Array2<A>, AttnGrads<A>) {
    let n = dy.nrows();
    let groups = cache.groups;
    let size = n / groups;
    let d = w.wq.ncols();
    let scale = A::real(1.0 / (d as f64).sqrt());
    let qk_src = cache.qk_in.as_ref().unwrap_or(&cache.ln.xhat);

    let dctx = dy.dot(&w.wo.t());
    let mut dq = Array2::<A>::zeros(cache.q.raw_dim());
    let mut dk = Array2::<A>::zeros(cache.k.raw_dim());
    let mut dv = Array2::<A>::zeros(cache.v.raw_dim());
    for g in 0..groups {
        let rows = s![g * size..(g + 1) * size, ..];
        let p = &cache.probs[g];
        let dctx_g = dctx.slice(rows);
        let mut dp = dctx_g.dot(&cache.v.slice(rows).t());
        dv.slice_mut(rows).assign(&p.t().dot(&dctx_g));
        softmax_bwd_inplace(p, &mut dp);
        dp.mapv_inplace(|v| v * scale);
        dq.slice_mut(rows).assign(&dp.dot(&cache.k.slice(rows)));
        dk.slice_mut(rows).assign(&dp.t().dot(&cache.q.slice(rows)));
    }

    let grads = AttnGrads {
        dwq: dw.wq.then(|| qk_src.t().dot(&dq)),
        dwk: dw.wk.then(|| qk_src.t().dot(&dk)),
        dwv: dw.wv.then(|| cache.ln.xhat.t().dot(&dv)),
        dwo: dw.wo.then(|| cache.ctx.t().dot(dy)),
    };

    // Positional rows are constants, so dq/dk flow straight to the LN output.
    let mut dh = dq.dot(&w.wq.t());
    dh += &dk.dot(&w.wk.t());
    dh += &dv.dot(&w.wv.t());
    let dx = dy + &ln_bwd(&cache.ln, &dh);
    (dx, grads)
}

/// Residual cross-attention: every token row attends to the prompt rows.
/// Prompt rows past `valid` are padding and are masked out of the softmax.
pub(crate) struct CrossAttnCache<A: Real> {
    ln: LnCache<A>,
    prompt: Array2<A>,
    valid: usize,
    q: Array2<A>,
    k: Array2<A>,
    v: Array2<A>,
    probs: Array2<A>,
    ctx: Array2<A>,
}

pub(crate) fn cross_attn_fwd<A: Real>(
    x: &Array2<A>,
    prompt: &Array2<A>,
    valid: usize,
    w: &AttnView<'_, A>,
) -> (Array2<A>, CrossAttnCache<A>) {
    let d = w.wq.ncols();
    let scale = A::real(1.0 / (d as f64).sqrt());
    let ln = ln_fwd(x);
    let q = ln.xhat.dot(&w.wq);
    let k = prompt.dot(&w.wk);
    let v = prompt.dot(&w.wv);
    let mut probs = q.dot(&k.t());
    probs.mapv_inplace(|s| s * scale);
    softmax_rows_inplace(&mut probs, valid);
    let ctx = probs.dot(&v);
    let y = x + &ctx.dot(&w.wo);
    (
        y,
        CrossAttnCache {
            ln,
            prompt: prompt.clone(),
            valid,
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

pub(crate) fn cross_attn_bwd<A: Real>(
    cache: &CrossAttnCache<A>,
    w: &AttnView<'_, A>,
    dy: &Array2<A>,
    dw: DwMask,
) -> (Array2<A>, AttnGrads<A>) {
    let d = w.wq.ncols();
    let scale = A::real(1.0 / (d as f64).sqrt());
    let _ = cache.valid; // masking is already baked into the zero prob rows

    let dctx = dy.dot(&w.wo.t());
    let mut dp = dctx.dot(&cache.v.t());
    let dv = cache.probs.t().dot(&dctx);
    softmax_bwd_inplace(&cache.probs, &mut dp);
    dp.mapv_inplace(|v| v * scale);
    let dq = dp.dot(&cache.k);
    let dk = dp.t().dot(&cache.q);

    let grads = AttnGrads {
        dwq: dw.wq.then(|| cache.ln.xhat.t().dot(&dq)),
        dwk: dw.wk.then(|| cache.prompt.t().dot(&dk)),
        dwv: dw.wv.then(|| cache.prompt.t().dot(&dv)),
        dwo: dw.wo.then(|| cache.ctx.t().dot(dy)),
    };

    let dh = dq.dot(&w.wq.t());
    let dx = dy + &ln_bwd(&cache.ln, &dh);
    (dx, grads)
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

pub(crate) struct ResView<'a, A: Real> {
    pub w1: ArrayView2<'a, A>,
    pub b1: ArrayView1<'a, A>,
    pub w2: ArrayView2<'a, A>,
    pub b2: ArrayView1<'a, A>,
    /// Projection for the residual path when input and output widths differ.
    pub skip: Option<ArrayView2<'a, A>>,
}

pub(crate) struct ResCache<A: Real> {
    x: Array2<A>,
    ln: LnCache<A>,
    u: Array2<A>,
    act: Array2<A>,
}

#[derive(Debug)]
pub(crate) struct ResGrads<A: Real> {
    pub dw1: Option<Array2<A>>,
    pub db1: Option<Array1<A>>,
    pub dw2: Option<Array2<A>>,
    pub db2: Option<Array1<A>>,
    pub dskip: Option<Array2<A>>,
    /// Gradient of the broadcast time row; the caller folds it into the
    /// per-layer time projection.
    pub dt_vec: Array1<A>,
}

pub(crate) fn res_fwd<A: Real>(
    x: &Array2<A>,
    t_vec: &Array1<A>,
    w: &ResView<'_, A>,
) -> (Array2<A>, ResCache<A>) {
    let ln = ln_fwd(x);
    let mut u = ln.xhat.dot(&w.w1);
    for mut row in u.rows_mut() {
        for ((uv, &b), &t) in row.iter_mut().zip(w.b1.iter()).zip(t_vec.iter()) {
            *uv = *uv + b + t;
        }
    }
    let act = silu_fwd(&u);
    let mut y = act.dot(&w.w2);
    for mut row in y.rows_mut() {
        for (yv, &b) in row.iter_mut().zip(w.b2.iter()) {
            *yv = *yv + b;
        }
    }
    match &w.skip {
        Some(sk) => y += &x.dot(sk),
        None => y += x,
    }
    (
        y,
        ResCache {
            x: x.clone(),
            ln,
            u,
            act,
        },
    )
}

pub(crate) fn res_bwd<A: Real>(
    cache: &ResCache<A>,
    w: &ResView<'_, A>,
    dy: &Array2<A>,
    want_dw: bool,
) -> (Array2<A>, ResGrads<A>) {
    let da = dy.dot(&w.w2.t());
    let du = silu_bwd(&cache.u, &da);
    let dh = du.dot(&w.w1.t());
    let mut dx = ln_bwd(&cache.ln, &dh);
    match &w.skip {
        Some(sk) => dx += &dy.dot(&sk.t()),
        None => dx += dy,
    }
    let grads = ResGrads {
        dw1: want_dw.then(|| cache.ln.xhat.t().dot(&du)),
        db1: want_dw.then(|| du.sum_axis(Axis(0))),
        dw2: want_dw.then(|| cache.act.t().dot(dy)),
        db2: want_dw.then(|| dy.sum_axis(Axis(0))),
        dskip: if want_dw && w.skip.is_some() {
            Some(cache.x.t().dot(dy))
        } else {
            None
        },
        dt_vec: du.sum_axis(Axis(0)),
    };
    (dx, grads)
}

// ---------------------------------------------------------------------------
// Resolution changes on (F, H, W, C)
// ---------------------------------------------------------------------------

pub(crate) fn pool2_fwd<A: Real>(x: &Array4<A>) -> Array4<A> {
    let (f, h, w, c) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let quarter = A::real(0.25);
    Array4::from_shape_fn((f, h / 2, w / 2, c), |(t, y, xx, ch)| {
        (x[[t, 2 * y, 2 * xx, ch]]
            + x[[t, 2 * y, 2 * xx + 1, ch]]
            + x[[t, 2 * y + 1, 2 * xx, ch]]
            + x[[t, 2 * y + 1, 2 * xx + 1, ch]])
            * quarter
    })
}

pub(crate) fn pool2_bwd<A: Real>(dy: &Array4<A>) -> Array4<A> {
    let (f, h, w, c) = dy.dim();
    let quarter = A::real(0.25);
    Array4::from_shape_fn((f, h * 2, w * 2, c), |(t, y, xx, ch)| {
        dy[[t, y / 2, xx / 2, ch]] * quarter
    })
}

pub(crate) fn up2_fwd<A: Real>(x: &Array4<A>) -> Array4<A> {
    let (f, h, w, c) = x.dim();
    Array4::from_shape_fn((f, h * 2, w * 2, c), |(t, y, xx, ch)| {
        x[[t, y / 2, xx / 2, ch]]
    })
}

pub(crate) fn up2_bwd<A: Real>(dy: &Array4<A>) -> Array4<A> {
    let (f, h, w, c) = dy.dim();
    Array4::from_shape_fn((f, h / 2, w / 2, c), |(t, y, xx, ch)| {
        dy[[t, 2 * y, 2 * xx, ch]]
            + dy[[t, 2 * y, 2 * xx + 1, ch]]
            + dy[[t, 2 * y + 1, 2 * xx, ch]]
            + dy[[t, 2 * y + 1, 2 * xx + 1, ch]]
    })
}

// ---------------------------------------------------------------------------
// Sinusoidal tables (timestep embedding, temporal position rows)
// ---------------------------------------------------------------------------

pub(crate) fn sinusoid_row<A: Real>(pos: f64, dim: usize) -> Array1<A> {
    debug_assert!(dim % 2 == 0);
    let mut v = Array1::<A>::zeros(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        v[2 * i] = A::real((pos * freq).sin());
        v[2 * i + 1] = A::real((pos * freq).cos());
    }
    v
}

pub(crate) fn sinusoid_table<A: Real>(n: usize, dim: usize) -> Array2<A> {
    let mut m = Array2::<A>::zeros((n, dim));
    for p in 0..n {
        m.row_mut(p).assign(&sinusoid_row(p as f64, dim));
    }
    m
}
