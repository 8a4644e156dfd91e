//! Forward and backward kernels on plain tensors. The tape calls into these;
//! tests and inference code may call them directly.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(format!("{what}: expected rank 4, got {:?}", t.shape()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        groups: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = dims4(input, "conv2d input")?;
        let [cout, cin_g, kh, kw] = dims4(kernel, "conv2d kernel")?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(format!(
                "conv2d: groups={groups} must divide Cin={cin} and Cout={cout}"
            )));
        }
        if cin_g != cin / groups {
            return Err(Error::shape(format!(
                "conv2d: kernel {:?} expects {} input channels per group, input {:?} with groups={} gives {}",
                kernel.shape(),
                cin_g,
                input.shape(),
                groups,
                cin / groups
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 || padding * 2 + 1 != kh || kh != kw {
            return Err(Error::shape(format!(
                "conv2d: same-padding needs an odd square kernel with padding=(k-1)/2, got {kh}x{kw} padding={padding}"
            )));
        }
        if let Some(b) = bias {
            b.expect_shape(&[cout])?;
        }
        Ok(Self { n, cin, cout, h, w, kh, kw, groups, padding })
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.h, self.w]
    }

    /// Valid output range along one axis for kernel offset `k`.
    #[inline]
    fn range(&self, k: usize, len: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(k);
        let hi = (len + self.padding).saturating_sub(k).min(len);
        (lo, hi)
    }
}

/// Stride-1 cross-correlation with zero "same" padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, bias, groups, padding)?;
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    for n in 0..g.n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let plane = &mut out[(n * g.cout + co) * hw..][..hw];
            if let Some(b) = bias {
                plane.fill(b.data()[co]);
            }
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let src = &x[(n * g.cin + ci) * hw..][..hw];
                for ky in 0..g.kh {
                    let (y0, y1) = g.range(ky, h);
                    for kx in 0..g.kw {
                        let wv = k[((co * cin_g + cl) * g.kh + ky) * g.kw + kx];
                        let (x0, x1) = g.range(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = oy + ky - g.padding;
                            let dst = &mut plane[oy * w + x0..oy * w + x1];
                            let s = &src[iy * w + x0 + kx - g.padding..][..x1 - x0];
                            for (d, &sv) in dst.iter_mut().zip(s) {
                                *d += wv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(g.out_shape().to_vec(), out)
}

/// Returns gradients with respect to (input, kernel, bias).
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    groups: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, kernel, None, groups, padding)?;
    grad_out.expect_shape(&g.out_shape())?;
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let gplane = &go[(n * g.cout + co) * hw..][..hw];
            gb[co] += gplane.iter().copied().sum::<T>();
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let base = (n * g.cin + ci) * hw;
                for ky in 0..g.kh {
                    let (y0, y1) = g.range(ky, h);
                    for kx in 0..g.kw {
                        let kidx = ((co * cin_g + cl) * g.kh + ky) * g.kw + kx;
                        let wv = k[kidx];
                        let (x0, x1) = g.range(kx, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy + ky - g.padding;
                            let gsl = &gplane[oy * w + x0..oy * w + x1];
                            let off = base + iy * w + x0 + kx - g.padding;
                            let xs = &x[off..off + (x1 - x0)];
                            for (&gv, &xv) in gsl.iter().zip(xs) {
                                acc += gv * xv;
                            }
                            let gxs = &mut gx[off..off + (x1 - x0)];
                            for (d, &gv) in gxs.iter_mut().zip(gsl) {
                                *d += wv * gv;
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![g.cout], gb)?,
    ))
}

/// Geometry of non-overlapping square windows over an H x W plane.
#[derive(Clone, Copy, Debug)]
pub struct WindowGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub size: usize,
}

impl WindowGeom {
    pub fn new<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<Self> {
        let [n, c, h, w] = dims4(x, "windowed attention")?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::shape(format!(
                "window size {size} does not divide spatial dims {h}x{w}"
            )));
        }
        Ok(Self { n, c, h, w, size })
    }

    pub fn tokens(&self) -> usize {
        self.size * self.size
    }

    pub fn windows(&self) -> usize {
        (self.h / self.size) * (self.w / self.size)
    }

    /// Flat spatial offsets of the tokens in window `win`, row-major.
    fn token_offsets(&self, win: usize) -> impl Iterator<Item = usize> + '_ {
        let per_row = self.w / self.size;
        let (wr, wc) = (win / per_row, win % per_row);
        (0..self.tokens()).map(move |t| {
            let (r, c) = (t / self.size, t % self.size);
            (wr * self.size + r) * self.w + wc * self.size + c
        })
    }
}

/// Copies the window tokens of one sample into a token-major `[l, c]` buffer.
fn gather_tokens<T: Scalar>(src: &[T], offs: &[usize], c: usize, hw: usize, dst: &mut [T]) {
    for (i, &o) in offs.iter().enumerate() {
        for ch in 0..c {
            dst[i * c + ch] = src[ch * hw + o];
        }
    }
}

fn scatter_tokens<T: Scalar>(src: &[T], offs: &[usize], c: usize, hw: usize, dst: &mut [T]) {
    for (i, &o) in offs.iter().enumerate() {
        for ch in 0..c {
            dst[ch * hw + o] = src[i * c + ch];
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Single-head scaled dot-product attention inside each window. Tokens are
/// pixels, features are channels. Returns the output and the attention
/// weights laid out as [n, window, query, key].
pub fn window_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    size: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let g = WindowGeom::new(q, size)?;
    k.expect_shape(q.shape())?;
    v.expect_shape(q.shape())?;
    let (l, hw, c) = (g.tokens(), g.h * g.w, g.c);
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut attn = vec![T::zero(); g.n * g.windows() * l * l];
    let mut offs = vec![0usize; l];
    let (mut qt, mut kt, mut vt, mut ot) =
        (vec![T::zero(); l * c], vec![T::zero(); l * c], vec![T::zero(); l * c], vec![T::zero(); l * c]);
    for n in 0..g.n {
        let base = n * c * hw;
        let (qs, ks, vs) = (&q.data()[base..base + c * hw], &k.data()[base..base + c * hw], &v.data()[base..base + c * hw]);
        for win in 0..g.windows() {
            for (o, t) in offs.iter_mut().zip(g.token_offsets(win)) {
                *o = t;
            }
            gather_tokens(qs, &offs, c, hw, &mut qt);
            gather_tokens(ks, &offs, c, hw, &mut kt);
            gather_tokens(vs, &offs, c, hw, &mut vt);
            let a_base = (n * g.windows() + win) * l * l;
            for i in 0..l {
                let row = &mut attn[a_base + i * l..a_base + (i + 1) * l];
                let qi = &qt[i * c..(i + 1) * c];
                let mut max = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    *r = dot(qi, &kt[j * c..(j + 1) * c]) * scale;
                    max = max.max(*r);
                }
                let mut z = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                for r in row.iter_mut() {
                    *r = *r / z;
                }
                let oi = &mut ot[i * c..(i + 1) * c];
                oi.fill(T::zero());
                for (j, &a) in row.iter().enumerate() {
                    for (o, &vv) in oi.iter_mut().zip(&vt[j * c..(j + 1) * c]) {
                        *o += a * vv;
                    }
                }
            }
            scatter_tokens(&ot, &offs, c, hw, &mut out[base..base + c * hw]);
        }
    }
    Ok((Tensor::new(q.shape().to_vec(), out)?, attn))
}

/// Gradients of [`window_attention`] with respect to (q, k, v).
pub fn window_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    attn: &[T],
    grad_out: &Tensor<T>,
    size: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = WindowGeom::new(q, size)?;
    grad_out.expect_shape(q.shape())?;
    let (l, hw, c) = (g.tokens(), g.h * g.w, g.c);
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut gq = vec![T::zero(); q.len()];
    let mut gk = vec![T::zero(); q.len()];
    let mut gv = vec![T::zero(); q.len()];
    let mut offs = vec![0usize; l];
    let buf = || vec![T::zero(); l * c];
    let (mut qt, mut kt, mut vt, mut got) = (buf(), buf(), buf(), buf());
    let (mut gqt, mut gkt, mut gvt) = (buf(), buf(), buf());
    let mut ga = vec![T::zero(); l];
    for n in 0..g.n {
        let base = n * c * hw;
        let span = base..base + c * hw;
        for win in 0..g.windows() {
            for (o, t) in offs.iter_mut().zip(g.token_offsets(win)) {
                *o = t;
            }
            gather_tokens(&q.data()[span.clone()], &offs, c, hw, &mut qt);
            gather_tokens(&k.data()[span.clone()], &offs, c, hw, &mut kt);
            gather_tokens(&v.data()[span.clone()], &offs, c, hw, &mut vt);
            gather_tokens(&grad_out.data()[span.clone()], &offs, c, hw, &mut got);
            gqt.fill(T::zero());
            gkt.fill(T::zero());
            gvt.fill(T::zero());
            let a = &attn[(n * g.windows() + win) * l * l..][..l * l];
            for i in 0..l {
                let goi = &got[i * c..(i + 1) * c];
                let ai = &a[i * l..(i + 1) * l];
                // dA[i, j] = <dO_i, V_j>; dV_j += A[i, j] dO_i
                for j in 0..l {
                    ga[j] = dot(goi, &vt[j * c..(j + 1) * c]);
                    for (gvv, &gov) in gvt[j * c..(j + 1) * c].iter_mut().zip(goi) {
                        *gvv += ai[j] * gov;
                    }
                }
                let d = dot(&ga, ai);
                let qi = &qt[i * c..(i + 1) * c];
                for j in 0..l {
                    let gs = ai[j] * (ga[j] - d) * scale;
                    let kj = &kt[j * c..(j + 1) * c];
                    for (gqv, &kv) in gqt[i * c..(i + 1) * c].iter_mut().zip(kj) {
                        *gqv += gs * kv;
                    }
                    for (gkv, &qv) in gkt[j * c..(j + 1) * c].iter_mut().zip(qi) {
                        *gkv += gs * qv;
                    }
                }
            }
            scatter_tokens(&gqt, &offs, c, hw, &mut gq[span.clone()]);
            scatter_tokens(&gkt, &offs, c, hw, &mut gk[span.clone()]);
            scatter_tokens(&gvt, &offs, c, hw, &mut gv[span.clone()]);
        }
    }
    let shape = q.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), gq)?,
        Tensor::new(shape.clone(), gk)?,
        Tensor::new(shape, gv)?,
    ))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-(sample, channel) normalization over the spatial positions followed
/// by a per-channel affine map. Returns (output, normalized input, 1/std).
pub fn spatial_layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [n, c, h, w] = dims4(x, "layer norm")?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    let hw = h * w;
    let pn = T::of(hw as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); n * c];
    let mut out = vec![T::zero(); x.len()];
    for row in 0..n * c {
        let ch = row % c;
        let src = &x.data()[row * hw..][..hw];
        let mean = src.iter().copied().sum::<T>() / pn;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pn;
        let is = T::one() / (var + eps).sqrt();
        inv[row] = is;
        for p in 0..hw {
            let xh = (src[p] - mean) * is;
            xhat[row * hw + p] = xh;
            out[row * hw + p] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, inv))
}

/// Gradients of [`spatial_layer_norm`] with respect to (x, gamma, beta).
pub fn spatial_layer_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    xhat: &[T],
    inv: &[T],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let rows = shape[0] * c;
    let pn = T::of(hw as f64);
    let go = grad_out.data();
    let mut gx = vec![T::zero(); go.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for row in 0..rows {
        let ch = row % c;
        let gr = &go[row * hw..][..hw];
        let xr = &xhat[row * hw..][..hw];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for p in 0..hw {
            gg[ch] += gr[p] * xr[p];
            gb[ch] += gr[p];
            let gh = gr[p] * gamma.data()[ch];
            sum_g += gh;
            sum_gx += gh * xr[p];
        }
        let (mg, mgx) = (sum_g / pn, sum_gx / pn);
        for p in 0..hw {
            let gh = gr[p] * gamma.data()[ch];
            gx[row * hw + p] = inv[row] * (gh - mg - xr[p] * mgx);
        }
    }
    Ok((
        Tensor::new(shape.to_vec(), gx)?,
        Tensor::new(vec![c], gg)?,
        Tensor::new(vec![c], gb)?,
    ))
}

/// Extents of a selective scan over a `[T*B, ...]` time-major batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub steps: usize,
    pub batch: usize,
    pub channels: usize,
    pub state: usize,
    pub pixels: usize,
}

impl ScanDims {
    /// Validates the operand shapes:
    /// x, delta `[T*B, D, H, W]`; a `[T*B, D*S]`; b, c `[T*B, S, H, W]`;
    /// d_skip `[D]`; h0 `[B, D, S, H, W]`.
    #[allow(clippy::too_many_arguments)]
    pub fn infer<T: Scalar>(
        x: &Tensor<T>,
        delta: &Tensor<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        c: &Tensor<T>,
        d_skip: &Tensor<T>,
        h0: &Tensor<T>,
        steps: usize,
    ) -> Result<Self> {
        let [tb, d, h, w] = dims4(x, "scan input")?;
        let s = match *b.shape() {
            [_, s, _, _] => s,
            _ => return Err(Error::shape(format!("scan B: expected rank 4, got {:?}", b.shape()))),
        };
        if steps == 0 || tb % steps != 0 {
            return Err(Error::shape(format!("scan: {tb} rows not divisible by T={steps}")));
        }
        let batch = tb / steps;
        delta.expect_shape(x.shape())?;
        a.expect_shape(&[tb, d * s])?;
        b.expect_shape(&[tb, s, h, w])?;
        c.expect_shape(&[tb, s, h, w])?;
        d_skip.expect_shape(&[d])?;
        h0.expect_shape(&[batch, d, s, h, w])?;
        Ok(Self { steps, batch, channels: d, state: s, pixels: h * w })
    }

    pub fn state_len(&self) -> usize {
        self.batch * self.channels * self.state * self.pixels
    }
}

/// Output of [`selective_scan`]: readout sequence plus every hidden state
/// `h_0..=h_T`, concatenated.
pub struct ScanOutput<T> {
    pub y: Tensor<T>,
    pub states: Vec<T>,
    pub dims: ScanDims,
}

impl<T: Scalar> ScanOutput<T> {
    pub fn state(&self, t: usize) -> &[T] {
        let n = self.dims.state_len();
        &self.states[t * n..(t + 1) * n]
    }

    pub fn final_state(&self) -> Tensor<T> {
        let d = self.dims;
        Tensor::new(
            vec![d.batch, d.channels, d.state, d.pixels],
            self.state(d.steps).to_vec(),
        )
        .expect("state length matches dims")
    }
}

/// Diagonal selective scan, per pixel and per (channel, state) pair:
///
/// `h_t = exp(a_t * delta_t) * h_{t-1} + (delta_t * x_t) * b_t`
/// `y_t = sum_s h_t[s] * c_t[s] + d_skip * x_t`
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    h0: &Tensor<T>,
    steps: usize,
) -> Result<ScanOutput<T>> {
    let dims = ScanDims::infer(x, delta, a, b, c, d_skip, h0, steps)?;
    let ScanDims { batch: nb, channels: nd, state: ns, pixels: np, .. } = dims;
    let n_state = dims.state_len();
    let mut states = Vec::with_capacity(n_state * (steps + 1));
    states.extend_from_slice(h0.data());
    states.resize(n_state * (steps + 1), T::zero());
    let mut y = vec![T::zero(); x.len()];
    let (xd, dd, ad, bd, cd) = (x.data(), delta.data(), a.data(), b.data(), c.data());
    for t in 0..steps {
        let (prev_all, next_all) = states.split_at_mut((t + 1) * n_state);
        let prev_all = &prev_all[t * n_state..];
        for bi in 0..nb {
            let row = t * nb + bi;
            for di in 0..nd {
                let xo = (row * nd + di) * np;
                let xs = &xd[xo..xo + np];
                let ds = &dd[xo..xo + np];
                let ys = &mut y[xo..xo + np];
                for si in 0..ns {
                    let coef = ad[row * nd * ns + di * ns + si];
                    let bo = (row * ns + si) * np;
                    let (bs, cs) = (&bd[bo..bo + np], &cd[bo..bo + np]);
                    let ho = ((bi * nd + di) * ns + si) * np;
                    let hp = &prev_all[ho..ho + np];
                    let hn = &mut next_all[ho..ho + np];
                    for p in 0..np {
                        let h = (coef * ds[p]).exp() * hp[p] + (ds[p] * xs[p]) * bs[p];
                        hn[p] = h;
                        ys[p] += h * cs[p];
                    }
                }
                let gain = d_skip.data()[di];
                for p in 0..np {
                    ys[p] += gain * xs[p];
                }
            }
        }
        if !next_all[..n_state].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "ssm_scan", step: t });
        }
    }
    Ok(ScanOutput { y: Tensor::new(x.shape().to_vec(), y)?, states, dims })
}

/// Gradients of the scan with respect to (x, delta, a, b, c, d_skip, h0).
pub struct ScanGrads<T> {
    pub x: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d_skip: Tensor<T>,
    pub h0: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    h0_shape: &[usize],
    states: &[T],
    dims: ScanDims,
    grad_y: &Tensor<T>,
) -> Result<ScanGrads<T>> {
    grad_y.expect_shape(x.shape())?;
    let ScanDims { steps, batch: nb, channels: nd, state: ns, pixels: np } = dims;
    let n_state = dims.state_len();
    let (xd, dd, ad, bd, cd, gy) =
        (x.data(), delta.data(), a.data(), b.data(), c.data(), grad_y.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut gdelta = vec![T::zero(); x.len()];
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    let mut gc = vec![T::zero(); c.len()];
    let mut gskip = vec![T::zero(); nd];
    let mut gh = vec![T::zero(); n_state];
    for t in (0..steps).rev() {
        let h_prev = &states[t * n_state..(t + 1) * n_state];
        let h_cur = &states[(t + 1) * n_state..(t + 2) * n_state];
        for bi in 0..nb {
            let row = t * nb + bi;
            for di in 0..nd {
                let xo = (row * nd + di) * np;
                let gain = d_skip.data()[di];
                for p in 0..np {
                    gx[xo + p] += gy[xo + p] * gain;
                    gskip[di] += gy[xo + p] * xd[xo + p];
                }
                for si in 0..ns {
                    let ai = row * nd * ns + di * ns + si;
                    let coef = ad[ai];
                    let bo = (row * ns + si) * np;
                    let ho = ((bi * nd + di) * ns + si) * np;
                    let mut ga_acc = T::zero();
                    for p in 0..np {
                        let g = gh[ho + p] + gy[xo + p] * cd[bo + p];
                        gc[bo + p] += gy[xo + p] * h_cur[ho + p];
                        let dt = dd[xo + p];
                        let decay = (coef * dt).exp();
                        let g_decay = g * h_prev[ho + p] * decay;
                        gdelta[xo + p] += g_decay * coef + g * xd[xo + p] * bd[bo + p];
                        ga_acc += g_decay * dt;
                        gx[xo + p] += g * dt * bd[bo + p];
                        gb[bo + p] += g * dt * xd[xo + p];
                        gh[ho + p] = g * decay;
                    }
                    ga[ai] += ga_acc;
                }
            }
        }
    }
    Ok(ScanGrads {
        x: Tensor::new(x.shape().to_vec(), gx)?,
        delta: Tensor::new(x.shape().to_vec(), gdelta)?,
        a: Tensor::new(a.shape().to_vec(), ga)?,
        b: Tensor::new(b.shape().to_vec(), gb)?,
        c: Tensor::new(c.shape().to_vec(), gc)?,
        d_skip: Tensor::new(vec![nd], gskip)?,
        h0: Tensor::new(h0_shape.to_vec(), gh)?,
    })
}

/// Mean SmoothL1 (Huber with threshold `beta`) between `pred` and `target`.
pub fn smooth_l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, beta: T) -> Result<T> {
    target.expect_shape(pred.shape())?;
    if pred.is_empty() {
        return Ok(T::zero());
    }
    let half = T::of(0.5);
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p - t).abs();
            if d < beta {
                half * d * d / beta
            } else {
                d - half * beta
            }
        })
        .sum();
    Ok(total / T::of(pred.len() as f64))
}

pub fn smooth_l1_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, beta: T, g: T) -> Tensor<T> {
    let scale = g / T::of(pred.len().max(1) as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < beta {
                scale * d / beta
            } else {
                scale * d.signum()
            }
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data).expect("same shape as pred")
}

/// 5-point Laplacian response at interior pixel (i, j) of a plane.
#[inline]
fn laplace_at<T: Scalar>(plane: &[T], w: usize, i: usize, j: usize) -> T {
    plane[(i - 1) * w + j] + plane[(i + 1) * w + j] + plane[i * w + j - 1] + plane[i * w + j + 1]
        - T::of(4.0) * plane[i * w + j]
}

/// Mean squared 5-point Laplacian response over interior pixels (the
/// one-pixel border is excluded). Zero when there is no interior.
pub fn laplacian_penalty<T: Scalar>(x: &Tensor<T>) -> Result<T> {
    let [n, c, h, w] = dims4(x, "laplacian penalty")?;
    if h < 3 || w < 3 {
        return Ok(T::zero());
    }
    let hw = h * w;
    let mut total = T::zero();
    for plane in x.data().chunks(hw).take(n * c) {
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let r = laplace_at(plane, w, i, j);
                total += r * r;
            }
        }
    }
    Ok(total / T::of((n * c * (h - 2) * (w - 2)) as f64))
}

pub fn laplacian_penalty_backward<T: Scalar>(x: &Tensor<T>, g: T) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(x, "laplacian penalty")?;
    let mut gx = vec![T::zero(); x.len()];
    if h < 3 || w < 3 {
        return Tensor::new(x.shape().to_vec(), gx);
    }
    let hw = h * w;
    let two = T::of(2.0);
    let scale = g / T::of((n * c * (h - 2) * (w - 2)) as f64);
    for (plane, gp) in x.data().chunks(hw).zip(gx.chunks_mut(hw)) {
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let r = two * laplace_at(plane, w, i, j) * scale;
                gp[(i - 1) * w + j] += r;
                gp[(i + 1) * w + j] += r;
                gp[i * w + j - 1] += r;
                gp[i * w + j + 1] += r;
                gp[i * w + j] -= T::of(4.0) * r;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx)
}

/// `x [N, IN] -> x W^T + b`, `W [OUT, IN]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, i) = match *x.shape() {
        [n, i] => (n, i),
        _ => return Err(Error::shape(format!("linear input: expected rank 2, got {:?}", x.shape()))),
    };
    let o = match *w.shape() {
        [o, wi] if wi == i => o,
        _ => {
            return Err(Error::shape(format!(
                "linear: weight {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            )))
        }
    };
    if let Some(b) = bias {
        b.expect_shape(&[o])?;
    }
    let mut out = vec![T::zero(); n * o];
    for r in 0..n {
        let xr = &x.data()[r * i..(r + 1) * i];
        for c in 0..o {
            let wr = &w.data()[c * i..(c + 1) * i];
            let mut acc = bias.map_or(T::zero(), |b| b.data()[c]);
            for (&a, &b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            out[r * o + c] = acc;
        }
    }
    Tensor::new(vec![n, o], out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut gx = vec![T::zero(); n * i];
    let mut gw = vec![T::zero(); o * i];
    let mut gb = vec![T::zero(); o];
    for r in 0..n {
        for c in 0..o {
            let g = grad_out.data()[r * o + c];
            gb[c] += g;
            for k in 0..i {
                gx[r * i + k] += g * w.data()[c * i + k];
                gw[c * i + k] += g * x.data()[r * i + k];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![o], gb).expect("shape"),
    )
}
