use super::kernels::{self, ScanDims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * x + b` with constants a, b.
    Affine(Var, T),
    /// `x * s` with s a one-element variable.
    ScaleBy(Var, Var),
    Exp(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceOuter { x: Var, start: usize },
    RepeatOuter { x: Var, times: usize },
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    AddRowBias { x: Var, bias: Var },
    Linear { x: Var, w: Var, bias: Option<Var> },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, groups: usize, padding: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv: Vec<T> },
    WindowAttention { q: Var, k: Var, v: Var, size: usize, attn: Vec<T> },
    Scan { args: [Var; 7], states: Vec<T>, dims: ScanDims },
    SmoothL1 { pred: Var, target: Tensor<T>, beta: T },
    Laplacian(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so every node's parents precede it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]. Variables the loss does not reach have no
/// entry and read back as zeros.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn softplus<T: Scalar>(v: T) -> T {
    // log(1 + e^v), stable for large |v|
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(v, Op::Affine(x, scale), &[x])
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = match self.value(s).data() {
            [v] => *v,
            _ => return Err(Error::shape(format!("scale_by: scale must have one element, got {:?}", self.value(s).shape()))),
        };
        let v = self.value(x).map(|e| e * sv);
        Ok(self.push(v, Op::ScaleBy(x, s), &[x, s]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        self.push(v, Op::Silu(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.tanh());
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.push(v, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len().max(1) as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn slice_outer(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_outer(start, len)?;
        Ok(self.push(v, Op::SliceOuter { x, start }, &[x]))
    }

    /// Tile the whole tensor `times` along the first axis: `[B, ..] -> [times*B, ..]`.
    pub fn repeat_outer(&mut self, x: Var, times: usize) -> Result<Var> {
        let src = self.value(x);
        if src.rank() == 0 || times == 0 {
            return Err(Error::shape("repeat_outer needs rank >= 1 and times >= 1"));
        }
        let mut shape = src.shape().to_vec();
        shape[0] *= times;
        let data = src.data().repeat(times);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::RepeatOuter { x, times }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let (ca, cb, hw) = (sa[1], sb[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&av.data()[n * ca * hw..(n + 1) * ca * hw]);
            data.extend_from_slice(&bv.data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let v = Tensor::new(vec![sa[0], ca + cb, sa[2], sa[3]], data)?;
        Ok(self.push(v, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool: expected rank 4, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let pn = T::of(hw as f64);
        let data = xv.data().chunks(hw).map(|c| c.iter().copied().sum::<T>() / pn).collect();
        let v = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// `x [N, K] + bias [K]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let k = bv.len();
        if xv.rank() != 2 || xv.shape()[1] != k {
            return Err(Error::shape(format!("add_row_bias: {:?} + {:?}", xv.shape(), bv.shape())));
        }
        let data = xv.data().iter().enumerate().map(|(i, &e)| e + bv.data()[i % k]).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRowBias { x, bias }, &[x, bias]))
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let v = kernels::linear(self.value(x), self.value(w), bias.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(v, Op::Linear { x, w, bias }, &parents))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        groups: usize,
        padding: usize,
    ) -> Result<Var> {
        let v = kernels::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            groups,
            padding,
        )?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        Ok(self.push(v, Op::Conv2d { x, kernel, bias, groups, padding }, &parents))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (v, xhat, inv) =
            kernels::spatial_layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv }, &[x, gamma, beta]))
    }

    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, size: usize) -> Result<Var> {
        let (out, attn) =
            kernels::window_attention(self.value(q), self.value(k), self.value(v), size)?;
        Ok(self.push(out, Op::WindowAttention { q, k, v, size, attn }, &[q, k, v]))
    }

    /// Selective scan over a time-major `[T*B, ..]` batch; see
    /// [`kernels::selective_scan`] for operand layouts.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        h0: Var,
        steps: usize,
    ) -> Result<Var> {
        let out = kernels::selective_scan(
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d_skip),
            self.value(h0),
            steps,
        )?;
        let args = [x, delta, a, b, c, d_skip, h0];
        Ok(self.push(out.y, Op::Scan { args, states: out.states, dims: out.dims }, &args))
    }

    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, beta: T) -> Result<Var> {
        let v = kernels::smooth_l1(self.value(pred), target, beta)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::SmoothL1 { pred, target: target.clone(), beta },
            &[pred],
        ))
    }

    pub fn laplacian_penalty(&mut self, x: Var) -> Result<Var> {
        let v = kernels::laplacian_penalty(self.value(x))?;
        Ok(self.push(Tensor::scalar(v), Op::Laplacian(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backprop(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backprop needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut send = |v: Var, grad: Tensor<T>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], grad);
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|e| -e));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y)?);
                send(*b, g.zip_map(self.value(*a), |x, y| x * y)?);
            }
            Op::Affine(x, scale) => send(*x, g.map(|e| e * *scale)),
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).data()[0];
                send(*x, g.map(|e| e * sv));
                let gs: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                send(*s, Tensor::new(self.value(*s).shape().to_vec(), vec![gs])?);
            }
            Op::Exp(x) => send(*x, g.zip_map(out, |a, y| a * y)?),
            Op::Sigmoid(x) => send(*x, g.zip_map(out, |a, y| a * y * (T::one() - y))?),
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), |a, v| {
                    let s = sigmoid(v);
                    a * s * (T::one() + v * (T::one() - s))
                })?;
                send(*x, gx);
            }
            Op::Softplus(x) => send(*x, g.zip_map(self.value(*x), |a, v| a * sigmoid(v))?),
            Op::Tanh(x) => send(*x, g.zip_map(out, |a, y| a * (T::one() - y * y))?),
            Op::Square(x) => send(*x, g.zip_map(self.value(*x), |a, v| a * T::of(2.0) * v)?),
            Op::Sum(x) => {
                let gv = g.data()[0];
                send(*x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0] / T::of(xv.len().max(1) as f64);
                send(*x, Tensor::full(xv.shape(), gv));
            }
            Op::Reshape(x) => send(*x, g.clone().reshape(self.value(*x).shape())?),
            Op::SliceOuter { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let off = start * (xv.len() / xv.shape()[0]);
                gx.data_mut()[off..off + g.len()].copy_from_slice(g.data());
                send(*x, gx);
            }
            Op::RepeatOuter { x, times } => {
                let xv = self.value(*x);
                let n = xv.len();
                let mut gx = vec![T::zero(); n];
                for r in 0..*times {
                    for (d, &e) in gx.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *d += e;
                    }
                }
                send(*x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let hw = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * hw, sb[1] * hw);
                let mut ga = Vec::with_capacity(sa.iter().product());
                let mut gb = Vec::with_capacity(sb.iter().product());
                for chunk in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                send(*a, Tensor::new(sa, ga)?);
                send(*b, Tensor::new(sb, gb)?);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let hw = xv.shape()[2] * xv.shape()[3];
                let pn = T::of(hw as f64);
                let data = (0..xv.len()).map(|i| g.data()[i / hw] / pn).collect();
                send(*x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::AddRowBias { x, bias } => {
                send(*x, g.clone());
                let k = self.value(*bias).len();
                let mut gb = vec![T::zero(); k];
                for (i, &e) in g.data().iter().enumerate() {
                    gb[i % k] += e;
                }
                send(*bias, Tensor::new(vec![k], gb)?);
            }
            Op::Linear { x, w, bias } => {
                let (gx, gw, gb) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                send(*x, gx);
                send(*w, gw);
                if let Some(b) = bias {
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, kernel, bias, groups, padding } => {
                let (gx, gk, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*kernel),
                    g,
                    *groups,
                    *padding,
                )?;
                send(*x, gx);
                send(*kernel, gk);
                if let Some(b) = bias {
                    send(*b, gb);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv } => {
                let (gx, gg, gb) = kernels::spatial_layer_norm_backward(
                    self.value(*x).shape(),
                    self.value(*gamma),
                    xhat,
                    inv,
                    g,
                )?;
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::WindowAttention { q, k, v, size, attn } => {
                let (gq, gk, gv) = kernels::window_attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    attn,
                    g,
                    *size,
                )?;
                send(*q, gq);
                send(*k, gk);
                send(*v, gv);
            }
            Op::Scan { args, states, dims } => {
                let [x, delta, a, b, c, d_skip, h0] = *args;
                let sg = kernels::selective_scan_backward(
                    self.value(x),
                    self.value(delta),
                    self.value(a),
                    self.value(b),
                    self.value(c),
                    self.value(d_skip),
                    self.value(h0).shape(),
                    states,
                    *dims,
                    g,
                )?;
                send(x, sg.x);
                send(delta, sg.delta);
                send(a, sg.a);
                send(b, sg.b);
                send(c, sg.c);
                send(d_skip, sg.d_skip);
                send(h0, sg.h0);
            }
            Op::SmoothL1 { pred, target, beta } => {
                let gp = kernels::smooth_l1_backward(self.value(*pred), target, *beta, g.data()[0]);
                send(*pred, gp);
            }
            Op::Laplacian(x) => {
                send(*x, kernels::laplacian_penalty_backward(self.value(*x), g.data()[0])?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_check(
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        inputs: Vec<Tensor<f64>>,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backprop(loss).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]);
            for i in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[k].data_mut()[i] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|p| t.param(p)).collect();
                    let l = build(&mut t, &vs);
                    t.value(l).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        Tensor::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let g = tape.backprop(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let p = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = tape.sum(x);
        let g = tape.backprop(loss).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.wrt(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backprop(x).is_err());
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let err = fd_check(
            |t, v| {
                let a = t.exp(v[0]);
                let b = t.sigmoid(v[1]);
                let c = t.mul(a, b).unwrap();
                let d = t.silu(c);
                let e = t.softplus(v[0]);
                let f = t.tanh(e);
                let g = t.sub(d, f).unwrap();
                let h = t.affine(g, -1.5, 0.25);
                let s = t.scale_by(h, v[2]).unwrap();
                let sq = t.square(s);
                t.mean(sq)
            },
            vec![rand_tensor(&[6], 1), rand_tensor(&[6], 2), rand_tensor(&[1], 3)],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let err = fd_check(
            |t, v| {
                let cat = t.concat_channels(v[0], v[1]).unwrap();
                let rep = t.repeat_outer(cat, 2).unwrap();
                let sl = t.slice_outer(rep, 1, 2).unwrap();
                let pooled = t.global_avg_pool(sl).unwrap();
                let lin = t.linear(pooled, v[2], Some(v[3])).unwrap();
                let biased = t.add_row_bias(lin, v[4]).unwrap();
                let flat = t.reshape(biased, &[4]).unwrap();
                let sq = t.square(flat);
                t.sum(sq)
            },
            vec![
                rand_tensor(&[2, 2, 2, 2], 4),
                rand_tensor(&[2, 1, 2, 2], 5),
                rand_tensor(&[2, 3], 6),
                rand_tensor(&[2], 7),
                rand_tensor(&[2], 8),
            ],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_and_norm_match_finite_differences() {
        let err = fd_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
                let d = t.conv2d(y, v[3], None, 3, 1).unwrap();
                let n = t.layer_norm(d, v[4], v[5]).unwrap();
                let sq = t.square(n);
                t.mean(sq)
            },
            vec![
                rand_tensor(&[2, 2, 3, 4], 9),
                rand_tensor(&[3, 2, 3, 3], 10),
                rand_tensor(&[3], 11),
                rand_tensor(&[3, 1, 3, 3], 12),
                rand_tensor(&[3], 13),
                rand_tensor(&[3], 14),
            ],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn attention_matches_finite_differences() {
        let err = fd_check(
            |t, v| {
                let o = t.window_attention(v[0], v[1], v[2], 2).unwrap();
                let w = t.mul(o, v[3]).unwrap();
                t.sum(w)
            },
            vec![
                rand_tensor(&[1, 2, 4, 4], 15),
                rand_tensor(&[1, 2, 4, 4], 16),
                rand_tensor(&[1, 2, 4, 4], 17),
                rand_tensor(&[1, 2, 4, 4], 18),
            ],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn scan_matches_finite_differences() {
        // T=3, B=2, D=2, S=2, 2x2 pixels
        let (t_len, b, d, s) = (3, 2, 2, 2);
        let err = fd_check(
            |t, v| {
                let delta = t.softplus(v[1]);
                let e = t.exp(v[2]);
                let a = t.affine(e, -1.0, 0.0);
                let y = t.selective_scan(v[0], delta, a, v[3], v[4], v[5], v[6], t_len).unwrap();
                let w = t.mul(y, v[7]).unwrap();
                t.sum(w)
            },
            vec![
                rand_tensor(&[t_len * b, d, 2, 2], 19),
                rand_tensor(&[t_len * b, d, 2, 2], 20),
                rand_tensor(&[t_len * b, d * s], 21),
                rand_tensor(&[t_len * b, s, 2, 2], 22),
                rand_tensor(&[t_len * b, s, 2, 2], 23),
                rand_tensor(&[d], 24),
                rand_tensor(&[b, d, s, 2, 2], 25),
                rand_tensor(&[t_len * b, d, 2, 2], 26),
            ],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn losses_match_finite_differences() {
        let target = rand_tensor(&[1, 1, 4, 5], 27);
        let err = fd_check(
            |t, v| {
                let l1 = t.smooth_l1(v[0], &target, 0.3).unwrap();
                let lap = t.laplacian_penalty(v[0]).unwrap();
                let lap = t.affine(lap, 0.1, 0.0);
                t.add(l1, lap).unwrap()
            },
            vec![rand_tensor(&[1, 1, 4, 5], 28)],
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reused_values_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backprop(z).unwrap();
        assert_eq!(g.wrt(x).data(), &[7.0]);
    }

    proptest! {
        #[test]
        fn backprop_is_deterministic(seed in 0u64..1000) {
            let x = rand_tensor(&[1, 2, 4, 4], seed);
            let k = rand_tensor(&[2, 2, 3, 3], seed + 1);
            let run = || {
                let mut t = Tape::<f64>::new();
                let (xv, kv) = (t.param(x.clone()), t.param(k.clone()));
                let y = t.conv2d(xv, kv, None, 1, 1).unwrap();
                let a = t.window_attention(y, y, y, 2).unwrap();
                let s = t.square(a);
                let l = t.sum(s);
                let g = t.backprop(l).unwrap();
                (g.wrt(xv), g.wrt(kv))
            };
            let (a, b) = (run(), run());
            prop_assert!(a.0.data().iter().zip(b.0.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
            prop_assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }

        #[test]
        fn attention_outputs_lie_in_value_hull(seed in 0u64..1000) {
            let q = rand_tensor(&[1, 2, 4, 4], seed);
            let k = rand_tensor(&[1, 2, 4, 4], seed + 7);
            let v = rand_tensor(&[1, 2, 4, 4], seed + 13);
            let (out, _) = kernels::window_attention(&q, &k, &v, 2).unwrap();
            for c in 0..2 {
                for wr in 0..2 {
                    for wc in 0..2 {
                        let px: Vec<usize> = (0..4).map(|t| c * 16 + (wr * 2 + t / 2) * 4 + wc * 2 + t % 2).collect();
                        let lo = px.iter().map(|&i| v.data()[i]).fold(f64::INFINITY, f64::min);
                        let hi = px.iter().map(|&i| v.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                        for &i in &px {
                            prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
                        }
                    }
                }
            }
        }
    }
}
