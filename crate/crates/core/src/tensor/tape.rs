use crate::scalar::Scalar;

use super::kernels::{self, CircGeom, Conv2dGeom};
use super::{shape_err, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, geom: Conv2dGeom },
    AddBias { x: Var, b: Var },
    CircConv1d { x: Var, k: Var, geom: CircGeom },
    Upsample2x { x: Var },
    Act { x: Var, act: Activation },
    SmoothL1 { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Correlate { t: Var, s: Var },
    Crop2d { x: Var, top: usize, left: usize },
    Sample { map: Var, pts: Vec<[f64; 2]> },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Single-threaded record of executed operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
/// Gradients are kept only for leaves and accumulate across calls.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) || data.iter().all(|x| x.is_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        let value = Tensor::new(shape, data).expect("kernel output matches declared shape");
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        match *self.shape(v) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(shape_err(op, format!("expected [C,H,W], got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// 2-D cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kH,kW]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (c_in, h, w) = self.dims3(x, "conv2d")?;
        let [c_out, kc, kh, kw] = *self.shape(k) else {
            return Err(shape_err("conv2d", format!("kernel must be rank 4, got {:?}", self.shape(k))));
        };
        if kc != c_in {
            return Err(shape_err("conv2d", format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel size {kh}x{kw} must be odd")));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", format!("input {h}x{w} pad {pad} too small for {kh}x{kw}")));
        }
        let geom = Conv2dGeom { c_in, h, w, c_out, kh, kw, stride, pad };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &geom);
        let (oh, ow) = geom.out_hw();
        Ok(self.push(&[c_out, oh, ow], out, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// Adds `b[c]` to every element of channel `c` (first dimension) of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let c = self.shape(x)[0];
        if self.shape(b) != [c] {
            return Err(shape_err("add_bias", format!("bias {:?} for {c} channels", self.shape(b))));
        }
        let xs = self.value(x);
        let per = xs.numel() / c;
        let bv = self.value(b).data();
        let out = xs.data().iter().enumerate().map(|(i, v)| *v + bv[i / per]).collect();
        let shape = xs.shape().to_vec();
        Ok(self.push(&shape, out, Op::AddBias { x, b }, &[x, b]))
    }

    /// Circular 1-D convolution over a closed ring of `K` positions.
    ///
    /// `out[c, p] = Σ_{r=-R..R} dot(x[:, (p + r·dilation) mod K], k[c, :, r + R])`.
    pub fn circ_conv1d(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var, TensorError> {
        let [c_in, len] = *self.shape(x) else {
            return Err(shape_err("circ_conv1d", format!("expected [C,K], got {:?}", self.shape(x))));
        };
        let [c_out, kc, taps] = *self.shape(k) else {
            return Err(shape_err("circ_conv1d", format!("kernel must be rank 3, got {:?}", self.shape(k))));
        };
        if kc != c_in {
            return Err(shape_err("circ_conv1d", format!("kernel expects {kc} channels, input has {c_in}")));
        }
        if taps % 2 == 0 || dilation == 0 {
            return Err(shape_err("circ_conv1d", format!("taps {taps} must be odd, dilation {dilation} positive")));
        }
        if len < dilation * taps {
            return Err(TensorError::Contract(format!(
                "circ_conv1d: ring of {len} vertices shorter than receptive span {}",
                dilation * taps
            )));
        }
        let geom = CircGeom { c_in, len, c_out, taps, dilation };
        let out = kernels::circ_conv1d_forward(self.value(x).data(), self.value(k).data(), &geom);
        Ok(self.push(&[c_out, len], out, Op::CircConv1d { x, k, geom }, &[x, k]))
    }

    /// Bilinear 2× upsampling, align-corners = false, edge-clamped.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let (c, h, w) = self.dims3(x, "upsample2x")?;
        let out = kernels::upsample2x_forward(self.value(x).data(), c, h, w);
        Ok(self.push(&[c, 2 * h, 2 * w], out, Op::Upsample2x { x }, &[x]))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let xs = self.value(x);
        let out = xs.data().iter().map(|&v| apply(act, v)).collect();
        let shape = xs.shape().to_vec();
        self.push(&shape, out, Op::Act { x, act }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Elementwise smooth L1 with the quadratic/linear transition at 1.
    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let half = T::lit(0.5);
        let out = xs
            .data()
            .iter()
            .map(|&v| if v.abs() < T::one() { half * v * v } else { v.abs() - half })
            .collect();
        let shape = xs.shape().to_vec();
        self.push(&shape, out, Op::SmoothL1 { x }, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var, TensorError> {
        self.same_shape(a, b, op_name)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(&shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cs = T::lit(c);
        let xs = self.value(x);
        let out = xs.data().iter().map(|&v| v * cs).collect();
        let shape = xs.shape().to_vec();
        self.push(&shape, out, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cs = T::lit(c);
        let xs = self.value(x);
        let out = xs.data().iter().map(|&v| v + cs).collect();
        let shape = xs.shape().to_vec();
        self.push(&shape, out, Op::AddScalar { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(&[1], vec![T::lit(s)], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let s: f64 = xs.data().iter().map(|v| v.as_f64()).sum();
        let m = s / xs.numel() as f64;
        self.push(&[1], vec![T::lit(m)], Op::Mean { x }, &[x])
    }

    /// Pixel-wise correlation: each target pixel's channel vector is a 1×1 kernel
    /// slid over the search map. Output `[Ht·Wt, Hs, Ws]`, target pixels row-major.
    pub fn correlate(&mut self, t: Var, s: Var) -> Result<Var, TensorError> {
        let (ct, ht, wt) = self.dims3(t, "correlate")?;
        let (cs, hs, ws) = self.dims3(s, "correlate")?;
        if ct != cs {
            return Err(shape_err("correlate", format!("target has {ct} channels, search has {cs}")));
        }
        let out = kernels::correlate_forward(self.value(t).data(), self.value(s).data(), ct, ht * wt, hs * ws);
        Ok(self.push(&[ht * wt, hs, ws], out, Op::Correlate { t, s }, &[t, s]))
    }

    /// Spatial window `[top..top+h, left..left+w]` of a `[C,H,W]` map.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var, TensorError> {
        let (c, hh, ww) = self.dims3(x, "crop2d")?;
        if h == 0 || w == 0 || top + h > hh || left + w > ww {
            return Err(shape_err("crop2d", format!("window {top}+{h}, {left}+{w} outside {hh}x{ww}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in top..top + h {
                let row = (ch * hh + y) * ww;
                out.extend_from_slice(&src[row + left..row + left + w]);
            }
        }
        Ok(self.push(&[c, h, w], out, Op::Crop2d { x, top, left }, &[x]))
    }

    /// Bilinear samples of a `[C,H,W]` map at grid positions `(x, y)` where
    /// integer coordinates are cell centers; positions are clamped to the map.
    /// Output `[C, K]`. Positions are constants (no gradient flows to them).
    pub fn sample_points(&mut self, map: Var, pts: &[[f64; 2]]) -> Result<Var, TensorError> {
        let (c, h, w) = self.dims3(map, "sample_points")?;
        if pts.is_empty() {
            return Err(TensorError::EmptyContour { op: "sample_points" });
        }
        if pts.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(TensorError::Contract("sample_points: non-finite position".into()));
        }
        let out = kernels::sample_forward(self.value(map).data(), c, h, w, pts);
        Ok(self.push(&[c, pts.len()], out, Op::Sample { map, pts: pts.to_vec() }, &[map]))
    }

    /// Concatenation along the first dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat", format!("{s:?} does not stack with trailing {tail:?}")));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        Ok(self.push(&shape, out, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).reshape(shape)?;
        let requires_grad = self.nodes[x.0].requires_grad;
        self.nodes.push(Node { value, op: Op::Reshape { x }, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a one-element `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let slot = &mut self.nodes[id].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => *slot = Some(g),
                }
                continue;
            }
            for (input, dg) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(g, val(*x), val(*k), geom, self.needs(*x), self.needs(*k));
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*k, d)));
            }
            Op::AddBias { x, b } => {
                let c = self.nodes[b.0].value.numel();
                let per = g.len() / c;
                out.push((*x, g.to_vec()));
                let db = (0..c).map(|ch| g[ch * per..(ch + 1) * per].iter().copied().sum()).collect();
                out.push((*b, db));
            }
            Op::CircConv1d { x, k, geom } => {
                let (dx, dk) =
                    kernels::circ_conv1d_backward(g, val(*x), val(*k), geom, self.needs(*x), self.needs(*k));
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dk.map(|d| (*k, d)));
            }
            Op::Upsample2x { x } => {
                let [c, h, w] = *self.nodes[x.0].value.shape() else { unreachable!() };
                out.push((*x, kernels::upsample2x_backward(g, c, h, w)));
            }
            Op::Act { x, act } => {
                let xv = val(*x);
                let d = match act {
                    Activation::Relu => {
                        g.iter().zip(xv).map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() }).collect()
                    }
                    Activation::Tanh => g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect(),
                    Activation::Sigmoid => g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect(),
                };
                out.push((*x, d));
            }
            Op::SmoothL1 { x } => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gi, &xi)| if xi.abs() < T::one() { gi * xi } else { gi * xi.signum() })
                    .collect();
                out.push((*x, d));
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul { a, b } => {
                out.push((*a, g.iter().zip(val(*b)).map(|(&gi, &bi)| gi * bi).collect()));
                out.push((*b, g.iter().zip(val(*a)).map(|(&gi, &ai)| gi * ai).collect()));
            }
            Op::Div { a, b } => {
                let bv = val(*b);
                out.push((*a, g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect()));
                out.push((*b, g.iter().zip(y).zip(bv).map(|((&gi, &yi), &bi)| -gi * yi / bi).collect()));
            }
            Op::Scale { x, c } => {
                let cs = T::lit(*c);
                out.push((*x, g.iter().map(|&v| v * cs).collect()));
            }
            Op::AddScalar { x } => out.push((*x, g.to_vec())),
            Op::Sum { x } => out.push((*x, vec![g[0]; self.nodes[x.0].value.numel()])),
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                out.push((*x, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::Correlate { t, s } => {
                let [c, ht, wt] = *self.nodes[t.0].value.shape() else { unreachable!() };
                let [_, hs, ws] = *self.nodes[s.0].value.shape() else { unreachable!() };
                let (dt, ds) = kernels::correlate_backward(g, val(*t), val(*s), c, ht * wt, hs * ws);
                out.push((*t, dt));
                out.push((*s, ds));
            }
            Op::Crop2d { x, top, left } => {
                let [c, hh, ww] = *self.nodes[x.0].value.shape() else { unreachable!() };
                let [_, h, w] = *node.value.shape() else { unreachable!() };
                let mut dx = vec![T::zero(); c * hh * ww];
                for ch in 0..c {
                    for yy in 0..h {
                        let dst = (ch * hh + top + yy) * ww + left;
                        let src = (ch * h + yy) * w;
                        dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                out.push((*x, dx));
            }
            Op::Sample { map, pts } => {
                let [c, h, w] = *self.nodes[map.0].value.shape() else { unreachable!() };
                out.push((*map, kernels::sample_backward(g, c, h, w, pts)));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    out.push((*p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
        }
        out
    }
}

#[inline]
fn apply<T: Scalar>(act: Activation, v: T) -> T {
    match act {
        Activation::Relu => v.max(T::zero()),
        Activation::Tanh => v.tanh(),
        Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
    }
}
