//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever the backward rule needs;
//! [`Graph::backward`] walks the nodes in reverse and returns gradients for
//! the parameter leaves.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::{ParamGrads, ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Reshape(Var),
    Concat1(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Upsample2x(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Film {
        x: Var,
        film: Var,
    },
    Silu(Var),
    Relu(Var),
    Glu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        max_rel: usize,
        probs: Vec<T>,
    },
    L1Loss(Var, Var),
    MseLoss(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += *d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradient requirements; used for inference.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter as a differentiable leaf; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add: shape mismatch");
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub: shape mismatch");
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Affine(a, factor), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        self.push(value, Op::Reshape(a), &[a])
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat1(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == sb.len() && sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat1: incompatible shapes {sa:?} {sb:?}"
        );
        let outer = sa[0];
        let (ia, ib) = (self.value(a).len() / outer, self.value(b).len() / outer);
        let mut data = Vec::with_capacity(outer * (ia + ib));
        for o in 0..outer {
            data.extend_from_slice(&self.value(a).data()[o * ia..(o + 1) * ia]);
            data.extend_from_slice(&self.value(b).data()[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let value = Tensor::from_vec(&shape, data).unwrap();
        self.push(value, Op::Concat1(a, b), &[a, b])
    }

    /// `x·w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0], "linear: {xs:?} x {ws:?}");
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), n, "linear: bias length");
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::from_vec(&[m, n], out).unwrap();
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    /// 2-D convolution, `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1] && ws[2] == ws[3], "conv2d: {xs:?} * {ws:?}");
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = (conv_out(h, k, spec), conv_out(wd, k, spec));
        let ckk = c * k * k;
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * o * plane];
        let mut cols = vec![T::zero(); ckk * plane];
        let bias = self.value(b).data();
        for s in 0..n {
            let xin = &self.value(x).data()[s * c * h * wd..(s + 1) * c * h * wd];
            im2col(xin, c, h, wd, k, spec, ho, wo, &mut cols);
            let dst = &mut out[s * o * plane..(s + 1) * o * plane];
            for (oc, row) in dst.chunks_exact_mut(plane).enumerate() {
                row.fill(bias[oc]);
            }
            T::gemm(
                o,
                ckk,
                plane,
                T::one(),
                self.value(w).data(),
                (ckk as isize, 1),
                &cols,
                (plane as isize, 1),
                T::one(),
                dst,
                (plane as isize, 1),
            );
        }
        let value = Tensor::from_vec(&[n, o, ho, wo], out).unwrap();
        self.push(value, Op::Conv2d { x, w, b, spec }, &[x, w, b])
    }

    /// 1-D convolution over time, `x: [len, c_in]`, `w: [kernel * c_in, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, padding: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 2 && ws == [kernel * xs[1], ws[1]], "conv1d: {xs:?} * {ws:?}");
        let (len, cin, cout) = (xs[0], xs[1], ws[1]);
        assert!(len + 2 * padding >= kernel, "conv1d: input shorter than kernel");
        let lout = (len + 2 * padding - kernel) / stride + 1;
        let cols = im2col_1d(self.value(x).data(), len, cin, kernel, stride, padding, lout);
        let kc = kernel * cin;
        let mut out = vec![T::zero(); lout * cout];
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        T::gemm(
            lout,
            kc,
            cout,
            T::one(),
            &cols,
            (kc as isize, 1),
            self.value(w).data(),
            (cout as isize, 1),
            T::one(),
            &mut out,
            (cout as isize, 1),
        );
        let value = Tensor::from_vec(&[lout, cout], out).unwrap();
        self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                padding,
            },
            &[x, w, b],
        )
    }

    /// Same-length depthwise convolution, `x: [len, c]`, `w: [kernel, c]` (odd kernel).
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && ws[1] == xs[1] && ws[0] % 2 == 1, "depthwise: {xs:?} * {ws:?}");
        let (len, c, k) = (xs[0], xs[1], ws[0]);
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); len * c];
        for t in 0..len {
            let row = &mut out[t * c..(t + 1) * c];
            row.copy_from_slice(bv);
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let xr = &xv[src as usize * c..(src as usize + 1) * c];
                let wr = &wv[j * c..(j + 1) * c];
                for ch in 0..c {
                    row[ch] += wr[ch] * xr[ch];
                }
            }
        }
        let value = Tensor::from_vec(&[len, c], out).unwrap();
        self.push(value, Op::DepthwiseConv1d { x, w, b }, &[x, w, b])
    }

    /// Nearest-neighbour 2× upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); nc * 4 * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], 2 * h, 2 * w], out).unwrap();
        self.push(value, Op::Upsample2x(x), &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        assert!(c % groups == 0, "group_norm: {c} channels into {groups} groups");
        let spatial: usize = s[2..].iter().product();
        let gsize = c / groups * spatial;
        let eps = T::lit(1e-5);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        let cnt = T::from_usize(gsize).unwrap();
        for gi in 0..n * groups {
            let seg = &xv[gi * gsize..(gi + 1) * gsize];
            let mu = seg.iter().copied().sum::<T>() / cnt;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cnt;
            let r = T::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(r);
            let c0 = (gi % groups) * (c / groups);
            for (i, &v) in seg.iter().enumerate() {
                let ch = c0 + i / spatial;
                out[gi * gsize + i] = (v - mu) * r * gv[ch] + bv[ch];
            }
        }
        let value = Tensor::from_vec(&s, out).unwrap();
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalizes each row of `x: [rows, d]` over its last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let eps = T::lit(1e-5);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let cnt = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let seg = &xv[r * d..(r + 1) * d];
            let mu = seg.iter().copied().sum::<T>() / cnt;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cnt;
            let rs = T::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(rs);
            for i in 0..d {
                out[r * d + i] = (seg[i] - mu) * rs * gv[i] + bv[i];
            }
        }
        let value = Tensor::from_vec(&s, out).unwrap();
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Feature-wise affine modulation: `x * (1 + scale) + shift` where
    /// `film: [n, 2c]` holds per-sample `[scale | shift]` for `x: [n, c, ...]`.
    pub fn film(&mut self, x: Var, film: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[1]);
        assert_eq!(self.shape(film), &[n, 2 * c], "film: modulation shape");
        let spatial: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let fv = self.value(film).data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let g = T::one() + fv[i * 2 * c + ch];
                let b = fv[i * 2 * c + c + ch];
                let base = (i * c + ch) * spatial;
                for p in 0..spatial {
                    out[base + p] = xv[base + p] * g + b;
                }
            }
        }
        let value = Tensor::from_vec(&s, out).unwrap();
        self.push(value, Op::Film { x, film }, &[x, film])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    /// Gated linear unit over the last axis: `a * sigmoid(b)` for `x = [a | b]`.
    pub fn glu(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d2 = *s.last().unwrap();
        assert!(d2 % 2 == 0, "glu: odd width");
        let d = d2 / 2;
        let xv = self.value(x).data();
        let rows = xv.len() / d2;
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &xv[r * d2..(r + 1) * d2];
            out.extend((0..d).map(|i| row[i] * sigmoid(row[d + i])));
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = d;
        let value = Tensor::from_vec(&shape, out).unwrap();
        self.push(value, Op::Glu(x), &[x])
    }

    /// Multi-head self-attention over one sequence with a learned relative
    /// position bias. `q, k, v: [len, d]`; `bias: [heads, 2 * max_rel + 1]`
    /// indexed by the clipped offset `key - query`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Var, heads: usize) -> Var {
        let s = self.shape(q).to_vec();
        assert!(self.shape(k) == s.as_slice() && self.shape(v) == s.as_slice(), "attention: q/k/v shapes");
        let (len, d) = (s[0], s[1]);
        assert!(d % heads == 0, "attention: width {d} not divisible by {heads} heads");
        let bs = self.shape(bias).to_vec();
        assert!(bs.len() == 2 && bs[0] == heads && bs[1] % 2 == 1, "attention: bias table {bs:?}");
        let max_rel = bs[1] / 2;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); heads * len * len];
        let mut out = vec![T::zero(); len * d];
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let bv = self.value(bias).data();
        for h in 0..heads {
            let p = &mut probs[h * len * len..(h + 1) * len * len];
            T::gemm(
                len,
                dh,
                len,
                scale,
                &qv[h * dh..],
                (d as isize, 1),
                &kv[h * dh..],
                (1, d as isize),
                T::zero(),
                p,
                (len as isize, 1),
            );
            let brow = &bv[h * bs[1]..(h + 1) * bs[1]];
            for i in 0..len {
                let row = &mut p[i * len..(i + 1) * len];
                for (j, r) in row.iter_mut().enumerate() {
                    *r += brow[rel_index(i, j, max_rel)];
                }
                softmax_in_place(row);
            }
            T::gemm(
                len,
                len,
                dh,
                T::one(),
                p,
                (len as isize, 1),
                &vv[h * dh..],
                (d as isize, 1),
                T::zero(),
                &mut out[h * dh..],
                (d as isize, 1),
            );
        }
        let value = Tensor::from_vec(&[len, d], out).unwrap();
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                max_rel,
                probs,
            },
            &[q, k, v, bias],
        )
    }

    /// Mean absolute error, returned as a one-element tensor.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Var {
        let n = T::from_usize(self.value(pred).len()).unwrap();
        let total = self
            .value(pred)
            .zip_map(self.value(target), |a, b| (a - b).abs())
            .expect("l1_loss: shape mismatch")
            .sum();
        self.push(Tensor::scalar(total / n), Op::L1Loss(pred, target), &[pred, target])
    }

    /// Mean squared error, returned as a one-element tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Var {
        let n = T::from_usize(self.value(pred).len()).unwrap();
        let total = self
            .value(pred)
            .zip_map(self.value(target), |a, b| (a - b) * (a - b))
            .expect("mse_loss: shape mismatch")
            .sum();
        self.push(Tensor::scalar(total / n), Op::MseLoss(pred, target), &[pred, target])
    }

    /// Back-propagates from a one-element `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var, num_params: usize) -> ParamGrads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = ParamGrads::new(num_params);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, gy, &mut grads, &mut out);
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if self.wants(v) {
            add_into(&mut grads[v.0], delta);
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gy: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut ParamGrads<T>,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, &gy),
            Op::Add(a, b) => {
                if self.wants(*b) {
                    self.send(grads, *b, gy.clone());
                }
                self.send(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    self.send(grads, *b, gy.map(|g| -g));
                }
                self.send(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = gy.zip_map(self.value(*b), |g, y| g * y).unwrap();
                    self.send(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = gy.zip_map(self.value(*a), |g, x| g * x).unwrap();
                    self.send(grads, *b, d);
                }
            }
            Op::Affine(a, f) => {
                let f = *f;
                self.send(grads, *a, gy.map(|g| g * f));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.send(grads, *a, gy.reshape(&shape).unwrap());
            }
            Op::Concat1(a, b) => {
                let outer = gy.dim(0);
                let ia = self.value(*a).len() / outer;
                let ib = self.value(*b).len() / outer;
                let mut ga = Vec::with_capacity(outer * ia);
                let mut gb = Vec::with_capacity(outer * ib);
                for o in 0..outer {
                    let row = &gy.data()[o * (ia + ib)..(o + 1) * (ia + ib)];
                    ga.extend_from_slice(&row[..ia]);
                    gb.extend_from_slice(&row[ia..]);
                }
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                self.send(grads, *a, Tensor::from_vec(&sa, ga).unwrap());
                self.send(grads, *b, Tensor::from_vec(&sb, gb).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gy.data(), (n as isize, 1), self.value(*w).data(), (1, n as isize), T::zero(), &mut dx, (k as isize, 1));
                    self.send(grads, *x, Tensor::from_vec(&[m, k], dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(*x).data(), (1, k as isize), gy.data(), (n as isize, 1), T::zero(), &mut dw, (n as isize, 1));
                    self.send(grads, *w, Tensor::from_vec(&[k, n], dw).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.send(grads, *b, column_sums(gy.data(), n));
                    }
                }
            }
            Op::Conv2d { x, w, b, spec } => self.conv2d_backward(*x, *w, *b, *spec, &gy, grads),
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                padding,
            } => {
                let (len, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cout = self.shape(*w)[1];
                let lout = gy.dim(0);
                let kc = kernel * cin;
                if self.wants(*w) {
                    let cols = im2col_1d(self.value(*x).data(), len, cin, *kernel, *stride, *padding, lout);
                    let mut dw = vec![T::zero(); kc * cout];
                    T::gemm(kc, lout, cout, T::one(), &cols, (1, kc as isize), gy.data(), (cout as isize, 1), T::zero(), &mut dw, (cout as isize, 1));
                    self.send(grads, *w, Tensor::from_vec(&[kc, cout], dw).unwrap());
                }
                if self.wants(*b) {
                    self.send(grads, *b, column_sums(gy.data(), cout));
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); lout * kc];
                    T::gemm(lout, cout, kc, T::one(), gy.data(), (cout as isize, 1), self.value(*w).data(), (1, cout as isize), T::zero(), &mut dcols, (kc as isize, 1));
                    let mut dx = vec![T::zero(); len * cin];
                    for t in 0..lout {
                        for j in 0..*kernel {
                            let src = (t * stride + j) as isize - *padding as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let s = src as usize;
                            for c in 0..cin {
                                dx[s * cin + c] += dcols[t * kc + j * cin + c];
                            }
                        }
                    }
                    self.send(grads, *x, Tensor::from_vec(&[len, cin], dx).unwrap());
                }
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let (len, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[0];
                let pad = k / 2;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let g = gy.data();
                let mut dx = vec![T::zero(); len * c];
                let mut dw = vec![T::zero(); k * c];
                for t in 0..len {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= len as isize {
                            continue;
                        }
                        let s = src as usize;
                        for ch in 0..c {
                            let gv = g[t * c + ch];
                            dw[j * c + ch] += gv * xv[s * c + ch];
                            dx[s * c + ch] += gv * wv[j * c + ch];
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&[len, c], dx).unwrap());
                self.send(grads, *w, Tensor::from_vec(&[k, c], dw).unwrap());
                if self.wants(*b) {
                    self.send(grads, *b, column_sums(g, c));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let g = gy.data();
                let mut dx = vec![T::zero(); nc * h * w];
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&s, dx).unwrap());
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let s = self.shape(*x).to_vec();
                let c = s[1];
                let spatial: usize = s[2..].iter().product();
                let per_group = c / groups;
                let gsize = per_group * spatial;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let g = gy.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let cnt = T::from_usize(gsize).unwrap();
                for gi in 0..mean.len() {
                    let c0 = (gi % groups) * per_group;
                    let (mu, r) = (mean[gi], rstd[gi]);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for i in 0..gsize {
                        let idx = gi * gsize + i;
                        let ch = c0 + i / spatial;
                        let xhat = (xv[idx] - mu) * r;
                        let d = g[idx] * gv[ch];
                        sum_d += d;
                        sum_dx += d * xhat;
                        dgamma[ch] += g[idx] * xhat;
                        dbeta[ch] += g[idx];
                    }
                    let (md, mdx) = (sum_d / cnt, sum_dx / cnt);
                    for i in 0..gsize {
                        let idx = gi * gsize + i;
                        let ch = c0 + i / spatial;
                        let xhat = (xv[idx] - mu) * r;
                        dx[idx] = r * (g[idx] * gv[ch] - md - xhat * mdx);
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&s, dx).unwrap());
                self.send(grads, *gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                self.send(grads, *beta, Tensor::from_vec(&[c], dbeta).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let s = self.shape(*x).to_vec();
                let d = *s.last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let g = gy.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let cnt = T::from_usize(d).unwrap();
                for r in 0..mean.len() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for i in 0..d {
                        let xhat = (xv[r * d + i] - mu) * rs;
                        let dd = g[r * d + i] * gv[i];
                        sum_d += dd;
                        sum_dx += dd * xhat;
                        dgamma[i] += g[r * d + i] * xhat;
                        dbeta[i] += g[r * d + i];
                    }
                    let (md, mdx) = (sum_d / cnt, sum_dx / cnt);
                    for i in 0..d {
                        let xhat = (xv[r * d + i] - mu) * rs;
                        dx[r * d + i] = rs * (g[r * d + i] * gv[i] - md - xhat * mdx);
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&s, dx).unwrap());
                self.send(grads, *gamma, Tensor::from_vec(&[d], dgamma).unwrap());
                self.send(grads, *beta, Tensor::from_vec(&[d], dbeta).unwrap());
            }
            Op::Film { x, film } => {
                let s = self.shape(*x).to_vec();
                let (n, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let xv = self.value(*x).data();
                let fv = self.value(*film).data();
                let g = gy.data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut df = vec![T::zero(); n * 2 * c];
                for i in 0..n {
                    for ch in 0..c {
                        let scale = T::one() + fv[i * 2 * c + ch];
                        let base = (i * c + ch) * spatial;
                        let mut ds = T::zero();
                        let mut db = T::zero();
                        for p in 0..spatial {
                            dx[base + p] = g[base + p] * scale;
                            ds += g[base + p] * xv[base + p];
                            db += g[base + p];
                        }
                        df[i * 2 * c + ch] = ds;
                        df[i * 2 * c + c + ch] = db;
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&s, dx).unwrap());
                self.send(grads, *film, Tensor::from_vec(&[n, 2 * c], df).unwrap());
            }
            Op::Silu(x) => {
                let d = gy
                    .zip_map(self.value(*x), |g, v| {
                        let s = sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    })
                    .unwrap();
                self.send(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = gy
                    .zip_map(self.value(*x), |g, v| if v > T::zero() { g } else { T::zero() })
                    .unwrap();
                self.send(grads, *x, d);
            }
            Op::Glu(x) => {
                let s = self.shape(*x).to_vec();
                let d2 = *s.last().unwrap();
                let d = d2 / 2;
                let xv = self.value(*x).data();
                let g = gy.data();
                let rows = xv.len() / d2;
                let mut dx = vec![T::zero(); xv.len()];
                for r in 0..rows {
                    for i in 0..d {
                        let a = xv[r * d2 + i];
                        let sb = sigmoid(xv[r * d2 + d + i]);
                        let gv = g[r * d + i];
                        dx[r * d2 + i] = gv * sb;
                        dx[r * d2 + d + i] = gv * a * sb * (T::one() - sb);
                    }
                }
                self.send(grads, *x, Tensor::from_vec(&s, dx).unwrap());
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                max_rel,
                probs,
            } => self.attention_backward(*q, *k, *v, *bias, *heads, *max_rel, probs, &gy, grads),
            Op::L1Loss(p, t) => {
                let n = T::from_usize(self.value(*p).len()).unwrap();
                let g0 = gy.data()[0] / n;
                let d = self
                    .value(*p)
                    .zip_map(self.value(*t), |a, b| sign(a - b) * g0)
                    .unwrap();
                if self.wants(*t) {
                    self.send(grads, *t, d.map(|v| -v));
                }
                self.send(grads, *p, d);
            }
            Op::MseLoss(p, t) => {
                let n = T::from_usize(self.value(*p).len()).unwrap();
                let g0 = T::lit(2.0) * gy.data()[0] / n;
                let d = self
                    .value(*p)
                    .zip_map(self.value(*t), |a, b| (a - b) * g0)
                    .unwrap();
                if self.wants(*t) {
                    self.send(grads, *t, d.map(|v| -v));
                }
                self.send(grads, *p, d);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = (gy.dim(2), gy.dim(3));
        let plane = ho * wo;
        let ckk = c * k * k;
        let g = gy.data();
        if self.wants(b) {
            let mut db = vec![T::zero(); o];
            for s in 0..n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    *acc += g[(s * o + oc) * plane..(s * o + oc + 1) * plane].iter().copied().sum::<T>();
                }
            }
            self.send(grads, b, Tensor::from_vec(&[o], db).unwrap());
        }
        let need_w = self.wants(w);
        let need_x = self.wants(x);
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![T::zero(); ckk * plane];
        let mut dcols = vec![T::zero(); ckk * plane];
        let mut dw = vec![T::zero(); o * ckk];
        let mut dx = if need_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
        for s in 0..n {
            let gs = &g[s * o * plane..(s + 1) * o * plane];
            if need_w {
                let xin = &self.value(x).data()[s * c * h * wd..(s + 1) * c * h * wd];
                im2col(xin, c, h, wd, k, spec, ho, wo, &mut cols);
                T::gemm(o, plane, ckk, T::one(), gs, (plane as isize, 1), &cols, (1, plane as isize), T::one(), &mut dw, (ckk as isize, 1));
            }
            if need_x {
                T::gemm(ckk, o, plane, T::one(), self.value(w).data(), (1, ckk as isize), gs, (plane as isize, 1), T::zero(), &mut dcols, (plane as isize, 1));
                col2im(&dcols, c, h, wd, k, spec, ho, wo, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
            }
        }
        if need_w {
            self.send(grads, w, Tensor::from_vec(&ws, dw).unwrap());
        }
        if need_x {
            self.send(grads, x, Tensor::from_vec(&xs, dx).unwrap());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        max_rel: usize,
        probs: &[T],
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (len, d) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = d / heads;
        let width = 2 * max_rel + 1;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let g = gy.data();
        let mut dq = vec![T::zero(); len * d];
        let mut dk = vec![T::zero(); len * d];
        let mut dv = vec![T::zero(); len * d];
        let mut dbias = vec![T::zero(); heads * width];
        let mut ds = vec![T::zero(); len * len];
        for h in 0..heads {
            let p = &probs[h * len * len..(h + 1) * len * len];
            // dV_h = P^T dO_h
            T::gemm(len, len, dh, T::one(), p, (1, len as isize), &g[h * dh..], (d as isize, 1), T::zero(), &mut dv[h * dh..], (d as isize, 1));
            // dP = dO_h V_h^T
            T::gemm(len, dh, len, T::one(), &g[h * dh..], (d as isize, 1), &vv[h * dh..], (1, d as isize), T::zero(), &mut ds, (len as isize, 1));
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let drow = &mut ds[i * len..(i + 1) * len];
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..len {
                    drow[j] = prow[j] * (drow[j] - dot);
                    dbias[h * width + rel_index(i, j, max_rel)] += drow[j];
                }
            }
            T::gemm(len, len, dh, scale, &ds, (len as isize, 1), &kv[h * dh..], (d as isize, 1), T::zero(), &mut dq[h * dh..], (d as isize, 1));
            T::gemm(len, len, dh, scale, &ds, (1, len as isize), &qv[h * dh..], (d as isize, 1), T::zero(), &mut dk[h * dh..], (d as isize, 1));
        }
        self.send(grads, q, Tensor::from_vec(&[len, d], dq).unwrap());
        self.send(grads, k, Tensor::from_vec(&[len, d], dk).unwrap());
        self.send(grads, v, Tensor::from_vec(&[len, d], dv).unwrap());
        self.send(grads, bias, Tensor::from_vec(&[heads, width], dbias).unwrap());
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn rel_index(i: usize, j: usize, max_rel: usize) -> usize {
    let off = (j as isize - i as isize).clamp(-(max_rel as isize), max_rel as isize);
    (off + max_rel as isize) as usize
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for r in row.iter_mut() {
        *r = (*r - m).exp();
        total += *r;
    }
    for r in row.iter_mut() {
        *r /= total;
    }
}

fn column_sums<T: Scalar>(data: &[T], n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); n];
    for row in data.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_vec(&[n], out).unwrap()
}

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> usize {
    assert!(size + 2 * spec.padding >= k, "conv2d: input smaller than kernel");
    (size + 2 * spec.padding - k) / spec.stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    let pad = spec.padding as isize;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: Conv2dSpec,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    let pad = spec.padding as isize;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ch * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn im2col_1d<T: Scalar>(
    x: &[T],
    len: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    lout: usize,
) -> Vec<T> {
    let kc = kernel * cin;
    let mut cols = vec![T::zero(); lout * kc];
    for t in 0..lout {
        for j in 0..kernel {
            let src = (t * stride + j) as isize - padding as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let s = src as usize;
            cols[t * kc + j * cin..t * kc + (j + 1) * cin].copy_from_slice(&x[s * cin..(s + 1) * cin]);
        }
    }
    cols
}
