use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::real::Real;
use crate::store::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ParamKey {
    pub store: u64,
    pub id: ParamId,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamKey),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        geom: PoolGeom,
        arg: Vec<u32>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    GlobalAvgPool(Var),
    NormalizeChannels {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Bilinear(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics computed by [`Tape::normalize_channels`].
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance per channel.
    pub var: Vec<T>,
    /// Number of elements each channel statistic was computed over.
    pub count: usize,
}

/// Define-by-run record of a forward computation.
///
/// A tape is built fresh for every forward pass and consumed by
/// [`Tape::backward`]. Shape contract violations in the recording methods
/// panic, like indexing out of bounds.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, ParamKey)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded value, if it reached the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamKey, &[T])> {
        self.params
            .iter()
            .filter_map(|(node, key)| self.grads[*node].as_deref().map(|g| (*key, g)))
    }
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [n, c], got {shape:?}");
    (shape[0], shape[1], numel(&shape[2..]))
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [n, c, h, w], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient can be read with [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter of `store`; gradients flow back to it through
    /// [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = ParamKey { store: store.uid(), id };
        self.push(store.value(id).clone(), Op::Param(key), true)
    }

    /// Copies a value into a new constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise operands differ in shape");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::ZERO { x } else { T::ZERO }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, |x| if x > T::ZERO { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::from_f64(v.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `[n, d] x [d, k] -> [n, k]`, no bias.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch {sa:?} x {sb:?}"
        );
        let (n, d, k) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; n * k];
        T::gemm(
            n,
            d,
            k,
            T::ONE,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::ZERO,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[n, k], out), Op::MatMul(a, b), rg)
    }

    /// Cross-correlation: `x [n, c, h, w]`, `w [o, c, kh, kw]`, optional `b [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = dims4(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [o, c, kh, kw]");
        assert_eq!(ws[1], c, "conv expects {} input channels, got {c}", ws[1]);
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[ws[0]], "conv bias shape");
        }
        let geom = ConvGeom::new(c, h, wd, ws[0], ws[2], ws[3], stride, pad);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[n, ws[0], geom.oh, geom.ow], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Transposed convolution: `x [n, c, h, w]`, `w [c, o, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Var {
        let (n, c, h, wd) = dims4(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert!(
            ws.len() == 4 && ws[0] == c && ws[2] == ws[3],
            "transposed conv weight {ws:?} for {c} channels"
        );
        let geom = kernels::conv_transpose_geom(c, h, wd, ws[1], ws[2], stride, pad, output_pad);
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_vec(&[n, ws[1], geom.h, geom.w], out),
            Op::ConvTranspose2d { x, w, b, geom },
            rg,
        )
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        let geom = PoolGeom::new(h, w, k, stride, pad);
        let (out, arg) = kernels::max_pool_forward(self.value(x).data(), n * c, &geom);
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, c, geom.oh, geom.ow], out),
            Op::MaxPool { x, geom, arg },
            rg,
        )
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        let out = kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, k);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, h / k, w / k], out), Op::AvgPool { x, k }, rg)
    }

    /// `[n, c, h, w] -> [n, c]`, the mean of each feature map.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        assert!(h >= 1 && w >= 1);
        let plane = h * w;
        let inv = T::from_f64(1.0 / plane as f64);
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool(x), rg)
    }

    /// Per-channel standardization over every axis except axis 1, using
    /// the batch's own statistics. Returns the normalized value and the
    /// statistics it used.
    pub fn normalize_channels(&mut self, x: Var, eps: T) -> (Var, NormStats<T>) {
        let (n, c, inner) = channel_layout(self.shape(x));
        let count = n * inner;
        assert!(count > 0);
        let xv = self.value(x).data();
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * inner;
                s += xv[base..base + inner].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let m = s / count as f64;
            let mut q = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * inner;
                q += xv[base..base + inner]
                    .iter()
                    .map(|v| (v.to_f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = T::from_f64(m);
            var[ch] = T::from_f64(q / count as f64);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut out = vec![T::ZERO; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    out[j] = (xv[j] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        let v = self.push(Tensor::from_vec(&shape, out), Op::NormalizeChannels { x, inv_std }, rg);
        (v, NormStats { mean, var, count })
    }

    /// `y = x * scale[c] + shift[c]` broadcast over every axis but axis 1.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, inner) = channel_layout(self.shape(x));
        assert_eq!(self.shape(scale), &[c], "affine scale shape");
        assert_eq!(self.shape(shift), &[c], "affine shift shape");
        let (xv, sv, bv) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::ZERO; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    out[j] = xv[j] * sv[ch] + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        self.push(Tensor::from_vec(&shape, out), Op::ChannelAffine { x, scale, shift }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Concatenation along axis 1; all other dims must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() >= 2 && sa.len() == sb.len() && sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat shape mismatch {sa:?} vs {sb:?}"
        );
        let inner = numel(&sa[2..]);
        let (ra, rb) = (sa[1] * inner, sb[1] * inner);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for i in 0..sa[0] {
            out.extend_from_slice(&va[i * ra..(i + 1) * ra]);
            out.extend_from_slice(&vb[i * rb..(i + 1) * rb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&shape, out), Op::Concat { a, b }, rg)
    }

    /// Rows `start..start+len` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 2 && start + len <= s[0], "slice_rows out of range for {s:?}");
        let data = self.value(x).data()[start * s[1]..(start + len) * s[1]].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[len, s[1]], data), Op::SliceRows { x, start }, rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(
            s.len() == 2 && s[0] == labels.len(),
            "logits {s:?} vs {} labels",
            labels.len()
        );
        let (n, k) = (s[0], s[1]);
        let lv = self.value(logits).data();
        let mut probs = vec![T::ZERO; n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            assert!(labels[i] < k, "label {} out of range for {k} classes", labels[i]);
            let row = &lv[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += (z.ln() + mx - row[labels[i]]).to_f64();
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(T::from_f64(loss / n as f64)),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Half-pixel-centred bilinear resize of `[n, c, h, w]`.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (n, c, h, w) = dims4(self.shape(x));
        let out = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, oh, ow);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[n, c, oh, ow], out), Op::Bilinear(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Values that do not depend on any parameter or variable get no
    /// gradient; this is not an error.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(key) = node.op {
                params.push((idx, key));
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                send(*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|&d| d * *s).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::ZERO { d } else { T::ZERO })
                    .collect(),
            ),
            Op::LeakyRelu(a, slope) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x > T::ZERO { d } else { d * *slope })
                    .collect(),
            ),
            Op::Tanh(a) => send(*a, g.iter().zip(out).map(|(&d, &y)| d * (T::ONE - y * y)).collect()),
            Op::Abs(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| {
                        if x > T::ZERO {
                            d
                        } else if x < T::ZERO {
                            -d
                        } else {
                            T::ZERO
                        }
                    })
                    .collect(),
            ),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (n, d, k) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::ZERO; n * d];
                    T::gemm(n, k, d, T::ONE, g, false, val(*b), true, T::ZERO, &mut da);
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::ZERO; d * k];
                    T::gemm(d, n, k, T::ONE, val(*a), true, g, false, T::ZERO, &mut db);
                    send(*b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.nodes[x.0].value.shape()[0];
                let cg = kernels::conv2d_backward(val(*x), n, geom, val(*w), g, self.nodes[x.0].requires_grad);
                if let Some(dx) = cg.dx {
                    send(*x, dx);
                }
                send(*w, cg.dw);
                if let Some(b) = b {
                    send(*b, cg.db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let n = self.nodes[x.0].value.shape()[0];
                let cg =
                    kernels::conv_transpose2d_backward(val(*x), n, geom, val(*w), g, self.nodes[x.0].requires_grad);
                if let Some(dx) = cg.dx {
                    send(*x, dx);
                }
                send(*w, cg.dw);
                if let Some(b) = b {
                    send(*b, cg.db);
                }
            }
            Op::MaxPool { x, geom, arg } => {
                let s = self.nodes[x.0].value.shape();
                send(*x, kernels::max_pool_backward(g, arg, s[0] * s[1], geom));
            }
            Op::AvgPool { x, k } => {
                let (n, c, h, w) = dims4(self.nodes[x.0].value.shape());
                send(*x, kernels::avg_pool_backward(g, n * c, h, w, *k));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                let inv = T::from_f64(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(val(*x).len());
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * inv, plane));
                }
                send(*x, dx);
            }
            Op::NormalizeChannels { x, inv_std } => {
                let (n, c, inner) = channel_layout(self.nodes[x.0].value.shape());
                let count = T::from_f64((n * inner) as f64);
                let mut dx = vec![T::ZERO; g.len()];
                for ch in 0..c {
                    let mut sum_g = T::ZERO;
                    let mut sum_gy = T::ZERO;
                    for i in 0..n {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            sum_g += g[j];
                            sum_gy += g[j] * out[j];
                        }
                    }
                    let k = inv_std[ch] / count;
                    for i in 0..n {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            dx[j] = k * (count * g[j] - sum_g - out[j] * sum_gy);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (n, c, inner) = channel_layout(self.nodes[x.0].value.shape());
                let (xv, sv) = (val(*x), val(*scale));
                let mut dx = vec![T::ZERO; g.len()];
                let mut ds = vec![T::ZERO; c];
                let mut db = vec![T::ZERO; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            dx[j] = g[j] * sv[ch];
                            ds[ch] += g[j] * xv[j];
                            db[ch] += g[j];
                        }
                    }
                }
                send(*x, dx);
                send(*scale, ds);
                send(*shift, db);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Concat { a, b } => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let inner = numel(&sa[2..]);
                let (ra, rb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * ra);
                let mut db = Vec::with_capacity(sa[0] * rb);
                for row in g.chunks(ra + rb) {
                    da.extend_from_slice(&row[..ra]);
                    db.extend_from_slice(&row[ra..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::SliceRows { x, start } => {
                let s = self.nodes[x.0].value.shape();
                let mut dx = vec![T::ZERO; s[0] * s[1]];
                dx[start * s[1]..start * s[1] + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let n = labels.len();
                let scale = g[0] / T::from_f64(n as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::ONE;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                send(*logits, d);
            }
            Op::Bilinear(x) => {
                let (n, c, h, w) = dims4(self.nodes[x.0].value.shape());
                let s = node.value.shape();
                send(*x, kernels::bilinear_backward(g, n * c, h, w, s[2], s[3]));
            }
        }
    }
}
