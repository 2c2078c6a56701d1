//! Layers built from tape primitives. Layers hold [`ParamId`]s; the values
//! themselves live in the network's [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::kernels;
use crate::real::Real;
use crate::store::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics decay: `running = DECAY * running + (1 - DECAY) * batch`.
pub const BN_DECAY: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
/// Negative slope of the discriminators' leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// He (fan-in) normal initialization.
pub fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(dist.sample(rng))).collect())
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(dist.sample(rng))).collect())
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_param(
            &format!("{name}.weight"),
            he_normal(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        );
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    /// Output side for an input side, `floor((in + 2p - k) / s) + 1`.
    pub fn output_side(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Transposed convolution; with `kernel 3, stride 2, padding 1,
/// output_padding 1` it doubles the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel / (stride * stride);
        let weight = store.add_param(
            &format!("{name}.weight"),
            he_normal(&[in_ch, out_ch, kernel, kernel], fan_in.max(1), rng),
        );
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv_transpose2d(x, w, b, self.stride, self.padding, self.output_padding)
    }
}

/// Batch normalization over `[n, c, h, w]` with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub decay: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize) -> Self {
        Self {
            scale: store.add_param(&format!("{name}.scale"), Tensor::full(&[ch], T::ONE)),
            shift: store.add_param(&format!("{name}.shift"), Tensor::zeros(&[ch])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[ch])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[ch], T::ONE)),
            eps: BN_EPS,
            decay: BN_DECAY,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Var {
        let scale = tape.param(store, self.scale);
        let shift = tape.param(store, self.shift);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.normalize_channels(x, T::from_f64(self.eps));
                let unbias = if stats.count > 1 {
                    stats.count as f64 / (stats.count - 1) as f64
                } else {
                    1.0
                };
                let d = self.decay;
                let rm = store.value_mut(self.running_mean).data_mut();
                for (r, m) in rm.iter_mut().zip(&stats.mean) {
                    *r = T::from_f64(d * r.to_f64() + (1.0 - d) * m.to_f64());
                }
                let rv = store.value_mut(self.running_var).data_mut();
                for (r, v) in rv.iter_mut().zip(&stats.var) {
                    *r = T::from_f64(d * r.to_f64() + (1.0 - d) * v.to_f64() * unbias);
                }
                tape.channel_affine(y, scale, shift)
            }
            Mode::Eval => {
                let inv_std = store
                    .value(self.running_var)
                    .map(|v| T::ONE / (v + T::from_f64(self.eps)).sqrt());
                let inv_std = tape.constant(inv_std);
                let mean = tape.constant(store.value(self.running_mean).clone());
                let eff_scale = tape.mul(scale, inv_std);
                let centred = tape.mul(mean, eff_scale);
                let eff_shift = tape.sub(shift, centred);
                tape.channel_affine(x, eff_scale, eff_shift)
            }
        }
    }
}

/// Per-sample, per-channel normalization with a learnable affine. Behaves
/// identically in training and inference.
#[derive(Clone, Debug)]
pub struct InstanceNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize) -> Self {
        Self {
            scale: store.add_param(&format!("{name}.scale"), Tensor::full(&[ch], T::ONE)),
            shift: store.add_param(&format!("{name}.shift"), Tensor::zeros(&[ch])),
            eps: BN_EPS,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let s = tape.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let flat = tape.reshape(x, &[1, s[0] * s[1], s[2], s[3]]);
        let (y, _) = tape.normalize_channels(flat, T::from_f64(self.eps));
        let y = tape.reshape(y, &s);
        let scale = tape.param(store, self.scale);
        let shift = tape.param(store, self.shift);
        tape.channel_affine(y, scale, shift)
    }
}

/// Basic residual block: `relu(bn(conv(relu(bn(conv(x))))) + skip(x))`
/// where the skip is the identity or, when the shape changes, a 1x1
/// strided projection with batch norm.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, rng);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch);
        let projection = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(store, &format!("{name}.proj"), in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm2d::new(store, &format!("{name}.proj_bn"), out_ch),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Var {
        let h = self.conv1.forward(tape, store, x);
        let h = self.bn1.forward(tape, store, h, mode);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h);
        let h = self.bn2.forward(tape, store, h, mode);
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(tape, store, x);
                bn.forward(tape, store, s, mode)
            }
            None => x,
        };
        let sum = tape.add(h, skip);
        tape.relu(sum)
    }
}

/// Bias-free fully connected layer: `[n, d] x [d, k]`.
pub fn linear_nobias<T: Real>(tape: &mut Tape<T>, v: Var, weight: Var) -> Var {
    tape.matmul(v, weight)
}

/// Bilinear resize of a `[c, h, w]` tensor outside any tape.
pub fn resize_bilinear<T: Real>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = img.shape();
    assert_eq!(s.len(), 3, "expected [c, h, w]");
    let out = kernels::bilinear_forward(img.data(), s[0], s[1], s[2], out_h, out_w);
    Tensor::from_vec(&[s[0], out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_output_side_formula() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::new(&mut store, "c", 3, 4, 7, 2, 3, false, &mut rng);
        assert_eq!(c.output_side(448), 224);
        assert_eq!(c.output_side(64), 32);
    }

    #[test]
    fn eval_batch_norm_leaves_running_stats_alone() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        store
            .value_mut(bn.running_mean)
            .data_mut()
            .copy_from_slice(&[0.5, -1.0]);
        let before = store.value_bytes();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = bn.forward(&mut tape, &mut store, x, Mode::Eval);
        assert_eq!(store.value_bytes(), before);
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(Tensor::from_f64(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y2 = bn.forward(&mut tape2, &mut store, x2, Mode::Eval);
        assert_eq!(tape.value(y), tape2.value(y2));
    }

    #[test]
    fn train_batch_norm_updates_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[2, 1, 1, 1], &[1.0, 3.0]));
        let y = bn.forward(&mut tape, &mut store, x, Mode::Train);
        let yv = tape.value(y).data();
        assert!((yv[0] + 1.0).abs() < 1e-4 && (yv[1] - 1.0).abs() < 1e-4);
        // mean 2, unbiased var 2
        assert!((store.value(bn.running_mean).item() - 0.2).abs() < 1e-12);
        assert!((store.value(bn.running_var).item() - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn residual_block_with_zero_branch_is_relu() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ResidualBlock::new(&mut store, "b", 2, 2, 1, &mut rng);
        assert!(block.projection.is_none());
        for id in [block.conv1.weight, block.conv2.weight] {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let input = Tensor::from_f64(&[1, 2, 2, 2], &[-1.0, 2.0, 0.5, -3.0, 4.0, -0.1, 0.0, 1.5]);
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let y = block.forward(&mut tape, &mut store, x, mode);
            let expected = input.map(|v| v.max(0.0));
            assert!(tape.value(y).max_abs_diff(&expected) < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn projection_appears_when_shape_changes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = ResidualBlock::new(&mut store, "b", 2, 4, 2, &mut rng);
        assert!(block.projection.is_some());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let y = block.forward(&mut tape, &mut store, x, Mode::Train);
        assert_eq!(tape.shape(y), &[1, 4, 4, 4]);
    }
}
