use mmfuse_autograd::nn::{Conv2d, ConvTranspose2d, InstanceNorm2d, LEAKY_SLOPE};
use mmfuse_autograd::{ParamStore, Real, Tape, Var};
use rand::Rng;

/// Number of condition channels: four one-hot class planes plus the CAM.
pub const COND_CHANNELS: usize = 5;

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv2d,
    norm: InstanceNorm2d,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                true,
                rng,
            ),
            norm: InstanceNorm2d::new(store, &format!("{name}.norm"), out_ch),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv.forward(tape, store, x);
        let h = self.norm.forward(tape, store, h);
        tape.relu(h)
    }
}

#[derive(Clone, Debug)]
struct UpNorm {
    conv: ConvTranspose2d,
    norm: InstanceNorm2d,
}

impl UpNorm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: ConvTranspose2d::new(store, &format!("{name}.conv"), in_ch, out_ch, 3, 2, 1, 1, true, rng),
            norm: InstanceNorm2d::new(store, &format!("{name}.norm"), out_ch),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv.forward(tape, store, x);
        let h = self.norm.forward(tape, store, h);
        tape.relu(h)
    }
}

/// `x + in(conv(relu(in(conv(x)))))`.
#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvNorm,
    conv: Conv2d,
    norm: InstanceNorm2d,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: ConvNorm::new(store, &format!("{name}.a"), ch, ch, 3, 1, 1, rng),
            conv: Conv2d::new(store, &format!("{name}.b.conv"), ch, ch, 3, 1, 1, true, rng),
            norm: InstanceNorm2d::new(store, &format!("{name}.b.norm"), ch),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.a.forward(tape, store, x);
        let h = self.conv.forward(tape, store, h);
        let h = self.norm.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// Coarse generator: 7x7 stem, three stride-2 downsamplings, residual
/// blocks, three transposed-conv upsamplings and a 7x7 tanh output.
#[derive(Clone, Debug)]
pub struct CoarseGenerator<T: Real> {
    pub store: ParamStore<T>,
    stem: ConvNorm,
    down: Vec<ConvNorm>,
    blocks: Vec<ResBlock>,
    up: Vec<UpNorm>,
    out: Conv2d,
    pub feature_channels: usize,
}

impl<T: Real> CoarseGenerator<T> {
    pub fn new(out_ch: usize, ngf: usize, n_blocks: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let s = &mut store;
        let stem = ConvNorm::new(s, "stem", COND_CHANNELS, ngf, 7, 1, 3, rng);
        let down = (0..3)
            .map(|i| ConvNorm::new(s, &format!("down{i}"), ngf << i, ngf << (i + 1), 3, 2, 1, rng))
            .collect();
        let blocks = (0..n_blocks)
            .map(|i| ResBlock::new(s, &format!("block{i}"), ngf << 3, rng))
            .collect();
        let up = (0..3)
            .map(|i| UpNorm::new(s, &format!("up{i}"), ngf << (3 - i), ngf << (2 - i), rng))
            .collect();
        let out = Conv2d::new(s, "out", ngf, out_ch, 7, 1, 3, true, rng);
        Self {
            store,
            stem,
            down,
            blocks,
            up,
            out,
            feature_channels: ngf,
        }
    }

    /// Returns `(image, features)`: the tanh image and the last decoder
    /// activation that the refinement generator consumes.
    pub fn forward(&self, tape: &mut Tape<T>, cond: Var) -> (Var, Var) {
        let st = &self.store;
        let mut h = self.stem.forward(tape, st, cond);
        for d in &self.down {
            h = d.forward(tape, st, h);
        }
        for b in &self.blocks {
            h = b.forward(tape, st, h);
        }
        for u in &self.up {
            h = u.forward(tape, st, h);
        }
        let img = self.out.forward(tape, st, h);
        (tape.tanh(img), h)
    }
}

/// Refinement generator at twice the coarse side. Its stride-2 front end
/// lands on the coarse grid, where the coarse generator's features are
/// added before the residual blocks and the upsampling back.
#[derive(Clone, Debug)]
pub struct RefineGenerator<T: Real> {
    pub store: ParamStore<T>,
    stem: ConvNorm,
    down: ConvNorm,
    blocks: Vec<ResBlock>,
    up: UpNorm,
    out: Conv2d,
}

impl<T: Real> RefineGenerator<T> {
    pub fn new(out_ch: usize, ngf: usize, n_blocks: usize, rng: &mut impl Rng) -> Self {
        let half = (ngf / 2).max(1);
        let mut store = ParamStore::new();
        let s = &mut store;
        let stem = ConvNorm::new(s, "stem", COND_CHANNELS, half, 7, 1, 3, rng);
        let down = ConvNorm::new(s, "down", half, ngf, 3, 2, 1, rng);
        let blocks = (0..n_blocks)
            .map(|i| ResBlock::new(s, &format!("block{i}"), ngf, rng))
            .collect();
        let up = UpNorm::new(s, "up", ngf, half, rng);
        let out = Conv2d::new(s, "out", half, out_ch, 7, 1, 3, true, rng);
        Self {
            store,
            stem,
            down,
            blocks,
            up,
            out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, cond: Var, coarse_features: Var) -> Var {
        let st = &self.store;
        let h = self.stem.forward(tape, st, cond);
        let h = self.down.forward(tape, st, h);
        let mut h = tape.add(h, coarse_features);
        for b in &self.blocks {
            h = b.forward(tape, st, h);
        }
        let h = self.up.forward(tape, st, h);
        let img = self.out.forward(tape, st, h);
        tape.tanh(img)
    }
}

/// Four-layer patch discriminator on `concat(condition, image)`.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator<T: Real> {
    pub store: ParamStore<T>,
    first: Conv2d,
    mid: Vec<(Conv2d, InstanceNorm2d)>,
    last: Conv2d,
}

impl<T: Real> PatchDiscriminator<T> {
    pub fn new(image_ch: usize, ndf: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let s = &mut store;
        let first = Conv2d::new(s, "l0", COND_CHANNELS + image_ch, ndf, 4, 2, 1, true, rng);
        let mid = [(1, 2), (2, 1)]
            .into_iter()
            .map(|(i, stride)| {
                let name = format!("l{i}");
                (
                    Conv2d::new(
                        s,
                        &format!("{name}.conv"),
                        ndf << (i - 1),
                        ndf << i,
                        4,
                        stride,
                        1,
                        true,
                        rng,
                    ),
                    InstanceNorm2d::new(s, &format!("{name}.norm"), ndf << i),
                )
            })
            .collect();
        let last = Conv2d::new(s, "l3", ndf << 2, 1, 4, 1, 1, true, rng);
        Self {
            store,
            first,
            mid,
            last,
        }
    }

    /// Returns the intermediate activations followed by the patch scores.
    pub fn forward(&self, tape: &mut Tape<T>, cond: Var, image: Var) -> Vec<Var> {
        let st = &self.store;
        let slope = T::from_f64(LEAKY_SLOPE);
        let x = tape.concat(cond, image);
        let h = self.first.forward(tape, st, x);
        let mut h = tape.leaky_relu(h, slope);
        let mut out = vec![h];
        for (conv, norm) in &self.mid {
            let c = conv.forward(tape, st, h);
            let n = norm.forward(tape, st, c);
            h = tape.leaky_relu(n, slope);
            out.push(h);
        }
        out.push(self.last.forward(tape, st, h));
        out
    }
}

/// `mean((d - target)^2)`.
pub fn ls_loss<T: Real>(tape: &mut Tape<T>, d: Var, target: f64) -> Var {
    let shifted = tape.add_scalar(d, T::from_f64(-target));
    let sq = tape.square(shifted);
    tape.mean(sq)
}

/// Mean over layers of `mean |fake - real|`; `real` activations are detached.
pub fn feature_matching<T: Real>(tape: &mut Tape<T>, fake: &[Var], real: &[Var]) -> Var {
    let layers = fake.len().min(real.len());
    assert!(layers > 0, "no layers to match");
    let mut total = None;
    for (&f, &r) in fake.iter().zip(real).take(layers) {
        let r = tape.detach(r);
        let d = tape.sub(f, r);
        let a = tape.abs(d);
        let m = tape.mean(a);
        total = Some(match total {
            Some(t) => tape.add(t, m),
            None => m,
        });
    }
    tape.scale(total.expect("at least one layer"), T::from_f64(1.0 / layers as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmfuse_autograd::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ga = CoarseGenerator::<f32>::new(3, 4, 1, &mut rng);
        let gm = RefineGenerator::<f32>::new(3, 4, 1, &mut rng);
        let d = PatchDiscriminator::<f32>::new(3, 4, &mut rng);
        let mut tape = Tape::new();
        let full = tape.constant(Tensor::zeros(&[1, COND_CHANNELS, 32, 32]));
        let coarse = tape.avg_pool2d(full, 2);
        let (img, feat) = ga.forward(&mut tape, coarse);
        assert_eq!(tape.shape(img), &[1, 3, 16, 16]);
        assert_eq!(tape.shape(feat), &[1, 4, 16, 16]);
        let fine = gm.forward(&mut tape, full, feat);
        assert_eq!(tape.shape(fine), &[1, 3, 32, 32]);
        let outs = d.forward(&mut tape, full, fine);
        assert_eq!(outs.len(), 4);
        assert_eq!(tape.shape(outs[3]), &[1, 1, 6, 6]);
        assert!(tape.value(fine).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn feature_matching_against_itself_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = PatchDiscriminator::<f64>::new(1, 4, &mut rng);
        let mut tape = Tape::new();
        let vals = || {
            (0..6 * 16 * 16)
                .map(|i| ((i * 37 % 19) as f64 / 9.0) - 1.0)
                .collect::<Vec<_>>()
        };
        let all = vals();
        let cond = tape.constant(Tensor::from_vec(&[1, 5, 16, 16], all[..5 * 256].to_vec()));
        let img = tape.constant(Tensor::from_vec(&[1, 1, 16, 16], all[5 * 256..].to_vec()));
        let a = d.forward(&mut tape, cond, img);
        let b = d.forward(&mut tape, cond, img);
        let fm = feature_matching(&mut tape, &a[..3], &b[..3]);
        assert_eq!(tape.value(fm).item(), 0.0);
    }
}
