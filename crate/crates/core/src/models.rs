//! Residual backbones, the single-modal classifier and the two-stream
//! fusion network.

use mmfuse_autograd::nn::{self, BatchNorm2d, Conv2d, Mode, ResidualBlock};
use mmfuse_autograd::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpointable;
use crate::error::{Error, Result};
use crate::imaging::{normalize_pm1, RawImage};
use crate::labels::{Modality, NUM_CLASSES};
use crate::seed;

/// Stem conv (stride 2) and max pool (stride 2) precede the stages.
const STEM_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub input_side: usize,
    pub stem_width: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub total_stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_side: 448,
            stem_width: 16,
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 2,
            total_stride: 32,
        }
    }
}

impl BackboneConfig {
    /// ResNet-18 widths.
    pub fn paper_scale() -> Self {
        Self {
            stem_width: 64,
            widths: vec![64, 128, 256, 512],
            ..Self::default()
        }
    }

    pub fn with_side(mut self, side: usize) -> Self {
        self.input_side = side;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.stem_width == 0 {
            return Err(Error::contract("backbone widths must be positive and non-empty"));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::contract("blocks_per_stage must be at least 1"));
        }
        let implied = STEM_STRIDE << (self.widths.len() - 1);
        if implied != self.total_stride {
            return Err(Error::contract(format!(
                "total_stride {} does not match {} stages (implies {implied})",
                self.total_stride,
                self.widths.len()
            )));
        }
        if self.input_side == 0 || self.input_side % self.total_stride != 0 {
            return Err(Error::contract(format!(
                "input_side {} is not a positive multiple of total_stride {}",
                self.input_side, self.total_stride
            )));
        }
        Ok(())
    }

    /// Side `m` of the final feature maps.
    pub fn feature_side(&self) -> usize {
        self.input_side / self.total_stride
    }

    /// Channel count `C` of the final feature maps.
    pub fn channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(
            store,
            &format!("{prefix}.stem"),
            3,
            config.stem_width,
            7,
            2,
            3,
            false,
            rng,
        );
        let stem_bn = BatchNorm2d::new(store, &format!("{prefix}.stem_bn"), config.stem_width);
        let mut blocks = Vec::new();
        let mut in_ch = config.stem_width;
        for (s, &width) in config.widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 1);
                blocks.push(ResidualBlock::new(store, &name, in_ch, width, stride, rng));
                in_ch = width;
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
        })
    }

    /// `[n, 3, s, s]` to `[n, C, m, m]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x);
        let side = self.config.input_side;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != side || shape[3] != side {
            return Err(Error::contract(format!(
                "backbone expects [n, 3, {side}, {side}], got {shape:?}"
            )));
        }
        let h = self.stem.forward(tape, store, x);
        let h = self.stem_bn.forward(tape, store, h, mode);
        let h = tape.relu(h);
        let mut h = tape.max_pool2d(h, 3, 2, 1);
        for block in &self.blocks {
            h = block.forward(tape, store, h, mode);
        }
        Ok(h)
    }
}

/// Output of a single-modal forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SingleOutput {
    pub logits: Var,
    pub features: Var,
}

/// One backbone plus a bias-free `[C, 4]` head.
#[derive(Clone, Debug)]
pub struct SingleModalCnn<T: Real> {
    pub store: ParamStore<T>,
    pub modality: Modality,
    pub backbone: Backbone,
    pub head: ParamId,
}

impl<T: Real> SingleModalCnn<T> {
    pub fn new(modality: Modality, config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed, &[seed::tag("single"), seed::tag(modality.name())]);
        let backbone = Backbone::new(&mut store, "backbone", config, &mut rng)?;
        let c = config.channels();
        let head = store.add_param("head", nn::fan_in_uniform(&[c, NUM_CLASSES], c, &mut rng));
        Ok(Self {
            store,
            modality,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<SingleOutput> {
        let features = self.backbone.forward(tape, &mut self.store, x, mode)?;
        let pooled = tape.global_avg_pool(features);
        let w = tape.param(&self.store, self.head);
        let logits = nn::linear_nobias(tape, pooled, w);
        Ok(SingleOutput { logits, features })
    }

    /// Eval-mode logits for a batch, `[n, 4]`.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(x.clone());
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Output of a two-stream forward pass. `scores == cfp_scores + oct_scores`.
#[derive(Clone, Copy, Debug)]
pub struct MmOutput {
    pub scores: Var,
    pub cfp_scores: Var,
    pub oct_scores: Var,
    pub cfp_features: Var,
    pub oct_features: Var,
    /// Concatenated pooled vector, `[n, 2C]`.
    pub fused: Var,
}

/// Two independently parameterized backbones fused after global average
/// pooling by one bias-free `[2C, 4]` head. Rows `0..C` of the head weigh the
/// CFP stream, rows `C..2C` the OCT stream.
#[derive(Clone, Debug)]
pub struct MmCnn<T: Real> {
    pub store: ParamStore<T>,
    pub cfp: Backbone,
    pub oct: Backbone,
    pub head: ParamId,
}

impl<T: Real> MmCnn<T> {
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut cfp_rng = seed::rng(seed, &[seed::tag("mm"), seed::tag("cfp")]);
        let mut oct_rng = seed::rng(seed, &[seed::tag("mm"), seed::tag("oct")]);
        let mut head_rng = seed::rng(seed, &[seed::tag("mm"), seed::tag("head")]);
        let cfp = Backbone::new(&mut store, "cfp", config, &mut cfp_rng)?;
        let oct = Backbone::new(&mut store, "oct", config, &mut oct_rng)?;
        let c = config.channels();
        let head = store.add_param("head", nn::fan_in_uniform(&[2 * c, NUM_CLASSES], 2 * c, &mut head_rng));
        Ok(Self { store, cfp, oct, head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfp.config
    }

    pub fn channels(&self) -> usize {
        self.config().channels()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, cfp: Var, oct: Var, mode: Mode) -> Result<MmOutput> {
        let (nf, no) = (tape.shape(cfp)[0], tape.shape(oct)[0]);
        if nf != no {
            return Err(Error::contract(format!(
                "paired batch sizes differ: cfp {nf}, oct {no}"
            )));
        }
        let cfp_features = self.cfp.forward(tape, &mut self.store, cfp, mode)?;
        let oct_features = self.oct.forward(tape, &mut self.store, oct, mode)?;
        let gf = tape.global_avg_pool(cfp_features);
        let go = tape.global_avg_pool(oct_features);
        let c = self.channels();
        let w = tape.param(&self.store, self.head);
        let wf = tape.slice_rows(w, 0, c);
        let wo = tape.slice_rows(w, c, c);
        let cfp_scores = nn::linear_nobias(tape, gf, wf);
        let oct_scores = nn::linear_nobias(tape, go, wo);
        let scores = tape.add(cfp_scores, oct_scores);
        let fused = tape.concat(gf, go);
        Ok(MmOutput {
            scores,
            cfp_scores,
            oct_scores,
            cfp_features,
            oct_features,
            fused,
        })
    }

    /// Eval-mode fused scores for a paired batch, `[n, 4]`.
    pub fn predict(&mut self, cfp: &Tensor<T>, oct: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let cfp = tape.constant(cfp.clone());
        let oct = tape.constant(oct.clone());
        let out = self.forward(&mut tape, cfp, oct, Mode::Eval)?;
        Ok(tape.value(out.scores).clone())
    }

    /// Head weights as `(w_f, w_o)`, each `[C, 4]` row-major.
    pub fn head_split(&self) -> (Vec<f64>, Vec<f64>) {
        let w = self.store.value(self.head).to_f64_vec();
        let half = self.channels() * NUM_CLASSES;
        (w[..half].to_vec(), w[half..].to_vec())
    }
}

impl Checkpointable for SingleModalCnn<f32> {
    const KIND: &'static str = "single";

    fn meta(&self) -> Value {
        json!({ "modality": self.modality, "backbone": self.backbone.config })
    }

    fn from_meta(meta: &Value) -> Result<Self> {
        let modality: Modality = serde_json::from_value(meta["modality"].clone())?;
        let config: BackboneConfig = serde_json::from_value(meta["backbone"].clone())?;
        Self::new(modality, &config, 0)
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }
}

impl Checkpointable for MmCnn<f32> {
    const KIND: &'static str = "mm";

    fn meta(&self) -> Value {
        json!({ "backbone": self.cfp.config })
    }

    fn from_meta(meta: &Value) -> Result<Self> {
        let config: BackboneConfig = serde_json::from_value(meta["backbone"].clone())?;
        Self::new(&config, 0)
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }
}

/// Duplicates a `[1, h, w]` intensity image into `[3, h, w]`.
pub fn gray_to_rgb<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::contract(format!("gray_to_rgb expects [1, h, w], got {s:?}")));
    }
    let mut data = Vec::with_capacity(3 * img.numel());
    for _ in 0..3 {
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(&[3, s[1], s[2]], data))
}

/// Classifier input for an image: resized to `side`, mapped to `[-1, 1]`
/// and, for single-channel images, replicated to three channels.
pub fn input_tensor<T: Real>(img: &RawImage, side: usize) -> Result<Tensor<T>> {
    let t = normalize_pm1(&img.resize(side, side));
    if img.channels == 1 {
        gray_to_rgb(&t)
    } else {
        Ok(t)
    }
}

/// Index of the largest score in each row of `[n, k]`; the first maximum wins.
pub fn argmax_rows<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let k = scores.shape()[1];
    scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if v.to_f64() > row[best].to_f64() {
                    best = i;
                }
            }
            best
        })
        .collect()
}
