//! CAM-conditioned coarse-to-fine image synthesis.
//!
//! A coarse generator works at half resolution; a refinement generator works
//! at full resolution and adds the coarse generator's last decoder features
//! on its downsampled grid. Two patch discriminators judge full-resolution
//! and 2x average-pooled inputs. Conditions are five planes: a one-hot class
//! and the class CAM of a real image, upsampled and rescaled to `[-1, 1]`.

mod nets;
mod train;

use std::path::Path;

use mmfuse_autograd::nn::resize_bilinear;
use mmfuse_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cam::CamMap;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::labels::{Class, Modality, NUM_CLASSES};
use crate::seed;

pub use nets::{feature_matching, ls_loss, CoarseGenerator, PatchDiscriminator, RefineGenerator, COND_CHANNELS};
pub use train::{generate, synthesize, train_gan, GanEpochLog, GanRun, GanSource, Phase, SyntheticImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Epochs that train only the coarse pair.
    pub coarse_epochs: usize,
    /// Epochs that train all four networks.
    pub joint_epochs: usize,
    /// The full side is twice this.
    pub coarse_side: usize,
    pub ngf: usize,
    pub ndf: usize,
    pub coarse_blocks: usize,
    pub refine_blocks: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub feature_matching_weight: f64,
    pub flip_prob: f64,
    pub crop: Option<(f64, f64)>,
    pub per_source: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            coarse_epochs: 100,
            joint_epochs: 50,
            coarse_side: 32,
            ngf: 16,
            ndf: 16,
            coarse_blocks: 4,
            refine_blocks: 3,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            feature_matching_weight: 10.0,
            flip_prob: 0.5,
            crop: Some((0.9, 1.0)),
            per_source: 3,
        }
    }
}

impl GanConfig {
    pub fn paper_scale() -> Self {
        Self {
            coarse_side: 224,
            ngf: 32,
            ndf: 64,
            coarse_blocks: 9,
            ..Self::default()
        }
    }

    pub fn full_side(&self) -> usize {
        2 * self.coarse_side
    }

    pub fn total_epochs(&self) -> usize {
        self.coarse_epochs + self.joint_epochs
    }

    pub fn validate(&self) -> Result<()> {
        // Three stride-2 generator stages, and a patch discriminator that
        // needs at least 16 pixels to leave one output cell.
        if self.coarse_side < 16 || self.coarse_side % 8 != 0 {
            return Err(Error::contract(format!(
                "coarse side {} must be a multiple of 8 and at least 16",
                self.coarse_side
            )));
        }
        if self.ngf < 2 || self.ndf == 0 {
            return Err(Error::contract("generator and discriminator widths must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract("invalid Adam settings"));
        }
        Ok(())
    }
}

/// Range of raw CAM values used to rescale the condition channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamRange {
    pub lo: f64,
    pub hi: f64,
}

impl CamRange {
    pub fn of<'a>(cams: impl IntoIterator<Item = &'a CamMap>) -> Option<Self> {
        let mut range: Option<Self> = None;
        for cam in cams {
            let (lo, hi) = cam.min_max();
            range = Some(match range {
                Some(r) => Self {
                    lo: r.lo.min(lo),
                    hi: r.hi.max(hi),
                },
                None => Self { lo, hi },
            });
        }
        range
    }

    /// `2 (v - lo) / (hi - lo) - 1`, or 0 for an empty range. Values outside
    /// the range are not clamped.
    pub fn rescale(&self, v: f64) -> f64 {
        let span = self.hi - self.lo;
        if span > 0.0 && span.is_finite() {
            2.0 * (v - self.lo) / span - 1.0
        } else {
            0.0
        }
    }
}

/// Five-plane generator input, `[5, side, side]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap {
    pub class: Class,
    pub tensor: Tensor<f32>,
}

impl ConditionMap {
    pub fn side(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.side() * self.side();
        &self.tensor.data()[c * n..(c + 1) * n]
    }
}

pub fn make_condition(cam: &CamMap, class: Class, out_side: usize, range: CamRange) -> ConditionMap {
    let n = out_side * out_side;
    let mut data = vec![0.0f32; COND_CHANNELS * n];
    data[class.index() * n..(class.index() + 1) * n].fill(1.0);
    let up = resize_bilinear(&cam.to_tensor(), out_side, out_side);
    for (d, &v) in data[NUM_CLASSES * n..].iter_mut().zip(up.data()) {
        *d = range.rescale(v) as f32;
    }
    ConditionMap {
        class,
        tensor: Tensor::from_vec(&[COND_CHANNELS, out_side, out_side], data),
    }
}

/// Hex SHA-256 of a store's values.
pub fn store_hash(store: &ParamStore<f32>) -> String {
    let digest = Sha256::digest(store.value_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairHashes {
    pub g_aux: String,
    pub g_main: String,
    pub d_aux: String,
    pub d_main: String,
}

/// The four networks of one modality's synthesizer.
#[derive(Clone, Debug)]
pub struct GanPair {
    pub config: GanConfig,
    pub modality: Modality,
    pub cam_range: CamRange,
    pub g_aux: CoarseGenerator<f32>,
    pub g_main: RefineGenerator<f32>,
    pub d_aux: PatchDiscriminator<f32>,
    pub d_main: PatchDiscriminator<f32>,
}

const PREFIXES: [&str; 4] = ["g_aux", "g_main", "d_aux", "d_main"];

impl GanPair {
    pub fn new(config: &GanConfig, modality: Modality, cam_range: CamRange, seed: u64) -> Result<Self> {
        config.validate()?;
        let ch = modality.channels();
        let base = [seed::tag("gan"), seed::tag(modality.name())];
        let rng = |net: &str| seed::rng(seed, &[base[0], base[1], seed::tag(net)]);
        Ok(Self {
            g_aux: CoarseGenerator::new(ch, config.ngf, config.coarse_blocks, &mut rng("g_aux")),
            g_main: RefineGenerator::new(ch, config.ngf, config.refine_blocks, &mut rng("g_main")),
            d_aux: PatchDiscriminator::new(ch, config.ndf, &mut rng("d_aux")),
            d_main: PatchDiscriminator::new(ch, config.ndf, &mut rng("d_main")),
            config: config.clone(),
            modality,
            cam_range,
        })
    }

    fn stores(&self) -> [&ParamStore<f32>; 4] {
        [
            &self.g_aux.store,
            &self.g_main.store,
            &self.d_aux.store,
            &self.d_main.store,
        ]
    }

    fn stores_mut(&mut self) -> [&mut ParamStore<f32>; 4] {
        [
            &mut self.g_aux.store,
            &mut self.g_main.store,
            &mut self.d_aux.store,
            &mut self.d_main.store,
        ]
    }

    pub fn hashes(&self) -> PairHashes {
        let [a, b, c, d] = self.stores().map(store_hash);
        PairHashes {
            g_aux: a,
            g_main: b,
            d_aux: c,
            d_main: d,
        }
    }

    fn merged(&self) -> ParamStore<f32> {
        let mut out = ParamStore::new();
        for (prefix, store) in PREFIXES.iter().zip(self.stores()) {
            for e in store.entries() {
                let name = format!("{prefix}.{}", e.name);
                match e.kind {
                    mmfuse_autograd::EntryKind::Trainable => out.add_param(&name, e.value.clone()),
                    mmfuse_autograd::EntryKind::Buffer => out.add_buffer(&name, e.value.clone()),
                };
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "gan",
            "config": self.config,
            "modality": self.modality,
            "cam_range": self.cam_range,
        });
        checkpoint::save_store(&self.merged(), meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(path)?;
        let meta = &manifest.meta;
        if meta.get("kind").and_then(Value::as_str) != Some("gan") {
            return Err(Error::Checkpoint(format!("{} is not a GAN checkpoint", path.display())));
        }
        let config: GanConfig = serde_json::from_value(meta["config"].clone())?;
        let modality: Modality = serde_json::from_value(meta["modality"].clone())?;
        let cam_range: CamRange = serde_json::from_value(meta["cam_range"].clone())?;
        let mut pair = Self::new(&config, modality, cam_range, 0)?;
        let mut merged = pair.merged();
        checkpoint::load_store(&mut merged, path)?;
        for (prefix, store) in PREFIXES.iter().zip(pair.stores_mut()) {
            for id in store.ids().collect::<Vec<_>>() {
                let name = format!("{prefix}.{}", store.name(id));
                let src = merged.find(&name).expect("merged store mirrors the pair");
                *store.value_mut(id) = merged.value(src).clone();
            }
        }
        Ok(pair)
    }
}
