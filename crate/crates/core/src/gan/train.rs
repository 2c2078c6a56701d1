use log::{info, warn};
use mmfuse_autograd::{AdamState, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::nets::{feature_matching, ls_loss};
use super::{make_condition, CamRange, ConditionMap, GanConfig, GanPair, PairHashes};
use crate::cam::{single_cams, CamMap};
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::imaging::{augment, denormalize_pm1, normalize_pm1, AugmentParams, RawImage};
use crate::labels::{Class, Provenance};
use crate::models::{input_tensor, SingleModalCnn};
use crate::seed;

/// A real training image and its record.
#[derive(Clone, Debug)]
pub struct GanSource {
    pub record: ImageRecord,
    pub image: RawImage,
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub record: ImageRecord,
    pub image: RawImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Coarse,
    Joint,
}

/// Mean losses of one epoch and the parameter hashes after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub g_adversarial: f64,
    pub g_feature_matching: f64,
    pub d_loss: f64,
    pub d_aux_side: usize,
    pub d_main_side: Option<usize>,
    pub hashes: PairHashes,
}

#[derive(Clone, Debug)]
pub struct GanRun {
    pub pair: GanPair,
    pub initial: PairHashes,
    pub log: Vec<GanEpochLog>,
}

fn source_cam(classifier: &mut SingleModalCnn<f32>, img: &RawImage, class: Class) -> Result<CamMap> {
    let side = classifier.config().input_side;
    let x = input_tensor::<f32>(img, side)?;
    let s = x.shape().to_vec();
    let x = x.reshape(&[1, s[0], s[1], s[2]]);
    Ok(single_cams(classifier, &x, class)?.remove(0).0)
}

fn batched(t: Tensor<f32>) -> Tensor<f32> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.reshape(&s)
}

fn augment_params(config: &GanConfig, seed: u64) -> AugmentParams {
    AugmentParams {
        crop: config.crop,
        flip_prob: config.flip_prob,
        seed,
        ..AugmentParams::disabled()
    }
}

fn step_optimizer(
    opt: &mut AdamState<f32>,
    store: &mut ParamStore<f32>,
    grads: &mmfuse_autograd::Gradients<f32>,
) -> Result<()> {
    store.zero_grads();
    store.accumulate(grads);
    opt.step(store)?;
    Ok(())
}

fn checked(tape: &Tape<f32>, v: Var, what: &str, epoch: usize, step: usize) -> Result<f64> {
    let x = tape.value(v).item() as f64;
    if !x.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("{what} loss is {x}"),
        });
    }
    Ok(x)
}

struct Losses {
    adv: f64,
    fm: f64,
    d: f64,
}

/// Trains a synthesizer on real images of one modality. Conditions come from
/// `classifier`'s CAM of each image's own class, re-extracted after every
/// augmentation. The first `coarse_epochs` update only the coarse generator
/// and discriminator; the rest update all four networks.
pub fn train_gan(
    sources: &[GanSource],
    classifier: &mut SingleModalCnn<f32>,
    config: &GanConfig,
    seed: u64,
) -> Result<GanRun> {
    config.validate()?;
    let modality = classifier.modality;
    if sources.is_empty() {
        return Err(Error::contract("no images to train the synthesizer on"));
    }
    if let Some(s) = sources
        .iter()
        .find(|s| s.record.modality != modality || s.image.channels != modality.channels())
    {
        return Err(Error::contract(format!(
            "{} does not match the {modality} classifier",
            s.record.image_id
        )));
    }
    let mut cams = Vec::with_capacity(sources.len());
    for s in sources {
        cams.push(source_cam(classifier, &s.image, s.record.label)?);
    }
    let cam_range = CamRange::of(&cams).expect("non-empty");
    let mut pair = GanPair::new(config, modality, cam_range, seed)?;
    let initial = pair.hashes();
    let lr = config.learning_rate as f32;
    let (b1, b2) = (config.beta1 as f32, config.beta2 as f32);
    let mut opts: Vec<AdamState<f32>> = (0..4).map(|_| AdamState::new(lr, b1, b2)).collect();
    let aug = augment_params(config, seed::derive(seed, &[seed::tag("gan-augment")]));
    let full = config.full_side();
    let fm_w = config.feature_matching_weight as f32;
    let mut log = Vec::with_capacity(config.total_epochs());

    for epoch in 0..config.total_epochs() {
        let phase = if epoch < config.coarse_epochs {
            Phase::Coarse
        } else {
            Phase::Joint
        };
        let mut order: Vec<usize> = (0..sources.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[seed::tag("gan-order"), epoch as u64]));
        let mut sum = Losses {
            adv: 0.0,
            fm: 0.0,
            d: 0.0,
        };
        let mut sides = (0, None);
        for (step, &i) in order.iter().enumerate() {
            let src = &sources[i];
            let img = augment(&src.image, &aug, epoch as u64, i as u64)?;
            let cam = source_cam(classifier, &img, src.record.label)?;
            let cond = make_condition(&cam, src.record.label, full, cam_range);
            let real = batched(normalize_pm1::<f32>(&img.resize(full, full)));
            let (l, s) = match phase {
                Phase::Coarse => coarse_step(&mut pair, &mut opts, &cond, real, fm_w, epoch + 1, step)?,
                Phase::Joint => joint_step(&mut pair, &mut opts, &cond, real, fm_w, epoch + 1, step)?,
            };
            if let Some(main) = s.1 {
                if 2 * s.0 != main {
                    return Err(Error::contract(format!(
                        "auxiliary discriminator saw side {} against main side {main}",
                        s.0
                    )));
                }
            }
            sides = s;
            sum.adv += l.adv;
            sum.fm += l.fm;
            sum.d += l.d;
        }
        let n = sources.len() as f64;
        let entry = GanEpochLog {
            epoch: epoch + 1,
            phase,
            g_adversarial: sum.adv / n,
            g_feature_matching: sum.fm / n,
            d_loss: sum.d / n,
            d_aux_side: sides.0,
            d_main_side: sides.1,
            hashes: pair.hashes(),
        };
        info!(
            "gan {modality} epoch {} ({:?}): g_adv {:.4} g_fm {:.4} d {:.4}",
            entry.epoch, phase, entry.g_adversarial, entry.g_feature_matching, entry.d_loss
        );
        log.push(entry);
    }
    Ok(GanRun { pair, initial, log })
}

fn coarse_step(
    pair: &mut GanPair,
    opts: &mut [AdamState<f32>],
    cond: &ConditionMap,
    real: Tensor<f32>,
    fm_w: f32,
    epoch: usize,
    step: usize,
) -> Result<(Losses, (usize, Option<usize>))> {
    let cond_full = batched(cond.tensor.clone());
    let mut tape = Tape::new();
    let c_full = tape.constant(cond_full.clone());
    let c = tape.avg_pool2d(c_full, 2);
    let r_full = tape.constant(real.clone());
    let r = tape.avg_pool2d(r_full, 2);
    let (fake, _) = pair.g_aux.forward(&mut tape, c);
    let df = pair.d_aux.forward(&mut tape, c, fake);
    let dr = pair.d_aux.forward(&mut tape, c, r);
    let adv = ls_loss(&mut tape, *df.last().expect("layers"), 1.0);
    let k = df.len() - 1;
    let fm = feature_matching(&mut tape, &df[..k], &dr[..k]);
    let fm_scaled = tape.scale(fm, fm_w);
    let g_loss = tape.add(adv, fm_scaled);
    let adv_v = checked(&tape, adv, "generator", epoch, step)?;
    let fm_v = checked(&tape, fm, "feature matching", epoch, step)?;
    let grads = tape.backward(g_loss)?;
    step_optimizer(&mut opts[0], &mut pair.g_aux.store, &grads)?;
    let fake_value = tape.value(fake).clone();
    let side = fake_value.shape()[2];

    let mut tape = Tape::new();
    let c_full = tape.constant(cond_full);
    let c = tape.avg_pool2d(c_full, 2);
    let r_full = tape.constant(real);
    let r = tape.avg_pool2d(r_full, 2);
    let f = tape.constant(fake_value);
    let d_loss = discriminator_loss(&mut tape, &pair.d_aux, c, r, f);
    let d_v = checked(&tape, d_loss, "discriminator", epoch, step)?;
    let grads = tape.backward(d_loss)?;
    step_optimizer(&mut opts[2], &mut pair.d_aux.store, &grads)?;
    Ok((
        Losses {
            adv: adv_v,
            fm: fm_v,
            d: d_v,
        },
        (side, None),
    ))
}

fn joint_step(
    pair: &mut GanPair,
    opts: &mut [AdamState<f32>],
    cond: &ConditionMap,
    real: Tensor<f32>,
    fm_w: f32,
    epoch: usize,
    step: usize,
) -> Result<(Losses, (usize, Option<usize>))> {
    let cond_full = batched(cond.tensor.clone());
    let mut tape = Tape::new();
    let c_full = tape.constant(cond_full.clone());
    let c = tape.avg_pool2d(c_full, 2);
    let r_full = tape.constant(real.clone());
    let r = tape.avg_pool2d(r_full, 2);
    let (_, features) = pair.g_aux.forward(&mut tape, c);
    let fake_full = pair.g_main.forward(&mut tape, c_full, features);
    let fake = tape.avg_pool2d(fake_full, 2);
    let dfm = pair.d_main.forward(&mut tape, c_full, fake_full);
    let drm = pair.d_main.forward(&mut tape, c_full, r_full);
    let dfa = pair.d_aux.forward(&mut tape, c, fake);
    let dra = pair.d_aux.forward(&mut tape, c, r);
    let k = dfm.len() - 1;
    let adv_m = ls_loss(&mut tape, dfm[k], 1.0);
    let adv_a = ls_loss(&mut tape, dfa[k], 1.0);
    let adv = tape.add(adv_m, adv_a);
    let fm_m = feature_matching(&mut tape, &dfm[..k], &drm[..k]);
    let fm_a = feature_matching(&mut tape, &dfa[..k], &dra[..k]);
    let fm = tape.add(fm_m, fm_a);
    let fm_scaled = tape.scale(fm, fm_w);
    let g_loss = tape.add(adv, fm_scaled);
    let adv_v = checked(&tape, adv, "generator", epoch, step)?;
    let fm_v = checked(&tape, fm, "feature matching", epoch, step)?;
    let grads = tape.backward(g_loss)?;
    step_optimizer(&mut opts[0], &mut pair.g_aux.store, &grads)?;
    step_optimizer(&mut opts[1], &mut pair.g_main.store, &grads)?;
    let fake_value = tape.value(fake_full).clone();
    let main_side = fake_value.shape()[2];

    let mut tape = Tape::new();
    let c_full = tape.constant(cond_full);
    let c = tape.avg_pool2d(c_full, 2);
    let r_full = tape.constant(real);
    let r = tape.avg_pool2d(r_full, 2);
    let f_full = tape.constant(fake_value);
    let f = tape.avg_pool2d(f_full, 2);
    let aux_side = tape.shape(f)[2];
    let d_main = discriminator_loss(&mut tape, &pair.d_main, c_full, r_full, f_full);
    let d_aux = discriminator_loss(&mut tape, &pair.d_aux, c, r, f);
    let d_loss = tape.add(d_main, d_aux);
    let d_v = checked(&tape, d_loss, "discriminator", epoch, step)?;
    let grads = tape.backward(d_loss)?;
    step_optimizer(&mut opts[3], &mut pair.d_main.store, &grads)?;
    step_optimizer(&mut opts[2], &mut pair.d_aux.store, &grads)?;
    Ok((
        Losses {
            adv: adv_v,
            fm: fm_v,
            d: d_v,
        },
        (aux_side, Some(main_side)),
    ))
}

/// `0.5 * (mean((D(real) - 1)^2) + mean(D(fake)^2))`.
fn discriminator_loss(
    tape: &mut Tape<f32>,
    d: &super::PatchDiscriminator<f32>,
    cond: Var,
    real: Var,
    fake: Var,
) -> Var {
    let dr = d.forward(tape, cond, real);
    let df = d.forward(tape, cond, fake);
    let lr = ls_loss(tape, *dr.last().expect("layers"), 1.0);
    let lf = ls_loss(tape, *df.last().expect("layers"), 0.0);
    let s = tape.add(lr, lf);
    tape.scale(s, 0.5)
}

/// Generator output for one condition, in `[-1, 1]`, `[ch, full, full]`.
/// Without joint training the coarse output is upsampled instead.
pub fn synthesize(pair: &GanPair, cond: &ConditionMap) -> Tensor<f32> {
    let mut tape = Tape::new();
    let c_full = tape.constant(batched(cond.tensor.clone()));
    let c = tape.avg_pool2d(c_full, 2);
    let (coarse, features) = pair.g_aux.forward(&mut tape, c);
    let out = if pair.config.joint_epochs > 0 {
        pair.g_main.forward(&mut tape, c_full, features)
    } else {
        let full = pair.config.full_side();
        tape.bilinear_resize(coarse, full, full)
    };
    let v = tape.value(out);
    let s = v.shape();
    v.clone().reshape(&[s[1], s[2], s[3]])
}

/// `per_source` synthetic images for each abnormal source. Variant `k` of a
/// source is conditioned on the CAM of an independently augmented copy of
/// it. Normal sources are skipped.
pub fn generate(
    pair: &GanPair,
    classifier: &mut SingleModalCnn<f32>,
    sources: &[GanSource],
    per_source: usize,
    seed: u64,
) -> Result<Vec<SyntheticImage>> {
    if classifier.modality != pair.modality {
        return Err(Error::contract(format!(
            "{} classifier cannot condition a {} synthesizer",
            classifier.modality, pair.modality
        )));
    }
    let aug = augment_params(&pair.config, seed::derive(seed, &[seed::tag("generate")]));
    let skipped = sources.iter().filter(|s| !s.record.label.is_abnormal()).count();
    if skipped > 0 {
        warn!("skipping {skipped} normal source images");
    }
    let mut out = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        let r = &src.record;
        if !r.label.is_abnormal() {
            continue;
        }
        if r.modality != pair.modality {
            return Err(Error::contract(format!(
                "{} is not a {} image",
                r.image_id, pair.modality
            )));
        }
        for k in 0..per_source {
            let img = augment(&src.image, &aug, k as u64, i as u64)?;
            let cam = source_cam(classifier, &img, r.label)?;
            let cond = make_condition(&cam, r.label, pair.config.full_side(), pair.cam_range);
            let image = denormalize_pm1(&synthesize(pair, &cond))?;
            let image_id = format!("{}-syn{k}", r.image_id);
            out.push(SyntheticImage {
                record: ImageRecord {
                    path: format!("synthetic/{image_id}.png").into(),
                    eye_id: format!("syn-{}-{k}", r.image_id),
                    subject_id: format!("syn-{}", r.subject_id),
                    modality: r.modality,
                    label: r.label,
                    provenance: Provenance::Synthetic,
                    image_id,
                },
                image,
            });
        }
    }
    Ok(out)
}
