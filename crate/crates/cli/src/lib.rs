//! Subcommands of the `mmfuse` binary. Every command reads the same JSON
//! configuration and funnels its randomness through the one global seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::json;

use mmfuse_core::cam::{mm_cams, overlay_to_image, render_overlay};
use mmfuse_core::checkpoint::{self, read_manifest};
use mmfuse_core::config::CliConfig;
use mmfuse_core::dataset::{split_by_eye, synth, ImageRecord, Manifest, Split};
use mmfuse_core::gan::{self, GanPair, GanSource};
use mmfuse_core::imaging::{denormalize_pm1, preprocess, RawImage};
use mmfuse_core::metrics::MetricsReport;
use mmfuse_core::models::{input_tensor, MmCnn, SingleModalCnn};
use mmfuse_core::trainer::{
    evaluate_mm, evaluate_single, multi_run, run_seed, same_eye_pairs, train_mm_stage, train_single, train_two_stage,
    write_json, ImageStore, Stage,
};
use mmfuse_core::{seed, Class, Modality};

/// Largest CAM identity residual `cam` accepts.
pub const CAM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "mmfuse",
    version,
    about = "Two-stream CFP/OCT classification with CAM-conditioned synthesis"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration; keys left out keep their defaults, unknown keys are errors
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed, overriding `seeds.global`
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "mmfuse-out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the procedural benchmark corpus and its manifest
    SynthBench,
    /// Write preprocessed images and normalized model-input previews
    Preprocess {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        /// Only the first N records
        #[arg(long, value_name = "N")]
        limit: Option<usize>,
    },
    /// Train one single-modal classifier per run
    TrainSingle {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        #[arg(long)]
        modality: ModalityArg,
        /// Number of seeded runs (defaults to `eval.runs`)
        #[arg(long, value_name = "R")]
        runs: Option<usize>,
    },
    /// Train a coarse-to-fine synthesizer on abnormal training images of one modality
    TrainGan {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        /// Single-modal classifier checkpoint supplying the CAMs
        #[arg(long, value_name = "PATH")]
        classifier: PathBuf,
    },
    /// Synthesize abnormal images and write an extended manifest
    Generate {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        /// Synthesizer checkpoint; repeat once per modality
        #[arg(long = "gan", value_name = "PATH", required = true)]
        gans: Vec<PathBuf>,
        /// Classifier checkpoint of the same modality as each synthesizer
        #[arg(long = "classifier", value_name = "PATH", required = true)]
        classifiers: Vec<PathBuf>,
    },
    /// Train the two-stream model on loose pairs, one model per run
    TrainMm {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        /// Starting weights: a checkpoint, or a directory of `run-*` checkpoints
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        /// Number of seeded runs (defaults to `eval.runs`)
        #[arg(long, value_name = "R")]
        runs: Option<usize>,
    },
    /// Evaluate checkpoints on the test split and write the averaged report
    Eval {
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        /// A checkpoint, or a directory of `run-*` checkpoints
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Number of runs to evaluate from a run directory (defaults to `eval.runs`)
        #[arg(long, value_name = "R")]
        runs: Option<usize>,
    },
    /// Class activation maps of a two-stream checkpoint for one CFP/OCT pair
    Cam {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "IMG")]
        cfp: PathBuf,
        #[arg(long, value_name = "IMG")]
        oct: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModalityArg {
    Cfp,
    Oct,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Cfp => Modality::Cfp,
            ModalityArg::Oct => Modality::Oct,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
    Both,
}

pub fn load_config(common: &Common) -> Result<CliConfig> {
    let mut config = match &common.config {
        Some(p) => CliConfig::read(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = common.seed {
        config = config.with_seed(s);
    }
    Ok(config)
}

pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::SynthBench => synth_bench(&config, out),
        Command::Preprocess { manifest, limit } => preprocess_previews(&config, &manifest, limit, out),
        Command::TrainSingle {
            manifest,
            modality,
            runs,
        } => train_single_cmd(
            &config,
            &manifest,
            modality.into(),
            runs.unwrap_or(config.eval.runs),
            out,
        ),
        Command::TrainGan { manifest, classifier } => train_gan_cmd(&config, &manifest, &classifier, out),
        Command::Generate {
            manifest,
            gans,
            classifiers,
        } => generate_cmd(&config, &manifest, &gans, &classifiers, out),
        Command::TrainMm {
            manifest,
            stage,
            init,
            runs,
        } => train_mm_cmd(
            &config,
            &manifest,
            stage,
            init.as_deref(),
            runs.unwrap_or(config.eval.runs),
            out,
        ),
        Command::Eval { manifest, model, runs } => {
            eval_cmd(&config, &manifest, &model, runs.unwrap_or(config.eval.runs), out)
        }
        Command::Cam { model, cfp, oct } => cam_cmd(&config, &model, &cfp, &oct, out),
    }
}

fn synth_bench(config: &CliConfig, out: &Path) -> Result<()> {
    let manifest = synth::write_benchmark(&config.dataset.synth, config.seed_for("synth"), out)?;
    println!("{}", manifest.display());
    Ok(())
}

/// The manifest, its split and the decoded images of the requested records.
struct Data {
    manifest: Manifest,
    split: Split,
}

impl Data {
    fn read(config: &CliConfig, path: &Path) -> Result<Self> {
        let manifest = Manifest::read(path)?;
        let split = split_by_eye(&manifest.records, &config.dataset.split)?;
        info!(
            "{}: {} train, {} val, {} test images",
            path.display(),
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
        Ok(Self { manifest, split })
    }

    fn images(&self, config: &CliConfig, records: &[&[ImageRecord]]) -> Result<ImageStore> {
        let all: Vec<ImageRecord> = records.iter().flat_map(|r| r.iter().cloned()).collect();
        Ok(ImageStore::load(&self.manifest, &all, &config.dataset.preprocess)?)
    }
}

fn of_modality(records: &[ImageRecord], m: Modality) -> Vec<ImageRecord> {
    records.iter().filter(|r| r.modality == m).cloned().collect()
}

fn preprocess_previews(config: &CliConfig, manifest: &Path, limit: Option<usize>, out: &Path) -> Result<()> {
    let manifest = Manifest::read(manifest)?;
    let side = config.model.input_side;
    let n = limit.unwrap_or(manifest.records.len()).min(manifest.records.len());
    for r in &manifest.records[..n] {
        let raw = RawImage::load(&manifest.resolve(r))?;
        let pre = preprocess(&raw, r.modality, &config.dataset.preprocess)?;
        pre.save(&out.join("preprocessed").join(format!("{}.png", r.image_id)))?;
        let input = input_tensor::<f32>(&pre, side)?;
        denormalize_pm1(&input)?.save(&out.join("input").join(format!("{}.png", r.image_id)))?;
    }
    println!("{n} images");
    Ok(())
}

fn run_dir(out: &Path, r: usize) -> PathBuf {
    out.join(format!("run-{r}"))
}

/// A checkpoint path, or `run-{r}/model.json` inside a directory.
fn resolve_model(path: &Path, r: usize) -> PathBuf {
    if path.is_dir() {
        run_dir(path, r).join("model.json")
    } else {
        path.to_path_buf()
    }
}

fn init_seed(config: &CliConfig, r: usize, what: &str) -> u64 {
    seed::derive(run_seed(config.seeds.global, r), &[seed::tag(what)])
}

#[derive(Serialize)]
struct Selection {
    best_epoch: Option<usize>,
    best_val_macro_f1: Option<f64>,
}

fn train_single_cmd(config: &CliConfig, manifest: &Path, modality: Modality, runs: usize, out: &Path) -> Result<()> {
    ensure!(runs > 0, "--runs must be at least 1");
    let data = Data::read(config, manifest)?;
    let train = of_modality(&data.split.train, modality);
    let val = of_modality(&data.split.val, modality);
    let images = data.images(config, &[&train, &val])?;
    for r in 0..runs {
        let dir = run_dir(out, r);
        fs::create_dir_all(&dir)?;
        let mut model = SingleModalCnn::<f32>::new(modality, &config.model, init_seed(config, r, modality.name()))?;
        let fit = train_single(
            &mut model,
            &train,
            &val,
            &images,
            &config.train.single,
            run_seed(config.seeds.global, r),
        )?;
        checkpoint::save(&model, &dir.join("model.json"))?;
        fit.history.write_csv(&dir.join("history.csv"))?;
        write_json(
            &Selection {
                best_epoch: fit.best_epoch,
                best_val_macro_f1: fit.best.map(|s| s.macro_f1),
            },
            &dir.join("selection.json"),
        )?;
        println!("{}", dir.join("model.json").display());
    }
    Ok(())
}

/// Abnormal real training images of one modality.
fn gan_sources(data: &Data, images: &ImageStore, modality: Modality) -> Result<Vec<GanSource>> {
    data.split
        .train
        .iter()
        .filter(|r| r.modality == modality && r.is_real() && r.label.is_abnormal())
        .map(|r| {
            Ok(GanSource {
                record: r.clone(),
                image: images.get(r)?.clone(),
            })
        })
        .collect()
}

fn train_gan_cmd(config: &CliConfig, manifest: &Path, classifier: &Path, out: &Path) -> Result<()> {
    let mut clf: SingleModalCnn<f32> = checkpoint::load(classifier)?;
    let modality = clf.modality;
    let data = Data::read(config, manifest)?;
    let train = of_modality(&data.split.train, modality);
    let images = data.images(config, &[&train])?;
    let sources = gan_sources(&data, &images, modality)?;
    let run = gan::train_gan(
        &sources,
        &mut clf,
        &config.gan,
        config.seed_for(&format!("gan-{modality}")),
    )?;
    run.pair.save(&out.join("gan.json"))?;
    write_json(
        &json!({ "initial": run.initial, "epochs": run.log }),
        &out.join("gan-log.json"),
    )?;
    println!("{}", out.join("gan.json").display());
    Ok(())
}

fn generate_cmd(
    config: &CliConfig,
    manifest: &Path,
    gans: &[PathBuf],
    classifiers: &[PathBuf],
    out: &Path,
) -> Result<()> {
    ensure!(
        gans.len() == classifiers.len(),
        "{} synthesizers but {} classifiers",
        gans.len(),
        classifiers.len()
    );
    let data = Data::read(config, manifest)?;
    let images = data.images(config, &[&data.split.train])?;
    let out_abs = std::path::absolute(out)?;
    let root_abs = std::path::absolute(&data.manifest.root)?;
    let mut records: Vec<ImageRecord> = data
        .manifest
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            let abs = root_abs.join(&r.path);
            r.path = pathdiff::diff_paths(&abs, &out_abs).unwrap_or(abs);
            r
        })
        .collect();
    let mut seen = Vec::new();
    for (g, c) in gans.iter().zip(classifiers) {
        let pair = GanPair::load(g)?;
        let mut clf: SingleModalCnn<f32> = checkpoint::load(c)?;
        ensure!(!seen.contains(&pair.modality), "two synthesizers for {}", pair.modality);
        seen.push(pair.modality);
        let sources = gan_sources(&data, &images, pair.modality)?;
        let seed = config.seed_for(&format!("generate-{}", pair.modality));
        let synthetic = gan::generate(&pair, &mut clf, &sources, config.gan.per_source, seed)?;
        info!("{} synthetic {} images", synthetic.len(), pair.modality);
        for s in synthetic {
            s.image.save(&out.join(&s.record.path))?;
            records.push(s.record);
        }
    }
    let path = out.join("manifest.csv");
    Manifest::write(&path, &records)?;
    println!("{}", path.display());
    Ok(())
}

fn train_mm_cmd(
    config: &CliConfig,
    manifest: &Path,
    stage: StageArg,
    init: Option<&Path>,
    runs: usize,
    out: &Path,
) -> Result<()> {
    ensure!(runs > 0, "--runs must be at least 1");
    let data = Data::read(config, manifest)?;
    let val = same_eye_pairs(&data.split.val);
    let images = data.images(config, &[&data.split.train, &data.split.val])?;
    for r in 0..runs {
        let dir = run_dir(out, r);
        fs::create_dir_all(&dir)?;
        let mut model = match init {
            Some(p) => checkpoint::load::<MmCnn<f32>>(&resolve_model(p, r))?,
            None => MmCnn::<f32>::new(&config.model, init_seed(config, r, "mm"))?,
        };
        let seed = run_seed(config.seeds.global, r);
        let train = &data.split.train;
        let (history, audits) = match stage {
            StageArg::Both => {
                let t = train_two_stage(
                    &mut model,
                    train,
                    &val,
                    &images,
                    &config.train.pretrain,
                    &config.train.finetune,
                    seed,
                    false,
                )?;
                let audits = json!({
                    "pretrain": t.pretrain.as_ref().map(|(_, a)| a),
                    "finetune": t.finetune.1,
                });
                (t.history(), audits)
            }
            StageArg::Pretrain | StageArg::Finetune => {
                let (s, rc) = if stage == StageArg::Pretrain {
                    (Stage::Pretrain, &config.train.pretrain)
                } else {
                    (Stage::Finetune, &config.train.finetune)
                };
                let (fit, audit) = train_mm_stage(&mut model, s, train, &val, &images, rc, seed)?;
                (fit.history, json!({ s.name(): audit }))
            }
        };
        checkpoint::save(&model, &dir.join("model.json"))?;
        history.write_csv(&dir.join("history.csv"))?;
        write_json(&audits, &dir.join("audit.json"))?;
        println!("{}", dir.join("model.json").display());
    }
    Ok(())
}

fn model_kind(path: &Path) -> mmfuse_core::Result<String> {
    let m = read_manifest(path)?;
    Ok(m.meta
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or_default()
        .to_string())
}

fn eval_cmd(config: &CliConfig, manifest: &Path, model: &Path, runs: usize, out: &Path) -> Result<()> {
    let runs = if model.is_dir() { runs } else { 1 };
    let data = Data::read(config, manifest)?;
    let images = data.images(config, &[&data.split.test])?;
    let pairs = same_eye_pairs(&data.split.test);
    let (avg, reports) = multi_run(runs, |r| {
        let path = resolve_model(model, r);
        let report = match model_kind(&path)?.as_str() {
            "single" => {
                let mut m: SingleModalCnn<f32> = checkpoint::load(&path)?;
                evaluate_single(&mut m, &data.split.test, &images)?.0
            }
            "mm" => {
                let mut m: MmCnn<f32> = checkpoint::load(&path)?;
                evaluate_mm(&mut m, &pairs, &images)?.0
            }
            other => {
                return Err(mmfuse_core::Error::Checkpoint(format!(
                    "{} holds a {other:?} model, which has no test evaluation",
                    path.display()
                )))
            }
        };
        Ok(report)
    })?;
    write_json(&avg, &out.join("metrics.json"))?;
    write_json(&reports, &out.join("runs.json"))?;
    print_report(&avg);
    Ok(())
}

fn print_report(m: &MetricsReport) {
    println!("accuracy {:.4}  macro-F1 {:.4}", m.accuracy, m.macro_f1);
    for (c, cm) in Class::ALL.iter().zip(&m.per_class) {
        println!(
            "  {c:<7} sensitivity {:.4}  specificity {:.4}  F1 {:.4}",
            cm.sensitivity, cm.specificity, cm.f1
        );
    }
}

fn load_input(config: &CliConfig, path: &Path, modality: Modality) -> Result<RawImage> {
    let img = RawImage::load(path)?;
    if img.channels != modality.channels() {
        bail!(
            "{} has {} channels, {modality} images have {}",
            path.display(),
            img.channels,
            modality.channels()
        );
    }
    Ok(preprocess(&img, modality, &config.dataset.preprocess)?)
}

fn cam_cmd(config: &CliConfig, model: &Path, cfp: &Path, oct: &Path, out: &Path) -> Result<()> {
    let mut m: MmCnn<f32> = checkpoint::load(model)?;
    let side = m.config().input_side;
    let cfp_img = load_input(config, cfp, Modality::Cfp)?;
    let oct_img = load_input(config, oct, Modality::Oct)?;
    let batch = |img: &RawImage| -> Result<_> {
        let t = input_tensor::<f32>(img, side)?;
        let s = t.shape().to_vec();
        Ok(t.reshape(&[1, s[0], s[1], s[2]]))
    };
    let res = mm_cams(&mut m, &batch(&cfp_img)?, &batch(&oct_img)?)?.remove(0);
    let fusion = res.fusion_residual();
    let stream = res.stream_residual();
    let predicted = res.predicted();
    let grids = out.join("grids");
    fs::create_dir_all(&grids)?;
    for c in Class::ALL {
        res.cfp[c.index()].write_csv(&grids.join(format!("cfp_{c}.csv")))?;
        res.oct[c.index()].write_csv(&grids.join(format!("oct_{c}.csv")))?;
    }
    let k = predicted.index();
    overlay_to_image(&render_overlay(&cfp_img, &res.cfp[k])).save(&out.join("cfp_overlay.png"))?;
    overlay_to_image(&render_overlay(&oct_img, &res.oct[k])).save(&out.join("oct_overlay.png"))?;
    write_json(
        &json!({
            "predicted": predicted,
            "scores": res.scores,
            "cfp_scores": res.cfp_scores,
            "oct_scores": res.oct_scores,
            "cfp_cam_sums": res.cfp.iter().map(|c| c.total()).collect::<Vec<_>>(),
            "oct_cam_sums": res.oct.iter().map(|c| c.total()).collect::<Vec<_>>(),
            "fusion_residual": fusion,
            "stream_residual": stream,
        }),
        &out.join("cam.json"),
    )?;
    println!("predicted {predicted}");
    println!("residual {:.3e}", fusion.max(stream));
    ensure!(
        fusion < CAM_TOLERANCE && stream < CAM_TOLERANCE,
        "CAM identity residual {:.3e} exceeds {CAM_TOLERANCE:e}",
        fusion.max(stream)
    );
    Ok(())
}
