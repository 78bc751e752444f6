//! `srtod gendata | train | eval | visualize`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{write_detections, DetectionRecord};
use crate::experiment::{
    checkpoint_of, evaluate, new_trainer, predict, resume_trainer, synth_splits, train_epochs, MetricsLog,
};
use crate::synthdata::{load_dataset, load_image, read_manifest, write_dataset, Scene, MANIFEST_NAME};
use crate::viz;

#[derive(Debug, Parser)]
#[command(name = "srtod", version, about = "Self-reconstructed tiny object detection")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the training and validation sets as PNG files plus manifests.
    Gendata,
    /// Train and write checkpoints and a metrics log.
    Train {
        /// Directory written by `gendata`; scenes are generated in memory if absent.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split directory (with a manifest) or a `gendata` output directory.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Export reconstruction, difference maps and detections for one image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, common);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common) {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Checkpoint configuration, with overrides applied and compared against an
/// explicitly given config file.
fn checkpoint_config(ckpt: &Checkpoint, common: &Common) -> Result<RunConfig> {
    if let Some(p) = &common.config {
        ckpt.check_config(&RunConfig::load(p)?);
    }
    let mut cfg = ckpt.config.clone();
    apply_overrides(&mut cfg, common);
    Ok(cfg)
}

/// Scenes of a split directory, or of `dir/<split>` for a `gendata` root.
fn load_split(dir: &Path, split: &str) -> Result<Vec<Scene>> {
    if dir.join(MANIFEST_NAME).exists() {
        load_dataset(dir)
    } else {
        load_dataset(&dir.join(split))
    }
}

pub fn gendata(common: &Common) -> Result<Vec<PathBuf>> {
    let cfg = load_config(common)?;
    let mut manifests = Vec::new();
    for (split, count, seed) in [
        ("train", cfg.data.train_count, cfg.data.seed),
        ("val", cfg.data.val_count, cfg.data.val_seed()),
    ] {
        let dir = cfg.out_dir.join(split);
        let m = write_dataset(&cfg.scene, count, seed, &dir)?;
        println!("{}", m.display());
        manifests.push(m);
    }
    Ok(manifests)
}

pub fn train(common: &Common, dataset: Option<&Path>, resume: Option<&Path>) -> Result<PathBuf> {
    let (cfg, mut trainer, start) = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let cfg = checkpoint_config(&ckpt, common)?;
            let (t, epoch) = resume_trainer(&ckpt)?;
            log::info!("resuming from {} at step {} epoch {}", p.display(), t.step, epoch);
            (cfg, t, epoch)
        }
        None => {
            let cfg = load_config(common)?;
            let t = new_trainer(&cfg)?;
            (cfg, t, 0)
        }
    };
    let scenes = match dataset {
        Some(d) => load_split(d, "train")?,
        None => synth_splits(&cfg)?.0,
    };
    create_dir(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.toml"))?;
    let mut log = MetricsLog::create(&cfg.out_dir.join("metrics.jsonl"), resume.is_some())?;
    let out_dir = cfg.out_dir.clone();
    let every = cfg.train.checkpoint_every;
    train_epochs(
        &mut trainer,
        &cfg,
        &scenes,
        start,
        |rec| {
            log::debug!("step {} total {:.5}", rec.step, rec.total);
            log.write(rec)
        },
        |t, epoch| {
            log::info!("epoch {epoch} done at step {}", t.step);
            if every > 0 && epoch % every == 0 {
                checkpoint_of(t, &cfg, epoch).save(&out_dir.join(format!("epoch{epoch:03}.ckpt")))?;
            }
            Ok(())
        },
    )?;
    log.flush()?;
    let path = out_dir.join("final.ckpt");
    checkpoint_of(&trainer, &cfg, cfg.train.epochs.max(start)).save(&path)?;
    println!("{}", path.display());
    Ok(path)
}

pub fn eval(common: &Common, checkpoint: &Path, dataset: &Path) -> Result<PathBuf> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = checkpoint_config(&ckpt, common)?;
    let (trainer, _) = resume_trainer(&ckpt)?;
    let (scenes, names) = if dataset.join(MANIFEST_NAME).exists() {
        (load_dataset(dataset)?, read_manifest(&dataset.join(MANIFEST_NAME))?)
    } else {
        let d = dataset.join("val");
        (load_dataset(&d)?, read_manifest(&d.join(MANIFEST_NAME))?)
    };
    if scenes.is_empty() {
        return Err(Error::Validation(format!("dataset {} is empty", dataset.display())));
    }
    let report = evaluate(&trainer, &scenes, cfg.train.batch_size)?;
    let dets = predict(&trainer, &scenes, cfg.train.batch_size, trainer.mode)?;
    create_dir(&cfg.out_dir)?;
    let records: Vec<DetectionRecord> = names
        .iter()
        .zip(&dets)
        .map(|(n, e)| DetectionRecord::new(n.image.clone(), &e.detections))
        .collect();
    write_detections(&cfg.out_dir.join("detections.jsonl"), &records)?;
    report.write_pr_csv(&cfg.out_dir.join("pr_curves.csv"))?;
    let path = cfg.out_dir.join("report.json");
    report.write_json(&path)?;
    print!("{}", report.table());
    Ok(path)
}

pub fn visualize(common: &Common, checkpoint: &Path, image: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = checkpoint_config(&ckpt, common)?;
    let (trainer, _) = resume_trainer(&ckpt)?;
    let img = load_image(image)?;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let paths = viz::export(&trainer.model, &trainer.store, &img, &stem, &cfg.out_dir)?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(paths)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gendata => gendata(&cli.common).map(drop),
        Command::Train { dataset, resume } => train(&cli.common, dataset.as_deref(), resume.as_deref()).map(drop),
        Command::Eval { checkpoint, dataset } => eval(&cli.common, checkpoint, dataset).map(drop),
        Command::Visualize { checkpoint, image } => visualize(&cli.common, checkpoint, image).map(drop),
    }
}
