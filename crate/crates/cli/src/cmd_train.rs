//! `harmonizer train`: phase 1 (backbone + latent encoders + harmonizer),
//! phase 2 (personalizer on a frozen phase-1 model), or both in sequence.
//! Emits per-epoch CSV loss logs and checkpoints.

use crate::manifest::RunManifest;
use crate::{seed_override, tables, CliError, CliResult};
use clap::Args;
use harmonizer_core::model::HarmonizerModel;
use harmonizer_core::pipeline::{
    train_phase1, train_phase2, Checkpoint, CheckpointPolicy, TrainConfig,
};
use harmonizer_core::rng::derive_seed;
use harmonizer_core::synthdata::{load_dataset, Split};
use harmonizer_core::Error;
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (from `gen`).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Which phase to run: 1, 2, or both.
    #[arg(long, default_value = "both")]
    pub phase: String,
    /// Full training config as JSON (defaults otherwise).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Phase-1 checkpoint to start phase 2 from (default: <out>/phase1.hzck).
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub epochs1: Option<usize>,
    #[arg(long)]
    pub epochs2: Option<usize>,
    #[arg(long)]
    pub lr1: Option<f64>,
    #[arg(long)]
    pub lr2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Prior draws per phase-1 step for the distribution-matching term.
    #[arg(long)]
    pub k_train: Option<usize>,
    /// Root seed (falls back to HZ_SEED, then the config's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation: train without feature harmonization.
    #[arg(long)]
    pub no_harmonizer: bool,
    /// Ablation: drop the distribution-matching loss term.
    #[arg(long)]
    pub no_ged: bool,
    /// Additionally keep a numbered checkpoint every N epochs.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

enum Phase {
    One,
    Two,
    Both,
}

fn parse_phase(s: &str) -> CliResult<Phase> {
    match s {
        "1" => Ok(Phase::One),
        "2" => Ok(Phase::Two),
        "both" => Ok(Phase::Both),
        other => Err(CliError::Usage(format!(
            "unknown phase '{other}' (expected 1, 2, or both)"
        ))),
    }
}

fn apply_overrides(cfg: &mut TrainConfig, args: &TrainArgs, seed: Option<u64>) {
    if let Some(v) = args.epochs1 {
        cfg.phase1_epochs = v;
    }
    if let Some(v) = args.epochs2 {
        cfg.phase2_epochs = v;
    }
    if let Some(v) = args.lr1 {
        cfg.lr_phase1 = v;
    }
    if let Some(v) = args.lr2 {
        cfg.lr_phase2 = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.k_train {
        cfg.k_train = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if args.no_harmonizer {
        cfg.harmonizer_enabled = false;
    }
    if args.no_ged {
        cfg.ged_enabled = false;
    }
}

fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Core(Error::io(path.display().to_string(), e)))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(Error::from(e)))
}

pub fn run(args: TrainArgs) -> CliResult<()> {
    let phase = parse_phase(&args.phase)?;
    let seed = seed_override(args.seed)?;
    let dataset = load_dataset(&args.data)?;
    let train_set = dataset.split(Split::Train);
    if train_set.is_empty() {
        return Err(CliError::Core(Error::invalid(
            "train",
            "dataset has no training split".to_string(),
        )));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Core(Error::io(args.out.display().to_string(), e)))?;
    let policy = CheckpointPolicy {
        dir: &args.out,
        every: args.checkpoint_every,
    };

    // Phase 1 (or both): config from file/defaults, shaped by the dataset.
    let (model, mut params, mut cfg) = match phase {
        Phase::One | Phase::Both => {
            let mut cfg = match &args.config {
                Some(path) => load_config(path)?,
                None => TrainConfig::default(),
            };
            // The dataset dictates the input shape and rater count.
            cfg.model.input_h = dataset.manifest.image_size;
            cfg.model.input_w = dataset.manifest.image_size;
            cfg.model.backbone.num_raters = dataset.manifest.num_raters;
            apply_overrides(&mut cfg, &args, seed);
            let (model, mut params) =
                HarmonizerModel::new(cfg.model.clone(), derive_seed(cfg.seed, &[0]))?;
            let log = train_phase1(&model, &mut params, &train_set, &cfg, Some(policy))?;
            tables::phase1_loss_csv(&args.out.join("phase1_loss.csv"), &log.epochs, cfg.ged_enabled)?;
            Checkpoint::for_inference(1, &cfg, &params).save(&args.out.join("phase1.hzck"))?;
            let (first, last) = (
                log.epochs.first().map_or(0.0, |e| e.total),
                log.epochs.last().map_or(0.0, |e| e.total),
            );
            println!(
                "phase 1: {} epochs, loss {first:.4} -> {last:.4}",
                log.epochs.len()
            );
            (model, params, cfg)
        }
        Phase::Two => {
            let from = args
                .from
                .clone()
                .unwrap_or_else(|| args.out.join("phase1.hzck"));
            if !from.exists() {
                return Err(CliError::Core(Error::invalid(
                    "train",
                    format!(
                        "phase 2 needs a phase-1 checkpoint; '{}' does not exist",
                        from.display()
                    ),
                )));
            }
            let ck = Checkpoint::load(&from)?;
            let (model, params, _, _) = ck.restore()?;
            let mut cfg = ck.config;
            apply_overrides(&mut cfg, &args, seed);
            (model, params, cfg)
        }
    };

    if matches!(phase, Phase::Two | Phase::Both) {
        if args.no_harmonizer {
            cfg.harmonizer_enabled = false;
        }
        let log = train_phase2(&model, &mut params, &train_set, &cfg, Some(policy))?;
        tables::phase2_loss_csv(&args.out.join("phase2_loss.csv"), &log.epochs)?;
        Checkpoint::for_inference(2, &cfg, &params).save(&args.out.join("phase2.hzck"))?;
        if let Some(last) = log.epochs.last() {
            println!(
                "phase 2: {} epochs, mean loss {:.4}, per-rater dice {:?}",
                log.epochs.len(),
                last.mean_loss,
                last.per_rater_dice
                    .iter()
                    .map(|d| (d * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            );
        } else {
            println!("phase 2: 0 epochs (passthrough)");
        }
    }

    RunManifest::new(
        "train",
        serde_json::to_value(&cfg).map_err(Error::from)?,
        cfg.seed,
        &[&args.data],
        &["phase1.hzck", "phase1_loss.csv", "phase2.hzck", "phase2_loss.csv"],
    )
    .write(&args.out)?;
    Ok(())
}
