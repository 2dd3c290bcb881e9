//! `harmonizer perturb-eval`: robustness sweep. For the identity row plus
//! each grid perturbation (3 noise, 3 blur, 3 gamma), evaluates matched Dice
//! on clean and perturbed images and reports the absolute gap. A second
//! checkpoint can be supplied to compare two models (e.g. harmonizer on/off)
//! in one table.

use crate::manifest::RunManifest;
use crate::tables::{robustness_csv, RobustRow};
use crate::{parse_split, seed_override, CliError, CliResult};
use clap::Args;
use harmonizer_core::metrics::{dice_match, AnnotationSet, PredictionSet};
use harmonizer_core::model::HarmonizerModel;
use harmonizer_core::pipeline::Checkpoint;
use harmonizer_core::rng::derive_seed;
use harmonizer_core::synthdata::{
    load_dataset, perturb, MultiRaterSample, PerturbationConfig, BLUR_GRID, GAMMA_GRID, NOISE_GRID,
};
use harmonizer_core::tensor::params::ParamSet;
use harmonizer_core::Error;
use std::path::{Path, PathBuf};

#[derive(Args)]
pub struct PerturbArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optional second checkpoint for a side-by-side comparison.
    #[arg(long)]
    pub checkpoint_b: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Hypotheses drawn per case.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Seed (falls back to HZ_SEED, then the checkpoint's seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

fn model_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Mean matched Dice of `k`-hypothesis sets over the given samples.
fn mean_dice_match(
    model: &HarmonizerModel,
    params: &ParamSet,
    samples: &[&MultiRaterSample],
    k: usize,
    seed: u64,
    harmonize: bool,
) -> CliResult<f64> {
    let mut acc = 0.0;
    for s in samples {
        let preds = PredictionSet::new(
            model.predict_set(params, &s.image, k, derive_seed(seed, &[s.index as u64]), harmonize)?,
            seed,
        )?;
        let annots = AnnotationSet::new(s.masks.clone(), (0..s.masks.len()).collect())?;
        acc += dice_match(&preds, &annots)?;
    }
    Ok(acc / samples.len() as f64)
}

/// The paper-grid rows: identity, then noise, blur, gamma at three strengths.
pub fn perturbation_grid() -> Vec<(String, f64, Option<PerturbationConfig>)> {
    let mut grid: Vec<(String, f64, Option<PerturbationConfig>)> =
        vec![("identity".to_string(), 0.0, None)];
    for &sigma in &NOISE_GRID {
        grid.push(("noise".to_string(), sigma, Some(PerturbationConfig::noise(sigma))));
    }
    for &sigma in &BLUR_GRID {
        grid.push(("blur".to_string(), sigma, Some(PerturbationConfig::blur(sigma))));
    }
    for &g in &GAMMA_GRID {
        grid.push(("gamma".to_string(), g, Some(PerturbationConfig::gamma(g))));
    }
    grid
}

fn sweep(
    label: &str,
    model: &HarmonizerModel,
    params: &ParamSet,
    samples: &[&MultiRaterSample],
    k: usize,
    seed: u64,
    harmonize: bool,
) -> CliResult<Vec<RobustRow>> {
    let clean = mean_dice_match(model, params, samples, k, seed, harmonize)?;
    let mut rows = Vec::new();
    for (row_idx, (kind, magnitude, pcfg)) in perturbation_grid().into_iter().enumerate() {
        let perturbed = match &pcfg {
            None => clean,
            Some(p) => {
                let modified: Vec<MultiRaterSample> = samples
                    .iter()
                    .map(|s| {
                        Ok(MultiRaterSample {
                            index: s.index,
                            image: perturb(
                                &s.image,
                                p,
                                derive_seed(seed, &[200 + row_idx as u64, s.index as u64]),
                            )?,
                            masks: s.masks.clone(),
                            scene: s.scene.clone(),
                            split: s.split,
                        })
                    })
                    .collect::<Result<_, Error>>()?;
                let refs: Vec<&MultiRaterSample> = modified.iter().collect();
                mean_dice_match(model, params, &refs, k, seed, harmonize)?
            }
        };
        rows.push(RobustRow {
            model: label.to_string(),
            kind,
            magnitude,
            clean_dice: clean,
            perturbed_dice: perturbed,
        });
    }
    Ok(rows)
}

pub fn run(args: PerturbArgs) -> CliResult<()> {
    let split = parse_split(&args.split)?;
    let dataset = load_dataset(&args.data)?;
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(CliError::Core(Error::invalid(
            "perturb-eval",
            format!("dataset has no {} split", args.split),
        )));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Core(Error::io(args.out.display().to_string(), e)))?;

    let mut checkpoints = vec![args.checkpoint.clone()];
    checkpoints.extend(args.checkpoint_b.clone());
    let mut rows = Vec::new();
    let mut seed_used = 0;
    for path in &checkpoints {
        let ck = Checkpoint::load(path)?;
        let (model, params, _, _) = ck.restore()?;
        let seed = seed_override(args.seed)?.unwrap_or(ck.config.seed);
        seed_used = seed;
        rows.extend(sweep(
            &model_label(path),
            &model,
            &params,
            &samples,
            args.k,
            seed,
            ck.config.harmonizer_enabled,
        )?);
    }
    robustness_csv(&args.out.join("robustness.csv"), &rows)?;
    for r in &rows {
        println!(
            "{:<16} {:<9} mag {:<5} clean {:.4} perturbed {:.4} |d| {:.4}",
            r.model,
            r.kind,
            r.magnitude,
            r.clean_dice,
            r.perturbed_dice,
            (r.clean_dice - r.perturbed_dice).abs()
        );
    }

    RunManifest::new(
        "perturb-eval",
        serde_json::json!({
            "checkpoints": checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "k": args.k,
            "split": args.split,
        }),
        seed_used,
        &[&args.checkpoint, &args.data],
        &["robustness.csv"],
    )
    .write(&args.out)?;
    Ok(())
}
