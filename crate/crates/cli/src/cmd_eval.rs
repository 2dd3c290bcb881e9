//! `harmonizer eval`: run the metric suite for one checkpoint on one split.
//! Emits the aggregate report as JSON, per-case rows as CSV, and optionally
//! the distribution-distance-vs-sample-count curve.

use crate::manifest::RunManifest;
use crate::{parse_split, seed_override, tables, CliError, CliResult};
use clap::Args;
use harmonizer_core::pipeline::{evaluate, ged_vs_samples, Checkpoint};
use harmonizer_core::synthdata::load_dataset;
use harmonizer_core::Error;
use std::path::PathBuf;

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Hypotheses drawn per case.
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluation seed (falls back to HZ_SEED, then the checkpoint's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated sample counts for the curve, e.g. 1,4,8,16,32.
    #[arg(long)]
    pub sweep_k: Option<String>,
}

pub fn parse_k_list(raw: &str) -> CliResult<Vec<usize>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad sample count '{part}' in --sweep-k")))?;
        if k == 0 {
            return Err(CliError::Usage("sample counts must be >= 1".to_string()));
        }
        out.push(k);
    }
    Ok(out)
}

pub fn run(args: EvalArgs) -> CliResult<()> {
    let split = parse_split(&args.split)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (model, params, _, _) = ck.restore()?;
    let dataset = load_dataset(&args.data)?;
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(CliError::Core(Error::invalid(
            "eval",
            format!("dataset has no {} split", args.split),
        )));
    }
    let seed = seed_override(args.seed)?.unwrap_or(ck.config.seed);
    let harmonize = ck.config.harmonizer_enabled;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Core(Error::io(args.out.display().to_string(), e)))?;
    let report = evaluate(&model, &params, &samples, args.k, seed, harmonize)?;
    let json_path = args.out.join("metrics.json");
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    std::fs::write(&json_path, text)
        .map_err(|e| CliError::Core(Error::io(json_path.display().to_string(), e)))?;
    tables::cases_csv(&args.out.join("cases.csv"), &report.cases)?;
    println!(
        "{} cases: ged {:.4} +- {:.4}, dice_match {:.4}, pooled ece {:.4}",
        report.cases.len(),
        report.mean_ged,
        report.std_ged,
        report.mean_dice_match,
        report.pooled_ece
    );

    let mut outputs = vec!["metrics.json", "cases.csv"];
    if let Some(raw) = &args.sweep_k {
        let k_list = parse_k_list(raw)?;
        let rows = ged_vs_samples(&model, &params, &samples, &k_list, seed, harmonize)?;
        tables::curve_csv(&args.out.join("curve.csv"), &rows)?;
        outputs.push("curve.csv");
        for r in &rows {
            println!("  k={:>3}: ged {:.4} +- {:.4}", r.k, r.mean, r.stderr);
        }
    }

    RunManifest::new(
        "eval",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "k": args.k,
            "split": args.split,
            "sweep_k": args.sweep_k,
            "harmonize": harmonize,
            "train_config": serde_json::to_value(&ck.config).map_err(Error::from)?,
        }),
        seed,
        &[&args.checkpoint, &args.data],
        &outputs,
    )
    .write(&args.out)?;
    Ok(())
}
