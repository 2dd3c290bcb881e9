//! `harmonizer gen`: synthesize a multi-rater dataset into a directory.

use crate::manifest::RunManifest;
use crate::{seed_override, CliError, CliResult};
use clap::Args;
use harmonizer_core::synthdata::{gen_dataset, DatasetConfig};
use harmonizer_core::Error;
use std::path::PathBuf;

#[derive(Args)]
pub struct GenArgs {
    /// Training sample count.
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    /// Validation sample count.
    #[arg(long, default_value_t = 20)]
    pub val: usize,
    /// Test sample count.
    #[arg(long, default_value_t = 50)]
    pub test: usize,
    /// Raters per sample (1..=4).
    #[arg(long, default_value_t = 4)]
    pub raters: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Root seed (falls back to HZ_SEED, then 7).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restrict this scanner domain to the test split.
    #[arg(long)]
    pub holdout_domain: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(args: GenArgs) -> CliResult<()> {
    let seed = seed_override(args.seed)?.unwrap_or(7);
    if args.out.exists() && !args.force {
        let occupied = std::fs::read_dir(&args.out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if occupied {
            return Err(CliError::Core(Error::invalid(
                "gen",
                format!(
                    "output directory '{}' is not empty (pass --force to overwrite)",
                    args.out.display()
                ),
            )));
        }
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Core(Error::io(args.out.display().to_string(), e)))?;

    let cfg = DatasetConfig {
        n_train: args.train,
        n_val: args.val,
        n_test: args.test,
        num_raters: args.raters,
        image_size: args.size,
        seed,
        holdout_domain: args.holdout_domain,
    };
    let manifest = gen_dataset(&cfg, &args.out)?;
    let total = manifest.counts.train + manifest.counts.val + manifest.counts.test;
    println!(
        "wrote {total} samples ({} train / {} val / {} test), {} raters, to {}",
        manifest.counts.train,
        manifest.counts.val,
        manifest.counts.test,
        manifest.num_raters,
        args.out.display()
    );

    RunManifest::new(
        "gen",
        serde_json::to_value(&cfg).map_err(Error::from)?,
        seed,
        &[],
        &["manifest.json", "img_*.bin", "mask_*.bin"],
    )
    .write(&args.out)?;
    Ok(())
}
