//! `harmonizer analyze`: the full diagnostic bundle for one checkpoint —
//! per-rater calibration, uncertainty-by-correctness and -agreement tables,
//! size-stratified Dice, entropy scatter data, the decoder-feature frequency
//! spectrum with and without personalization, static SVG plots, and sample
//! grid images.

use crate::manifest::RunManifest;
use crate::tables::{
    ece_table_csv, entropy_agreement_csv, entropy_correctness_csv, entropy_scatter_csv,
    size_bins_csv, spectrum_csv,
};
use crate::{grids, parse_split, plots, seed_override, CliError, CliResult};
use clap::Args;
use harmonizer_core::metrics::spectral::{spectral_response, upper_quartile_mean};
use harmonizer_core::metrics::{brier, ece};
use harmonizer_core::model::HarmonizerModel;
use harmonizer_core::pipeline::{
    evaluate, final_decoder_feature, infer_sample_set, Checkpoint, MetricsReport, ECE_BINS,
};
use harmonizer_core::rng::derive_seed;
use harmonizer_core::synthdata::{load_dataset, MultiRaterSample};
use harmonizer_core::tensor::params::ParamSet;
use harmonizer_core::Error;
use std::path::PathBuf;

/// How many images feed the mean spectrum.
const SPECTRUM_IMAGES: usize = 8;
/// How many hypothesis tiles a sample grid shows.
const GRID_HYPOTHESES: usize = 4;

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Checkpoint to analyze.
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
    /// Split to analyze.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Seed (falls back to HZ_SEED, then the checkpoint's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sample-grid images to render.
    #[arg(long, default_value_t = 4)]
    pub grid_samples: usize,
}

/// Pooled per-rater calibration: each rater's personalized prediction scored
/// against that rater's own annotations over every case.
fn per_rater_calibration(
    model: &HarmonizerModel,
    params: &ParamSet,
    samples: &[&MultiRaterSample],
    seed: u64,
    harmonize: bool,
) -> CliResult<Vec<(f64, f64)>> {
    let raters = model.config.backbone.num_raters;
    let annotated = samples[0].masks.len();
    if raters != annotated {
        return Err(CliError::Core(Error::invalid(
            "analyze",
            format!(
                "per-rater calibration needs the model personalized for the dataset's raters \
                 (model has {raters}, dataset has {annotated})"
            ),
        )));
    }
    let mut table = Vec::with_capacity(raters);
    for r in 0..raters {
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for s in samples {
            let pred = model.predict_personalized(
                params,
                &s.image,
                r,
                derive_seed(seed, &[300 + r as u64, s.index as u64]),
                harmonize,
            )?;
            probs.extend_from_slice(pred.data());
            labels.extend_from_slice(s.masks[r].data());
        }
        table.push((ece(&probs, &labels, ECE_BINS)?, brier(&probs, &labels)?));
    }
    Ok(table)
}

/// Mean frequency response of the final decoder feature over up to
/// [`SPECTRUM_IMAGES`] images, personalized for rater 0 vs not personalized.
/// Both settings share each image's seed, so the latent draw is identical and
/// the curves differ only by the personalizer.
fn mean_spectra(
    model: &HarmonizerModel,
    params: &ParamSet,
    samples: &[&MultiRaterSample],
    seed: u64,
    harmonize: bool,
) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut on: Vec<f64> = Vec::new();
    let mut off: Vec<f64> = Vec::new();
    let chosen = &samples[..samples.len().min(SPECTRUM_IMAGES)];
    for s in chosen {
        let img_seed = derive_seed(seed, &[400, s.index as u64]);
        let feat_on = final_decoder_feature(model, params, &s.image, Some(0), img_seed, harmonize)?;
        let feat_off = final_decoder_feature(model, params, &s.image, None, img_seed, harmonize)?;
        let resp_on = spectral_response(&feat_on)?;
        let resp_off = spectral_response(&feat_off)?;
        if on.is_empty() {
            on = vec![0.0; resp_on.len()];
            off = vec![0.0; resp_off.len()];
        }
        for (acc, v) in on.iter_mut().zip(&resp_on) {
            *acc += v / chosen.len() as f64;
        }
        for (acc, v) in off.iter_mut().zip(&resp_off) {
            *acc += v / chosen.len() as f64;
        }
    }
    Ok((on, off))
}

fn render_grids(
    model: &HarmonizerModel,
    params: &ParamSet,
    samples: &[&MultiRaterSample],
    args: &AnalyzeArgs,
    seed: u64,
    harmonize: bool,
) -> CliResult<Vec<String>> {
    let mut names = Vec::new();
    for s in &samples[..samples.len().min(args.grid_samples)] {
        let preds = infer_sample_set(
            model,
            params,
            &s.image,
            args.k,
            derive_seed(seed, &[s.index as u64]),
            harmonize,
        )?;
        let mean = preds.mean_mask();
        let mut tiles = vec![&s.image, &mean];
        tiles.extend(preds.masks().iter().take(GRID_HYPOTHESES));
        tiles.extend(s.masks.iter());
        let name = format!("grid_{:03}.png", s.index);
        grids::sample_grid_png(&args.out.join(&name), &tiles)?;
        names.push(name);
    }
    Ok(names)
}

fn plot_bundle(out: &std::path::Path, report: &MetricsReport, on: &[f64], off: &[f64]) -> CliResult<()> {
    let points: Vec<(f64, f64)> = report
        .cases
        .iter()
        .map(|c| (c.mean_entropy, c.ged))
        .collect();
    plots::scatter_svg(
        &out.join("scatter.svg"),
        &points,
        "Uncertainty vs distribution distance",
        "mean entropy",
        "GED",
    )?;
    let regime_names = ["agree", "somewhat", "disagree"];
    let bars: Vec<(String, f64)> = (0..3)
        .map(|r| {
            (
                regime_names[r].to_string(),
                report.agreement.mean_entropy[r].unwrap_or(0.0),
            )
        })
        .collect();
    plots::bar_svg(
        &out.join("agreement.svg"),
        &bars,
        "Entropy by rater-agreement regime",
        "mean entropy",
    )?;
    plots::line_series_svg(
        &out.join("spectrum.svg"),
        &[("personalized", on), ("plain", off)],
        "Decoder-feature frequency response",
        "frequency bin",
        "mean log magnitude",
    )?;
    Ok(())
}

pub fn run(args: AnalyzeArgs) -> CliResult<()> {
    let split = parse_split(&args.split)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (model, params, _, _) = ck.restore()?;
    let dataset = load_dataset(&args.data)?;
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(CliError::Core(Error::invalid(
            "analyze",
            format!("dataset has no {} split", args.split),
        )));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Core(Error::io(args.out.display().to_string(), e)))?;
    let seed = seed_override(args.seed)?.unwrap_or(ck.config.seed);
    let harmonize = ck.config.harmonizer_enabled;

    let report = evaluate(&model, &params, &samples, args.k, seed, harmonize)?;
    entropy_correctness_csv(&args.out.join("entropy_correctness.csv"), &report)?;
    entropy_agreement_csv(&args.out.join("entropy_agreement.csv"), &report)?;
    size_bins_csv(&args.out.join("size_bins.csv"), &report)?;
    entropy_scatter_csv(&args.out.join("entropy_scatter.csv"), &report.cases)?;

    let calib = per_rater_calibration(&model, &params, &samples, seed, harmonize)?;
    ece_table_csv(&args.out.join("ece_table.csv"), &calib)?;

    let (on, off) = mean_spectra(&model, &params, &samples, seed, harmonize)?;
    spectrum_csv(&args.out.join("spectrum.csv"), &on, &off)?;
    let summary = serde_json::json!({
        "upper_quartile_personalized": upper_quartile_mean(&on),
        "upper_quartile_plain": upper_quartile_mean(&off),
        "bins": on.len(),
        "images": samples.len().min(SPECTRUM_IMAGES),
    });
    std::fs::write(
        args.out.join("spectrum_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )
    .map_err(|e| CliError::Core(Error::io("spectrum_summary.json".to_string(), e)))?;

    plot_bundle(&args.out, &report, &on, &off)?;
    let grid_names = render_grids(&model, &params, &samples, &args, seed, harmonize)?;

    println!(
        "analyzed {} cases: pooled ECE {:.4}, pooled Brier {:.4}, mean GED {:.4}",
        report.cases.len(),
        report.pooled_ece,
        report.pooled_brier,
        report.mean_ged
    );
    println!(
        "spectrum upper-quartile mean: personalized {:.4}, plain {:.4}",
        upper_quartile_mean(&on),
        upper_quartile_mean(&off)
    );

    let mut outputs = vec![
        "entropy_correctness.csv".to_string(),
        "entropy_agreement.csv".to_string(),
        "size_bins.csv".to_string(),
        "entropy_scatter.csv".to_string(),
        "ece_table.csv".to_string(),
        "spectrum.csv".to_string(),
        "spectrum_summary.json".to_string(),
        "scatter.svg".to_string(),
        "agreement.svg".to_string(),
        "spectrum.svg".to_string(),
    ];
    outputs.extend(grid_names);
    let output_refs: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
    RunManifest::new(
        "analyze",
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "k": args.k,
            "split": args.split,
            "grid_samples": args.grid_samples,
        }),
        seed,
        &[&args.checkpoint, &args.data],
        &output_refs,
    )
    .write(&args.out)?;
    Ok(())
}
