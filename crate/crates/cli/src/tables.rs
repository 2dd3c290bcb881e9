//! CSV emitters. Every table has a header row and a fixed column order;
//! `docs/formats.md` documents each layout. Floats are written with Rust's
//! shortest-roundtrip formatting, so identical runs produce identical bytes.

use harmonizer_core::losses::LossReport;
use harmonizer_core::pipeline::{CaseMetrics, GedCurveRow, MetricsReport, Phase2Epoch};
use harmonizer_core::{Error, Result};
use std::path::Path;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn fail(path: &Path, e: csv::Error) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

fn write_rows(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(&header).map_err(|e| fail(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| fail(path, e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn f(v: f64) -> String {
    format!("{v}")
}

/// `epoch,seg,kl,harm[,ged],total` — the ged column is present only when the
/// distribution-matching term was part of the objective.
pub fn phase1_loss_csv(path: &Path, epochs: &[LossReport], with_ged: bool) -> Result<()> {
    let mut header = vec!["epoch".into(), "seg".into(), "kl".into(), "harm".into()];
    if with_ged {
        header.push("ged".into());
    }
    header.push("total".into());
    let rows = epochs
        .iter()
        .enumerate()
        .map(|(e, r)| {
            let mut row = vec![e.to_string(), f(r.seg), f(r.kl), f(r.harm)];
            if with_ged {
                row.push(f(r.ged));
            }
            row.push(f(r.total));
            row
        })
        .collect();
    write_rows(path, header, rows)
}

/// `epoch,mean_loss,loss_r0..,dice_r0..`
pub fn phase2_loss_csv(path: &Path, epochs: &[Phase2Epoch]) -> Result<()> {
    let raters = epochs.first().map_or(0, |e| e.per_rater_loss.len());
    let mut header = vec!["epoch".to_string(), "mean_loss".to_string()];
    header.extend((0..raters).map(|r| format!("loss_r{r}")));
    header.extend((0..raters).map(|r| format!("dice_r{r}")));
    let rows = epochs
        .iter()
        .enumerate()
        .map(|(e, ep)| {
            let mut row = vec![e.to_string(), f(ep.mean_loss)];
            row.extend(ep.per_rater_loss.iter().map(|&v| f(v)));
            row.extend(ep.per_rater_dice.iter().map(|&v| f(v)));
            row
        })
        .collect();
    write_rows(path, header, rows)
}

/// Per-case metric rows:
/// `case,ged,ged_raw,ged_k1_fallback,ged_clamped,dice_soft,dice_max,dice_match,dice_r0..,ece,brier,mean_entropy,consensus_area`
pub fn cases_csv(path: &Path, cases: &[CaseMetrics]) -> Result<()> {
    let raters = cases.first().map_or(0, |c| c.per_rater_dice.len());
    let mut header: Vec<String> = [
        "case",
        "ged",
        "ged_raw",
        "ged_k1_fallback",
        "ged_clamped",
        "dice_soft",
        "dice_max",
        "dice_match",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..raters).map(|r| format!("dice_r{r}")));
    header.extend(["ece", "brier", "mean_entropy", "consensus_area"].map(String::from));
    let rows = cases
        .iter()
        .map(|c| {
            let mut row = vec![
                c.index.to_string(),
                f(c.ged),
                f(c.ged_raw),
                c.ged_k1_fallback.to_string(),
                c.ged_clamped.to_string(),
                f(c.dice_soft),
                f(c.dice_max),
                f(c.dice_match),
            ];
            row.extend(c.per_rater_dice.iter().map(|&v| f(v)));
            row.extend([f(c.ece), f(c.brier), f(c.mean_entropy), f(c.consensus_area)]);
            row
        })
        .collect();
    write_rows(path, header, rows)
}

/// `k,mean,std,stderr,k1_fallback` — distribution distance vs sample count.
pub fn curve_csv(path: &Path, rows: &[GedCurveRow]) -> Result<()> {
    let header = ["k", "mean", "std", "stderr", "k1_fallback"]
        .map(String::from)
        .to_vec();
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                f(r.mean),
                f(r.std),
                f(r.stderr),
                r.k1_fallback.to_string(),
            ]
        })
        .collect();
    write_rows(path, header, body)
}

/// One robustness row per perturbation (plus the identity row per model).
pub struct RobustRow {
    pub model: String,
    pub kind: String,
    pub magnitude: f64,
    pub clean_dice: f64,
    pub perturbed_dice: f64,
}

/// `model,kind,magnitude,clean_dice,perturbed_dice,abs_delta`
pub fn robustness_csv(path: &Path, rows: &[RobustRow]) -> Result<()> {
    let header = [
        "model",
        "kind",
        "magnitude",
        "clean_dice",
        "perturbed_dice",
        "abs_delta",
    ]
    .map(String::from)
    .to_vec();
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.kind.clone(),
                f(r.magnitude),
                f(r.clean_dice),
                f(r.perturbed_dice),
                f((r.clean_dice - r.perturbed_dice).abs()),
            ]
        })
        .collect();
    write_rows(path, header, body)
}

/// `rater,ece,brier` with a trailing `mean` row.
pub fn ece_table_csv(path: &Path, per_rater: &[(f64, f64)]) -> Result<()> {
    let header = ["rater", "ece", "brier"].map(String::from).to_vec();
    let mut body: Vec<Vec<String>> = per_rater
        .iter()
        .enumerate()
        .map(|(r, &(e, b))| vec![r.to_string(), f(e), f(b)])
        .collect();
    let n = per_rater.len() as f64;
    let mean_e = per_rater.iter().map(|&(e, _)| e).sum::<f64>() / n;
    let mean_b = per_rater.iter().map(|&(_, b)| b).sum::<f64>() / n;
    body.push(vec!["mean".to_string(), f(mean_e), f(mean_b)]);
    write_rows(path, header, body)
}

/// `class,count,median_entropy` over TP/FP/FN/TN (4 rows).
pub fn entropy_correctness_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let header = ["class", "count", "median_entropy"].map(String::from).to_vec();
    let names = ["tp", "fp", "fn", "tn"];
    let body = (0..4)
        .map(|c| {
            vec![
                names[c].to_string(),
                report.correctness.counts[c].to_string(),
                report.correctness.median_entropy[c].map_or(String::new(), f),
            ]
        })
        .collect();
    write_rows(path, header, body)
}

/// `regime,count,mean_entropy,median_entropy` over the three agreement
/// regimes (3 rows).
pub fn entropy_agreement_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let header = ["regime", "count", "mean_entropy", "median_entropy"]
        .map(String::from)
        .to_vec();
    let names = ["agree", "somewhat", "disagree"];
    let body = (0..3)
        .map(|r| {
            vec![
                names[r].to_string(),
                report.agreement.counts[r].to_string(),
                report.agreement.mean_entropy[r].map_or(String::new(), f),
                report.agreement.median_entropy[r].map_or(String::new(), f),
            ]
        })
        .collect();
    write_rows(path, header, body)
}

/// `bin,count,min_area,max_area,mean_dice` over the three size terciles.
pub fn size_bins_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let header = ["bin", "count", "min_area", "max_area", "mean_dice"]
        .map(String::from)
        .to_vec();
    let names = ["small", "medium", "large"];
    let body = report
        .size_bins
        .iter()
        .enumerate()
        .map(|(i, b)| {
            vec![
                names[i].to_string(),
                b.count.to_string(),
                f(b.min_area),
                f(b.max_area),
                f(b.mean_dice),
            ]
        })
        .collect();
    write_rows(path, header, body)
}

/// Per-case scatter data: `case,mean_entropy,ged,dice_match,consensus_area`.
pub fn entropy_scatter_csv(path: &Path, cases: &[CaseMetrics]) -> Result<()> {
    let header = ["case", "mean_entropy", "ged", "dice_match", "consensus_area"]
        .map(String::from)
        .to_vec();
    let body = cases
        .iter()
        .map(|c| {
            vec![
                c.index.to_string(),
                f(c.mean_entropy),
                f(c.ged),
                f(c.dice_match),
                f(c.consensus_area),
            ]
        })
        .collect();
    write_rows(path, header, body)
}

/// `bin,personalized,plain` — mean log-magnitude spectrum of the final
/// decoder feature with and without personalization.
pub fn spectrum_csv(path: &Path, personalized: &[f64], plain: &[f64]) -> Result<()> {
    let header = ["bin", "personalized", "plain"].map(String::from).to_vec();
    let body = personalized
        .iter()
        .zip(plain)
        .enumerate()
        .map(|(i, (&p, &q))| vec![i.to_string(), f(p), f(q)])
        .collect();
    write_rows(path, header, body)
}
