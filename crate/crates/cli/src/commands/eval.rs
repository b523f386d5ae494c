use std::fs::File;
use std::io::BufWriter;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use stratoseg::data::load_labels;
use stratoseg::metrics::evaluate_case;
use stratoseg::{MetricReport, OrganMetrics};

use crate::cases::{data_dir, label_path, load_catalog, match_labels};
use crate::config::RunConfig;

#[derive(Serialize)]
struct Skip<'a> {
    case: &'a str,
    reason: &'a str,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    report: &'a MetricReport,
    cases: Vec<&'a str>,
    skipped: Vec<Skip<'a>>,
}

/// Writes `metrics.csv` and `metrics.json`; fails when no case could be scored.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    let (pred_dir, gt_dir) = (
        cfg.pred_dir.as_ref().expect("validated"),
        cfg.gt_dir.as_ref().expect("validated"),
    );
    let catalog = match (&cfg.catalog, &cfg.data_dir) {
        (None, None) => load_catalog(cfg, gt_dir)?,
        _ => load_catalog(cfg, &data_dir(cfg)?)?,
    };
    let matching = match_labels(pred_dir, gt_dir)?;
    for (case, reason) in &matching.skipped {
        log::warn!("skipping {case}: {reason}");
    }
    if matching.pairs.is_empty() {
        bail!(
            "no case has both a prediction and ground truth; skipped {}",
            matching.skipped.len()
        );
    }
    let per_case: Vec<Vec<OrganMetrics>> = matching
        .pairs
        .par_iter()
        .map(|case| {
            let pred = load_labels(&label_path(pred_dir, case), Some(&catalog))?;
            let truth = load_labels(&label_path(gt_dir, case), Some(&catalog))?;
            evaluate_case(&pred, &truth, &catalog).with_context(|| format!("scoring {case}"))
        })
        .collect::<Result<_>>()?;
    let report = MetricReport::from_cases(&catalog, &per_case);
    report.write_csv(BufWriter::new(File::create(cfg.output_dir.join("metrics.csv"))?))?;
    let full = EvalReport {
        report: &report,
        cases: matching.pairs.iter().map(String::as_str).collect(),
        skipped: matching
            .skipped
            .iter()
            .map(|(case, reason)| Skip { case, reason })
            .collect(),
    };
    std::fs::write(
        cfg.output_dir.join("metrics.json"),
        serde_json::to_string_pretty(&full)?,
    )?;
    log::info!(
        "scored {} cases, skipped {}; overall DSC {:.4}",
        matching.pairs.len(),
        matching.skipped.len(),
        report.overall.dsc
    );
    Ok(())
}
