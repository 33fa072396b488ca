//! Trains the four nested variants under one seed and tabulates them.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AblationConfig, Branch, Model, ModelDims};
use crate::training::{train, EpochRecord, TrainConfig};

/// Row label and variant name, in table order.
pub const ABLATION_ROWS: [(&str, &str); 4] = [
    ("Baseline", "baseline"),
    ("+ SEU", "seu"),
    ("+ TEU", "seu+teu"),
    ("+ Multi-Head Self Attention", "full"),
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: &'static str,
    pub variant: &'static str,
    pub parameters: usize,
    /// Held-out accuracy after the last epoch, percent.
    pub accuracy: f64,
    /// Best held-out accuracy over all epochs, percent.
    pub best_accuracy: f64,
    pub best_epoch: usize,
    /// Wall-clock training time; not part of the table.
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub train_size: usize,
    pub test_size: usize,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Markdown table, one row per variant.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Method | Parameters | Accuracy (%) | Best accuracy (%) | Best epoch |\n");
        s.push_str("|---|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {:.2} | {:.2} | {} |",
                r.label, r.parameters, r.accuracy, r.best_accuracy, r.best_epoch
            );
        }
        s
    }
}

/// Splits `data` with `cfg.holdout` and `cfg.seed`, then trains every
/// variant of [`ABLATION_ROWS`] from a model seeded with `cfg.seed`.
/// `on_record` receives the variant name with every log record.
pub fn run_ablation(
    data: &Dataset,
    branch: Branch,
    dims: &ModelDims,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&str, &EpochRecord),
) -> Result<AblationReport> {
    if cfg.holdout <= 0.0 {
        return Err(Error::Config("ablation needs a held-out split (holdout > 0)".into()));
    }
    let (train_set, test_set) = data.split(cfg.holdout, cfg.seed)?;
    if test_set.is_empty() {
        return Err(Error::Config(format!(
            "holdout {} leaves no held-out examples out of {}",
            cfg.holdout,
            data.len()
        )));
    }
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, variant) in ABLATION_ROWS {
        let model = Model::build(AblationConfig::variant(variant, branch)?, dims.clone(), cfg.seed)?;
        let parameters = model.parameter_count();
        let start = Instant::now();
        let outcome = train(model, &train_set, Some(&test_set), cfg, |r| on_record(variant, r))?;
        let best = outcome
            .test_records()
            .find(|r| r.epoch == outcome.best_epoch)
            .map_or(f64::NAN, |r| r.accuracy);
        rows.push(AblationRow {
            label,
            variant,
            parameters,
            accuracy: outcome.final_test_accuracy().unwrap_or(f64::NAN),
            best_accuracy: best,
            best_epoch: outcome.best_epoch,
            elapsed: start.elapsed(),
        });
    }
    Ok(AblationReport {
        rows,
        train_size: train_set.len(),
        test_size: test_set.len(),
    })
}
