use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{train_on, TrainConfig};
use crate::dataset::Dataset;
use crate::detect::{evaluate_auc, score_clips, ScoreSeries};
use crate::error::{Error, Result};
use crate::model::Mode;

/// One trained configuration of the ablation matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: Mode,
    pub use_codebook: bool,
    /// AUC under the report's normalization.
    pub auc: Option<f64>,
    /// AUC of raw scores concatenated across clips.
    pub auc_unnormalized: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub error: Option<String>,
    pub seconds: f64,
    #[serde(skip)]
    pub scores: Option<ScoreSeries>,
}

impl AblationCell {
    pub fn temporal(&self) -> bool {
        self.mode == Mode::Prediction
    }

    pub fn dir_name(&self) -> String {
        format!(
            "{}_{}",
            self.mode.as_str(),
            if self.use_codebook { "codebook" } else { "plain" }
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub normalization: String,
    /// Rows in table order: (✗,✗), (✗,✓), (✓,✗), (✓,✓) for (temporal, codebook).
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, mode: Mode, use_codebook: bool) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.mode == mode && c.use_codebook == use_codebook)
    }

    /// Markdown table with columns Temporal, Codebook, AUC.
    pub fn table(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let mut s = String::from("| Temporal | Codebook | AUC |\n|---|---|---|\n");
        for c in &self.cells {
            let auc = match (c.auc, &c.error) {
                (Some(a), _) => format!("{:.1}", 100.0 * a),
                (None, Some(e)) => format!("failed: {e}"),
                (None, None) => "n/a".into(),
            };
            writeln!(s, "| {} | {} | {} |", mark(c.temporal()), mark(c.use_codebook), auc).unwrap();
        }
        s
    }

    /// Writes `ablation.md`, `ablation.csv` and `ablation.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let md = dir.join("ablation.md");
        fs::write(&md, self.table()).map_err(|e| Error::io(&md, e))?;
        let mut csv = String::from("temporal,codebook,auc,auc_unnormalized,seconds,error\n");
        for c in &self.cells {
            let opt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                csv,
                "{},{},{},{},{:.1},{}",
                c.temporal(),
                c.use_codebook,
                opt(c.auc),
                opt(c.auc_unnormalized),
                c.seconds,
                c.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            )
            .unwrap();
        }
        let p = dir.join("ablation.csv");
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("ablation.json");
        fs::write(&p, serde_json::to_string_pretty(self).expect("report serializes")).map_err(|e| Error::io(&p, e))
    }
}

/// Trains and evaluates {reconstruction, prediction} × {plain, codebook}.
/// A failing cell is recorded and the remaining cells still run.
/// `base.learning_rate`, when set, applies to every cell.
pub fn run_ablation(base: &TrainConfig, dataset: &Dataset, out: &Path, normalization: &str) -> Result<AblationReport> {
    crate::detect::registry().get(normalization)?;
    let mut cells = Vec::with_capacity(4);
    for (mode, use_codebook) in [
        (Mode::Reconstruction, false),
        (Mode::Reconstruction, true),
        (Mode::Prediction, false),
        (Mode::Prediction, true),
    ] {
        let started = Instant::now();
        let mut cell = AblationCell {
            mode,
            use_codebook,
            auc: None,
            auc_unnormalized: None,
            checkpoint: None,
            error: None,
            seconds: 0.0,
            scores: None,
        };
        let cfg = TrainConfig {
            mode,
            use_codebook,
            ..base.clone()
        };
        let dir = out.join(cell.dir_name());
        let result = (|| -> Result<()> {
            let trained = train_on(&cfg, dataset, &dir)?;
            cell.checkpoint = Some(trained.last_checkpoint.clone());
            let series = score_clips(&trained.model, &dataset.testing, cfg.batch_size)?;
            cell.auc = Some(evaluate_auc(&series, &dataset.labels, normalization)?.auc);
            cell.auc_unnormalized = Some(evaluate_auc(&series, &dataset.labels, "none")?.auc);
            series.write_csv_dir(&dir.join("scores"), normalization)?;
            cell.scores = Some(series);
            Ok(())
        })();
        if let Err(e) = result {
            log::warn!("ablation cell {} failed: {e}", cell.dir_name());
            cell.error = Some(e.to_string());
        }
        cell.seconds = started.elapsed().as_secs_f64();
        log::info!("ablation cell {}: auc {:?}", cell.dir_name(), cell.auc);
        cells.push(cell);
    }
    let report = AblationReport {
        normalization: normalization.to_string(),
        cells,
    };
    report.write(out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, tiny_dataset};
    use super::*;

    #[test]
    fn four_rows_in_table_order() {
        let tmp = tempfile::TempDir::new().unwrap();
        let ds = tiny_dataset(&tmp.path().join("data"));
        let report = run_ablation(&tiny_config(), &ds, &tmp.path().join("abl"), "per_video_minmax").unwrap();
        let rows: Vec<(bool, bool)> = report.cells.iter().map(|c| (c.temporal(), c.use_codebook)).collect();
        assert_eq!(rows, vec![(false, false), (false, true), (true, false), (true, true)]);
        assert!(report.cells.iter().all(|c| c.error.is_none()), "{}", report.table());
        let table = report.table();
        assert!(table.starts_with("| Temporal | Codebook | AUC |"));
        assert_eq!(table.lines().count(), 6);
        assert!(tmp.path().join("abl/ablation.csv").exists());
    }

    #[test]
    fn failing_cell_does_not_stop_the_rest() {
        let tmp = tempfile::TempDir::new().unwrap();
        let ds = tiny_dataset(&tmp.path().join("data"));
        let mut cfg = tiny_config();
        // Window longer than the clips: prediction cells fail, reconstruction cells run.
        cfg.network.n = 20;
        let report = run_ablation(&cfg, &ds, &tmp.path().join("abl"), "none").unwrap();
        assert!(report.cell(Mode::Prediction, true).unwrap().error.is_some());
        assert!(report.cell(Mode::Reconstruction, true).unwrap().auc.is_some());
    }
}
