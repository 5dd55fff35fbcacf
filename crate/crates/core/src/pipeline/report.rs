//! Result tables: one row per patch, `mean ± SEM` of the ground-truth and
//! target cosines on each split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_error, PipelineError, Result, Split};
use crate::attack::{AttackTrace, EvaluationTable, MeanSem};
use crate::losses::AttackMode;

/// Placeholder for a column with no value (the target columns of an
/// untargeted run).
pub const EMPTY_CELL: &str = "-";

pub const REPORT_COLUMNS: [&str; 8] = [
    "patch",
    "attack",
    "cos(train, gt)",
    "cos(train, target)",
    "cos(val, gt)",
    "cos(val, target)",
    "cos(test, gt)",
    "cos(test, target)",
];

const CSV_VALUE_COLUMNS: [&str; 6] = [
    "train_gt",
    "train_target",
    "val_gt",
    "val_target",
    "test_gt",
    "test_target",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub patch_name: String,
    pub attack_type: String,
    /// train/gt, train/target, val/gt, val/target, test/gt, test/target.
    pub cells: [Option<MeanSem>; 6],
}

fn mode_label(mode: AttackMode) -> &'static str {
    match mode {
        AttackMode::Untargeted => "Untargeted",
        AttackMode::Targeted => "Targeted",
    }
}

impl ReportRow {
    pub fn from_evaluation(patch_name: &str, mode: AttackMode, table: &EvaluationTable) -> Self {
        let mut cells = [None; 6];
        for (i, split) in Split::ALL.iter().enumerate() {
            if let Some(s) = table.split(*split) {
                cells[2 * i] = Some(s.gt);
                cells[2 * i + 1] = s.target;
            }
        }
        ReportRow {
            patch_name: patch_name.to_string(),
            attack_type: mode_label(mode).to_string(),
            cells,
        }
    }

    fn rendered_cells(&self) -> Vec<String> {
        let mut out = vec![self.patch_name.clone(), self.attack_type.clone()];
        out.extend(self.cells.iter().map(|c| format_mean_sem(c.as_ref())));
        out
    }
}

/// `"0.400 ± 0.100"`; an undefined SEM renders as `n/a`, a missing value as
/// [`EMPTY_CELL`].
pub fn format_mean_sem(value: Option<&MeanSem>) -> String {
    match value {
        None => EMPTY_CELL.to_string(),
        Some(MeanSem {
            mean,
            sem: Some(sem),
        }) => format!("{mean:.3} ± {sem:.3}"),
        Some(MeanSem { mean, sem: None }) => format!("{mean:.3} ± n/a"),
    }
}

/// Cells joined by `" | "` without padding.
pub fn render_row(row: &ReportRow) -> String {
    row.rendered_cells().join(" | ")
}

/// Header, rule and rows with every column padded to its widest cell.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut grid: Vec<Vec<String>> = vec![REPORT_COLUMNS.iter().map(|s| s.to_string()).collect()];
    grid.extend(rows.iter().map(ReportRow::rendered_cells));
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len())
        .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };
    let rule = widths
        .iter()
        .map(|w| "-".repeat(*w))
        .collect::<Vec<_>>()
        .join("-+-");
    let mut out = line(&grid[0]);
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for r in &grid[1..] {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn csv_error(path: &Path, e: csv::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Full-precision CSV: mean, SEM and n-independent columns per cell; missing
/// values are empty fields.
fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["patch".to_string(), "attack".to_string()];
    for c in CSV_VALUE_COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_sem"));
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        let mut rec = vec![row.patch_name.clone(), row.attack_type.clone()];
        for cell in &row.cells {
            rec.push(cell.map(|c| c.mean.to_string()).unwrap_or_default());
            rec.push(
                cell.and_then(|c| c.sem)
                    .map(|s| s.to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// Paths produced by [`write_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub table: PathBuf,
    pub traces: Vec<PathBuf>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `report.csv`, `report.txt` and one `trace_<name>.csv` per trace
/// into `dir`.
pub fn write_report(
    rows: &[ReportRow],
    traces: &[(String, &AttackTrace)],
    dir: &Path,
) -> Result<ReportFiles> {
    if rows.is_empty() {
        return Err(PipelineError::InvalidArgument("report has no rows".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let csv = dir.join("report.csv");
    write_csv(rows, &csv)?;
    let table = dir.join("report.txt");
    std::fs::write(&table, render_table(rows)).map_err(|e| io_error(&table, e))?;
    let mut trace_paths = Vec::with_capacity(traces.len());
    for (name, trace) in traces {
        let path = dir.join(format!("trace_{}.csv", file_stem(name)));
        std::fs::write(&path, trace.to_csv()).map_err(|e| io_error(&path, e))?;
        trace_paths.push(path);
    }
    Ok(ReportFiles {
        csv,
        table,
        traces: trace_paths,
    })
}

/// An evaluation table tagged with the patch it measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEvaluation {
    pub patch_name: String,
    pub mode: AttackMode,
    pub table: EvaluationTable,
}

impl StoredEvaluation {
    pub fn row(&self) -> ReportRow {
        ReportRow::from_evaluation(&self.patch_name, self.mode, &self.table)
    }
}

pub fn write_evaluation(evaluation: &StoredEvaluation, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(evaluation).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn load_evaluation(path: &Path) -> Result<StoredEvaluation> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::MissingFile(path.display().to_string()),
        _ => io_error(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::SplitEvaluation;

    fn ms(mean: f64, sem: f64) -> Option<MeanSem> {
        Some(MeanSem {
            mean,
            sem: Some(sem),
        })
    }

    #[test]
    fn two_sample_cell() {
        let m = MeanSem::from_samples(&[0.3, 0.5]).unwrap();
        assert_eq!(format_mean_sem(Some(&m)), "0.400 ± 0.100");
    }

    #[test]
    fn single_sample_and_missing_cells() {
        let m = MeanSem::from_samples(&[0.25]).unwrap();
        assert_eq!(format_mean_sem(Some(&m)), "0.250 ± n/a");
        assert_eq!(format_mean_sem(None), "-");
    }

    #[test]
    fn stored_values_render_verbatim() {
        let row = ReportRow {
            patch_name: "Eyeglasses".into(),
            attack_type: "Targeted".into(),
            cells: [
                ms(0.041, 0.052),
                ms(0.648, 0.020),
                ms(0.317, 0.004),
                ms(0.451, 0.021),
                ms(0.305, 0.024),
                ms(0.363, 0.024),
            ],
        };
        assert_eq!(
            render_row(&row),
            "Eyeglasses | Targeted | 0.041 ± 0.052 | 0.648 ± 0.020 | 0.317 ± 0.004 | 0.451 ± 0.021 | 0.305 ± 0.024 | 0.363 ± 0.024"
        );
    }

    #[test]
    fn untargeted_row_has_placeholders() {
        let split = |s, v: &[f64]| SplitEvaluation {
            split: s,
            n: v.len(),
            gt: MeanSem::from_samples(v).unwrap(),
            target: None,
            gt_cosines: v.to_vec(),
            target_cosines: vec![],
        };
        let table = EvaluationTable {
            splits: vec![
                split(Split::Train, &[0.1, 0.2]),
                split(Split::Val, &[0.3, 0.5]),
                split(Split::Test, &[0.4, 0.4]),
            ],
        };
        let row = ReportRow::from_evaluation("Forehead", AttackMode::Untargeted, &table);
        assert_eq!(
            render_row(&row),
            "Forehead | Untargeted | 0.150 ± 0.050 | - | 0.400 ± 0.100 | - | 0.400 ± 0.000 | -"
        );
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&[row], &[], dir.path()).unwrap();
        let txt = std::fs::read_to_string(files.table).unwrap();
        assert!(txt.lines().next().unwrap().starts_with("patch"));
        let csv = std::fs::read_to_string(files.csv).unwrap();
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("Forehead,Untargeted,0.15"));
    }
}
