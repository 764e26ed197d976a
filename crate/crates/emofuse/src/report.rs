//! Result aggregation into markdown / CSV tables.
//!
//! Reporting is pure: tables are built only from `result.json` records, so
//! any report can be regenerated bit-identically after the fact. Rows are
//! models (plan ids, baseline hoisted first), columns are target datasets,
//! cells are seed-averaged macro-F1 with the column maximum bold and `*`
//! marking significance against the baseline row.

use crate::error::{Error, Result};
use crate::experiments::ResultRecord;
use crate::metrics::t_test;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub mean_f1: f64,
    pub per_seed: Vec<f64>,
    /// Welch-test verdict against the baseline row; `None` when no test
    /// was possible (missing baseline, fewer than two seeds, degenerate
    /// variance).
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub is_baseline: bool,
    pub cells: Vec<Option<ReportCell>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub datasets: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn ensure_plain(name: &str) -> Result<()> {
    if name.contains([',', ';', '\n', '|']) {
        return Err(Error::InvalidArgument(format!(
            "name '{name}' contains reserved punctuation"
        )));
    }
    Ok(())
}

/// Groups records into the table. Deterministic regardless of record
/// order: datasets and models sort alphabetically (baseline row first),
/// per-seed scores sort by seed.
pub fn table_from_records(
    records: &[ResultRecord],
    baseline: Option<&str>,
) -> Result<ReportTable> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no result records".into()));
    }
    if let Some(base) = baseline {
        if !records.iter().any(|r| r.plan_id == base) {
            return Err(Error::InvalidArgument(format!(
                "baseline row '{base}' has no result records"
            )));
        }
    }

    let mut datasets: Vec<String> = records.iter().map(|r| r.datasets[0].clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut models: Vec<String> = records.iter().map(|r| r.plan_id.clone()).collect();
    models.sort();
    models.dedup();
    if let Some(base) = baseline {
        models.retain(|m| m != base);
        models.insert(0, base.to_string());
    }
    for name in datasets.iter().chain(&models) {
        ensure_plain(name)?;
    }

    let cell_scores = |model: &str, dataset: &str| -> Vec<f64> {
        let mut scored: Vec<(u64, f64)> = records
            .iter()
            .filter(|r| r.plan_id == model && r.datasets[0] == dataset)
            .map(|r| (r.seed, r.macro_f1))
            .collect();
        scored.sort_by_key(|&(seed, _)| seed);
        scored.into_iter().map(|(_, f1)| f1).collect()
    };

    let mut rows = Vec::with_capacity(models.len());
    for model in &models {
        let is_baseline = baseline == Some(model.as_str());
        let cells = datasets
            .iter()
            .map(|dataset| {
                let per_seed = cell_scores(model, dataset);
                if per_seed.is_empty() {
                    return None;
                }
                let mean_f1 = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
                let significant = if is_baseline {
                    None
                } else {
                    baseline.and_then(|base| {
                        let base_scores = cell_scores(base, dataset);
                        t_test(&per_seed, &base_scores)
                            .ok()
                            .map(|r| r.significant)
                    })
                };
                Some(ReportCell {
                    mean_f1,
                    per_seed,
                    significant,
                })
            })
            .collect();
        rows.push(ReportRow {
            model: model.clone(),
            is_baseline,
            cells,
        });
    }
    Ok(ReportTable { datasets, rows })
}

fn column_max(table: &ReportTable, col: usize) -> Option<f64> {
    table
        .rows
        .iter()
        .filter_map(|r| r.cells[col].as_ref())
        .map(|c| c.mean_f1)
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

/// Renders the canonical markdown table: column maxima bold (ties all
/// bold), `*` for rows significant against the baseline at p < 0.05.
pub fn render_markdown(table: &ReportTable) -> String {
    let mut out = String::new();
    out.push_str("| model |");
    for d in &table.datasets {
        out.push_str(&format!(" {d} |"));
    }
    out.push('\n');
    out.push_str("| --- |");
    for _ in &table.datasets {
        out.push_str(" --- |");
    }
    out.push('\n');

    let maxima: Vec<Option<f64>> = (0..table.datasets.len())
        .map(|c| column_max(table, c))
        .collect();
    for row in &table.rows {
        let label = if row.is_baseline {
            format!("{} (baseline)", row.model)
        } else {
            row.model.clone()
        };
        out.push_str(&format!("| {label} |"));
        for (c, cell) in row.cells.iter().enumerate() {
            match cell {
                None => out.push_str(" — |"),
                Some(cell) => {
                    let mut text = format!("{:.4}", cell.mean_f1);
                    if cell.significant == Some(true) {
                        text.push_str("\\*");
                    }
                    if maxima[c] == Some(cell.mean_f1) {
                        text = format!("**{text}**");
                    }
                    out.push_str(&format!(" {text} |"));
                }
            }
        }
        out.push('\n');
    }
    out
}

/// CSV form of the same table; floats use the shortest exact
/// representation so parsing reproduces them bit-for-bit.
pub fn render_csv(table: &ReportTable) -> String {
    let mut out = String::from("model,is_baseline,dataset,mean_f1,per_seed,significant\n");
    for row in &table.rows {
        for (c, cell) in row.cells.iter().enumerate() {
            let Some(cell) = cell else { continue };
            let per_seed = cell
                .per_seed
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";");
            let significant = match cell.significant {
                Some(true) => "true",
                Some(false) => "false",
                None => "",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.model, row.is_baseline, table.datasets[c], cell.mean_f1, per_seed, significant
            ));
        }
    }
    out
}

/// Inverse of [`render_csv`].
pub fn parse_csv(text: &str) -> Result<ReportTable> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "model,is_baseline,dataset,mean_f1,per_seed,significant" {
        return Err(Error::Malformed {
            line: 1,
            msg: format!("unexpected report CSV header '{header}'"),
        });
    }

    struct Parsed {
        model: String,
        is_baseline: bool,
        dataset: String,
        cell: ReportCell,
    }
    let mut parsed: Vec<Parsed> = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Malformed {
                line: lineno,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let bad = |msg: String| Error::Malformed { line: lineno, msg };
        let mean_f1: f64 = fields[3]
            .parse()
            .map_err(|e| bad(format!("mean_f1: {e}")))?;
        let per_seed: Vec<f64> = fields[4]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("per_seed: {e}")))?;
        let significant = match fields[5] {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => return Err(bad(format!("significant: '{other}'"))),
        };
        parsed.push(Parsed {
            model: fields[0].to_string(),
            is_baseline: fields[1] == "true",
            dataset: fields[2].to_string(),
            cell: ReportCell {
                mean_f1,
                per_seed,
                significant,
            },
        });
    }
    if parsed.is_empty() {
        return Err(Error::InvalidArgument("empty report CSV".into()));
    }

    let mut datasets: Vec<String> = parsed.iter().map(|p| p.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut models: Vec<(String, bool)> = parsed
        .iter()
        .map(|p| (p.model.clone(), p.is_baseline))
        .collect();
    models.sort();
    models.dedup();
    models.sort_by_key(|(_, is_baseline)| !*is_baseline);

    let rows = models
        .iter()
        .map(|(model, is_baseline)| ReportRow {
            model: model.clone(),
            is_baseline: *is_baseline,
            cells: datasets
                .iter()
                .map(|d| {
                    parsed
                        .iter()
                        .find(|p| &p.model == model && &p.dataset == d)
                        .map(|p| p.cell.clone())
                })
                .collect(),
        })
        .collect();
    Ok(ReportTable { datasets, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{Family, Timings};

    fn record(plan: &str, dataset: &str, seed: u64, f1: f64) -> ResultRecord {
        ResultRecord {
            plan_id: plan.into(),
            family: Family::Baseline,
            datasets: vec![dataset.into()],
            seed,
            macro_f1: f1,
            per_class: vec![],
            config_hash: "deadbeef".into(),
            timings: Timings::default(),
        }
    }

    fn sample_records() -> Vec<ResultRecord> {
        let mut records = Vec::new();
        for (seed, f1) in [(1, 0.80), (2, 0.82), (3, 0.81)] {
            records.push(record("baseline", "synthetic-hmc", seed, f1));
        }
        for (seed, f1) in [(1, 0.90), (2, 0.93), (3, 0.91)] {
            records.push(record("fusion", "synthetic-hmc", seed, f1));
        }
        records
    }

    #[test]
    fn two_model_single_dataset_table() {
        let table = table_from_records(&sample_records(), Some("baseline")).unwrap();
        assert_eq!(table.datasets, vec!["synthetic-hmc"]);
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows[0].is_baseline);
        assert_eq!(table.rows[0].model, "baseline");

        let md = render_markdown(&table);
        // The fusion mean is the column maximum and significantly better.
        assert!(md.contains("**0.9133\\***"), "{md}");
        assert!(md.contains("0.8100"), "{md}");
    }

    #[test]
    fn tie_bolds_both_rows() {
        let mut records = sample_records();
        // Force both means equal.
        for r in records.iter_mut() {
            r.macro_f1 = 0.85;
        }
        let table = table_from_records(&records, None).unwrap();
        let md = render_markdown(&table);
        assert_eq!(md.matches("**0.8500**").count(), 2, "{md}");
    }

    #[test]
    fn missing_baseline_is_an_error() {
        assert!(table_from_records(&sample_records(), Some("nope")).is_err());
    }

    #[test]
    fn single_seed_rows_get_no_significance() {
        let records = vec![
            record("baseline", "d", 1, 0.8),
            record("other", "d", 1, 0.9),
        ];
        let table = table_from_records(&records, Some("baseline")).unwrap();
        let cell = table.rows[1].cells[0].as_ref().unwrap();
        assert_eq!(cell.significant, None);
    }

    #[test]
    fn record_order_does_not_change_the_report() {
        let mut shuffled = sample_records();
        shuffled.reverse();
        let a = table_from_records(&sample_records(), Some("baseline")).unwrap();
        let b = table_from_records(&shuffled, Some("baseline")).unwrap();
        assert_eq!(render_markdown(&a), render_markdown(&b));
    }

    #[test]
    fn csv_round_trips_to_identical_markdown() {
        let table = table_from_records(&sample_records(), Some("baseline")).unwrap();
        let csv = render_csv(&table);
        let reparsed = parse_csv(&csv).unwrap();
        assert_eq!(render_markdown(&reparsed), render_markdown(&table));
        assert_eq!(reparsed, table);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(parse_csv("who,knows\n1,2").is_err());
        assert!(parse_csv("model,is_baseline,dataset,mean_f1,per_seed,significant\na,b,c\n").is_err());
    }

    #[test]
    fn multi_dataset_grid() {
        let mut records = sample_records();
        records.push(record("baseline", "other-task", 1, 0.70));
        records.push(record("baseline", "other-task", 2, 0.72));
        let table = table_from_records(&records, Some("baseline")).unwrap();
        assert_eq!(table.datasets.len(), 2);
        // fusion has no records for other-task.
        let fusion_row = table.rows.iter().find(|r| r.model == "fusion").unwrap();
        let missing = table
            .datasets
            .iter()
            .position(|d| d == "other-task")
            .unwrap();
        assert!(fusion_row.cells[missing].is_none());
        assert!(render_markdown(&table).contains("—"));
    }
}
