//! The experiment-matrix file format and dotted-path overrides.
//!
//! A matrix file is JSON:
//!
//! ```json
//! {
//!   "datasets": [
//!     { "name": "syn", "source": { "synthetic": { "spec": { "n": 2000, "seed": 7, ... } } } },
//!     { "name": "flu", "source": { "jsonl": { "path": "flu.jsonl", "task": "single" } } }
//!   ],
//!   "baseline": "baseline-row-id",
//!   "plans": [ { ...experiment plan... } ]
//! }
//! ```
//!
//! A synthetic entry named `syn` registers two datasets, `syn-hmc` and
//! `syn-emotion`; a jsonl entry registers its own name. Plans refer to
//! these names. Relative paths resolve against the plan file's directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use emofuse::data::{load_dataset, load_label_map, make_synthetic, DatasetBundle, SynthSpec};
use emofuse::experiments::{ExperimentPlan, MatrixCell};
use emofuse::heads::TaskKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixFile {
    #[serde(default)]
    pub datasets: Vec<DatasetEntry>,
    #[serde(default)]
    pub baseline: Option<String>,
    pub plans: Vec<ExperimentPlan>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub source: DataSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { spec: SynthSpec },
    Jsonl(JsonlSource),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsonlSource {
    pub path: PathBuf,
    pub task: TaskKind,
    #[serde(default)]
    pub label_map: Option<PathBuf>,
}

impl MatrixFile {
    /// Materializes every named dataset.
    fn load_datasets(
        &self,
        base_dir: &Path,
    ) -> Result<HashMap<String, emofuse::data::LabeledDataset>> {
        let mut out = HashMap::new();
        for entry in &self.datasets {
            match &entry.source {
                DataSource::Synthetic { spec } => {
                    let pair = make_synthetic(spec)?;
                    let mut hmc = pair.hmc;
                    let mut emotion = pair.emotion;
                    hmc.name = format!("{}-hmc", entry.name);
                    emotion.name = format!("{}-emotion", entry.name);
                    out.insert(hmc.name.clone(), hmc);
                    out.insert(emotion.name.clone(), emotion);
                }
                DataSource::Jsonl(source) => {
                    let path = if source.path.is_absolute() {
                        source.path.clone()
                    } else {
                        base_dir.join(&source.path)
                    };
                    let label_map = source
                        .label_map
                        .as_ref()
                        .map(|p| {
                            let p = if p.is_absolute() {
                                p.clone()
                            } else {
                                base_dir.join(p)
                            };
                            load_label_map(&p)
                        })
                        .transpose()?;
                    let mut ds = load_dataset(&path, source.task, label_map.as_ref())?;
                    ds.name = entry.name.clone();
                    out.insert(entry.name.clone(), ds);
                }
            }
        }
        Ok(out)
    }

    /// Resolves one plan's dataset names into a bundle.
    pub fn resolve_bundle(&self, plan: &ExperimentPlan, base_dir: &Path) -> Result<DatasetBundle> {
        let datasets = self.load_datasets(base_dir)?;
        let lookup = |name: &str| -> Result<emofuse::data::LabeledDataset> {
            datasets
                .get(name)
                .cloned()
                .with_context(|| format!("dataset '{name}' not declared in the plan file"))
        };
        Ok(DatasetBundle {
            hmc: lookup(&plan.hmc_dataset)?,
            emotion: plan
                .emotion_dataset
                .as_deref()
                .map(&lookup)
                .transpose()?,
            source_hmc: plan
                .source_hmc_dataset
                .as_deref()
                .map(&lookup)
                .transpose()?,
        })
    }

    /// Builds the full matrix: one cell per plan with its bundle.
    pub fn build_cells(&self, base_dir: &Path) -> Result<Vec<MatrixCell>> {
        let mut cells = Vec::with_capacity(self.plans.len());
        for plan in &self.plans {
            let bundle = self.resolve_bundle(plan, base_dir)?;
            cells.push(MatrixCell {
                plan: plan.clone(),
                bundle,
            });
        }
        Ok(cells)
    }
}

/// Applies `key.path=value` overrides onto the plan file JSON. Path
/// segments are object keys or array indices and must reference existing
/// plan keys; values parse as JSON when possible and fall back to strings.
pub fn apply_overrides(root: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    for entry in overrides {
        let (path, raw_value) = entry
            .split_once('=')
            .with_context(|| format!("override '{entry}' is not KEY=VALUE"))?;
        let value: serde_json::Value = serde_json::from_str(raw_value)
            .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
        let pointer = format!("/{}", path.split('.').collect::<Vec<_>>().join("/"));
        match root.pointer_mut(&pointer) {
            Some(slot) => *slot = value,
            None => bail!("override path '{path}' does not match any plan file key"),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_nested_values() {
        let mut value = serde_json::json!({
            "plans": [ { "train": { "lr": 2e-5 } } ],
            "baseline": null,
        });
        apply_overrides(
            &mut value,
            &["plans.0.train.lr=1e-4".to_string()],
        )
        .unwrap();
        assert_eq!(value["plans"][0]["train"]["lr"], serde_json::json!(1e-4));
    }

    #[test]
    fn override_with_unknown_key_fails() {
        let mut value = serde_json::json!({ "a": 1 });
        assert!(apply_overrides(&mut value, &["b=2".to_string()]).is_err());
        assert!(apply_overrides(&mut value, &["nonsense".to_string()]).is_err());
    }

    #[test]
    fn override_array_bounds_checked() {
        let mut value = serde_json::json!({ "xs": [1, 2] });
        assert!(apply_overrides(&mut value, &["xs.5=9".to_string()]).is_err());
        apply_overrides(&mut value, &["xs.1=9".to_string()]).unwrap();
        assert_eq!(value["xs"][1], serde_json::json!(9));
    }
}
