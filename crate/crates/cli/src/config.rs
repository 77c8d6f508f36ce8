//! Run configuration: one flat JSON object with dotted keys, overlaid on
//! defaults and then decoded into the typed sections.

use std::path::Path;

use anyhow::{bail, Context};
use mambatrans_core::losses::{DetectorConfig, TacConfig};
use mambatrans_core::metrics::ApInterpolation;
use mambatrans_core::model::ModelConfig;
use mambatrans_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Usage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Detections scoring below this are discarded before matching.
    pub min_score: f64,
    pub interpolation: ApInterpolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub loss: TacConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                lr: 1e-3,
                max_steps: 1000,
                milestones: Some(vec![]),
                ..TrainConfig::default()
            },
            loss: TacConfig::default(),
            detector: DetectorConfig::default(),
            eval: EvalConfig {
                min_score: 0.05,
                interpolation: ApInterpolation::default(),
            },
        }
    }
}

impl RunConfig {
    /// Defaults, then the file's keys, then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let flat: Map<String, Value> = serde_json::from_str(&text)
                .map_err(|e| Usage(format!("config {} is not a flat JSON object: {e}", path.display())))?;
            for (key, value) in flat {
                overlay(&mut tree, &key, value)?;
            }
        }
        for kv in overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Usage(format!("override {kv:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            overlay(&mut tree, key, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = |r: mambatrans_core::Result<()>| r.map_err(|e| Usage(e.to_string()));
        check(self.model.validate())?;
        check(self.train.validate())?;
        check(self.pretrain.validate())?;
        check(self.loss.charbonnier.validate())?;
        check(self.detector.validate())?;
        if !(0.0..=1.0).contains(&self.eval.min_score) {
            return Err(Usage(format!("eval.min_score must lie in [0, 1], got {}", self.eval.min_score)).into());
        }
        Ok(())
    }

    /// The effective configuration as a flat dotted-key document.
    pub fn to_flat_json(&self) -> anyhow::Result<String> {
        let mut flat = Map::new();
        flatten(&serde_json::to_value(self)?, String::new(), &mut flat);
        Ok(serde_json::to_string_pretty(&Value::Object(flat))? + "\n")
    }
}

fn overlay(tree: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => match map.get_mut(part) {
                Some(next) => next,
                None => bail!(Usage(format!("unknown config key {key:?}"))),
            },
            _ => bail!(Usage(format!("unknown config key {key:?}"))),
        };
    }
    *node = value;
    Ok(())
}

fn flatten(value: &Value, prefix: String, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, key, out);
            }
        }
        leaf => {
            out.insert(prefix, leaf.clone());
        }
    }
}

/// Names the model fields on which two configurations disagree.
pub fn model_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (mut fa, mut fb) = (Map::new(), Map::new());
    flatten(&serde_json::to_value(a).expect("serializable"), String::new(), &mut fa);
    flatten(&serde_json::to_value(b).expect("serializable"), String::new(), &mut fb);
    fa.iter()
        .filter(|(k, v)| fb.get(*k) != Some(v))
        .map(|(k, v)| format!("{k} ({v} vs {})", fb.get(k).unwrap_or(&Value::Null)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_dump_round_trips() {
        let cfg = RunConfig::resolve(None, &["train.lr=0.003".into(), "model.state_dim=2".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.003);
        assert_eq!(cfg.model.state_dim, 2);
        assert_eq!(cfg.model.feature_channels, ModelConfig::desk().feature_channels);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, cfg.to_flat_json().unwrap()).unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["train.bogus=1", "bogus=1", "train.lr.x=1", "train.lr=\"fast\"", "train.lr"] {
            let err = RunConfig::resolve(None, &[bad.into()]).unwrap_err();
            assert!(err.downcast_ref::<Usage>().is_some(), "{bad}: {err}");
        }
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let err = RunConfig::resolve(None, &["train.milestones=[5,3]".into()]).unwrap_err();
        assert!(err.downcast_ref::<Usage>().is_some());
    }

    #[test]
    fn model_diff_names_fields() {
        let a = ModelConfig::desk();
        let b = ModelConfig {
            state_dim: 9,
            ..a.clone()
        };
        let d = model_diff(&a, &b);
        assert_eq!(d.len(), 1);
        assert!(d[0].starts_with("state_dim"));
    }
}
