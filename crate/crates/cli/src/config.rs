//! Config resolution: JSON file first, then command-line flags on top.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use capsie::eval::EvalProtocol;
use capsie::model::ProjectorKind;
use capsie::train::TrainConfig;
use serde_json::{json, Map, Value};

use crate::args::{ProtocolArgs, TrainOverrides};
use crate::usage;

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let v: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    if !v.is_object() {
        return Err(usage(format!(
            "config {} must hold a JSON object",
            path.display()
        )));
    }
    Ok(v)
}

/// Sets `value` at `path`, creating intermediate objects.
fn set(root: &mut Value, path: &[&str], value: Value) {
    let mut node = root;
    for key in &path[..path.len() - 1] {
        let map = node.as_object_mut().expect("config nodes are objects");
        node = map.entry(*key).or_insert_with(|| Value::Object(Map::new()));
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
    }
    node.as_object_mut()
        .expect("config nodes are objects")
        .insert(path[path.len() - 1].to_string(), value);
}

/// Resolves a dataset argument: a directory means its `dataset.bin`.
pub fn dataset_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("dataset.bin")
    } else {
        path.to_path_buf()
    }
}

pub fn resolve_train(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut v = match &o.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    if let Some(d) = &o.dataset {
        set(&mut v, &["dataset"], json!(dataset_file(d)));
    }
    let projector = match &o.projector {
        Some(p) => {
            let kind: ProjectorKind = p.parse().map_err(|e: capsie::Error| usage(e.to_string()))?;
            Some(serde_json::to_value(kind)?)
        }
        None => None,
    };
    let scalars: [(&[&str], Option<Value>); 12] = [
        (&["seed"], o.seed.map(Value::from)),
        (&["epochs"], o.epochs.map(Value::from)),
        (&["batch_size"], o.batch_size.map(Value::from)),
        (&["model", "n_caps"], o.n_caps.map(Value::from)),
        (&["model", "projector"], projector),
        (&["adam", "lr"], o.lr.map(Value::from)),
        (&["loss", "lambda_inv"], o.lambda_inv.map(Value::from)),
        (&["loss", "lambda_equi"], o.lambda_equi.map(Value::from)),
        (&["loss", "lambda_v"], o.lambda_v.map(Value::from)),
        (&["loss", "lambda_c"], o.lambda_c.map(Value::from)),
        (&["eval_cadence"], o.eval_cadence.map(Value::from)),
        (&["checkpoint_every"], o.checkpoint_every.map(Value::from)),
    ];
    for (path, value) in scalars {
        if let Some(value) = value {
            set(&mut v, path, value);
        }
    }
    if v.get("seed").is_none() {
        return Err(usage(
            "a seed is required: pass --seed or set \"seed\" in the config",
        ));
    }
    // Nested sections may be partial; fill them from the defaults.
    let defaults = serde_json::to_value(TrainConfig::new(0))?;
    for section in ["model", "loss", "adam"] {
        if let Some(Value::Object(given)) = v.get(section).cloned() {
            let mut full = defaults[section].clone();
            merge(&mut full, &Value::Object(given));
            set(&mut v, &[section], full);
        }
    }
    let config: TrainConfig =
        serde_json::from_value(v).map_err(|e| usage(format!("invalid training config: {e}")))?;
    config.validate().map_err(|e| usage(e.to_string()))?;
    if config.dataset.is_none() {
        return Err(usage(
            "a dataset is required: pass --dataset or set \"dataset\" in the config",
        ));
    }
    Ok(config)
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn resolve_protocol(a: &ProtocolArgs) -> Result<EvalProtocol> {
    let mut protocol = match &a.protocol {
        Some(p) => {
            let mut full = serde_json::to_value(EvalProtocol::default())?;
            merge(&mut full, &read_json(p)?);
            serde_json::from_value(full).map_err(|e| usage(format!("invalid protocol: {e}")))?
        }
        None => EvalProtocol::default(),
    };
    if let Some(e) = a.probe_epochs {
        if e == 0 {
            return Err(usage("--probe-epochs must be positive"));
        }
        for c in [
            &mut protocol.rotation,
            &mut protocol.colour,
            &mut protocol.classification,
        ] {
            c.epochs = e;
        }
    }
    Ok(protocol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 1, "epochs": 4, "dataset": "a.bin", "model": {"n_caps": 4}, "loss": {"lambda_equi": 2.0}}"#).unwrap();
        let o = TrainOverrides {
            config: Some(path),
            epochs: Some(9),
            lambda_v: Some(3.0),
            ..Default::default()
        };
        let c = resolve_train(&o).unwrap();
        assert_eq!((c.seed, c.epochs, c.model.n_caps), (1, 9, 4));
        assert_eq!(
            (c.loss.lambda_equi, c.loss.lambda_v, c.loss.lambda_inv),
            (2.0, 3.0, 0.1)
        );
        assert_eq!(c.dataset.as_deref(), Some(Path::new("a.bin")));
    }

    #[test]
    fn missing_seed_or_dataset_is_a_usage_error() {
        let o = TrainOverrides {
            dataset: Some("a.bin".into()),
            ..Default::default()
        };
        assert!(resolve_train(&o)
            .unwrap_err()
            .downcast_ref::<crate::UsageError>()
            .is_some());
        let o = TrainOverrides {
            seed: Some(3),
            ..Default::default()
        };
        assert!(resolve_train(&o)
            .unwrap_err()
            .downcast_ref::<crate::UsageError>()
            .is_some());
    }

    #[test]
    fn probe_epochs_apply_to_every_probe() {
        let p = resolve_protocol(&ProtocolArgs {
            probe_epochs: Some(3),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(
            [p.rotation.epochs, p.colour.epochs, p.classification.epochs],
            [3, 3, 3]
        );
    }
}
