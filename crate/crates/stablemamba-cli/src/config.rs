//! Effective-configuration assembly: a preset base, overlaid by the config
//! file, then dotted `--set` overrides. Unknown keys are rejected at every
//! layer, never ignored.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use stablemamba_core::model::{preset, ModelConfig};
use stablemamba_core::tensor::{Result, TensorError};
use stablemamba_core::train::TrainConfig;
use std::path::Path;

/// Everything a run needs: model geometry plus the training recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn config_err(msg: String) -> TensorError {
    TensorError::Invalid { op: "config", msg }
}

/// Build the effective config. Precedence, lowest to highest: preset base
/// (the `--preset` flag, else a `--set model.preset`, else the file's
/// `model.preset`, else T), config-file keys, `--seed`, then each `--set`
/// in order.
pub fn resolve(
    config_path: Option<&Path>,
    preset_flag: Option<&str>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<RunConfig> {
    let mut file_val: Option<Value> = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| TensorError::Io {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(config_err(format!(
                    "{}: top level must be a JSON object",
                    p.display()
                )));
            }
            Some(v)
        }
        None => None,
    };

    // Split `model.preset` assignments out of the overrides: the preset picks
    // the base the other keys overlay, so it must be resolved first.
    let mut pairs = Vec::with_capacity(sets.len());
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_err(format!("--set {s:?}: expected key=value")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let set_preset = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "model.preset")
        .map(|(_, v)| parse_override_value(v))
        .map(|v| match v {
            Value::String(s) => Ok(s),
            other => Err(config_err(format!(
                "model.preset must be a string, got {other}"
            ))),
        })
        .transpose()?;
    pairs.retain(|(k, _)| k != "model.preset");
    let file_preset = file_val
        .as_ref()
        .and_then(|v| v.pointer("/model/preset"))
        .and_then(|v| v.as_str().map(str::to_string));
    // The echo field is rewritten from the resolved directive, so drop the
    // file's copy before the overlay.
    if let Some(Value::Object(o)) = file_val.as_mut() {
        if let Some(Value::Object(m)) = o.get_mut("model") {
            m.remove("preset");
        }
    }
    let directive = preset_flag
        .map(str::to_string)
        .or(set_preset)
        .or(file_preset)
        .unwrap_or_else(|| "T".to_string());

    let base = RunConfig {
        model: preset(&directive)?,
        train: TrainConfig::default(),
    };
    let mut eff = serde_json::to_value(&base).expect("config serializes");
    if let Some(f) = &file_val {
        merge_value(&mut eff, f, "")?;
    }
    if let Some(s) = seed {
        eff["train"]["seed"] = Value::from(s);
    }
    for (k, v) in &pairs {
        apply_set(&mut eff, k, v)?;
    }

    let cfg: RunConfig = serde_json::from_value(eff).map_err(|e| config_err(e.to_string()))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Overlay `patch` onto `base`, recursing through objects. A key absent from
/// `base` is unknown and rejected; leaves are replaced wholesale.
fn merge_value(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(bo), Value::Object(po)) => {
            for (k, pv) in po {
                let child = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match bo.get_mut(k) {
                    Some(bv) => merge_value(bv, pv, &child)?,
                    None => return Err(config_err(format!("unknown config key {child:?}"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// A `--set` value is JSON when it parses as JSON, a bare string otherwise,
/// so `train.lr=1e-3` and `model.transformer_position=middle` both read
/// naturally.
fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn apply_set(eff: &mut Value, key: &str, raw: &str) -> Result<()> {
    let val = parse_override_value(raw);
    let segs: Vec<&str> = key.split('.').collect();
    let mut cur = &mut *eff;
    for (i, seg) in segs.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| config_err(format!("config key {key:?}: {:?} is not a section", segs[..i].join("."))))?;
        match obj.get_mut(*seg) {
            Some(v) if i + 1 == segs.len() => {
                *v = val;
                return Ok(());
            }
            Some(v) => cur = v,
            None => return Err(config_err(format!("unknown config key {key:?}"))),
        }
    }
    Err(config_err(format!("--set {key:?}: empty key")))
}
