//! Flat `key = value` configuration files.
//!
//! Nested settings use dotted keys (`model.d_model`, `shift.rate`). Lines
//! starting with `#` and blank lines are ignored.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected key=value, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn leaf_mut<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    (!cur.is_object()).then_some(cur)
}

fn typed(current: &Value, key: &str, raw: &str) -> Result<Value> {
    let bad = || anyhow!("invalid value {raw:?} for {key}");
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() && !raw.contains(['.', 'e', 'E']) => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let f: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(raw.to_string()),
        _ => bail!("{key} cannot be set from text"),
    })
}

/// Applies `overrides` in order to the serialized form of `base`.
pub fn resolve<C: Serialize + DeserializeOwned>(base: &C, overrides: &[(String, String)]) -> Result<C> {
    let mut v = serde_json::to_value(base)?;
    for (key, raw) in overrides {
        let leaf = leaf_mut(&mut v, key).ok_or_else(|| anyhow!("unknown configuration key {key:?}"))?;
        *leaf = typed(leaf, key, raw)?;
    }
    serde_json::from_value(v).context("configuration does not fit its schema")
}

/// Every setting of `cfg`, one `key = value` line each, sorted by key.
pub fn render<C: Serialize>(cfg: &C) -> Result<String> {
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(cfg)?, &mut flat);
    let mut s = String::new();
    for (k, v) in flat {
        let v = match v {
            Value::String(s) => s,
            other => other.to_string(),
        };
        s.push_str(&format!("{k} = {v}\n"));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmaev::trainer::TrainConfig;

    #[test]
    fn parse_skips_comments() {
        let kv = parse("# hi\n\nseed = 7\n shift.rate=3 \n").unwrap();
        assert_eq!(kv, vec![("seed".into(), "7".into()), ("shift.rate".into(), "3".into())]);
        assert!(parse("seed 7").is_err());
    }

    #[test]
    fn render_resolve_roundtrip() {
        let base = TrainConfig::pretrain();
        let tweaked = resolve(&base, &[("seed".into(), "9".into()), ("tau".into(), "0.5".into())]).unwrap();
        assert_eq!(tweaked.seed, 9);
        assert_eq!(tweaked.tau, 0.5);
        let text = render(&tweaked).unwrap();
        let back: TrainConfig = resolve(&base, &parse(&text).unwrap()).unwrap();
        assert_eq!(back, tweaked);
    }

    #[test]
    fn unknown_key_and_bad_value_rejected() {
        let base = TrainConfig::pretrain();
        assert!(resolve(&base, &[("nope".into(), "1".into())]).is_err());
        assert!(resolve(&base, &[("batch_size".into(), "many".into())]).is_err());
        assert!(resolve(&base, &[("shift".into(), "1".into())]).is_err());
    }

    #[test]
    fn integral_float_fields_accept_integers() {
        let base = TrainConfig::pretrain();
        let c = resolve(&base, &[("lambda_c".into(), "0".into())]).unwrap();
        assert_eq!(c.lambda_c, 0.0);
    }
}
