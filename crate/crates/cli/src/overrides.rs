//! `--key value` overrides of the training configuration.
//!
//! Keys are the JSON paths of [`TrainConfig`] (`swgcn.feature_dim`); a leaf
//! name that occurs once (`feature_dim`) works too. Dashes and underscores are
//! interchangeable. Values are parsed as JSON when possible, else as strings.

use anyhow::{anyhow, bail, Context, Result};
use hydraview::pipeline::TrainConfig;
use serde_json::Value;

/// Every leaf path of the default configuration with its default value.
pub fn config_keys() -> Vec<(String, Value)> {
    let mut out = Vec::new();
    let root = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    collect(&root, String::new(), &mut out);
    out
}

fn collect(v: &Value, prefix: String, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect(child, path, out);
            }
        }
        leaf => out.push((prefix, leaf.clone())),
    }
}

/// Resolves a flag name to a full config path, if it names one.
pub fn resolve_key(name: &str) -> Option<String> {
    let name = name.replace('-', "_");
    let keys = config_keys();
    if keys.iter().any(|(k, _)| *k == name) {
        return Some(name);
    }
    let mut hits = keys
        .iter()
        .filter(|(k, _)| k.rsplit('.').next() == Some(name.as_str()));
    match (hits.next(), hits.next()) {
        (Some((k, _)), None) => Some(k.clone()),
        _ => None,
    }
}

/// Help text listing every override key and its default.
pub fn help_text() -> String {
    let mut s = String::from("Configuration keys (pass as --KEY VALUE; they override --config):\n");
    for (k, v) in config_keys() {
        s.push_str(&format!("  --{k:<30} default {v}\n"));
    }
    s.push_str("A leaf name may be used alone when it is unambiguous, e.g. --feature_dim 32.\n");
    s
}

/// Splits `args` into config overrides and the arguments left for clap.
/// Flags in `reserved` always stay with clap.
pub fn extract(args: Vec<String>, reserved: &[String]) -> Result<(Vec<(String, String)>, Vec<String>)> {
    let mut overrides = Vec::new();
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if reserved.iter().any(|r| *r == name) {
            rest.push(a);
            continue;
        }
        match resolve_key(&name) {
            Some(key) => {
                let value = match inline {
                    Some(v) => v,
                    None => it.next().ok_or_else(|| anyhow!("flag --{name} needs a value"))?,
                };
                overrides.push((key, value));
            }
            None => rest.push(a),
        }
    }
    Ok((overrides, rest))
}

/// Defaults, then the optional JSON file, then the overrides in order.
pub fn resolve(file: Option<&std::path::Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut root = serde_json::to_value(TrainConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let partial: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // validate keys and types against the schema before merging
        let _: TrainConfig = serde_json::from_value(partial.clone())
            .with_context(|| format!("config {}", path.display()))?;
        merge(&mut root, partial);
    }
    for (key, raw) in overrides {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| anyhow!("unknown configuration key {key}"))?;
        }
        *slot = value;
    }
    let cfg: TrainConfig =
        serde_json::from_value(root).map_err(|e| anyhow!("invalid configuration value: {e}"))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn ensure_no_overrides(overrides: &[(String, String)], command: &str) -> Result<()> {
    if let Some((k, _)) = overrides.first() {
        bail!("{command} takes no configuration keys (got --{k})");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_resolve_by_path_or_unique_leaf() {
        assert_eq!(resolve_key("swgcn.feature_dim").as_deref(), Some("swgcn.feature_dim"));
        assert_eq!(resolve_key("feature-dim").as_deref(), Some("swgcn.feature_dim"));
        assert_eq!(resolve_key("lr").as_deref(), Some("lr"));
        // present in both model configs
        assert_eq!(resolve_key("norm_eps"), None);
        assert_eq!(resolve_key("nope"), None);
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"epochs": 7, "lr": 0.01, "hydraview": {"scales": [1, 2]}}"#).unwrap();
        let cfg = resolve(Some(&p), &[("lr".into(), "0.02".into())]).unwrap();
        assert_eq!((cfg.epochs, cfg.lr), (7, 0.02));
        assert_eq!(cfg.hydraview.scales, vec![1, 2]);
        assert_eq!(cfg.hydraview.state_dim, 16);
        std::fs::write(&p, r#"{"epoch": 7}"#).unwrap();
        assert!(resolve(Some(&p), &[]).is_err());
        assert!(resolve(None, &[("lr".into(), "fast".into())]).is_err());
    }

    #[test]
    fn extraction_leaves_reserved_and_unknown_flags() {
        let args = ["--views", "3", "--data", "d", "--feature-dim=16", "--bogus", "x"]
            .map(String::from)
            .to_vec();
        let (ov, rest) = extract(args, &["data".into(), "views".into()]).unwrap();
        assert_eq!(ov, vec![("swgcn.feature_dim".to_string(), "16".to_string())]);
        assert_eq!(rest, ["--views", "3", "--data", "d", "--bogus", "x"]);
    }
}
