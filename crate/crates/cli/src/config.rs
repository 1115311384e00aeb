//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcno_gas::{build_paper_network, NetworkTopology, ScenarioDocument};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Recursively merge `over` into `base`. Keys absent from `base` are rejected
/// so that typos in config files surface as errors.
fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown config key `{here}`"),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

/// Expand dotted flag keys (`train.model.width`) into nested objects.
fn nest(flags: Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flags {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut cur = &mut root;
        for p in parts {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("flag prefixes are objects");
        }
        cur.insert(last.to_string(), v);
    }
    Value::Object(root)
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Resolve `T` from `defaults`, an optional config file and flag overrides.
/// `flags` must serialize to an object whose unset entries are omitted.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>, flags: impl Serialize) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(f) = file {
        let over = read_json(f)?;
        if !over.is_object() {
            bail!("config file {} must hold a JSON object", f.display());
        }
        merge(&mut v, over, "")?;
    }
    match serde_json::to_value(flags)? {
        Value::Object(m) => merge(&mut v, nest(m), "")?,
        other => bail!("flag overrides must form an object, got {other}"),
    }
    serde_json::from_value(v).context("resolved configuration is invalid")
}

/// The network in `path` (a scenario document), or the built-in three-pipe network.
pub fn load_network(path: Option<&PathBuf>) -> Result<(NetworkTopology, Option<pcno_gas::BoundarySchedule>)> {
    match path {
        None => {
            let (net, sched) = build_paper_network();
            Ok((net, Some(sched)))
        }
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading network {}", p.display()))?;
            let doc = ScenarioDocument::from_json(&text).with_context(|| format!("parsing network {}", p.display()))?;
            let net = doc.network();
            net.ensure_valid()?;
            Ok((net, doc.schedule))
        }
    }
}

/// `label=path` or a bare path, labelled by its file stem.
pub fn labelled(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((l, p)) if !l.is_empty() => (l.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(arg);
            let l = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
            (l, p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Inner {
        a: f64,
        b: Option<u32>,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Outer {
        n: usize,
        inner: Inner,
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"n": 3, "inner": {"a": 2.5}}"#).unwrap();
        let d = Outer { n: 1, inner: Inner { a: 0.0, b: None } };
        let mut flags = Map::new();
        flags.insert("inner.b".into(), Value::from(7));
        flags.insert("n".into(), Value::from(9));
        let r: Outer = resolve(&d, Some(&f), flags).unwrap();
        assert_eq!(r, Outer { n: 9, inner: Inner { a: 2.5, b: Some(7) } });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"inner": {"c": 1}}"#).unwrap();
        let d = Outer { n: 1, inner: Inner { a: 0.0, b: None } };
        let e = resolve(&d, Some(&f), Map::new()).unwrap_err();
        assert!(e.to_string().contains("inner.c"));
    }

    #[test]
    fn labels() {
        assert_eq!(labelled("seen=a/b.pcno"), ("seen".into(), PathBuf::from("a/b.pcno")));
        assert_eq!(labelled("a/test640.pcno").0, "test640");
    }
}
