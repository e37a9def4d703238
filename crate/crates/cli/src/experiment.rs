//! TOML experiment files.
//!
//! An experiment file is a [`SimConfig`] document plus two top-level keys:
//! `schema_version` (must be [`SCHEMA_VERSION`]) and `name`, which picks the
//! output directory. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use swarm_core::SimConfig;
use toml::{Table, Value};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Clone)]
pub struct ExperimentFile {
    pub name: String,
    pub config: SimConfig,
}

/// Reads `path`, applies `key=value` overrides, and validates the schema.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text, overrides).with_context(|| format!("in {}", path.display()))
}

pub fn parse(text: &str, overrides: &[String]) -> Result<ExperimentFile> {
    let mut table: Table = text.parse().map_err(|e| anyhow!("invalid TOML: {e}"))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let version = table
        .remove("schema_version")
        .ok_or_else(|| anyhow!("missing schema_version (expected {SCHEMA_VERSION})"))?;
    if version.as_integer() != Some(SCHEMA_VERSION) {
        bail!("unsupported schema_version {version} (expected {SCHEMA_VERSION})");
    }
    let name = match table.remove("name") {
        Some(Value::String(s)) if valid_name(&s) => s,
        Some(v) => bail!("name must be a non-empty string of [A-Za-z0-9_.-], got {v}"),
        None => bail!("missing name"),
    };
    let config: SimConfig = table.try_into().map_err(|e| anyhow!("{e}"))?;
    Ok(ExperimentFile { name, config })
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && s.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c))
}

/// Sets a dotted path such as `objective.noise_std=0.5`. The value is read as
/// a TOML value when possible and as a bare string otherwise.
pub fn apply_override(table: &mut Table, arg: &str) -> Result<()> {
    let (path, raw) = arg
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{arg}' is not of the form key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override '{arg}' has an empty key");
    }
    let raw = raw.trim();
    let value = raw.parse::<Value>().unwrap_or_else(|_| Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        let entry = node.entry(key.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            other => bail!("override '{arg}': '{key}' is a {}, not a table", other.type_str()),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use swarm_core::{TopologyKind, Variant};

    const MINIMAL: &str = r#"
schema_version = 1
name = "minimal"
n = 4
total_t = 1000
variant = "blocking"
local_steps = { kind = "fixed", mean_h = 1 }
topology = { kind = "complete" }
objective = { kind = "noisy_quadratic", dimension = 2 }
"#;

    #[test]
    fn minimal_parses() {
        let f = parse(MINIMAL, &[]).unwrap();
        assert_eq!(f.name, "minimal");
        assert_eq!(f.config.n, 4);
        assert_eq!(f.config.topology.kind, TopologyKind::Complete);
        assert_eq!(f.config.variant, Variant::Blocking);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let o = [
            "master_seed=7".to_string(),
            "objective.noise_std = 0.5".to_string(),
            "variant=nonblocking".to_string(),
            "quantizer.safety=2".to_string(),
        ];
        let f = parse(MINIMAL, &o).unwrap();
        assert_eq!(f.config.master_seed, 7);
        assert_eq!(f.config.variant, Variant::Nonblocking);
        assert_eq!(f.config.quantizer.unwrap().safety, 2.0);
        match f.config.objective {
            swarm_core::ObjectiveSpec::NoisyQuadratic { noise_std, .. } => assert_eq!(noise_std, 0.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(parse(&format!("{MINIMAL}\nbogus = 1\n"), &[]).is_err());
        assert!(parse(&MINIMAL.replace("schema_version = 1", "schema_version = 2"), &[]).is_err());
        assert!(parse(&MINIMAL.replace("schema_version = 1", ""), &[]).is_err());
        assert!(parse(&MINIMAL.replace("\"minimal\"", "\"../up\""), &[]).is_err());
        assert!(parse(MINIMAL, &["objective.extra=1".into()]).is_err());
        assert!(parse(MINIMAL, &["n".into()]).is_err());
        assert!(parse(MINIMAL, &["n.x=1".into()]).is_err());
    }
}
