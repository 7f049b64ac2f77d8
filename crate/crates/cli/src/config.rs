//! Layered configuration: preset, then config file, then dotted overrides,
//! then the dedicated flags.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use fedsim::experiment::ExperimentConfig;
use toml::{Table, Value};

/// A `--section.key value` override taken off the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

/// Removes every `--a.b[=v]` argument from `args` and returns them parsed.
/// The value is either after `=` or the following argument.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (body, None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let raw = match inline {
            Some(v) => v,
            None => iter
                .next()
                .with_context(|| format!("override --{key} needs a value"))?,
        };
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if path.iter().any(|p| p.is_empty()) {
            bail!("malformed override --{key}");
        }
        overrides.push(Override {
            path,
            value: parse_value(&raw),
        });
    }
    Ok((rest, overrides))
}

/// Parses a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("{} is not a section", path.join(".")),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Options shared by every command.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// TOML config file layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset used as the base (desk-default, desk-alpha05, smoke).
    #[arg(long, default_value = "desk-default")]
    pub preset: String,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for client simulation (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// fedavg, fedprox, fedft_all, fedft_rds or fedft_eds.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Fraction of each client's data used per round.
    #[arg(long = "p-ds")]
    pub p_ds: Option<f64>,
    /// Softmax temperature for entropy scoring.
    #[arg(long)]
    pub rho: Option<f64>,
}

impl CommonArgs {
    pub fn resolve(&self, overrides: &[Override]) -> Result<ExperimentConfig> {
        let base = ExperimentConfig::preset(&self.preset)?;
        let mut table: Table = base.to_toml().parse().context("preset serialization")?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let file: Table = text
                .parse()
                .with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut table, file);
        }
        for o in overrides {
            set(&mut table, &o.path, o.value.clone())?;
        }
        let mut flag = |path: &str, value: Value| {
            let path: Vec<String> = path.split('.').map(str::to_string).collect();
            set(&mut table, &path, value)
        };
        if let Some(s) = self.seed {
            let s = i64::try_from(s).context("--seed must fit in a signed 64-bit TOML integer")?;
            flag("federation.master_seed", Value::Integer(s))?;
        }
        if let Some(t) = self.threads {
            flag("federation.threads", Value::Integer(t as i64))?;
        }
        if let Some(s) = &self.strategy {
            flag("federation.strategy", Value::String(s.clone()))?;
        }
        if let Some(p) = self.p_ds {
            flag("federation.p_ds", Value::Float(p))?;
        }
        if let Some(r) = self.rho {
            flag("federation.rho", Value::Float(r))?;
        }
        if let Some(o) = &self.out {
            flag(
                "output_dir",
                Value::String(o.to_string_lossy().into_owned()),
            )?;
        }
        let text = toml::to_string(&table)?;
        let config = ExperimentConfig::from_toml(&text)?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_off() {
        let (rest, o) = extract_overrides(args(&[
            "fedsim",
            "run",
            "--federation.rounds=3",
            "--seed",
            "4",
            "--federation.hidden_widths",
            "[8, 8]",
            "--federation.strategy=fedavg",
        ]))
        .unwrap();
        assert_eq!(rest, args(&["fedsim", "run", "--seed", "4"]));
        assert_eq!(o[0].path, vec!["federation", "rounds"]);
        assert_eq!(o[0].value, Value::Integer(3));
        assert_eq!(
            o[1].value,
            Value::Array(vec![Value::Integer(8), Value::Integer(8)])
        );
        assert_eq!(o[2].value, Value::String("fedavg".into()));
        assert!(extract_overrides(args(&["--federation.rounds"])).is_err());
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[federation]\nrounds = 7\nlocal_epochs = 2\n").unwrap();
        let common = CommonArgs {
            config: Some(path),
            preset: "smoke".into(),
            seed: Some(9),
            ..Default::default()
        };
        let o = extract_overrides(args(&["--federation.rounds=4"]))
            .unwrap()
            .1;
        let c = common.resolve(&o).unwrap();
        assert_eq!(c.federation.rounds, 4);
        assert_eq!(c.federation.local_epochs, 2);
        assert_eq!(c.federation.master_seed, 9);
        assert_eq!(c.federation.num_clients, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let common = CommonArgs {
            preset: "smoke".into(),
            ..Default::default()
        };
        let o = extract_overrides(args(&["--federation.bogus=1"]))
            .unwrap()
            .1;
        assert!(common.resolve(&o).is_err());
        let o = extract_overrides(args(&["--federation.p_ds=2.0"]))
            .unwrap()
            .1;
        assert!(common.resolve(&o).is_err());
    }
}
