//! The configuration schema. Config-file keys, command-line flags and the
//! `--help` listing are all generated from [`SCHEMA`], so they cannot drift.
//!
//! Precedence is defaults ← file ← flags. Files hold `key = value` lines;
//! `#` starts a comment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use tavce_core::synthdata::{GeneratorConfig, FRAME_SIDE};
use tavce_core::training::TrainConfig;
use tavce_core::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    U32,
    U64,
    F32,
    F64,
    Bool,
    /// A number, or `auto` for the per-stage default.
    AutoU32,
    AutoF64,
    Path,
}

impl Kind {
    fn expected(self) -> &'static str {
        match self {
            Kind::U32 => "an unsigned 32-bit integer",
            Kind::U64 => "an unsigned 64-bit integer",
            Kind::F32 | Kind::F64 => "a number",
            Kind::Bool => "true or false",
            Kind::AutoU32 => "an unsigned integer or auto",
            Kind::AutoF64 => "a number or auto",
            Kind::Path => "a path",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Key {
    pub name: &'static str,
    /// `None` for paths, which have no default and are required per subcommand.
    pub default: Option<&'static str>,
    pub kind: Kind,
    pub help: &'static str,
}

impl Key {
    /// Long flag spelling: `lambda_reg` → `lambda-reg`.
    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }
}

const fn key(name: &'static str, default: &'static str, kind: Kind, help: &'static str) -> Key {
    Key { name, default: Some(default), kind, help }
}

const fn path(name: &'static str, help: &'static str) -> Key {
    Key { name, default: None, kind: Kind::Path, help }
}

pub const SCHEMA: &[Key] = &[
    key("seed", "0", Kind::U64, "dataset generation seed"),
    key("seqs", "50", Kind::U32, "number of synthetic sequences"),
    key("t", "32", Kind::U32, "frames per sequence"),
    key("a_dim", "64", Kind::U32, "audio clip dimension"),
    key("k", "4", Kind::U32, "latent dimension of the generator"),
    key("rho", "0.9", Kind::F32, "AR(1) coefficient of the latent trajectory"),
    key("sigma_a", "0.05", Kind::F32, "audio noise standard deviation"),
    key("gamma", "1", Kind::F32, "audio-visual coupling (0 = no shared signal)"),
    key("d", "16", Kind::U32, "embedding dimension D"),
    key("c", "32", Kind::U32, "feature-map channels C"),
    key("tau", "2", Kind::U32, "half-width of the negative exclusion window"),
    key("batch", "4", Kind::U32, "sequences (metric) or samples (generator) per step"),
    key("lambda_reg", "1", Kind::F64, "weight of the correlation-aware regularizer"),
    key("iters", "auto", Kind::AutoU32, "training iterations; auto = 2000 (metric) / 1500 (generator)"),
    key("lr", "auto", Kind::AutoF64, "Adam learning rate; auto = 1e-4 (metric) / 2e-4 (generator)"),
    key("train_seed", "0", Kind::U64, "initialization and sampling seed for training"),
    key("use_cerl", "true", Kind::Bool, "fuse the audio correlation into the identity features"),
    key("use_car", "true", Kind::Bool, "train with the correlation-aware regularizer"),
    path("data", "dataset file (TVDS)"),
    path("metric", "stage-1 metric checkpoint (TVCE)"),
    path("model", "stage-2 generator checkpoint (TVCE)"),
    path("report", "report output file"),
    path("log", "loss log output; defaults to <checkpoint>.log"),
];

pub fn schema_key(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

/// Nearest schema key by edit distance, if any is plausibly meant.
pub fn suggest(name: &str) -> Option<&'static str> {
    SCHEMA
        .iter()
        .map(|k| (strsim::levenshtein(name, k.name), k.name))
        .min()
        .filter(|&(dist, _)| dist <= 2.max(name.len() / 3))
        .map(|(_, n)| n)
}

fn unknown(name: &str) -> anyhow::Error {
    match suggest(name) {
        Some(s) => anyhow!("unknown config key `{name}` (did you mean `{s}`?)"),
        None => anyhow!("unknown config key `{name}`"),
    }
}

/// `key = value` pairs of a config file, keys normalized to underscores.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, found {raw:?}", n + 1))?;
        let k = k.trim().replace('-', "_");
        if schema_key(&k).is_none() {
            return Err(unknown(&k).context(format!("line {}", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

fn check_value(key: &Key, v: &str) -> Result<()> {
    let ok = match key.kind {
        Kind::U32 => v.parse::<u32>().is_ok(),
        Kind::U64 => v.parse::<u64>().is_ok(),
        Kind::F32 => v.parse::<f32>().is_ok(),
        Kind::F64 => v.parse::<f64>().is_ok(),
        Kind::Bool => v.parse::<bool>().is_ok(),
        Kind::AutoU32 => v == "auto" || v.parse::<u32>().is_ok(),
        Kind::AutoF64 => v == "auto" || v.parse::<f64>().is_ok(),
        Kind::Path => !v.is_empty(),
    };
    if !ok {
        bail!("invalid value {v:?} for `{}`: expected {}", key.name, key.kind.expected());
    }
    Ok(())
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<&'static str, String>,
}

impl CliConfig {
    /// Resolves defaults ← `file` ← `flags`.
    pub fn resolve(file: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let from_file = match file {
            None => Vec::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("config file {}", p.display()))?;
                parse_file(&text).with_context(|| format!("config file {}", p.display()))?
            }
        };
        let mut values = BTreeMap::new();
        for k in SCHEMA {
            if let Some(d) = k.default {
                values.insert(k.name, d.to_string());
            }
        }
        for (name, v) in from_file.iter().chain(flags) {
            let key = schema_key(name).ok_or_else(|| unknown(name))?;
            check_value(key, v)?;
            values.insert(key.name, v.clone());
        }
        Ok(Self { values })
    }

    #[cfg(test)]
    pub fn defaults() -> Self {
        Self::resolve(None, &[]).expect("defaults satisfy the schema")
    }

    fn raw(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    fn get<T: std::str::FromStr>(&self, name: &str) -> T {
        self.raw(name)
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| panic!("`{name}` was validated on resolve"))
    }

    fn auto<T: std::str::FromStr>(&self, name: &str) -> Option<T> {
        match self.raw(name) {
            Some("auto") | None => None,
            Some(_) => Some(self.get(name)),
        }
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.raw(name).map(PathBuf::from)
    }

    /// A path the subcommand cannot run without.
    pub fn require(&self, name: &str, subcommand: &str) -> Result<PathBuf> {
        self.path(name).ok_or_else(|| {
            anyhow!("{subcommand} needs `{name}` (pass --{name} <PATH> or set `{name} = …` in the config file)")
        })
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.get("seed"),
            num_sequences: self.get("seqs"),
            t: self.get("t"),
            a_dim: self.get("a_dim"),
            k: self.get("k"),
            rho: self.get("rho"),
            sigma_a: self.get("sigma_a"),
            gamma: self.get("gamma"),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            a_dim: self.get::<u32>("a_dim") as usize,
            d: self.get::<u32>("d") as usize,
            c: self.get::<u32>("c") as usize,
            frame: FRAME_SIDE,
        }
    }

    /// Training config for `stage`; `auto` keys take the stage defaults.
    pub fn train(&self, stage: u8) -> TrainConfig {
        let base = if stage == 1 { TrainConfig::stage1() } else { TrainConfig::stage2() };
        TrainConfig {
            iterations: self.auto("iters").unwrap_or(base.iterations),
            learning_rate: self.auto("lr").unwrap_or(base.learning_rate),
            batch_sequences: self.get("batch"),
            tau: self.get("tau"),
            lambda_reg: self.get("lambda_reg"),
            use_cerl: self.get("use_cerl"),
            use_car: self.get("use_car"),
            seed: self.get("train_seed"),
            dims: self.dims(),
            ..base
        }
    }

    /// `# key = value` lines for every non-path key, in schema order. Paths
    /// are left out so artifacts do not depend on where they were written.
    pub fn echo(&self) -> String {
        SCHEMA
            .iter()
            .filter(|k| k.kind != Kind::Path)
            .map(|k| format!("# {} = {}\n", k.name, self.raw(k.name).unwrap_or("")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_match_the_library() {
        let cfg = CliConfig::defaults();
        assert_eq!(cfg.generator(), GeneratorConfig::default());
        assert_eq!(cfg.train(1), TrainConfig::stage1());
        assert_eq!(cfg.train(2), TrainConfig::stage2());
        assert_eq!(cfg.dims(), Dims::default());
        assert!(cfg.path("data").is_none());
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "# comment\nlr = 1e-4\n tau=3 # trailing\n\nlambda-reg = 0.5\n").unwrap();
        let cfg = CliConfig::resolve(Some(&file), &flags(&[("lr", "2e-4")])).unwrap();
        let t = cfg.train(1);
        assert_eq!(t.learning_rate, 2e-4);
        assert_eq!(t.tau, 3);
        assert_eq!(t.lambda_reg, 0.5);
        assert_eq!(t.iterations, 2000);
    }

    #[test]
    fn unknown_keys_name_the_nearest_key() {
        let err = parse_file("taus = 3\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("`taus`") && msg.contains("`tau`"), "{msg}");
        assert_eq!(suggest("lamda_reg"), Some("lambda_reg"));
        assert_eq!(suggest("zzzzzzzzzz"), None);
        assert!(CliConfig::resolve(None, &flags(&[("sead", "1")])).is_err());
    }

    #[test]
    fn type_mismatches_are_errors() {
        for (k, v) in [("lr", "fast"), ("tau", "-1"), ("use_car", "yes"), ("seqs", "1.5"), ("data", "")] {
            let err = CliConfig::resolve(None, &flags(&[(k, v)])).unwrap_err();
            assert!(err.to_string().contains(k), "{err}");
        }
        assert!(parse_file("tau 3\n").is_err());
    }

    #[test]
    fn missing_paths_are_reported_per_subcommand() {
        let err = CliConfig::defaults().require("metric", "train-gen").unwrap_err();
        assert!(err.to_string().contains("train-gen needs `metric`"), "{err}");
    }

    #[test]
    fn echo_lists_every_setting_but_no_paths() {
        let cfg = CliConfig::resolve(None, &flags(&[("data", "/tmp/x.tvds"), ("gamma", "0")])).unwrap();
        let echo = cfg.echo();
        assert!(echo.contains("# gamma = 0\n"));
        assert!(!echo.contains("x.tvds"));
        assert_eq!(echo.lines().count(), SCHEMA.iter().filter(|k| k.kind != Kind::Path).count());
    }
}
