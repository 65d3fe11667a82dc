//! Flat `key = value` run configuration.
//!
//! Values are layered, later layers winning:
//!
//! 1. built-in defaults
//! 2. the config file
//! 3. environment variables `RLV_<KEY>`, with `.` in the key written as `__`
//!    (`rl.beta` is `RLV_RL__BETA`)
//! 4. `--set key=value` flags on the command line
//!
//! Every layer is checked against the same key table, so a typo is reported
//! with its source and, for files, its line number.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rlv_core::trainer::{Method, PretrainConfig, RunConfig, VerifierMode};
use rlv_core::Domain;

use crate::backend::{BackendKind, BackendSpec};
use crate::error::{HarnessError, Result};

pub const ENV_PREFIX: &str = "RLV_";

/// Where a value came from, for diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    Default,
    File { path: String, line: usize },
    Env(String),
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Default => f.write_str("default"),
            Source::File { path, line } => write!(f, "{path}:{line}"),
            Source::Env(var) => write!(f, "environment variable {var}"),
            Source::Flag => f.write_str("--set"),
        }
    }
}

/// Every recognized key with its default. `None` marks a required key.
const KEYS: &[(&str, Option<&str>)] = &[
    ("method", None),
    ("verifier_mode", Some("GENERATIVE")),
    ("seed", Some("0")),
    ("total_iterations", Some("200")),
    ("task.difficulty", Some("2")),
    ("task.domain", Some("ADD_ONLY")),
    ("task.modulus", Some("10")),
    ("sampling.group_size", Some("8")),
    ("sampling.batch_prompts", Some("16")),
    ("sampling.max_len", Some("16")),
    ("sampling.temperature", Some("1.0")),
    ("rl.beta", Some("0.01")),
    ("rl.clip_epsilon", Some("0.2")),
    ("rl.ppo_epochs", Some("2")),
    ("rl.vine_samples", Some("4")),
    ("rl.gae_gamma", Some("1.0")),
    ("rl.gae_lambda", Some("0.95")),
    ("verify.lambda_max", Some("1.0")),
    ("verify.probe_tasks", Some("64")),
    ("optim.lr_max", Some("4.0")),
    ("optim.head_lr_max", Some("0.25")),
    ("optim.ramp_fraction", Some("0.75")),
    ("features.window", Some("3")),
    ("features.structured", Some("true")),
    ("features.gain", Some("2")),
    ("pretrain.demos", Some("4000")),
    ("pretrain.lr", Some("0.5")),
    ("pretrain.noise", Some("0.5")),
    ("pretrain.max_difficulty", Some("3")),
    ("pretrain.domain", Some("MIXED")),
    ("backend.kind", Some("builtin")),
    ("backend.endpoint", Some("")),
    ("backend.model", Some("rlv")),
    ("backend.timeout_ms", Some("10000")),
    ("backend.max_retries", Some("3")),
];

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "__").to_ascii_uppercase())
}

fn key_from_env(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    Some(rest.to_ascii_lowercase().replace("__", "."))
}

/// Resolved key/value table with the origin of each value.
#[derive(Debug, Clone, Default)]
pub struct ConfigTable {
    values: BTreeMap<String, (String, Source)>,
}

impl ConfigTable {
    pub fn with_defaults() -> Self {
        let mut values = BTreeMap::new();
        for (k, v) in KEYS {
            if let Some(v) = v {
                values.insert(k.to_string(), (v.to_string(), Source::Default));
            }
        }
        ConfigTable { values }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn source(&self, key: &str) -> Option<&Source> {
        self.values.get(key).map(|(_, s)| s)
    }

    fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        if !known(key) {
            return Err(HarnessError::Config(format!("{source}: unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), (value.to_string(), source));
        Ok(())
    }

    /// Parses config file text. Blank lines and `#` comments are skipped;
    /// a key may appear only once per file.
    pub fn apply_file(&mut self, path: &str, text: &str) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(HarnessError::Config(format!("{path}:{line}: expected `key = value`, got `{content}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(HarnessError::Config(format!("{path}:{line}: empty key")));
            }
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(HarnessError::Config(format!("{path}:{line}: `{key}` already set on line {first}")));
            }
            self.set(key, value, Source::File { path: path.to_string(), line })?;
        }
        Ok(())
    }

    /// Applies `RLV_*` variables. Unrelated variables are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut vars: Vec<(String, String)> =
            vars.into_iter().map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string())).collect();
        vars.sort();
        for (var, value) in vars {
            if let Some(key) = key_from_env(&var) {
                self.set(&key, value.trim(), Source::Env(var.clone()))?;
            }
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let Some((key, value)) = pair.split_once('=') else {
                return Err(HarnessError::Config(format!("--set expects key=value, got `{pair}`")));
            };
            self.set(key.trim(), value.trim(), Source::Flag)?;
        }
        Ok(())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| HarnessError::Config(format!("missing required key `{key}`")))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.parse().map_err(|e| {
            let at = self.source(key).map(ToString::to_string).unwrap_or_default();
            HarnessError::Config(format!("{at}: bad value `{raw}` for `{key}`: {e}"))
        })
    }

    /// Canonical `key = value` listing of every resolved key, sorted. Feeding
    /// it back through [`ConfigTable::apply_file`] reproduces the run.
    pub fn echo(&self) -> String {
        self.values.iter().map(|(k, (v, _))| format!("{k} = {v}\n")).collect()
    }
}

/// Everything a `train` invocation needs.
#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub run: RunConfig,
    pub backend: BackendSpec,
    pub echo: String,
}

impl HarnessConfig {
    pub fn from_table(table: &ConfigTable) -> Result<Self> {
        let run = RunConfig {
            method: table.parse::<Method>("method")?,
            verifier_mode: table.parse::<VerifierMode>("verifier_mode")?,
            seed: table.parse("seed")?,
            total_iterations: table.parse("total_iterations")?,
            difficulty: table.parse("task.difficulty")?,
            domain: table.parse::<Domain>("task.domain")?,
            modulus: table.parse("task.modulus")?,
            group_size: table.parse("sampling.group_size")?,
            batch_prompts: table.parse("sampling.batch_prompts")?,
            max_len: table.parse("sampling.max_len")?,
            temperature: table.parse("sampling.temperature")?,
            beta: table.parse("rl.beta")?,
            clip_epsilon: table.parse("rl.clip_epsilon")?,
            ppo_epochs: table.parse("rl.ppo_epochs")?,
            vine_samples: table.parse("rl.vine_samples")?,
            gae_gamma: table.parse("rl.gae_gamma")?,
            gae_lambda: table.parse("rl.gae_lambda")?,
            lambda_max: table.parse("verify.lambda_max")?,
            probe_tasks: table.parse("verify.probe_tasks")?,
            lr_max: table.parse("optim.lr_max")?,
            head_lr_max: table.parse("optim.head_lr_max")?,
            ramp_fraction: table.parse("optim.ramp_fraction")?,
            window: table.parse("features.window")?,
            structured_features: table.parse("features.structured")?,
            structured_gain: table.parse("features.gain")?,
            pretrain: PretrainConfig {
                demos: table.parse("pretrain.demos")?,
                lr: table.parse("pretrain.lr")?,
                noise: table.parse("pretrain.noise")?,
                max_difficulty: table.parse("pretrain.max_difficulty")?,
                domain: table.parse::<Domain>("pretrain.domain")?,
            },
        };
        run.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let backend = BackendSpec {
            kind: table.parse::<BackendKind>("backend.kind")?,
            endpoint: table.require("backend.endpoint")?.to_string(),
            model: table.require("backend.model")?.to_string(),
            timeout_ms: table.parse("backend.timeout_ms")?,
            max_retries: table.parse("backend.max_retries")?,
            backoff_ms: crate::backend::DEFAULT_BACKOFF_MS,
        };
        Ok(HarnessConfig { run, backend, echo: table.echo() })
    }

    /// Resolves all layers: defaults, `file` (path and contents), env, flags.
    pub fn load<I, K, V>(file: Option<(&str, &str)>, env: I, overrides: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table = ConfigTable::with_defaults();
        if let Some((path, text)) = file {
            table.apply_file(path, text)?;
        }
        table.apply_env(env)?;
        table.apply_overrides(overrides)?;
        HarnessConfig::from_table(&table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NO_ENV: [(&str, &str); 0] = [];

    #[test]
    fn comments_and_prefixes() {
        let text = "# header\nmethod = RLOO   # trailing\n\nrl.beta = 0.05\ntask.domain=MIXED\n";
        let c = HarnessConfig::load(Some(("run.cfg", text)), NO_ENV, &[]).unwrap();
        assert_eq!(c.run.method, Method::Rloo);
        assert_eq!(c.run.beta, 0.05);
        assert_eq!(c.run.domain, Domain::Mixed);
        assert_eq!(c.run.lr_max, 4.0);
    }

    #[test]
    fn missing_method_is_named() {
        let err = HarnessConfig::load(Some(("run.cfg", "seed = 3\n")), NO_ENV, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("`method`"), "{err}");
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let err = HarnessConfig::load(Some(("a.cfg", "method = GRPO\n\nrl.bta = 1\n")), NO_ENV, &[]).unwrap_err();
        assert!(err.to_string().contains("a.cfg:3") && err.to_string().contains("rl.bta"), "{err}");
        let err = HarnessConfig::load(Some(("a.cfg", "method = GRPO\nseed = x\n")), NO_ENV, &[]).unwrap_err();
        assert!(err.to_string().contains("a.cfg:2"), "{err}");
        let err = HarnessConfig::load(Some(("a.cfg", "method GRPO\n")), NO_ENV, &[]).unwrap_err();
        assert!(err.to_string().contains("a.cfg:1"), "{err}");
        let err = HarnessConfig::load(Some(("a.cfg", "method = GRPO\nmethod = PPO\n")), NO_ENV, &[]).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = HarnessConfig::load(Some(("a.cfg", "method = GRPO\nrl.clip_epsilon = 1.5\n")), NO_ENV, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn precedence_default_file_env_flag() {
        let file = Some(("run.cfg", "method = GRPO\nrl.beta = 0.1\nseed = 1\ntotal_iterations = 7\n"));
        let env = [("RLV_RL__BETA", "0.2"), ("RLV_SEED", "2"), ("HOME", "/root")];
        let c = HarnessConfig::load(file, env, &["seed=3".to_string()]).unwrap();
        assert_eq!(c.run.total_iterations, 7); // file over default
        assert_eq!(c.run.beta, 0.2); // env over file
        assert_eq!(c.run.seed, 3); // flag over env
        assert_eq!(c.run.clip_epsilon, 0.2); // default
        assert!(HarnessConfig::load(file, [("RLV_NOPE", "1")], &[]).is_err());
        assert_eq!(env_var_name("backend.timeout_ms"), "RLV_BACKEND__TIMEOUT_MS");
    }

    #[test]
    fn echo_reproduces_config() {
        let c = HarnessConfig::load(Some(("run.cfg", "method = PPO\nrl.gae_lambda = 0.9\n")), NO_ENV, &[]).unwrap();
        let again = HarnessConfig::load(Some(("config.txt", c.echo.as_str())), NO_ENV, &[]).unwrap();
        assert_eq!(again.run, c.run);
        assert_eq!(again.echo, c.echo);
    }
}
