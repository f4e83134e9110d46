//! Resolved session configuration and the `key = value` config file.

use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use specvm_core::analyze::AnalysisCriteria;
use specvm_core::detect::IdentityMode;
use specvm_core::fuzz::{FuzzConfig, MutationOp};
use specvm_core::harden::HardenMode;
use specvm_core::spec::{Schedule, SpecConfig};
use specvm_core::vm::{Layout, VmConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SEED_ENV: &str = "SVM_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleArg {
    Prioritized,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum IdentityArg {
    Offset,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Fence,
    Slh,
}

impl From<IdentityArg> for IdentityMode {
    fn from(a: IdentityArg) -> Self {
        match a {
            IdentityArg::Offset => IdentityMode::Offset,
            IdentityArg::Raw => IdentityMode::Raw,
        }
    }
}

impl From<ModeArg> for HardenMode {
    fn from(a: ModeArg) -> Self {
        match a {
            ModeArg::Fence => HardenMode::Fence,
            ModeArg::Slh => HardenMode::Slh,
        }
    }
}

/// Every tunable of the pipeline, fully resolved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub window: u64,
    pub stride: u64,
    pub max_order: u32,
    pub order_base: u64,
    pub spec: bool,
    pub schedule: ScheduleArg,
    pub max_steps: u64,
    pub seed: u64,
    pub runs: u64,
    pub max_len: usize,
    pub workers: usize,
    pub ops: Vec<String>,
    pub identity: IdentityArg,
    pub min_branch_execs: u64,
    pub min_vuln_triggers: u64,
    pub uncontrolled_benign: bool,
    pub mode: ModeArg,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let s = SpecConfig::default();
        let f = FuzzConfig::default();
        let a = AnalysisCriteria::default();
        SessionConfig {
            window: s.window,
            stride: s.stride,
            max_order: s.max_order,
            order_base: s.order_base,
            spec: s.enabled,
            schedule: ScheduleArg::Prioritized,
            max_steps: VmConfig::default().max_steps,
            seed: f.seed,
            runs: f.max_runs,
            max_len: f.max_len,
            workers: f.workers,
            ops: f.ops.iter().map(|o| o.name().to_string()).collect(),
            identity: IdentityArg::Offset,
            min_branch_execs: a.min_branch_execs,
            min_vuln_triggers: a.min_vuln_triggers,
            uncontrolled_benign: a.uncontrolled_benign,
            mode: ModeArg::Fence,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| anyhow!("bad value for {key}: {value:?}: {e}"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    match value.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).map_err(|e| anyhow!("bad value for {key}: {value:?}: {e}")),
        None => parse(key, value),
    }
}

fn parse_enum<T: clap::ValueEnum>(key: &str, value: &str) -> Result<T> {
    T::from_str(value, false).map_err(|_| anyhow!("bad value for {key}: {value:?}"))
}

impl SessionConfig {
    /// Sets one option by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "window" => self.window = parse_u64(key, value)?,
            "stride" => self.stride = parse_u64(key, value)?,
            "max_order" => self.max_order = parse(key, value)?,
            "order_base" => self.order_base = parse_u64(key, value)?,
            "spec" => self.spec = parse(key, value)?,
            "schedule" => self.schedule = parse_enum(key, value)?,
            "max_steps" => self.max_steps = parse_u64(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "runs" => self.runs = parse_u64(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "ops" => self.ops = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "identity" => self.identity = parse_enum(key, value)?,
            "min_branch_execs" => self.min_branch_execs = parse_u64(key, value)?,
            "min_vuln_triggers" => self.min_vuln_triggers = parse_u64(key, value)?,
            "uncontrolled_benign" => self.uncontrolled_benign = parse(key, value)?,
            "mode" => self.mode = parse_enum(key, value)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    /// `SVM_SEED`, if set, overrides the file but not the command line.
    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = parse_u64(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn spec_config(&self) -> SpecConfig {
        SpecConfig {
            window: self.window,
            stride: self.stride,
            max_order: self.max_order,
            order_base: self.order_base,
            enabled: self.spec,
            schedule: match self.schedule {
                ScheduleArg::Prioritized => Schedule::Prioritized,
                ScheduleArg::Fixed => Schedule::Fixed,
            },
        }
    }

    pub fn vm_config(&self) -> VmConfig {
        VmConfig { layout: Layout::default(), max_steps: self.max_steps }
    }

    pub fn fuzz_config(&self) -> Result<FuzzConfig> {
        let ops = self
            .ops
            .iter()
            .map(|o| MutationOp::from_name(o).ok_or_else(|| anyhow!("unknown mutation op {o:?}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(FuzzConfig {
            seed: self.seed,
            max_runs: self.runs,
            max_len: self.max_len,
            ops,
            workers: self.workers,
            identity: self.identity.into(),
        })
    }

    pub fn criteria(&self) -> AnalysisCriteria {
        AnalysisCriteria {
            min_branch_execs: self.min_branch_execs,
            min_vuln_triggers: self.min_vuln_triggers,
            uncontrolled_benign: self.uncontrolled_benign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec_config().validate().map_err(|e| anyhow!("{e}"))?;
        let f = self.fuzz_config()?;
        if f.ops.is_empty() {
            bail!("ops must name at least one mutation op");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if self.min_branch_execs == 0 || self.min_vuln_triggers == 0 {
            bail!("analysis thresholds must be at least 1");
        }
        Ok(())
    }
}

/// First line of every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub version: String,
    pub config: SessionConfig,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    svm_header: Header,
}

impl Header {
    pub fn new(config: &SessionConfig) -> Header {
        Header { version: VERSION.to_string(), config: config.clone() }
    }

    /// `{"svm_header":{...}}` on one line.
    pub fn to_line(&self) -> String {
        serde_json::to_string(&HeaderLine { svm_header: self.clone() }).expect("header serializes")
    }

    pub fn from_line(line: &str) -> Option<Header> {
        serde_json::from_str::<HeaderLine>(line).ok().map(|h| h.svm_header)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_env_then_flag() {
        let mut c = SessionConfig::default();
        c.apply_file("# comment\nseed = 5\nwindow=100 # trailing\nidentity = raw\n").unwrap();
        assert_eq!((c.seed, c.window, c.identity), (5, 100, IdentityArg::Raw));
        c.apply_env_seed(Some("9")).unwrap();
        assert_eq!(c.seed, 9);
        assert!(c.apply_file("bogus = 1").is_err());
        assert!(c.apply_file("window").is_err());
    }

    #[test]
    fn header_round_trip() {
        let h = Header::new(&SessionConfig::default());
        let line = h.to_line();
        assert!(line.starts_with("{\"svm_header\":"));
        assert_eq!(Header::from_line(&line), Some(h));
    }
}
