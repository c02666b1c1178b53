//! Run settings: flat `key = value` files merged with command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::presets::{default_eval_time, Preset, EX1_D, EX1_T};
use crate::rescale::{ChildStart, RescaleConfig, ScaleFactor, ThresholdRule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown setting {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("bad value for {key}: {msg}")]
    Value { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Every recognized key. CLI flags use the same names.
pub const KEYS: &[&str] = &[
    "preset",
    "p",
    "lambda",
    "I",
    "J",
    "k-max",
    "pad-cells",
    "M",
    "eval-time",
    "out",
    "seed",
    "cases",
    "emit",
    "tail-tol",
    "inject",
    "child-start",
    "T",
    "d",
    "init",
    "snapshot-stride",
];

/// Raw settings keyed by canonical name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, String>);

fn canonical(key: &str) -> Result<String, ConfigError> {
    let k = key.trim().trim_start_matches("--").replace('_', "-");
    KEYS.iter()
        .find(|c| **c == k || (c.len() > 1 && c.eq_ignore_ascii_case(&k)))
        .map(|c| c.to_string())
        .ok_or(ConfigError::UnknownKey(key.trim().to_string()))
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: n + 1 })?;
            s.set(k, v.trim())?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.0.insert(canonical(key)?, value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Entries of `other` replace ours.
    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.into(),
                    msg: e.to_string(),
                })
            })
            .transpose()
    }
}

/// Which output files to write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EmitFlags {
    pub norm_trace: bool,
    pub tau_series: bool,
    pub blowup_curve: bool,
    pub error_table: bool,
    pub solution_snapshots: bool,
}

impl EmitFlags {
    pub fn defaults() -> Self {
        Self {
            norm_trace: true,
            tau_series: true,
            blowup_curve: true,
            error_table: true,
            solution_snapshots: false,
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        let mut f = Self {
            norm_trace: false,
            tau_series: false,
            blowup_curve: false,
            error_table: false,
            solution_snapshots: false,
        };
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match item {
                "all" => {
                    f = Self::defaults();
                    f.solution_snapshots = true;
                }
                "none" => {}
                "norm_trace" => f.norm_trace = true,
                "tau_series" => f.tau_series = true,
                "blowup_curve" => f.blowup_curve = true,
                "error_table" => f.error_table = true,
                "solution_snapshots" | "snapshots" => f.solution_snapshots = true,
                other => {
                    return Err(ConfigError::Value {
                        key: "emit".into(),
                        msg: format!("unknown output {other:?}"),
                    })
                }
            }
        }
        Ok(f)
    }
}

/// Block analysis request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    None,
    /// `J = sqrt(I)` for every size that is a perfect square.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub preset: Preset,
    pub cfg: RescaleConfig,
    #[serde(rename = "I")]
    pub sizes: Vec<usize>,
    #[serde(rename = "J")]
    pub blocks: BlockMode,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub seed: u64,
    pub cases: usize,
    pub emit: EmitFlags,
    pub eval_time: f64,
    /// Blow-up time and slope of the exact blow-up curve (first preset only).
    #[serde(rename = "T")]
    pub t_blowup: f64,
    pub d: f64,
    #[serde(skip)]
    pub init: Option<PathBuf>,
    /// Keep every n-th slice in snapshot output; 0 picks a stride per level.
    pub snapshot_stride: usize,
}

fn parse_sizes(s: &str) -> Result<Vec<usize>, ConfigError> {
    let sizes = s
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ConfigError::Value {
            key: "I".into(),
            msg: e.to_string(),
        })?;
    if sizes.is_empty() || sizes.iter().any(|&n| n < 4) {
        return Err(ConfigError::Value {
            key: "I".into(),
            msg: "grid sizes must be at least 4".into(),
        });
    }
    Ok(sizes)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            msg: format!("expected a boolean, got {v:?}"),
        }),
    }
}

pub fn exact_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl RunManifest {
    pub fn from_settings(s: &Settings) -> Result<Self, ConfigError> {
        let preset: Preset = s.parsed("preset")?.unwrap_or(Preset::Example1);
        let p: f64 = s.parsed("p")?.unwrap_or(preset.default_p());
        let mut cfg = preset.default_config(p);
        if let Some(l) = s.parsed::<ScaleFactor>("lambda")? {
            cfg.lambda = l;
        }
        if let Some(k) = s.parsed("k-max")? {
            cfg.k_max = k;
        }
        if let Some(pad) = s.parsed("pad-cells")? {
            cfg.pad_cells = pad;
        }
        if let Some(m) = s.parsed::<f64>("M")? {
            cfg.threshold = ThresholdRule::Explicit(m);
        }
        if let Some(t) = s.parsed("tail-tol")? {
            cfg.tail_tol = t;
        }
        if let Some(v) = s.get("inject") {
            cfg.inject = parse_bool("inject", v)?;
        }
        if let Some(v) = s.get("child-start") {
            cfg.child_start = match v {
                "literal" => ChildStart::Literal,
                "interpolated" => ChildStart::Interpolated,
                _ => {
                    return Err(ConfigError::Value {
                        key: "child-start".into(),
                        msg: "expected literal or interpolated".into(),
                    })
                }
            };
        }
        cfg.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let sizes = match s.get("I") {
            Some(v) => parse_sizes(v)?,
            None => preset.default_sizes(),
        };
        let blocks = match s.get("J") {
            None => {
                if preset.default_blocks() {
                    BlockMode::Auto
                } else {
                    BlockMode::None
                }
            }
            Some("auto") => BlockMode::Auto,
            Some("none") | Some("0") => BlockMode::None,
            Some(v) => BlockMode::Fixed(v.parse().map_err(|e: std::num::ParseIntError| {
                ConfigError::Value {
                    key: "J".into(),
                    msg: e.to_string(),
                }
            })?),
        };
        if let BlockMode::Fixed(j) = blocks {
            if let Some(&bad) = sizes.iter().find(|&&n| j * j != n) {
                return Err(ConfigError::Invalid(format!(
                    "J = {j} requires I = J^2, got I = {bad}"
                )));
            }
        }
        let t_blowup: f64 = s.parsed("T")?.unwrap_or(EX1_T);
        let d: f64 = s.parsed("d")?.unwrap_or(EX1_D);
        let eval_time = s
            .parsed("eval-time")?
            .unwrap_or(default_eval_time(p, t_blowup));
        let init = s.get("init").map(PathBuf::from);
        if preset == Preset::Custom && init.is_none() {
            return Err(ConfigError::Invalid(
                "the custom preset needs init = <csv>".into(),
            ));
        }
        Ok(Self {
            preset,
            cfg,
            sizes,
            blocks,
            output_dir: PathBuf::from(s.get("out").unwrap_or("out")),
            seed: s.parsed("seed")?.unwrap_or(0),
            cases: s.parsed("cases")?.unwrap_or(1000),
            emit: match s.get("emit") {
                Some(v) => EmitFlags::parse(v)?,
                None => EmitFlags::defaults(),
            },
            eval_time,
            t_blowup,
            d,
            init,
            snapshot_stride: s.parsed("snapshot-stride")?.unwrap_or(0),
        })
    }

    /// Block count for grid size `n`, if blocks are requested and possible.
    pub fn blocks_for(&self, n: usize) -> Option<usize> {
        match self.blocks {
            BlockMode::None => None,
            BlockMode::Auto => exact_sqrt(n),
            BlockMode::Fixed(j) => Some(j),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut s =
            Settings::parse("# comment\npreset = example2\nI = 100,200\nk_max=20\n").unwrap();
        let mut cli = Settings::default();
        cli.set("I", "300").unwrap();
        s.merge(&cli);
        let m = RunManifest::from_settings(&s).unwrap();
        assert_eq!(m.preset, Preset::Example2);
        assert_eq!(m.sizes, vec![300]);
        assert_eq!(m.cfg.k_max, 20);
        assert_eq!(m.cfg.pad_cells, 12);
        assert_eq!(m.blocks, BlockMode::None);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(
            Settings::parse("frobnicate = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            Settings::parse("p 2"),
            Err(ConfigError::Syntax { line: 1 })
        ));
    }

    #[test]
    fn fixed_blocks_need_square_sizes() {
        let s = Settings::parse("I = 128\nJ = 11").unwrap();
        assert!(RunManifest::from_settings(&s).is_err());
        let s = Settings::parse("I = 121\nJ = 11").unwrap();
        assert_eq!(
            RunManifest::from_settings(&s).unwrap().blocks_for(121),
            Some(11)
        );
    }

    #[test]
    fn auto_blocks_skip_non_squares() {
        let s = Settings::parse("preset = example1\nI = 64,128").unwrap();
        let m = RunManifest::from_settings(&s).unwrap();
        assert_eq!(m.blocks_for(64), Some(8));
        assert_eq!(m.blocks_for(128), None);
        assert_eq!(m.eval_time, 15.0 / 32.0);
    }

    #[test]
    fn emit_list() {
        let e = EmitFlags::parse("tau_series, snapshots").unwrap();
        assert!(e.tau_series && e.solution_snapshots && !e.norm_trace);
        assert!(EmitFlags::parse("pictures").is_err());
    }
}
