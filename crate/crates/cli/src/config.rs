//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Command-line flags are applied on top with [`KeyValues::set`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use longseg_core::applik::BasisOrders;
use longseg_core::lbfgs::LbfgsConfig;
use longseg_core::longit::{LesionConfig, LesionPriorSource, LongConfig, PriorStrength};
use longseg_core::xsect::FitConfig;

/// Configuration or usage error; always maps to exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> ConfigResult<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    values: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> ConfigResult<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return err(format!("line {}: expected `key = value`", n + 1));
            };
            let key = k.trim();
            if key.is_empty() {
                return err(format!("line {}: empty key", n + 1));
            }
            if values
                .insert(key.to_string(), v.trim().to_string())
                .is_some()
            {
                return err(format!("line {}: duplicate key `{key}`", n + 1));
            }
        }
        Ok(Self { values })
    }

    pub fn read(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Rejects keys outside `allowed`; entries ending in `.` match any key with
    /// that prefix.
    pub fn check_keys(&self, allowed: &[&str]) -> ConfigResult<()> {
        let exact: BTreeSet<&str> = allowed.iter().copied().collect();
        for key in self.keys() {
            let ok = exact.contains(key)
                || allowed
                    .iter()
                    .any(|a| a.ends_with('.') && key.starts_with(a));
            if !ok {
                return err(format!("unknown config key `{key}`"));
            }
        }
        Ok(())
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn required(&self, key: &str) -> ConfigResult<&str> {
        self.str(key)
            .ok_or_else(|| ConfigError(format!("missing required key `{key}`")))
    }

    pub fn path(&self, key: &str) -> ConfigResult<PathBuf> {
        self.required(key).map(PathBuf::from)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> ConfigResult<Option<T>> {
        match self.str(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ConfigError(format!("cannot parse `{key} = {v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> ConfigResult<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> ConfigResult<Option<Vec<T>>> {
        let Some(v) = self.str(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| ConfigError(format!("cannot parse `{s}` in `{key}`")))
            })
            .collect::<ConfigResult<Vec<T>>>()
            .map(Some)
    }

    /// Positive finite real.
    pub fn positive(&self, key: &str, default: f64) -> ConfigResult<f64> {
        let v = self.get_or(key, default)?;
        if !(v > 0.0 && v.is_finite()) {
            return err(format!("`{key}` must be positive, got {v}"));
        }
        Ok(v)
    }

    pub fn non_negative(&self, key: &str, default: f64) -> ConfigResult<f64> {
        let v = self.get_or(key, default)?;
        if !(v >= 0.0 && v.is_finite()) {
            return err(format!("`{key}` must be non-negative, got {v}"));
        }
        Ok(v)
    }
}

/// Keys understood by [`fit_config`].
pub const FIT_KEYS: &[&str] = &[
    "kappa",
    "max_sweeps",
    "em_tolerance",
    "bias_orders",
    "mesh_iterations",
    "seed",
    "threads",
    "lesion",
    "lesion_prior",
    "lesion_host",
    "lesion_offset",
    "lesion_threshold",
];

/// Keys understood by [`long_config`] on top of [`FIT_KEYS`].
pub const LONG_KEYS: &[&str] = &[
    "kappa0_ratio",
    "p0_ratio",
    "outer_iterations",
    "inner_sweeps",
];

fn orders(kv: &KeyValues) -> ConfigResult<BasisOrders> {
    match kv.list::<usize>("bias_orders")? {
        None => Ok([2, 2, 2]),
        Some(v) if v.len() == 1 => Ok([v[0]; 3]),
        Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        Some(_) => err("`bias_orders` takes one or three integers"),
    }
}

/// `uniform:p` or `class:k:fraction`.
fn lesion_prior(text: &str) -> ConfigResult<LesionPriorSource> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let num = |s: &str| -> ConfigResult<f64> {
        s.parse()
            .map_err(|_| ConfigError(format!("cannot parse `{s}` in lesion_prior")))
    };
    match parts.as_slice() {
        ["uniform", p] => Ok(LesionPriorSource::Uniform(num(p)?)),
        ["class", k, f] => Ok(LesionPriorSource::AtlasClass {
            class: k
                .parse()
                .map_err(|_| ConfigError(format!("bad class `{k}` in lesion_prior")))?,
            fraction: num(f)?,
        }),
        _ => err(format!(
            "lesion_prior must be `uniform:p` or `class:k:fraction`, got `{text}`"
        )),
    }
}

fn lesion_config(kv: &KeyValues) -> ConfigResult<Option<LesionConfig>> {
    if !kv.get_or("lesion", false)? {
        return Ok(None);
    }
    let prior = lesion_prior(kv.str("lesion_prior").unwrap_or("uniform:0.01"))?;
    let host: u32 = kv
        .get("lesion_host")?
        .ok_or_else(|| ConfigError("`lesion = true` needs `lesion_host`".into()))?;
    let offset = kv
        .list::<f64>("lesion_offset")?
        .ok_or_else(|| ConfigError("`lesion = true` needs `lesion_offset`".into()))?;
    let mut cfg = LesionConfig::new(prior, host, offset);
    cfg.threshold = kv.get_or("lesion_threshold", 0.5)?;
    Ok(Some(cfg))
}

pub fn fit_config(kv: &KeyValues) -> ConfigResult<FitConfig> {
    let mut cfg = FitConfig {
        kappa: kv.positive("kappa", FitConfig::default().kappa)?,
        max_outer_sweeps: kv.get_or("max_sweeps", 30)?,
        em_tolerance: kv.positive("em_tolerance", 1e-6)?,
        bias_orders: orders(kv)?,
        seed: kv.get_or("seed", 0)?,
        lesion: lesion_config(kv)?,
        ..Default::default()
    };
    if let Some(iters) = kv.get("mesh_iterations")? {
        cfg.mesh = LbfgsConfig {
            max_iters: iters,
            ..cfg.mesh
        };
    }
    Ok(cfg)
}

pub fn long_config(kv: &KeyValues) -> ConfigResult<LongConfig> {
    let d = LongConfig::default();
    let p0_ratio = kv.non_negative("p0_ratio", 0.5)?;
    Ok(LongConfig {
        cross: fit_config(kv)?,
        kappa0_ratio: kv.positive("kappa0_ratio", d.kappa0_ratio)?,
        p0: PriorStrength::Ratio(p0_ratio),
        outer_iterations: kv.get_or("outer_iterations", d.outer_iterations)?,
        inner_sweeps: kv.get_or("inner_sweeps", d.inner_sweeps)?,
        ..d
    })
}

/// Settings that reduce the longitudinal model to independent fits.
pub fn make_degenerate(cfg: &mut LongConfig) {
    cfg.kappa0_ratio = 1e6;
    cfg.p0 = PriorStrength::Ratio(0.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_types_values() {
        let kv =
            KeyValues::parse("# c\nkappa = 0.5\n\nbias_orders = 1, 2, 3\nlesion=false\n").unwrap();
        let cfg = fit_config(&kv).unwrap();
        assert_eq!(cfg.kappa, 0.5);
        assert_eq!(cfg.bias_orders, [1, 2, 3]);
        assert!(cfg.lesion.is_none());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(KeyValues::parse("kappa 1").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        let kv = KeyValues::parse("kappa = -1").unwrap();
        assert!(fit_config(&kv).is_err());
        let kv = KeyValues::parse("kapa = 1").unwrap();
        assert!(kv.check_keys(FIT_KEYS).is_err());
        let kv = KeyValues::parse("rate.3 = 1").unwrap();
        assert!(kv.check_keys(&["rate."]).is_ok());
    }

    #[test]
    fn long_defaults_and_degenerate() {
        let mut cfg = long_config(&KeyValues::default()).unwrap();
        assert_eq!(cfg.kappa0_ratio, 20.0);
        assert_eq!(cfg.p0, PriorStrength::Ratio(0.5));
        assert_eq!(cfg.outer_iterations, 5);
        make_degenerate(&mut cfg);
        assert_eq!(cfg.kappa0(), 1e6 * cfg.cross.kappa);
    }

    #[test]
    fn lesion_options() {
        let kv = KeyValues::parse(
            "lesion = true\nlesion_prior = class:4:0.1\nlesion_host = 4\nlesion_offset = 0, 0.8",
        )
        .unwrap();
        let l = fit_config(&kv).unwrap().lesion.unwrap();
        assert_eq!(
            l.prior,
            LesionPriorSource::AtlasClass {
                class: 4,
                fraction: 0.1
            }
        );
        assert_eq!(l.intensity_offset, vec![0.0, 0.8]);
        assert!(lesion_prior("gauss:1").is_err());
    }
}
