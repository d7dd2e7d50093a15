//! `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment. Keys outside [`KNOWN_KEYS`]
//! are rejected with their line number. Command-line flags override file
//! values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use srde_core::{DictionaryParams, HardwareSpec, PruneConfig};

use crate::CliError;

pub const KNOWN_KEYS: &[&str] = &[
    "scale",
    "dict.k",
    "dict.sigmas",
    "dict.thetas_deg",
    "dict.ratios",
    "dict.dog_pairs",
    "predictor.hidden",
    "predictor.res_blocks",
    "prune.alpha_target",
    "prune.delta_alpha",
    "prune.epsilon",
    "prune.lambda0",
    "prune.sample_count",
    "prune.lasso_tol",
    "prune.lasso_max_iters",
    "prune.bisect_max",
    "prune.blur_sigma",
    "hw.sm_count",
    "hw.blocks_per_sm",
    "hw.register_file",
    "hw.warp_size",
    "hw.max_warps",
    "hw.workers",
    "tune.budget",
    "tune.init",
    "tune.repeats",
    "tune.prefilter",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                line: lineno,
                message: format!("expected key = value, got '{line}'"),
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Config {
                    line: lineno,
                    message: format!("unknown key '{key}'"),
                });
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Flag values win over file values.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        debug_assert!(KNOWN_KEYS.contains(&key), "undocumented key {key}");
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Usage(format!("bad value '{v}' for {key}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.values
            .get(key)
            .map(|v| parse_list(v).map_err(|_| CliError::Usage(format!("bad list '{v}' for {key}"))))
            .transpose()
    }

    pub fn dictionary_params(&self) -> Result<DictionaryParams, CliError> {
        let mut p = DictionaryParams::default();
        p.k = self.get_or("dict.k", p.k)?;
        if let Some(v) = self.list("dict.sigmas")? {
            p.sigmas = v;
        }
        if let Some(v) = self.list("dict.thetas_deg")? {
            p.thetas = v.into_iter().map(f64::to_radians).collect();
        }
        if let Some(v) = self.list("dict.ratios")? {
            p.ratios = v;
        }
        if let Some(v) = self.values.get("dict.dog_pairs") {
            p.dog_pairs = parse_pairs(v)
                .ok_or_else(|| CliError::Usage(format!("bad pair list '{v}' for dict.dog_pairs")))?;
        }
        Ok(p)
    }

    pub fn hardware_spec(&self) -> Result<HardwareSpec, CliError> {
        let d = HardwareSpec::default();
        let spec = HardwareSpec {
            sm_count: self.get_or("hw.sm_count", d.sm_count)?,
            blocks_per_sm: self.get_or("hw.blocks_per_sm", d.blocks_per_sm)?,
            register_file: self.get_or("hw.register_file", d.register_file)?,
            warp_size: self.get_or("hw.warp_size", d.warp_size)?,
            max_warps: self.get_or("hw.max_warps", d.max_warps)?,
            workers: 1,
        };
        let workers = self.get_or("hw.workers", spec.default_workers())?;
        Ok(spec.with_workers(workers))
    }

    pub fn prune_config(&self, seed: u64) -> Result<PruneConfig, CliError> {
        let d = PruneConfig::default();
        Ok(PruneConfig {
            alpha_target: self.get_or("prune.alpha_target", d.alpha_target)?,
            delta_alpha: self.get_or("prune.delta_alpha", d.delta_alpha)?,
            epsilon: self.get_or("prune.epsilon", d.epsilon)?,
            lambda0: self.get_or("prune.lambda0", d.lambda0)?,
            sample_count: self.get_or("prune.sample_count", d.sample_count)?,
            seed,
            lasso_tol: self.get_or("prune.lasso_tol", d.lasso_tol)?,
            lasso_max_iters: self.get_or("prune.lasso_max_iters", d.lasso_max_iters)?,
            bisect_max: self.get_or("prune.bisect_max", d.bisect_max)?,
        })
    }
}

pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>, T::Err> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// `a:b, c:d` pairs.
fn parse_pairs(text: &str) -> Option<Vec<(f64, f64)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        })
        .collect()
}

/// `HxW` image sizes.
pub fn parse_size(text: &str) -> Option<(usize, usize)> {
    let (h, w) = text.trim().split_once(['x', 'X'])?;
    let (h, w) = (h.parse().ok()?, w.parse().ok()?);
    (h > 0 && w > 0).then_some((h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys_and_comments() {
        let cfg = RunConfig::parse("# comment\nscale = 3\n\nhw.workers=2 # inline\n").unwrap();
        assert_eq!(cfg.get::<usize>("scale").unwrap(), Some(3));
        assert_eq!(cfg.hardware_spec().unwrap().workers, 2);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("scale = 2\n\nprune.alhpa = 0.5\n").unwrap_err();
        assert!(matches!(err, CliError::Config { line: 3, .. }), "{err}");
        assert!(matches!(
            RunConfig::parse("scale 2").unwrap_err(),
            CliError::Config { line: 1, .. }
        ));
    }

    #[test]
    fn typed_values() {
        let cfg = RunConfig::parse(
            "dict.thetas_deg = 0, 90\ndict.dog_pairs = 0.5:1, 1:2\nprune.epsilon = x",
        )
        .unwrap();
        let p = cfg.dictionary_params().unwrap();
        assert_eq!(p.thetas.len(), 2);
        assert!((p.thetas[1] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(p.dog_pairs, vec![(0.5, 1.0), (1.0, 2.0)]);
        assert!(cfg.prune_config(0).is_err());
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("180x320"), Some((180, 320)));
        assert_eq!(parse_size("0x3"), None);
        assert_eq!(parse_size("12"), None);
    }
}
