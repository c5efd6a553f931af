//! Key-value experiment configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Unknown keys, repeated
//! keys and out-of-range values are errors.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Invalid { key: &'static str, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub l: usize,
    pub d: usize,
    pub m: u32,
    pub nlevels: u32,
    /// Fine sites per side of the torus.
    pub side: usize,
    pub a: f64,
    pub mu_bar: f64,
    pub lambda: f64,
    /// Largest activity for the cluster demo.
    pub h0: f64,
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            l: 2,
            d: 1,
            m: 0,
            nlevels: 2,
            side: 8,
            a: 1.0,
            mu_bar: 0.1,
            lambda: 0.01,
            h0: 0.05,
            samples: 20,
            seed: 7,
            tol: 1e-11,
            out: PathBuf::from("out"),
        }
    }
}

/// Largest lattice the dense suites accept.
pub const MAX_SITES: usize = 1024;

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| ConfigError::Syntax { line, msg: format!("bad value {v:?} for {key}: {e}") })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected key = value, got {body:?}") })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Syntax { line, msg: format!("{k} given twice") });
            }
            match k {
                "l" => c.l = parse_value(line, k, v)?,
                "d" => c.d = parse_value(line, k, v)?,
                "m" => c.m = parse_value(line, k, v)?,
                "nlevels" => c.nlevels = parse_value(line, k, v)?,
                "side" => c.side = parse_value(line, k, v)?,
                "a" => c.a = parse_value(line, k, v)?,
                "mu_bar" => c.mu_bar = parse_value(line, k, v)?,
                "lambda" => c.lambda = parse_value(line, k, v)?,
                "h0" => c.h0 = parse_value(line, k, v)?,
                "samples" => c.samples = parse_value(line, k, v)?,
                "seed" => c.seed = parse_value(line, k, v)?,
                "tol" => c.tol = parse_value(line, k, v)?,
                "out" => c.out = PathBuf::from(v),
                _ => return Err(ConfigError::Syntax { line, msg: format!("unknown key {k:?}") }),
            }
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key, msg: String| Err(ConfigError::Invalid { key, msg });
        if !(2..=4).contains(&self.l) {
            return bad("l", format!("{} outside 2..=4", self.l));
        }
        if !(1..=3).contains(&self.d) {
            return bad("d", format!("{} outside 1..=3", self.d));
        }
        if self.nlevels < 2 {
            return bad("nlevels", "need at least 2 levels".into());
        }
        let mut p = 0u32;
        let mut s = 1usize;
        while s < self.side {
            s *= self.l;
            p += 1;
        }
        if s != self.side {
            return bad("side", format!("{} is not a power of L = {}", self.side, self.l));
        }
        if p < self.nlevels + self.m {
            return bad("side", format!("{} cannot hold a level-{} cube of side L^{}", self.side, self.nlevels, self.nlevels + self.m));
        }
        let sites = self.side.checked_pow(self.d as u32).unwrap_or(usize::MAX);
        if sites > MAX_SITES {
            return bad("side", format!("{sites} sites exceeds the dense limit {MAX_SITES}"));
        }
        if !(self.a.is_finite() && self.a > 0.0) {
            return bad("a", format!("{} must be positive", self.a));
        }
        if !(0.0..=1.0).contains(&self.mu_bar) {
            return bad("mu_bar", format!("{} outside [0, 1]", self.mu_bar));
        }
        if !(self.lambda > 0.0 && self.lambda <= (-1f64).exp()) {
            return bad("lambda", format!("{} outside (0, e^-1]", self.lambda));
        }
        if !(self.h0 > 0.0 && self.h0 <= 0.5) {
            return bad("h0", format!("{} outside (0, 0.5]", self.h0));
        }
        if !(1..=10_000).contains(&self.samples) {
            return bad("samples", format!("{} outside 1..=10000", self.samples));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return bad("tol", format!("{} must be finite and non-negative", self.tol));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canon.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_keys_and_comments() {
        let c = ExperimentConfig::parse("# run\nl = 3\nside=27 # torus\n\nseed = 11\n").unwrap();
        assert_eq!((c.l, c.side, c.seed), (3, 27, 11));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(ExperimentConfig::parse("l 2"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("x = 1"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(ExperimentConfig::parse("l = two"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(ExperimentConfig::parse("l = 2\nl = 3"), Err(ConfigError::Syntax { line: 2, .. })));
    }

    #[test]
    fn rejects_out_of_range() {
        for text in ["side = 12", "l = 1", "nlevels = 1", "side = 4\nnlevels = 3", "lambda = 0.5", "tol = -1", "d = 2\nside = 64"] {
            let c = ExperimentConfig::parse(text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
