//! Flat key=value configuration shared by all subcommands.
//!
//! A config file supplies defaults; explicit command-line flags override
//! them. Lines are `key = value`, blank lines and `#` comments are skipped.
//! Keys use the same spelling as the long flags they back.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Default, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
    source: Option<std::path::PathBuf>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {}: expected key=value, got {line:?}", lineno + 1);
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config {
            values,
            source: Some(path.to_path_buf()),
        })
    }

    /// The file this config was loaded from, for manifest provenance.
    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Flag value if given, else the config entry, else the default.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key {key}={raw}: {e}")),
            None => Ok(default),
        }
    }

    /// Like [`resolve`] but with no default; errors when unset everywhere.
    pub fn require<T>(&self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("config key {key}={raw}: {e}")),
            None => bail!("missing required option {key} (flag or config)"),
        }
    }
}

/// Parses a comma-separated `layer:head` list, e.g. `5:4,5:5`.
pub fn parse_heads(s: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let Some((l, h)) = part.split_once(':') else {
            bail!("head {part:?}: expected layer:head");
        };
        out.push((
            l.trim().parse().with_context(|| format!("head {part:?}"))?,
            h.trim().parse().with_context(|| format!("head {part:?}"))?,
        ));
    }
    Ok(out)
}

/// Parses a sweep grid: either `start:stop:step` or a comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            bail!("grid {s:?}: expected start:stop:step");
        }
        let start: f64 = parts[0].trim().parse().context("grid start")?;
        let stop: f64 = parts[1].trim().parse().context("grid stop")?;
        let step: f64 = parts[2].trim().parse().context("grid step")?;
        if step <= 0.0 || stop < start {
            bail!("grid {s:?}: need step > 0 and stop >= start");
        }
        let mut out = Vec::new();
        let n = ((stop - start) / step).round() as usize;
        for i in 0..=n {
            let v = start + step * i as f64;
            if v <= stop + 1e-12 {
                out.push(v);
            }
        }
        return Ok(out);
    }
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("grid value {p:?}")))
        .collect()
}
