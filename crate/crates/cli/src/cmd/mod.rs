pub mod ablate;
pub mod ari;
pub mod cluster;
pub mod features;
pub mod report;
pub mod steer;
pub mod trace;
pub mod train;

use crate::config::Config;
use crate::manifest::Manifest;
use anyhow::{Context, Result};
use headforge_core::model::Model;
use std::path::Path;

/// Records the config file as a manifest input when one was loaded.
pub fn note_config(m: &mut Manifest, config: &Config) {
    if let Some(src) = config.source() {
        m.input("config", src);
    }
}

/// Loads a checkpoint and casts it to f64 for analysis passes.
pub fn load_analysis_model(path: &Path) -> Result<Model<f64>> {
    let m = Model::<f32>::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(m.cast())
}

/// Creates the directory (and parents) if needed.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

/// Writes integer labels one per line.
pub fn write_labels(path: &Path, labels: &[i64]) -> Result<()> {
    let mut text = String::new();
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Reads integer labels written by [`write_labels`].
pub fn read_labels(path: &Path) -> Result<Vec<i64>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading labels {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.trim()
                .parse::<i64>()
                .with_context(|| format!("{}:{}: bad label {line:?}", path.display(), i + 1))
        })
        .collect()
}
