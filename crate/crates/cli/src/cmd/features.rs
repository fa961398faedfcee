use crate::config::{parse_heads, Config};
use crate::manifest::Manifest;
use anyhow::Result;
use clap::Args as ClapArgs;
use headforge_core::features::{self, HeadGroups, Tier};
use headforge_core::trace;
use std::path::{Path, PathBuf};

#[derive(ClapArgs)]
pub struct Args {
    /// Trace file produced by the trace subcommand.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output feature matrix file.
    #[arg(long)]
    out: PathBuf,
    /// Feature tier: t1, t2, t2pos, or topk.
    #[arg(long)]
    tier: Option<String>,
    /// Anchor head group as layer:head pairs, e.g. 5:2,5:3.
    #[arg(long)]
    anchor: Option<String>,
    /// Entity head group as layer:head pairs, e.g. 5:4,5:5.
    #[arg(long)]
    entity: Option<String>,
}

pub fn run(cfg: &Config, args: Args) -> Result<()> {
    let input: PathBuf = cfg.require("in", args.input)?;
    let tier_name: String = cfg.resolve("tier", args.tier, "t2".to_string())?;
    let tier = Tier::parse(&tier_name)?;
    let reference = HeadGroups::reference();
    let anchor_spec: String = cfg.resolve("anchor", args.anchor, group_str(&reference.anchor))?;
    let entity_spec: String = cfg.resolve("entity", args.entity, group_str(&reference.entity))?;
    let groups = HeadGroups {
        anchor: parse_heads(&anchor_spec)?,
        entity: parse_heads(&entity_spec)?,
    };

    let (meta, traces) = trace::read(&input)?;
    let matrix = features::extract_matrix(&traces, &meta, tier, &groups)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            crate::cmd::ensure_dir(dir)?;
        }
    }
    features::write_matrix(&args.out, &matrix)?;
    let index = index_path(&args.out);
    features::write_index(&index, &traces)?;
    println!("{} rows x {} features ({})", matrix.rows, matrix.dim, tier_name);

    let dir = args
        .out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut m = Manifest::new("features");
    m.setting("tier", &tier_name)
        .setting("anchor", &anchor_spec)
        .setting("entity", &entity_spec)
        .input("traces", &input)
        .output(&args.out)
        .output(&index);
    super::note_config(&mut m, cfg);
    m.write(&dir)?;
    Ok(())
}

fn group_str(heads: &[(usize, usize)]) -> String {
    let parts: Vec<String> = heads.iter().map(|(l, h)| format!("{l}:{h}")).collect();
    parts.join(",")
}

/// `f.bin` gets its row index at `f.idx.tsv`.
pub fn index_path(matrix: &Path) -> PathBuf {
    matrix.with_extension("idx.tsv")
}
