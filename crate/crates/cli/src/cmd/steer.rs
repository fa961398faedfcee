use crate::config::{parse_grid, parse_heads, Config};
use crate::manifest::Manifest;
use anyhow::Result;
use clap::Args as ClapArgs;
use headforge_core::causal;
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// Trained checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Task suite file.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Heads to sweep, e.g. 5:4,5:5.
    #[arg(long)]
    heads: Option<String>,
    /// Scale grid: start:stop:step or a comma list. Must include 0 and 1.
    #[arg(long)]
    grid: Option<String>,
    /// Optional output directory for the curve table.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cfg: &Config, args: Args) -> Result<()> {
    let model_path: PathBuf = cfg.require("model", args.model)?;
    let suite_path: PathBuf = cfg.require("suite", args.suite)?;
    let heads_spec: String = cfg.require("heads", args.heads)?;
    let grid_spec: String = cfg.resolve("grid", args.grid, "0:1.5:0.25".to_string())?;

    let model = crate::cmd::load_analysis_model(&model_path)?;
    let cases = causal::load_suite(&suite_path, model.cfg.vocab)?;
    let heads = parse_heads(&heads_spec)?;
    let grid = parse_grid(&grid_spec)?;
    let curve = causal::steering_sweep(&model, &cases, &heads, &grid)?;

    for (s, p) in curve.scales.iter().zip(&curve.mean_p) {
        println!("scale {s:.2} mean_p {p:.6}");
    }
    println!("control_range {:.6}", curve.control_range);

    if let Some(out) = &args.out {
        crate::cmd::ensure_dir(out)?;
        let table = out.join("curve.tsv");
        let mut text = String::from("scale\tmean_p\n");
        for (s, p) in curve.scales.iter().zip(&curve.mean_p) {
            text.push_str(&format!("{s:.10e}\t{p:.10e}\n"));
        }
        std::fs::write(&table, text)?;
        let mut m = Manifest::new("steer");
        m.setting("heads", &heads_spec)
            .setting("grid", &grid_spec)
            .setting("control-range", format!("{:.10e}", curve.control_range))
            .input("model", &model_path)
            .input("suite", &suite_path)
            .output(&table);
        super::note_config(&mut m, cfg);
        m.write(out)?;
    }
    Ok(())
}
