use crate::config::{parse_heads, Config};
use crate::manifest::Manifest;
use anyhow::Result;
use clap::Args as ClapArgs;
use headforge_core::causal::{self, InterventionSpec};
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// Trained checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Task suite file.
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Heads to rescale, e.g. 5:4,5:5.
    #[arg(long)]
    heads: Option<String>,
    /// Scale factor; 0 removes the heads, 1 is the identity.
    #[arg(long)]
    scale: Option<f64>,
    /// Optional output directory for the per-case table.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cfg: &Config, args: Args) -> Result<()> {
    let model_path: PathBuf = cfg.require("model", args.model)?;
    let suite_path: PathBuf = cfg.require("suite", args.suite)?;
    let heads_spec: String = cfg.require("heads", args.heads)?;
    let scale: f64 = cfg.resolve("scale", args.scale, 0.0)?;

    let model = crate::cmd::load_analysis_model(&model_path)?;
    let cases = causal::load_suite(&suite_path, model.cfg.vocab)?;
    let heads = parse_heads(&heads_spec)?;
    let spec = InterventionSpec::new(heads.iter().copied(), scale)?;
    let stats = causal::run_suite(&model, &cases, Some(&spec))?;

    println!(
        "cases {} mean_delta {:.6} std_delta {:.6} (as % of probability: {:.4} / {:.4})",
        stats.results.len(),
        stats.mean_delta,
        stats.std_delta,
        stats.mean_delta_pct(),
        stats.std_delta_pct()
    );

    if let Some(out) = &args.out {
        crate::cmd::ensure_dir(out)?;
        let table = out.join("cases.tsv");
        let mut text = String::from("case\ttask\tp_baseline\tp_intervened\tdelta\n");
        for (i, (case, r)) in cases.iter().zip(&stats.results).enumerate() {
            text.push_str(&format!(
                "{i}\t{}\t{:.10e}\t{:.10e}\t{:.10e}\n",
                case.task.as_str(),
                r.p_baseline,
                r.p_intervened,
                r.delta
            ));
        }
        std::fs::write(&table, text)?;
        let mut m = Manifest::new("ablate");
        m.setting("heads", &heads_spec)
            .setting("scale", scale)
            .input("model", &model_path)
            .input("suite", &suite_path)
            .output(&table);
        super::note_config(&mut m, cfg);
        m.write(out)?;
    }
    Ok(())
}
