use crate::config::{parse_heads, Config};
use crate::manifest::Manifest;
use anyhow::{bail, Context, Result};
use clap::Args as ClapArgs;
use headforge_core::causal;
use headforge_core::cluster::{depth_distribution, diverse_samples};
use headforge_core::features::{self, HeadGroups, Tier};
use headforge_core::trace;
use std::collections::BTreeSet;
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// Run directory holding traces.bin, labels.txt, model.ckpt, suites/.
    #[arg(long)]
    dir: PathBuf,
    /// Output directory; defaults to <dir>/report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Anchor head group for the effect matrix, e.g. 5:2,5:3.
    #[arg(long)]
    anchor: Option<String>,
    /// Entity head group for the effect matrix, e.g. 5:4,5:5.
    #[arg(long)]
    entity: Option<String>,
    /// Diverse samples listed per cluster.
    #[arg(long)]
    samples_per_cluster: Option<usize>,
}

pub fn run(cfg: &Config, args: Args) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.dir.join("report"));
    crate::cmd::ensure_dir(&out)?;
    let mut m = Manifest::new("report");
    let mut wrote_any = false;

    let traces_path = args.dir.join("traces.bin");
    let labels_path = args.dir.join("labels.txt");
    let model_path = args.dir.join("model.ckpt");
    let suites_dir = args.dir.join("suites");

    let traces = if traces_path.is_file() {
        let (meta, traces) = trace::read(&traces_path)?;
        m.input("traces", &traces_path);
        Some((meta, traces))
    } else {
        None
    };
    let labels = if labels_path.is_file() {
        m.input("labels", &labels_path);
        Some(crate::cmd::read_labels(&labels_path)?)
    } else {
        None
    };

    if let Some((meta, traces)) = &traces {
        let k_star: Vec<f64> = traces
            .iter()
            .map(|t| features::stability(t).0 as f64)
            .collect();
        let mut text = String::from("group\tn\tearly\tmiddle\tlate\n");
        let overall = depth_distribution(&k_star);
        text.push_str(&depth_row("all", k_star.len(), &overall));
        if let Some(labels) = &labels {
            if labels.len() != traces.len() {
                bail!(
                    "labels.txt has {} rows but traces.bin has {}",
                    labels.len(),
                    traces.len()
                );
            }
            for cluster in sorted_clusters(labels) {
                let ks: Vec<f64> = labels
                    .iter()
                    .zip(&k_star)
                    .filter(|(&l, _)| l == cluster)
                    .map(|(_, &k)| k)
                    .collect();
                let name = cluster_name(cluster);
                text.push_str(&depth_row(&name, ks.len(), &depth_distribution(&ks)));
            }
        }
        let depth_path = out.join("depth.tsv");
        std::fs::write(&depth_path, text).context("writing depth.tsv")?;
        m.output(&depth_path);
        wrote_any = true;

        if let Some(labels) = &labels {
            let per_cluster: usize =
                cfg.resolve("samples-per-cluster", args.samples_per_cluster, 5)?;
            let groups = head_groups(cfg, &args)?;
            let matrix = features::extract_matrix(traces, meta, Tier::T2, &groups)?;
            let rows = matrix.rows_f64();
            let mut text =
                String::from("cluster\trank\trow\tseq_id\tposition\ttoken_id\tk_star\n");
            for cluster in sorted_clusters(labels) {
                if cluster < 0 {
                    continue;
                }
                let picks = diverse_samples(&rows, labels, cluster, per_cluster)?;
                for (rank, row) in picks.iter().enumerate() {
                    let t = &traces[*row];
                    text.push_str(&format!(
                        "{cluster}\t{rank}\t{row}\t{}\t{}\t{}\t{}\n",
                        t.seq_id,
                        t.position,
                        t.token_id,
                        features::stability(t).0
                    ));
                }
            }
            let samples_path = out.join("samples.tsv");
            std::fs::write(&samples_path, text).context("writing samples.tsv")?;
            m.output(&samples_path);
        }
    }

    if model_path.is_file() && suites_dir.is_dir() {
        let model = crate::cmd::load_analysis_model(&model_path)?;
        let mut suites = Vec::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&suites_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
            .collect();
        entries.sort();
        for path in &entries {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            suites.push((name, causal::load_suite(path, model.cfg.vocab)?));
            m.input("suite", path);
        }
        if !suites.is_empty() {
            let groups = head_groups(cfg, &args)?;
            let named = vec![
                ("anchor".to_string(), groups.anchor.clone()),
                ("entity".to_string(), groups.entity.clone()),
            ];
            let em = causal::effect_matrix(&model, &suites, &named)?;
            let mut text = String::from("task");
            for g in &em.group_names {
                text.push('\t');
                text.push_str(g);
            }
            text.push('\n');
            for (task, row) in em.task_names.iter().zip(&em.cells) {
                text.push_str(task);
                for v in row {
                    text.push_str(&format!("\t{v:.10e}"));
                }
                text.push('\n');
            }
            text.push_str(&format!("diagonality\t{:.6}\n", em.diagonality));
            let effect_path = out.join("effect.tsv");
            std::fs::write(&effect_path, text).context("writing effect.tsv")?;
            m.input("model", &model_path).output(&effect_path);
            wrote_any = true;
        }
    }

    if !wrote_any {
        bail!(
            "nothing to report: {} has neither traces.bin nor model.ckpt + suites/",
            args.dir.display()
        );
    }
    super::note_config(&mut m, cfg);
    m.write(&out)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn head_groups(cfg: &Config, args: &Args) -> Result<HeadGroups> {
    let reference = HeadGroups::reference();
    let anchor: String = cfg.resolve(
        "anchor",
        args.anchor.clone(),
        group_str(&reference.anchor),
    )?;
    let entity: String = cfg.resolve(
        "entity",
        args.entity.clone(),
        group_str(&reference.entity),
    )?;
    Ok(HeadGroups {
        anchor: parse_heads(&anchor)?,
        entity: parse_heads(&entity)?,
    })
}

fn group_str(heads: &[(usize, usize)]) -> String {
    let parts: Vec<String> = heads.iter().map(|(l, h)| format!("{l}:{h}")).collect();
    parts.join(",")
}

fn sorted_clusters(labels: &[i64]) -> Vec<i64> {
    let set: BTreeSet<i64> = labels.iter().copied().collect();
    set.into_iter().collect()
}

fn cluster_name(cluster: i64) -> String {
    if cluster < 0 {
        "noise".to_string()
    } else {
        format!("cluster_{cluster}")
    }
}

fn depth_row(name: &str, n: usize, d: &headforge_core::cluster::DepthReport) -> String {
    format!(
        "{name}\t{n}\t{:.6}\t{:.6}\t{:.6}\n",
        d.early, d.middle, d.late
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cluster_names_cover_noise() {
        assert_eq!(cluster_name(-1), "noise");
        assert_eq!(cluster_name(3), "cluster_3");
        assert_eq!(sorted_clusters(&[2, -1, 0, 2]), vec![-1, 0, 2]);
    }
}
