use crate::config::Config;
use crate::manifest::Manifest;
use anyhow::{bail, Result};
use clap::Args as ClapArgs;
use headforge_core::cluster::{hdbscan, kmeans, pca_fit_project, standardize};
use headforge_core::features;
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// Feature matrix file.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output directory for labels and summaries.
    #[arg(long)]
    out: PathBuf,
    /// Algorithm: kmeans (raw feature space) or hdbscan
    /// (standardize, project, then density clustering).
    #[arg(long)]
    algo: Option<String>,
    /// Cluster count for kmeans.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Projection dimensionality for the hdbscan pipeline.
    #[arg(long)]
    pca_dims: Option<usize>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    min_samples: Option<usize>,
}

pub fn run(cfg: &Config, args: Args) -> Result<()> {
    let input: PathBuf = cfg.require("in", args.input)?;
    let algo: String = cfg.resolve("algo", args.algo, "kmeans".to_string())?;
    let matrix = features::read_matrix(&input)?;
    let rows = matrix.rows_f64();
    crate::cmd::ensure_dir(&args.out)?;
    let labels_path = args.out.join("labels.txt");
    let summary_path = args.out.join("summary.tsv");

    let mut m = Manifest::new("cluster");
    m.setting("algo", &algo).input("features", &input);

    match algo.as_str() {
        "kmeans" => {
            let k: usize = cfg.resolve("k", args.k, 10)?;
            let seed: u64 = cfg.resolve("seed", args.seed, 0)?;
            let result = kmeans(&rows, k, seed)?;
            let labels: Vec<i64> = result.labels.iter().map(|&l| l as i64).collect();
            crate::cmd::write_labels(&labels_path, &labels)?;
            let summary = format!(
                "k\tinertia\titerations\trows\n{k}\t{:.10e}\t{}\t{}\n",
                result.inertia,
                result.iterations,
                rows.len()
            );
            std::fs::write(&summary_path, summary)?;
            println!("kmeans k={k}: inertia {:.6e} in {} iterations", result.inertia, result.iterations);
            m.setting("k", k).setting("seed", seed);
        }
        "hdbscan" => {
            let pca_dims: usize = cfg.resolve("pca-dims", args.pca_dims, 30)?;
            let mcs: usize = cfg.resolve("min-cluster-size", args.min_cluster_size, 10)?;
            let ms: usize = cfg.resolve("min-samples", args.min_samples, 1)?;
            let mut standardized = rows;
            standardize(&mut standardized)?;
            let dims = pca_dims.min(standardized.len()).min(matrix.dim);
            let (pca, projected) = pca_fit_project(&standardized, dims)?;
            let result = hdbscan::hdbscan(&projected, mcs, ms)?;
            crate::cmd::write_labels(&labels_path, &result.labels)?;
            let noise = result.labels.iter().filter(|&&l| l == -1).count();
            let summary = format!(
                "clusters\tnoise\trows\tpca_dims\texplained\n{}\t{}\t{}\t{}\t{:.6}\n",
                result.clusters,
                noise,
                projected.len(),
                dims,
                pca.cumulative_explained()
            );
            std::fs::write(&summary_path, summary)?;
            let plot_path = args.out.join("plot.tsv");
            let mut plot = String::from("pc1\tpc2\tlabel\n");
            for (row, label) in projected.iter().zip(&result.labels) {
                let pc1 = row.first().copied().unwrap_or(0.0);
                let pc2 = row.get(1).copied().unwrap_or(0.0);
                plot.push_str(&format!("{pc1:.10e}\t{pc2:.10e}\t{label}\n"));
            }
            std::fs::write(&plot_path, plot)?;
            println!(
                "hdbscan: {} clusters, {}/{} noise",
                result.clusters,
                noise,
                projected.len()
            );
            m.setting("pca-dims", dims)
                .setting("min-cluster-size", mcs)
                .setting("min-samples", ms)
                .output(&plot_path);
        }
        other => bail!("unknown algorithm {other:?}, expected kmeans or hdbscan"),
    }

    m.output(&labels_path).output(&summary_path);
    super::note_config(&mut m, cfg);
    m.write(&args.out)?;
    Ok(())
}
