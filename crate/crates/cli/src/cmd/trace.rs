use crate::config::Config;
use crate::manifest::Manifest;
use anyhow::{bail, Result};
use clap::Args as ClapArgs;
use headforge_core::trace::{self, TraceMeta};
use headforge_core::train::Corpus;
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// Trained checkpoint to trace.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Token corpus: little-endian u32 ids.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for traces.bin and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Number of prediction traces to capture.
    #[arg(long)]
    count: Option<usize>,
    /// Window length fed to the model per sequence.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Layer whose streams are stored as the raw activation snapshot.
    #[arg(long)]
    baseline_layer: Option<usize>,
    /// Which corpus split windows come from: val or train.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

pub fn run(cfg: &Config, args: Args) -> Result<()> {
    let model_path: PathBuf = cfg.require("model", args.model)?;
    let corpus_path: PathBuf = cfg.require("corpus", args.corpus)?;
    let count: usize = cfg.resolve("count", args.count, 2000)?;
    let seq_len: usize = cfg.resolve("seq-len", args.seq_len, 48)?;
    let split: String = cfg.resolve("split", args.split, "val".to_string())?;
    let val_fraction: f64 = cfg.resolve("val-fraction", args.val_fraction, 0.05)?;

    let model = crate::cmd::load_analysis_model(&model_path)?;
    let baseline: usize =
        cfg.resolve("baseline-layer", args.baseline_layer, model.cfg.layers - 1)?;
    let vocab: usize = cfg.resolve("vocab", args.vocab, model.cfg.vocab)?;
    if seq_len > model.cfg.max_seq {
        bail!("seq-len {} exceeds model max-seq {}", seq_len, model.cfg.max_seq);
    }

    let corpus = Corpus::from_tokens_file(&corpus_path, vocab, val_fraction)?;
    let tokens = match split.as_str() {
        "val" => corpus.validation(),
        "train" => corpus.train(),
        other => bail!("unknown split {other:?}, expected val or train"),
    };

    let mut traces = Vec::with_capacity(count);
    let mut seq_id = 0u64;
    let mut off = 0usize;
    let positions: Vec<usize> = (1..seq_len).collect();
    while traces.len() < count {
        if off + seq_len > tokens.len() {
            bail!(
                "{} split has only {} tokens, captured {}/{} traces",
                split,
                tokens.len(),
                traces.len(),
                count
            );
        }
        let window = &tokens[off..off + seq_len];
        traces.extend(trace::capture(&model, window, seq_id, &positions, baseline)?);
        seq_id += 1;
        off += seq_len;
    }
    traces.truncate(count);

    crate::cmd::ensure_dir(&args.out)?;
    let out_file = args.out.join("traces.bin");
    let meta = TraceMeta {
        layers: model.cfg.layers,
        heads: model.cfg.heads,
        dim: model.cfg.dim,
        vocab: model.cfg.vocab,
        baseline_layer: baseline,
    };
    trace::write(&out_file, &meta, &traces)?;
    println!("captured {} traces from {} windows", traces.len(), seq_id);

    let mut m = Manifest::new("trace");
    m.setting("count", count)
        .setting("seq-len", seq_len)
        .setting("baseline-layer", baseline)
        .setting("split", &split)
        .setting("val-fraction", val_fraction)
        .input("model", &model_path)
        .input("corpus", &corpus_path)
        .output(&out_file);
    super::note_config(&mut m, cfg);
    m.write(&args.out)?;
    Ok(())
}
