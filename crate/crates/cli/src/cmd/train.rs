use crate::config::Config;
use crate::manifest::Manifest;
use anyhow::{Context, Result};
use clap::Args as ClapArgs;
use headforge_core::model::{Model, ModelConfig, StreamMode};
use headforge_core::train::{evaluate, write_metrics_tsv, Corpus, TrainConfig, Trainer};
use std::io::Write as _;
use std::path::PathBuf;

#[derive(ClapArgs)]
pub struct Args {
    /// Token corpus: little-endian u32 ids.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory for checkpoint, metrics, and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Per-layer supervision coefficient.
    #[arg(long)]
    lambda: Option<f64>,
    /// Enable per-layer supervision (true) or train the final-loss control.
    #[arg(long)]
    pls: Option<bool>,
    /// Stream routing: cascade or dual.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Data order and dropout seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parameter initialization seed.
    #[arg(long)]
    init_seed: Option<u64>,
    /// Print a progress line every N steps (0 = silent).
    #[arg(long, default_value_t = 200)]
    log_every: u64,
}

pub fn parse_mode(s: &str) -> Result<StreamMode> {
    match s {
        "cascade" => Ok(StreamMode::Cascade),
        "dual" => Ok(StreamMode::DualStandard),
        other => anyhow::bail!("unknown mode {other:?}, expected cascade or dual"),
    }
}

pub fn run(cfg: &Config, args: Args) -> Result<()> {
    let corpus_path: PathBuf = cfg.require("corpus", args.corpus)?;
    let model_cfg = ModelConfig {
        layers: cfg.resolve("layers", args.layers, 6)?,
        heads: cfg.resolve("heads", args.heads, 6)?,
        dim: cfg.resolve("dim", args.dim, 48)?,
        ffn_dim: cfg.resolve("ffn-dim", args.ffn_dim, 192)?,
        vocab: cfg.resolve("vocab", args.vocab, 64)?,
        max_seq: cfg.resolve("max-seq", args.max_seq, 64)?,
        dropout: cfg.resolve("dropout", args.dropout, 0.1)?,
        lambda: cfg.resolve("lambda", args.lambda, 0.1)?,
        pls_enabled: cfg.resolve("pls", args.pls, true)?,
        mode: parse_mode(&cfg.resolve("mode", args.mode, "cascade".to_string())?)?,
    };
    let train_cfg = TrainConfig {
        lr: cfg.resolve("lr", args.lr, 3e-4)?,
        weight_decay: cfg.resolve("weight-decay", args.weight_decay, 0.1)?,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        clip: 1.0,
        warmup_steps: cfg.resolve("warmup-steps", args.warmup_steps, 200)?,
        total_steps: cfg.resolve("total-steps", args.total_steps, 2700)?,
        batch_size: cfg.resolve("batch-size", args.batch_size, 16)?,
        seq_len: cfg.resolve("seq-len", args.seq_len, 48)?,
        val_fraction: cfg.resolve("val-fraction", args.val_fraction, 0.05)?,
        seed: cfg.resolve("seed", args.seed, 7)?,
    };
    let init_seed: u64 = cfg.resolve("init-seed", args.init_seed, 1)?;

    let corpus = Corpus::from_tokens_file(&corpus_path, model_cfg.vocab, train_cfg.val_fraction)?;
    crate::cmd::ensure_dir(&args.out)?;

    let model = Model::<f32>::init(model_cfg.clone(), init_seed)?;
    let mut trainer = Trainer::new(model, train_cfg.clone())?;
    let mut stats = Vec::with_capacity(train_cfg.total_steps as usize);
    loop {
        let s = trainer.step(&corpus)?;
        let done = s.step >= train_cfg.total_steps;
        if args.log_every > 0 && (s.step % args.log_every == 0 || done) {
            eprintln!(
                "step {}/{} loss {:.4} lr {:.3e} grad_norm {:.3}",
                s.step, train_cfg.total_steps, s.loss, s.lr, s.grad_norm
            );
        }
        stats.push(s);
        if done {
            break;
        }
    }

    let ckpt = args.out.join("model.ckpt");
    trainer.model.save(&ckpt)?;

    let metrics = args.out.join("metrics.tsv");
    let mut mf = std::io::BufWriter::new(std::fs::File::create(&metrics)?);
    write_metrics_tsv(&mut mf, &stats, model_cfg.layers)?;
    mf.flush()?;

    let report = evaluate(&trainer.model, corpus.validation(), train_cfg.seq_len)?;
    let val = args.out.join("val.tsv");
    let mut text = String::from("layer\tce\n");
    for (l, ce) in report.layer_ce.iter().enumerate() {
        text.push_str(&format!("{l}\t{ce:.10e}\n"));
    }
    std::fs::write(&val, text).context("writing val.tsv")?;
    println!("final validation ce {:.6} over {} windows", report.final_ce(), report.windows);

    let mut m = Manifest::new("train");
    m.setting("layers", model_cfg.layers)
        .setting("heads", model_cfg.heads)
        .setting("dim", model_cfg.dim)
        .setting("ffn-dim", model_cfg.ffn_dim)
        .setting("vocab", model_cfg.vocab)
        .setting("max-seq", model_cfg.max_seq)
        .setting("dropout", model_cfg.dropout)
        .setting("lambda", model_cfg.lambda)
        .setting("pls", model_cfg.pls_enabled)
        .setting("lr", train_cfg.lr)
        .setting("weight-decay", train_cfg.weight_decay)
        .setting("warmup-steps", train_cfg.warmup_steps)
        .setting("total-steps", train_cfg.total_steps)
        .setting("batch-size", train_cfg.batch_size)
        .setting("seq-len", train_cfg.seq_len)
        .setting("val-fraction", train_cfg.val_fraction)
        .setting("seed", train_cfg.seed)
        .setting("init-seed", init_seed)
        .input("corpus", &corpus_path)
        .output(&ckpt)
        .output(&metrics)
        .output(&val);
    super::note_config(&mut m, cfg);
    m.write(&args.out)?;
    Ok(())
}
