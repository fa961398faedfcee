//! Training loop: corpus handling, LR schedule, AdamW, and paired runs.
//!
//! The schedule is linear warmup to the peak rate followed by cosine decay
//! to zero at the final step. The optimizer is decoupled AdamW with bias
//! correction; weight decay applies only to weight matrices (rank two and
//! up), never to biases or norm parameters. Gradients are clipped by global
//! norm before the update.
//!
//! Paired runs train a supervised model and its final-loss-only control
//! from bit-identical initial parameters with identical data order, so any
//! downstream difference is attributable to the loss shape alone.

use crate::model::{Model, ModelConfig};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Optimizer and loop configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Trailing fraction of the corpus held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale defaults matching the reference training run.
    pub fn full() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            warmup_steps: 1000,
            total_steps: 20000,
            batch_size: 64,
            seq_len: 512,
            val_fraction: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 || self.clip <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("weight_decay, clip, eps must be valid".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0,1)".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::Config("batch_size must be >=1 and seq_len >=2".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction {} outside [0,1)",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Learning rate used by update number `step` (1-based; step 0 is the
    /// rate before any update). Linear to the peak at `warmup_steps`, then
    /// cosine to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step == 0 {
            return 0.0;
        }
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Token corpus with a trailing validation split.
#[derive(Debug, Clone)]
pub struct Corpus {
    tokens: Vec<u32>,
    train_len: usize,
    pub vocab: usize,
}

impl Corpus {
    /// Wraps a token stream, holding out the final `val_fraction` of it.
    pub fn from_tokens(tokens: Vec<u32>, vocab: usize, val_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction {val_fraction} outside [0,1)")));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= vocab) {
            return Err(Error::Data(format!(
                "token id {} at position {pos} out of range for vocab {vocab}",
                tokens[pos]
            )));
        }
        let val_len = (tokens.len() as f64 * val_fraction).floor() as usize;
        Ok(Corpus {
            train_len: tokens.len() - val_len,
            tokens,
            vocab,
        })
    }

    /// Reads little-endian `u32` token ids from a file.
    pub fn from_tokens_file(path: &Path, vocab: usize, val_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Data(format!(
                "token file length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let tokens: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_tokens(tokens, vocab, val_fraction)
    }

    /// Treats raw bytes as token ids; the vocabulary must cover all 256.
    pub fn from_bytes(bytes: &[u8], vocab: usize, val_fraction: f64) -> Result<Self> {
        if vocab < 256 {
            return Err(Error::Config(format!(
                "byte corpus needs vocab >= 256, got {vocab}"
            )));
        }
        Self::from_tokens(bytes.iter().map(|&b| b as u32).collect(), vocab, val_fraction)
    }

    pub fn train(&self) -> &[u32] {
        &self.tokens[..self.train_len]
    }

    pub fn validation(&self) -> &[u32] {
        &self.tokens[self.train_len..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Measurements from one optimizer step.
#[derive(Debug, Clone)]
pub struct StepStats {
    /// Number of completed updates after this step (1-based).
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean cross entropy per layer, averaged over the batch.
    pub layer_ce: Vec<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Validation summary: per-layer mean cross entropy over held-out windows.
#[derive(Debug, Clone)]
pub struct ValReport {
    pub layer_ce: Vec<f64>,
    pub windows: usize,
}

impl ValReport {
    pub fn final_ce(&self) -> f64 {
        *self.layer_ce.last().expect("at least one layer")
    }
}

/// Whether weight decay applies to a tensor of this shape.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

/// One AdamW update on a single tensor. `t` is the 1-based update count.
#[allow(clippy::too_many_arguments)]
fn adamw_update(
    data: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..data.len() {
        let g = grad[i] as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        let mut p = data[i] as f64;
        p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        if decay {
            p -= lr * cfg.weight_decay * p;
        }
        data[i] = p as f32;
    }
}

/// Stateful training loop over a model.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    completed: u64,
    data_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        model.cfg.validate()?;
        cfg.validate()?;
        if cfg.seq_len > model.cfg.max_seq {
            return Err(Error::Config(format!(
                "seq_len {} exceeds model max_seq {}",
                cfg.seq_len, model.cfg.max_seq
            )));
        }
        let m = model.params.zeros_like();
        let v = model.params.zeros_like();
        Ok(Trainer {
            data_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15)),
            model,
            cfg,
            m,
            v,
            completed: 0,
        })
    }

    pub fn completed_steps(&self) -> u64 {
        self.completed
    }

    /// Runs one optimizer step on a freshly sampled batch.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepStats> {
        let train = corpus.train();
        let need = self.cfg.seq_len + 1;
        if train.len() < need {
            return Err(Error::Data(format!(
                "training split has {} tokens, need at least {need}",
                train.len()
            )));
        }
        if corpus.vocab != self.model.cfg.vocab {
            return Err(Error::Config(format!(
                "corpus vocab {} does not match model vocab {}",
                corpus.vocab, self.model.cfg.vocab
            )));
        }
        let layers = self.model.cfg.layers;
        let batch = self.cfg.batch_size;
        let mut grad_acc = self.model.params.zeros_like();
        let mut loss_sum = 0.0f64;
        let mut ce_sum = vec![0.0f64; layers];
        let step_no = self.completed + 1;

        for _ in 0..batch {
            let start = self.data_rng.gen_range(0..=train.len() - need);
            let input = &train[start..start + self.cfg.seq_len];
            let target = &train[start + 1..start + need];
            let lg = self
                .model
                .loss_graph(input, target, Some(&mut self.dropout_rng))?;
            let loss = lg.loss_value() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss".into(),
                    step: Some(step_no),
                });
            }
            loss_sum += loss;
            for (l, ce) in lg.layer_ce_values().into_iter().enumerate() {
                ce_sum[l] += ce as f64;
            }
            let mut graph = lg.pass.graph;
            graph.backward(lg.loss)?;
            for (i, &pid) in lg.pass.param_ids.iter().enumerate() {
                let g = graph.grad(pid).expect("parameter gradient");
                let acc = &mut grad_acc[i];
                for (a, &gv) in acc.iter_mut().zip(g) {
                    *a += gv;
                }
            }
        }

        let inv_b = 1.0 / batch as f32;
        let mut norm_sq = 0.0f64;
        for g in &mut grad_acc {
            for v in g.iter_mut() {
                *v *= inv_b;
                norm_sq += (*v as f64) * (*v as f64);
            }
        }
        let grad_norm = norm_sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                what: "gradient norm".into(),
                step: Some(step_no),
            });
        }
        if grad_norm > self.cfg.clip {
            let scale = (self.cfg.clip / grad_norm) as f32;
            for g in &mut grad_acc {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }

        let lr = self.cfg.lr_at(step_no);
        for i in 0..self.model.params.len() {
            let decay = decays(&self.model.params.get(i).shape);
            adamw_update(
                &mut self.model.params.get_mut(i).data,
                &grad_acc[i],
                &mut self.m[i],
                &mut self.v[i],
                step_no,
                lr,
                &self.cfg,
                decay,
            );
        }
        self.completed = step_no;
        Ok(StepStats {
            step: step_no,
            lr,
            loss: loss_sum / batch as f64,
            layer_ce: ce_sum.iter().map(|s| s / batch as f64).collect(),
            grad_norm,
        })
    }

    /// Runs the full schedule, collecting per-step stats.
    pub fn run(&mut self, corpus: &Corpus) -> Result<Vec<StepStats>> {
        let mut stats = Vec::with_capacity((self.cfg.total_steps - self.completed) as usize);
        while self.completed < self.cfg.total_steps {
            stats.push(self.step(corpus)?);
        }
        Ok(stats)
    }
}

/// Mean per-layer cross entropy over non-overlapping validation windows.
///
/// Windows are `seq_len + 1` tokens (input plus shifted target); a final
/// shorter window is used when at least two tokens remain. Windows get
/// equal weight.
pub fn evaluate(model: &Model<f32>, validation: &[u32], seq_len: usize) -> Result<ValReport> {
    let model64: Model<f64> = model.cast();
    let layers = model.cfg.layers;
    let mut sums = vec![0.0f64; layers];
    let mut windows = 0usize;
    let mut start = 0usize;
    while start + 2 <= validation.len() {
        let end = (start + seq_len + 1).min(validation.len());
        let input = &validation[start..end - 1];
        let target = &validation[start + 1..end];
        let lg = model64.loss_graph(input, target, None)?;
        for (l, ce) in lg.layer_ce_values().into_iter().enumerate() {
            sums[l] += ce;
        }
        windows += 1;
        start = end;
    }
    if windows == 0 {
        return Err(Error::Data("validation split too small to evaluate".into()));
    }
    Ok(ValReport {
        layer_ce: sums.iter().map(|s| s / windows as f64).collect(),
        windows,
    })
}

/// Outcome of a paired run: the supervised model, its control, and both
/// metric streams.
pub struct PairOutcome {
    pub supervised: Model<f32>,
    pub control: Model<f32>,
    pub supervised_stats: Vec<StepStats>,
    pub control_stats: Vec<StepStats>,
}

/// Trains a supervised model and its final-loss-only control from the same
/// initial parameters, data order, and dropout draws.
pub fn train_pair(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    corpus: &Corpus,
    init_seed: u64,
) -> Result<PairOutcome> {
    let base = Model::<f32>::init(model_cfg.clone(), init_seed)?;
    let control = Model::from_params(model_cfg.control(), base.params.clone())?;
    let mut t1 = Trainer::new(base, train_cfg.clone())?;
    let supervised_stats = t1.run(corpus)?;
    let mut t2 = Trainer::new(control, train_cfg.clone())?;
    let control_stats = t2.run(corpus)?;
    Ok(PairOutcome {
        supervised: t1.model,
        control: t2.model,
        supervised_stats,
        control_stats,
    })
}

/// Writes per-step metrics as TSV: step, lr, grad norm, loss, then one
/// cross-entropy column per layer.
pub fn write_metrics_tsv<W: Write>(out: &mut W, stats: &[StepStats], layers: usize) -> Result<()> {
    write!(out, "step\tlr\tgrad_norm\tloss")?;
    for l in 0..layers {
        write!(out, "\tce_layer{l}")?;
    }
    writeln!(out)?;
    for s in stats {
        write!(out, "{}\t{:.10e}\t{:.10e}\t{:.10e}", s.step, s.lr, s.grad_norm, s.loss)?;
        for ce in &s.layer_ce {
            write!(out, "\t{ce:.10e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
