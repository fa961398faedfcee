//! Dual-stream gated-attention transformer.
//!
//! The residual state is the sum of two streams: a token stream `x_t` that
//! starts as token embedding plus position embedding, and a contextual
//! stream `x_e` that starts at zero. In cascade mode every attention and
//! feed-forward update is routed into `x_e`, so `x_t` stays bit-identical
//! across depth and the combined state at layer `l` is
//! `x_t + sum of all updates through layer l`. In standard dual-stream mode
//! attention updates go to `x_t` and feed-forward updates to `x_e`.
//!
//! Blocks are pre-norm: attention reads `LN(x)`, the feed-forward reads
//! `LN(x + attention update)`. Attention heads are gated: each head output
//! is multiplied elementwise by `sigmoid(Q_h W^G_h + b^G_h)` before the
//! output projection, which lets a head's contribution fade without its
//! attention pattern changing. Logits are produced at every layer by one
//! shared final layer norm and the transposed token embedding, so the model
//! can be supervised per layer or only at the top.

use crate::tensor::{checkpoint, Graph, ParamSet, Real, TensorId};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use std::collections::BTreeSet;
use std::path::Path;

/// How residual updates are routed between the two streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// All updates accumulate in the contextual stream; the token stream is
    /// frozen after initialization.
    Cascade,
    /// Attention updates the token stream, feed-forward the contextual one.
    DualStandard,
}

impl StreamMode {
    fn to_flag(self) -> u32 {
        match self {
            StreamMode::Cascade => 0,
            StreamMode::DualStandard => 1,
        }
    }

    fn from_flag(v: u32) -> Result<Self> {
        match v {
            0 => Ok(StreamMode::Cascade),
            1 => Ok(StreamMode::DualStandard),
            other => Err(Error::Format(format!("unknown stream mode flag {other}"))),
        }
    }
}

/// Architecture and loss-shape configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub dropout: f64,
    /// Weight on the auxiliary per-layer loss terms.
    pub lambda: f64,
    /// When false the model trains on final-layer loss only (the control).
    pub pls_enabled: bool,
    pub mode: StreamMode,
}

impl ModelConfig {
    /// Full-scale defaults: 6 layers, 6 heads, width 384, GPT-2 vocabulary.
    pub fn full() -> Self {
        ModelConfig {
            layers: 6,
            heads: 6,
            dim: 384,
            ffn_dim: 1536,
            vocab: 50257,
            max_seq: 512,
            dropout: 0.1,
            lambda: 0.1,
            pls_enabled: true,
            mode: StreamMode::Cascade,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layers, heads, dim, ffn_dim must be positive".into()));
        }
        if self.vocab == 0 || self.max_seq == 0 {
            return Err(Error::Config("vocab and max_seq must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} negative", self.lambda)));
        }
        Ok(())
    }

    /// Control twin: same architecture, supervision only at the final layer.
    pub fn control(&self) -> Self {
        ModelConfig {
            pls_enabled: false,
            ..self.clone()
        }
    }
}

/// Per-layer auxiliary loss weights `(l+1)/L` for `l` in `0..L-1`.
pub fn pls_layer_weights(layers: usize) -> Vec<f64> {
    (0..layers.saturating_sub(1))
        .map(|l| (l + 1) as f64 / layers as f64)
        .collect()
}

/// Set of attention heads to rescale during a forward pass.
///
/// The hook multiplies each targeted head's post-gate output by `scale`
/// before the output projection. Scale 1 is the identity, scale 0 removes
/// the head, and values up to 1.5 amplify it.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    targets: BTreeSet<(usize, usize)>,
    pub scale: f64,
}

impl InterventionSpec {
    pub const MAX_SCALE: f64 = 1.5;

    pub fn new(targets: impl IntoIterator<Item = (usize, usize)>, scale: f64) -> Result<Self> {
        if !(0.0..=Self::MAX_SCALE).contains(&scale) {
            return Err(Error::Config(format!(
                "intervention scale {scale} outside [0, {}]",
                Self::MAX_SCALE
            )));
        }
        Ok(InterventionSpec {
            targets: targets.into_iter().collect(),
            scale,
        })
    }

    /// Scale-zero convenience constructor.
    pub fn ablation(targets: impl IntoIterator<Item = (usize, usize)>) -> Self {
        InterventionSpec {
            targets: targets.into_iter().collect(),
            scale: 0.0,
        }
    }

    pub fn targets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets.iter().copied()
    }

    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.targets.contains(&(layer, head))
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for &(l, h) in &self.targets {
            if l >= cfg.layers || h >= cfg.heads {
                return Err(Error::Config(format!(
                    "intervention target layer {l} head {h} out of range for {}x{} model",
                    cfg.layers, cfg.heads
                )));
            }
        }
        Ok(())
    }
}

/// Values of both streams at one depth.
#[derive(Debug, Clone)]
pub struct DualStreamState<E> {
    pub x_t: Vec<E>,
    pub x_e: Vec<E>,
    pub rows: usize,
    pub cols: usize,
}

/// Attention snapshot for one layer: raw pattern, per-query gate means, and
/// the gate-scaled effective pattern whose rows sum to the gate mean.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub heads: usize,
    pub t: usize,
    /// Raw post-softmax attention, `[heads][t][t]` row-major.
    pub probs: Vec<f64>,
    /// Mean gate activation per query position, `[heads][t]`.
    pub gate_mean: Vec<f64>,
    /// Effective attention `probs * gate_mean`, `[heads][t][t]` row-major.
    pub effective: Vec<f64>,
}

impl AttentionRecord {
    /// Raw attention row for `(head, query)`, keys `0..=query`.
    pub fn probs_row(&self, head: usize, query: usize) -> &[f64] {
        let base = head * self.t * self.t + query * self.t;
        &self.probs[base..base + query + 1]
    }

    /// Effective attention row for `(head, query)`, keys `0..=query`.
    pub fn effective_row(&self, head: usize, query: usize) -> &[f64] {
        let base = head * self.t * self.t + query * self.t;
        &self.effective[base..base + query + 1]
    }

    pub fn gate_mean_at(&self, head: usize, query: usize) -> f64 {
        self.gate_mean[head * self.t + query]
    }
}

/// Per-layer logit tensors of one forward pass, `[layers][t * vocab]`.
#[derive(Debug, Clone)]
pub struct LayerLogits<E> {
    pub t: usize,
    pub vocab: usize,
    pub per_layer: Vec<Vec<E>>,
}

impl<E: Real> LayerLogits<E> {
    pub fn row(&self, layer: usize, pos: usize) -> &[E] {
        &self.per_layer[layer][pos * self.vocab..(pos + 1) * self.vocab]
    }
}

/// Forward-pass options. Default is a plain evaluation pass.
#[derive(Default)]
pub struct EvalOptions<'a> {
    pub intervention: Option<&'a InterventionSpec>,
    /// Capture per-layer attention records (costs memory, analysis only).
    pub capture_records: bool,
    /// Diagnostic path: skip every attention sublayer entirely. The
    /// feed-forward path is unchanged because the skipped update is zero.
    pub skip_attention: bool,
    /// Dropout RNG; dropout is applied only when this is present and the
    /// configured rate is positive.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

/// A completed forward pass, still owning its compute graph.
pub struct ForwardPass<E: Real> {
    pub graph: Graph<E>,
    /// Graph leaf ids aligned with the parameter set entries.
    pub param_ids: Vec<TensorId>,
    /// Post-layer stream ids, `(x_t, x_e)`, one per layer.
    pub stream_ids: Vec<(TensorId, TensorId)>,
    /// Stream ids right after embedding, before the first layer.
    pub embed_ids: (TensorId, TensorId),
    /// Per-layer logit tensor ids.
    pub logit_ids: Vec<TensorId>,
    /// Attention records when capture was requested, one per layer.
    pub records: Vec<AttentionRecord>,
    t: usize,
    vocab: usize,
}

impl<E: Real> ForwardPass<E> {
    /// Stream values after `layer` has run.
    pub fn state(&self, layer: usize) -> DualStreamState<E> {
        let (xt, xe) = self.stream_ids[layer];
        let (rows, cols) = self.graph.shape(xt);
        DualStreamState {
            x_t: self.graph.data(xt).to_vec(),
            x_e: self.graph.data(xe).to_vec(),
            rows,
            cols,
        }
    }

    /// Stream values entering the first layer.
    pub fn embed_state(&self) -> DualStreamState<E> {
        let (xt, xe) = self.embed_ids;
        let (rows, cols) = self.graph.shape(xt);
        DualStreamState {
            x_t: self.graph.data(xt).to_vec(),
            x_e: self.graph.data(xe).to_vec(),
            rows,
            cols,
        }
    }

    /// All per-layer logits as owned values.
    pub fn logits(&self) -> LayerLogits<E> {
        LayerLogits {
            t: self.t,
            vocab: self.vocab,
            per_layer: self
                .logit_ids
                .iter()
                .map(|&id| self.graph.data(id).to_vec())
                .collect(),
        }
    }

    /// Logit row for `(layer, position)` without copying the full pass.
    pub fn logit_row(&self, layer: usize, pos: usize) -> &[E] {
        let id = self.logit_ids[layer];
        &self.graph.data(id)[pos * self.vocab..(pos + 1) * self.vocab]
    }
}

/// Training graph: forward pass plus loss nodes.
pub struct LossGraph<E: Real> {
    pub pass: ForwardPass<E>,
    pub loss: TensorId,
    /// Per-layer cross-entropy node ids, index = layer.
    pub layer_ce: Vec<TensorId>,
}

impl<E: Real> LossGraph<E> {
    pub fn loss_value(&self) -> E {
        self.pass.graph.scalar(self.loss)
    }

    pub fn layer_ce_values(&self) -> Vec<E> {
        self.layer_ce
            .iter()
            .map(|&id| self.pass.graph.scalar(id))
            .collect()
    }
}

/// A configured model and its parameters.
#[derive(Debug, Clone)]
pub struct Model<E: Real> {
    pub cfg: ModelConfig,
    pub params: ParamSet<E>,
}

const META_LEN: usize = 56;
const INIT_STD: f64 = 0.02;

/// Fixed parameter schema for a config: `(name, shape)` in storage order.
fn schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq, d]),
    ];
    for l in 0..cfg.layers {
        out.push((format!("layer{l}.ln1.g"), vec![d]));
        out.push((format!("layer{l}.ln1.b"), vec![d]));
        out.push((format!("layer{l}.attn.wq"), vec![d, d]));
        out.push((format!("layer{l}.attn.wk"), vec![d, d]));
        out.push((format!("layer{l}.attn.wv"), vec![d, d]));
        out.push((format!("layer{l}.attn.wo"), vec![d, d]));
        for h in 0..cfg.heads {
            out.push((format!("layer{l}.attn.gate{h}.w"), vec![dh, dh]));
            out.push((format!("layer{l}.attn.gate{h}.b"), vec![dh]));
        }
        out.push((format!("layer{l}.ln2.g"), vec![d]));
        out.push((format!("layer{l}.ln2.b"), vec![d]));
        out.push((format!("layer{l}.ffn.w1"), vec![d, cfg.ffn_dim]));
        out.push((format!("layer{l}.ffn.b1"), vec![cfg.ffn_dim]));
        out.push((format!("layer{l}.ffn.w2"), vec![cfg.ffn_dim, d]));
        out.push((format!("layer{l}.ffn.b2"), vec![d]));
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    out
}

impl<E: Real> Model<E> {
    /// Fresh model: weight matrices drawn from `N(0, 0.02)`, biases and norm
    /// offsets zero, norm gains one. Draws happen in schema order from a
    /// seeded stream, so equal seeds give bit-equal parameters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid stddev");
        let mut params = ParamSet::new();
        for (name, shape) in schema(&cfg) {
            let numel: usize = shape.iter().product();
            let data: Vec<E> = if shape.len() >= 2 {
                (0..numel)
                    .map(|_| E::from_f64(normal.sample(&mut rng)))
                    .collect()
            } else if name.ends_with(".g") {
                vec![E::one(); numel]
            } else {
                vec![E::zero(); numel]
            };
            params.push(&name, shape, data)?;
        }
        Ok(Model { cfg, params })
    }

    /// Wraps existing parameters, verifying them against the schema.
    pub fn from_params(cfg: ModelConfig, params: ParamSet<E>) -> Result<Self> {
        cfg.validate()?;
        let want = schema(&cfg);
        if params.len() != want.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.entries().iter().zip(&want) {
            if &p.name != name || &p.shape != shape {
                return Err(Error::Config(format!(
                    "parameter mismatch: have {} {:?}, want {} {:?}",
                    p.name, p.shape, name, shape
                )));
            }
        }
        Ok(Model { cfg, params })
    }

    /// Precision-cast copy of the whole model.
    pub fn cast<F: Real>(&self) -> Model<F> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    /// Serializes config metadata plus all tensors to a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = Vec::with_capacity(META_LEN);
        for v in [
            self.cfg.layers,
            self.cfg.heads,
            self.cfg.dim,
            self.cfg.ffn_dim,
            self.cfg.vocab,
            self.cfg.max_seq,
        ] {
            meta.extend_from_slice(&(v as u32).to_le_bytes());
        }
        meta.extend_from_slice(&self.cfg.dropout.to_le_bytes());
        meta.extend_from_slice(&self.cfg.lambda.to_le_bytes());
        for v in [
            u32::from(self.cfg.pls_enabled),
            self.cfg.mode.to_flag(),
            // Position embeddings are added into the token stream at init;
            // readers must know the checkpoint was produced that way.
            1,
            0,
        ] {
            meta.extend_from_slice(&v.to_le_bytes());
        }
        checkpoint::write(path, &meta, &self.params.cast::<f32>())
    }

    /// Loads a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Model<f32>> {
        let (meta, params) = checkpoint::read(path)?;
        if meta.len() != META_LEN {
            return Err(Error::Format(format!(
                "config block has {} bytes, expected {META_LEN}",
                meta.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(meta[o..o + 4].try_into().expect("in range"));
        let f64_at = |o: usize| f64::from_le_bytes(meta[o..o + 8].try_into().expect("in range"));
        if u32_at(48) != 1 {
            return Err(Error::Format(
                "checkpoint does not carry position embeddings in the token stream".into(),
            ));
        }
        let cfg = ModelConfig {
            layers: u32_at(0) as usize,
            heads: u32_at(4) as usize,
            dim: u32_at(8) as usize,
            ffn_dim: u32_at(12) as usize,
            vocab: u32_at(16) as usize,
            max_seq: u32_at(20) as usize,
            dropout: f64_at(24),
            lambda: f64_at(32),
            pls_enabled: u32_at(40) != 0,
            mode: StreamMode::from_flag(u32_at(44))?,
        };
        Model::from_params(cfg, params)
    }

    fn param_id(&self, ids: &[TensorId], name: &str) -> TensorId {
        ids[self
            .params
            .find(name)
            .unwrap_or_else(|| panic!("missing param {name}"))]
    }

    /// Inserts every parameter as a graph leaf, in schema order.
    pub fn bind_params(&self, g: &mut Graph<E>, requires_grad: bool) -> Result<Vec<TensorId>> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in self.params.entries() {
            let (rows, cols) = p.rows_cols();
            ids.push(g.leaf(rows, cols, p.data.clone(), requires_grad)?);
        }
        Ok(ids)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= self.cfg.vocab) {
            return Err(Error::Data(format!(
                "token id {} at position {pos} out of range for vocab {}",
                tokens[pos], self.cfg.vocab
            )));
        }
        Ok(())
    }

    /// Stream initialization: token-embedding rows and a zero contextual
    /// stream. Position embeddings are injected separately by [`Model::forward`].
    pub fn embed_init(&self, tokens: &[u32]) -> Result<DualStreamState<E>> {
        self.check_tokens(tokens)?;
        let d = self.cfg.dim;
        let emb = self.params.data("tok_emb");
        let mut x_t = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            x_t.extend_from_slice(&emb[t as usize * d..(t as usize + 1) * d]);
        }
        Ok(DualStreamState {
            x_e: vec![E::zero(); x_t.len()],
            x_t,
            rows: tokens.len(),
            cols: d,
        })
    }

    /// Gated multi-head attention over an already-normalized input.
    ///
    /// Returns the residual update (pre-dropout) and, on request, the
    /// attention record. Head outputs are `sigmoid(Q W^G + b^G) *
    /// softmax(Q K^T / sqrt(d_h) + causal mask) V`, optionally rescaled by an
    /// intervention, then concatenated and projected.
    pub fn attention_sublayer(
        &self,
        g: &mut Graph<E>,
        ids: &[TensorId],
        x_ln: TensorId,
        layer: usize,
        intervention: Option<&InterventionSpec>,
        capture: bool,
    ) -> Result<(TensorId, Option<AttentionRecord>)> {
        let dh = self.cfg.head_dim();
        let (t, _) = g.shape(x_ln);
        let q_all = g.matmul(x_ln, self.param_id(ids, &format!("layer{layer}.attn.wq")))?;
        let k_all = g.matmul(x_ln, self.param_id(ids, &format!("layer{layer}.attn.wk")))?;
        let v_all = g.matmul(x_ln, self.param_id(ids, &format!("layer{layer}.attn.wv")))?;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut head_outs = Vec::with_capacity(self.cfg.heads);
        let mut record = capture.then(|| AttentionRecord {
            layer,
            heads: self.cfg.heads,
            t,
            probs: vec![0.0; self.cfg.heads * t * t],
            gate_mean: vec![0.0; self.cfg.heads * t],
            effective: vec![0.0; self.cfg.heads * t * t],
        });

        for h in 0..self.cfg.heads {
            let q_h = g.slice_cols(q_all, h * dh, dh)?;
            let k_h = g.slice_cols(k_all, h * dh, dh)?;
            let v_h = g.slice_cols(v_all, h * dh, dh)?;
            let scores = g.matmul_nt(q_h, k_h)?;
            let scaled = g.scale(scores, scale)?;
            let probs = g.softmax_causal(scaled)?;
            let ctx = g.matmul(probs, v_h)?;
            let gate_lin = g.matmul(q_h, self.param_id(ids, &format!("layer{layer}.attn.gate{h}.w")))?;
            let gate_aff = g.add_bias(gate_lin, self.param_id(ids, &format!("layer{layer}.attn.gate{h}.b")))?;
            let gate = g.sigmoid(gate_aff)?;
            let mut gated = g.mul(gate, ctx)?;
            if let Some(spec) = intervention {
                if spec.contains(layer, h) {
                    gated = g.scale(gated, spec.scale)?;
                }
            }
            if let Some(rec) = record.as_mut() {
                let probs_data = g.data(probs);
                let gate_data = g.data(gate);
                let base = h * t * t;
                for (dst, &src) in rec.probs[base..base + t * t].iter_mut().zip(probs_data) {
                    *dst = src.to_f64();
                }
                for q in 0..t {
                    let row = &gate_data[q * dh..(q + 1) * dh];
                    let mut mean = 0.0;
                    for &gv in row {
                        mean += gv.to_f64();
                    }
                    mean /= dh as f64;
                    rec.gate_mean[h * t + q] = mean;
                    for k in 0..t {
                        rec.effective[base + q * t + k] = rec.probs[base + q * t + k] * mean;
                    }
                }
            }
            head_outs.push(gated);
        }
        let concat = g.concat_cols(&head_outs)?;
        let update = g.matmul(concat, self.param_id(ids, &format!("layer{layer}.attn.wo")))?;
        Ok((update, record))
    }

    fn dropout_mask(
        &self,
        g: &mut Graph<E>,
        x: TensorId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let rate = self.cfg.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let (r, c) = g.shape(x);
                let keep = Bernoulli::new(1.0 - rate).expect("valid rate");
                let inv = E::from_f64(1.0 / (1.0 - rate));
                let mask: Vec<E> = (0..r * c)
                    .map(|_| if keep.sample(*rng) { inv } else { E::zero() })
                    .collect();
                let m = g.leaf(r, c, mask, false)?;
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    /// Runs one block, returning the next `(x_t, x_e)` ids and the record.
    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        g: &mut Graph<E>,
        ids: &[TensorId],
        layer: usize,
        x_t: TensorId,
        x_e: TensorId,
        opts_intervention: Option<&InterventionSpec>,
        capture: bool,
        skip_attention: bool,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<(TensorId, TensorId, Option<AttentionRecord>)> {
        let x = g.add(x_t, x_e)?;
        let (attn_up, record) = if skip_attention {
            let (r, c) = g.shape(x);
            let zero = g.leaf(r, c, vec![E::zero(); r * c], false)?;
            (zero, None)
        } else {
            let ln1 = g.layernorm(
                x,
                self.param_id(ids, &format!("layer{layer}.ln1.g")),
                self.param_id(ids, &format!("layer{layer}.ln1.b")),
            )?;
            self.attention_sublayer(g, ids, ln1, layer, opts_intervention, capture)?
        };
        let attn_up = self.dropout_mask(g, attn_up, dropout_rng)?;

        let x_mid = g.add(x, attn_up)?;
        let ln2 = g.layernorm(
            x_mid,
            self.param_id(ids, &format!("layer{layer}.ln2.g")),
            self.param_id(ids, &format!("layer{layer}.ln2.b")),
        )?;
        let h1 = g.matmul(ln2, self.param_id(ids, &format!("layer{layer}.ffn.w1")))?;
        let h1b = g.add_bias(h1, self.param_id(ids, &format!("layer{layer}.ffn.b1")))?;
        let act = g.gelu(h1b)?;
        let h2 = g.matmul(act, self.param_id(ids, &format!("layer{layer}.ffn.w2")))?;
        let ffn_up = g.add_bias(h2, self.param_id(ids, &format!("layer{layer}.ffn.b2")))?;
        let ffn_up = self.dropout_mask(g, ffn_up, dropout_rng)?;

        let next = match self.cfg.mode {
            StreamMode::Cascade => {
                let both = g.add(attn_up, ffn_up)?;
                (x_t, g.add(x_e, both)?)
            }
            StreamMode::DualStandard => (g.add(x_t, attn_up)?, g.add(x_e, ffn_up)?),
        };
        Ok((next.0, next.1, record))
    }

    /// Full forward pass producing per-layer states and logits.
    pub fn forward(&self, tokens: &[u32], mut opts: EvalOptions) -> Result<ForwardPass<E>> {
        self.check_tokens(tokens)?;
        if let Some(spec) = opts.intervention {
            spec.validate(&self.cfg)?;
        }
        let mut g = Graph::new();
        let ids = self.bind_params(&mut g, false)?;
        let mut pass = self.forward_on(&mut g, &ids, tokens, &mut opts)?;
        pass.graph = g;
        pass.param_ids = ids;
        Ok(pass)
    }

    /// Forward pass on an existing graph with pre-bound parameters.
    fn forward_on(
        &self,
        g: &mut Graph<E>,
        ids: &[TensorId],
        tokens: &[u32],
        opts: &mut EvalOptions,
    ) -> Result<ForwardPass<E>> {
        let t = tokens.len();
        let tok = g.embed(self.param_id(ids, "tok_emb"), tokens)?;
        let positions: Vec<u32> = (0..t as u32).collect();
        let pos = g.embed(self.param_id(ids, "pos_emb"), &positions)?;
        let x_t0 = g.add(tok, pos)?;
        let x_e0 = g.leaf(t, self.cfg.dim, vec![E::zero(); t * self.cfg.dim], false)?;

        let mut stream_ids = Vec::with_capacity(self.cfg.layers);
        let mut records = Vec::new();
        let mut logit_ids = Vec::with_capacity(self.cfg.layers);
        let (mut x_t, mut x_e) = (x_t0, x_e0);
        for layer in 0..self.cfg.layers {
            let (nt, ne, rec) = self.layer_forward(
                g,
                ids,
                layer,
                x_t,
                x_e,
                opts.intervention,
                opts.capture_records,
                opts.skip_attention,
                &mut opts.dropout_rng,
            )?;
            x_t = nt;
            x_e = ne;
            stream_ids.push((x_t, x_e));
            if let Some(rec) = rec {
                records.push(rec);
            }
            let combined = g.add(x_t, x_e)?;
            let normed = g.layernorm(combined, self.param_id(ids, "ln_f.g"), self.param_id(ids, "ln_f.b"))?;
            let z = g.matmul_nt(normed, self.param_id(ids, "tok_emb"))?;
            logit_ids.push(z);
        }
        Ok(ForwardPass {
            graph: Graph::new(),
            param_ids: Vec::new(),
            stream_ids,
            embed_ids: (x_t0, x_e0),
            logit_ids,
            records,
            t,
            vocab: self.cfg.vocab,
        })
    }

    /// Forward pass with an intervention attached (hook-based evaluation).
    pub fn forward_with_hooks(
        &self,
        tokens: &[u32],
        intervention: &InterventionSpec,
    ) -> Result<ForwardPass<E>> {
        self.forward(
            tokens,
            EvalOptions {
                intervention: Some(intervention),
                ..Default::default()
            },
        )
    }

    /// Builds the training graph: forward pass, per-layer cross entropies,
    /// and the combined loss.
    ///
    /// The loss is the final layer's cross entropy plus, when per-layer
    /// supervision is enabled with a positive lambda, `lambda * (l+1)/L`
    /// times each earlier layer's cross entropy. With supervision disabled
    /// or lambda zero the returned loss node IS the final cross-entropy
    /// node, so the reduction is exact.
    pub fn loss_graph(
        &self,
        tokens: &[u32],
        targets: &[u32],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossGraph<E>> {
        if targets.len() != tokens.len() {
            return Err(Error::Data(format!(
                "{} targets for {} tokens",
                targets.len(),
                tokens.len()
            )));
        }
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let ids = self.bind_params(&mut g, true)?;
        let mut opts = EvalOptions {
            dropout_rng,
            ..Default::default()
        };
        let mut pass = self.forward_on(&mut g, &ids, tokens, &mut opts)?;
        let mut layer_ce = Vec::with_capacity(self.cfg.layers);
        for layer in 0..self.cfg.layers {
            layer_ce.push(g.cross_entropy_mean(pass.logit_ids[layer], targets)?);
        }
        let loss = self.pls_loss(&mut g, &layer_ce)?;
        pass.graph = g;
        pass.param_ids = ids;
        pass.t = tokens.len();
        pass.vocab = self.cfg.vocab;
        Ok(LossGraph {
            pass,
            loss,
            layer_ce,
        })
    }

    /// Combines per-layer cross-entropy nodes into the training loss.
    pub fn pls_loss(&self, g: &mut Graph<E>, layer_ce: &[TensorId]) -> Result<TensorId> {
        if layer_ce.len() != self.cfg.layers {
            return Err(Error::Config(format!(
                "{} cross-entropy nodes for {} layers",
                layer_ce.len(),
                self.cfg.layers
            )));
        }
        let final_ce = layer_ce[self.cfg.layers - 1];
        if !self.cfg.pls_enabled || self.cfg.lambda == 0.0 || self.cfg.layers == 1 {
            return Ok(final_ce);
        }
        let weights = pls_layer_weights(self.cfg.layers);
        let mut aux: Option<TensorId> = None;
        for (l, &w) in weights.iter().enumerate() {
            let term = g.scale(layer_ce[l], self.cfg.lambda * w)?;
            aux = Some(match aux {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        g.add(final_ce, aux.expect("layers > 1"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            ffn_dim: 16,
            vocab: 12,
            max_seq: 16,
            dropout: 0.0,
            lambda: 0.1,
            pls_enabled: true,
            mode: StreamMode::Cascade,
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            dim: 10,
            heads: 3,
            ..tiny_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embed_init_looks_up_rows_and_zeroes_context() {
        let cfg = tiny_cfg();
        let mut m = Model::<f64>::init(cfg, 1).unwrap();
        let idx = m.params.find("tok_emb").unwrap();
        let d = m.cfg.dim;
        for v in &mut m.params.get_mut(idx).data[0..d] {
            *v = 1.0;
        }
        let state = m.embed_init(&[0, 3, 0]).unwrap();
        assert_eq!(&state.x_t[0..d], vec![1.0; d].as_slice());
        assert_eq!(&state.x_t[0..d], &state.x_t[2 * d..3 * d]);
        assert!(state.x_e.iter().all(|&v| v == 0.0));
        assert!(m.embed_init(&[99]).is_err());
    }

    #[test]
    fn zero_weights_produce_zero_updates() {
        let cfg = tiny_cfg();
        let mut m = Model::<f64>::init(cfg, 1).unwrap();
        for i in 0..m.params.len() {
            let name = m.params.get(i).name.clone();
            if m.params.get(i).shape.len() >= 2 {
                m.params.get_mut(i).data.fill(0.0);
            } else if name.ends_with(".g") {
                m.params.get_mut(i).data.fill(1.0);
            }
        }
        let pass = m.forward(&[1, 2, 3], EvalOptions::default()).unwrap();
        for layer in 0..m.cfg.layers {
            let st = pass.state(layer);
            assert!(st.x_e.iter().all(|&v| v == 0.0), "layer {layer}");
        }
        let st = pass.state(0);
        assert_eq!(st.x_t, pass.embed_state().x_t);
    }

    #[test]
    fn cascade_token_stream_is_frozen_dual_standard_is_not() {
        let cfg = tiny_cfg();
        let m = Model::<f64>::init(cfg.clone(), 7).unwrap();
        let pass = m.forward(&[1, 2, 3, 4], EvalOptions::default()).unwrap();
        let x_t0 = pass.embed_state().x_t;
        for layer in 0..m.cfg.layers {
            let st = pass.state(layer);
            assert!(
                st.x_t.iter().zip(&x_t0).all(|(a, b)| a.to_bits() == b.to_bits()),
                "token stream changed at layer {layer}"
            );
        }
        let m2 = Model::<f64>::init(
            ModelConfig {
                mode: StreamMode::DualStandard,
                ..cfg
            },
            7,
        )
        .unwrap();
        let pass2 = m2.forward(&[1, 2, 3, 4], EvalOptions::default()).unwrap();
        assert_ne!(pass2.state(0).x_t, pass2.embed_state().x_t);
    }

    #[test]
    fn logits_argmax_recovers_orthonormal_embedding_row() {
        // Zero-mean orthonormal embedding rows: layer norm rescales a row to
        // sqrt(d) times itself, so the tied head scores its own row highest.
        let cfg = ModelConfig {
            vocab: 4,
            ..tiny_cfg()
        };
        let d = cfg.dim;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        // Gram-Schmidt against the ones vector and previous rows.
        let mut seed_rows = vec![
            vec![1.0, -1.0, 0.5, 0.25, -0.75, 0.1, -0.2, 0.1],
            vec![0.3, 0.9, -0.4, 0.7, 0.2, -0.8, 0.05, 0.05],
            vec![-0.6, 0.2, 0.8, -0.3, 0.4, 0.1, -0.9, 0.3],
            vec![0.2, -0.5, 0.3, 0.9, -0.1, 0.6, 0.4, -0.8],
        ];
        for row in &mut seed_rows {
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            for v in row.iter_mut() {
                *v -= mean;
            }
            for prev in &basis {
                let proj: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (v, p) in row.iter_mut().zip(prev) {
                    *v -= proj * p;
                }
            }
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in row.iter_mut() {
                *v /= norm;
            }
            basis.push(row.clone());
        }
        let mut g = Graph::<f64>::new();
        let emb_data: Vec<f64> = basis.concat();
        let emb = g.leaf(4, d, emb_data, false).unwrap();
        let gamma = g.leaf(1, d, vec![1.0; d], false).unwrap();
        let beta = g.leaf(1, d, vec![0.0; d], false).unwrap();
        for k in 0..4 {
            let h = g.leaf(1, d, basis[k].clone(), false).unwrap();
            let normed = g.layernorm(h, gamma, beta).unwrap();
            let z = g.matmul_nt(normed, emb).unwrap();
            let row = g.data(z);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, k);
        }
    }

    #[test]
    fn pls_weights_are_fractions_of_depth() {
        let w = pls_layer_weights(6);
        assert_eq!(w, vec![1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 4.0 / 6.0, 5.0 / 6.0]);
        let total: f64 = w.iter().sum();
        assert!((total - 2.5).abs() < 1e-12);
    }

    #[test]
    fn identical_layer_logits_scale_loss_by_one_plus_lambda_sum() {
        // Six identical cross entropies and lambda 0.1 give 1.25x the final.
        let cfg = ModelConfig {
            layers: 6,
            heads: 2,
            dim: 8,
            ffn_dim: 16,
            vocab: 12,
            max_seq: 16,
            dropout: 0.0,
            lambda: 0.1,
            pls_enabled: true,
            mode: StreamMode::Cascade,
        };
        let m = Model::<f64>::init(cfg, 3).unwrap();
        let mut g = Graph::<f64>::new();
        let logits = g
            .leaf(2, 12, (0..24).map(|i| (i as f64 * 0.37).sin()).collect(), false)
            .unwrap();
        let ce = g.cross_entropy_mean(logits, &[3, 5]).unwrap();
        let ce_nodes = vec![ce; 6];
        let loss = m.pls_loss(&mut g, &ce_nodes).unwrap();
        let expected = g.scalar(ce) * 1.25;
        assert!((g.scalar(loss) - expected).abs() < 1e-12);

        let c2 = Model::<f64>::init(m.cfg.control(), 3).unwrap();
        let loss_c2 = c2.pls_loss(&mut g, &ce_nodes).unwrap();
        assert_eq!(g.scalar(loss_c2).to_bits(), g.scalar(ce).to_bits());
    }

    #[test]
    fn effective_attention_rows_sum_to_gate_mean() {
        let m = Model::<f64>::init(tiny_cfg(), 11).unwrap();
        let pass = m
            .forward(
                &[1, 4, 2, 7, 3],
                EvalOptions {
                    capture_records: true,
                    ..Default::default()
                },
            )
            .unwrap();
        for rec in &pass.records {
            for h in 0..rec.heads {
                for q in 0..rec.t {
                    let sum: f64 = rec.effective_row(h, q).iter().sum();
                    let gate = rec.gate_mean_at(h, q);
                    assert!((sum - gate).abs() < 1e-12, "layer {} head {h} q {q}", rec.layer);
                    assert!(gate > 0.0 && gate < 1.0);
                    let raw: f64 = rec.probs_row(h, q).iter().sum();
                    assert!((raw - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn intervention_identities_hold() {
        let m = Model::<f64>::init(tiny_cfg(), 13).unwrap();
        let tokens = [5u32, 1, 9, 2];
        let base = m.forward(&tokens, EvalOptions::default()).unwrap();
        let unit = InterventionSpec::new([(0usize, 1usize), (1, 0)], 1.0).unwrap();
        let same = m.forward_with_hooks(&tokens, &unit).unwrap();
        for l in 0..m.cfg.layers {
            let a = base.logits().per_layer[l].clone();
            let b = same.logits().per_layer[l].clone();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(InterventionSpec::new([(0, 0)], 2.0).is_err());
        let bad = InterventionSpec::ablation([(9, 0)]);
        assert!(m.forward_with_hooks(&tokens, &bad).is_err());
    }

    #[test]
    fn head_scaling_is_linear_in_the_attention_update() {
        let m = Model::<f64>::init(tiny_cfg(), 17).unwrap();
        let tokens = [3u32, 8, 1, 6, 2];
        let update_at = |scale: f64| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let ids = m.bind_params(&mut g, false).unwrap();
            let tok = g.embed(ids[m.params.find("tok_emb").unwrap()], &tokens).unwrap();
            let spec = InterventionSpec::new([(0usize, 0usize)], scale).unwrap();
            let (up, _) = m
                .attention_sublayer(&mut g, &ids, tok, 0, Some(&spec), false)
                .unwrap();
            g.data(up).to_vec()
        };
        let u0 = update_at(0.0);
        let u1 = update_at(1.0);
        let uh = update_at(0.5);
        for i in 0..u0.len() {
            let expect = u0[i] + 0.5 * (u1[i] - u0[i]);
            assert!((uh[i] - expect).abs() < 1e-12, "element {i}");
        }
    }

    #[test]
    fn control_and_supervised_share_forward_bits() {
        let cfg = tiny_cfg();
        let pls = Model::<f64>::init(cfg.clone(), 23).unwrap();
        let c2 = Model::from_params(cfg.control(), pls.params.clone()).unwrap();
        let tokens = [1u32, 2, 3, 4, 5];
        let a = pls.forward(&tokens, EvalOptions::default()).unwrap();
        let b = c2.forward(&tokens, EvalOptions::default()).unwrap();
        for l in 0..cfg.layers {
            let x = a.logits().per_layer[l].clone();
            let y = b.logits().per_layer[l].clone();
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn save_load_round_trip_preserves_config_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::init(tiny_cfg(), 29).unwrap();
        m.save(&path).unwrap();
        let loaded = Model::<f32>::load(&path).unwrap();
        assert_eq!(loaded.cfg, m.cfg);
        for (a, b) in m.params.entries().iter().zip(loaded.params.entries()) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn skip_attention_equals_zeroing_every_head() {
        let m = Model::<f64>::init(tiny_cfg(), 31).unwrap();
        let tokens = [2u32, 9, 4, 1];
        let mut all_heads = Vec::new();
        for l in 0..m.cfg.layers {
            for h in 0..m.cfg.heads {
                all_heads.push((l, h));
            }
        }
        let zeroed = m
            .forward_with_hooks(&tokens, &InterventionSpec::ablation(all_heads))
            .unwrap();
        let skipped = m
            .forward(
                &tokens,
                EvalOptions {
                    skip_attention: true,
                    ..Default::default()
                },
            )
            .unwrap();
        for l in 0..m.cfg.layers {
            let a = zeroed.logits().per_layer[l].clone();
            let b = skipped.logits().per_layer[l].clone();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
