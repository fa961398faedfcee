//! Prediction traces: per-position snapshots of a forward pass.
//!
//! A trace records everything downstream analysis needs about one
//! prediction: the per-layer probability trajectory of the final prediction,
//! per-layer argmaxes and runner-up probabilities, the query row of every
//! head's raw and effective attention, per-head gate means, and the raw
//! dual-stream activation at a baseline layer. Only the query row of
//! attention is stored, not the full matrix; features never read anything
//! else.
//!
//! Capture runs the model in f64 and is a pure function of checkpoint,
//! tokens, position, and config, so re-capture equality holds bitwise.
//!
//! File format (all little-endian): magic "HFTR", version u32, layers u32,
//! heads u32, dim u32, vocab u32, baseline_layer u32, flags u32, count u64,
//! then one variable-length record per trace. Flag bit 0 marks the raw
//! activation as a dual-stream concatenation `[x_t; x_e]` (2 * dim wide);
//! bit 1 marks checkpoints whose token stream carries position embeddings.
//! Row lengths are implied by each record's position field.

use crate::model::{EvalOptions, Model};
use crate::tensor::kernels;
use crate::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"HFTR";
pub const VERSION: u32 = 1;
const FLAG_DUAL_ACTIVATION: u32 = 1;
const FLAG_POS_IN_TOKEN_STREAM: u32 = 2;

/// Model geometry echoed into trace files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceMeta {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab: usize,
    pub baseline_layer: usize,
}

/// One prediction's snapshot. Attention rows cover keys `0..=t_q` where
/// `t_q = position - 1` is the query index, so each row has `position`
/// entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    pub seq_id: u64,
    /// Predicted position `t`; the query sits at `t - 1`.
    pub position: u32,
    /// Ground-truth token at `position`.
    pub token_id: u32,
    /// Argmax of the final layer's logits at the query.
    pub final_pred: u32,
    /// Probability of `final_pred` under each layer's softmax.
    pub layer_probs: Vec<f32>,
    pub layer_argmax: Vec<u32>,
    /// Second-largest probability in each layer's distribution.
    pub layer_second_prob: Vec<f32>,
    /// Mean gate activation per `(layer, head)`, row-major `[L][H]`.
    pub gate_means: Vec<f32>,
    /// Effective attention query rows, `[L][H][position]` row-major.
    pub attn_rows: Vec<f32>,
    /// Raw post-softmax query rows, same layout.
    pub raw_attn_rows: Vec<f32>,
    /// `[x_t; x_e]` at the baseline layer's output, `2 * dim` wide.
    pub raw_activation: Vec<f32>,
}

impl PredictionTrace {
    pub fn query_index(&self) -> usize {
        self.position as usize - 1
    }

    /// Effective attention row for `(layer, head)`.
    pub fn attn_row(&self, meta: &TraceMeta, layer: usize, head: usize) -> &[f32] {
        let row = self.position as usize;
        let base = (layer * meta.heads + head) * row;
        &self.attn_rows[base..base + row]
    }

    /// Raw attention row for `(layer, head)`.
    pub fn raw_attn_row(&self, meta: &TraceMeta, layer: usize, head: usize) -> &[f32] {
        let row = self.position as usize;
        let base = (layer * meta.heads + head) * row;
        &self.raw_attn_rows[base..base + row]
    }

    pub fn gate_mean(&self, meta: &TraceMeta, layer: usize, head: usize) -> f32 {
        self.gate_means[layer * meta.heads + head]
    }
}

/// Captures traces for the given predicted positions of one sequence.
///
/// Every position must satisfy `1 <= position < tokens.len()`: position 0
/// has no query context and the last token has no ground truth successor
/// inside the sequence.
pub fn capture(
    model: &Model<f64>,
    tokens: &[u32],
    seq_id: u64,
    positions: &[usize],
    baseline_layer: usize,
) -> Result<Vec<PredictionTrace>> {
    let cfg = &model.cfg;
    if baseline_layer >= cfg.layers {
        return Err(Error::Config(format!(
            "baseline layer {baseline_layer} out of range for {} layers",
            cfg.layers
        )));
    }
    for &pos in positions {
        if pos == 0 || pos >= tokens.len() {
            return Err(Error::Data(format!(
                "trace position {pos} outside [1, {}) for sequence {seq_id}",
                tokens.len()
            )));
        }
    }
    let pass = model.forward(
        tokens,
        EvalOptions {
            capture_records: true,
            ..Default::default()
        },
    )?;
    let base_state = pass.state(baseline_layer);
    let (layers, heads, dim, vocab) = (cfg.layers, cfg.heads, cfg.dim, cfg.vocab);

    let mut out = Vec::with_capacity(positions.len());
    let mut probs = vec![0.0f64; vocab];
    for &pos in positions {
        let tq = pos - 1;
        let mut layer_probs = Vec::with_capacity(layers);
        let mut layer_argmax = Vec::with_capacity(layers);
        let mut layer_second = Vec::with_capacity(layers);
        let mut final_pred = 0u32;
        // Final layer first: its argmax defines the prediction the
        // trajectory tracks.
        for l in (0..layers).rev() {
            probs.copy_from_slice(pass.logit_row(l, tq));
            kernels::softmax_slice(&mut probs);
            let (mut top_i, mut top_p, mut second_p) = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for (i, &p) in probs.iter().enumerate() {
                if p > top_p {
                    second_p = top_p;
                    top_p = p;
                    top_i = i;
                } else if p > second_p {
                    second_p = p;
                }
            }
            if l == layers - 1 {
                final_pred = top_i as u32;
            }
            layer_probs.push(probs[final_pred as usize] as f32);
            layer_argmax.push(top_i as u32);
            layer_second.push(second_p as f32);
        }
        layer_probs.reverse();
        layer_argmax.reverse();
        layer_second.reverse();

        let mut gate_means = Vec::with_capacity(layers * heads);
        let mut attn_rows = Vec::with_capacity(layers * heads * pos);
        let mut raw_attn_rows = Vec::with_capacity(layers * heads * pos);
        for rec in &pass.records {
            for h in 0..heads {
                gate_means.push(rec.gate_mean_at(h, tq) as f32);
                attn_rows.extend(rec.effective_row(h, tq).iter().map(|&v| v as f32));
                raw_attn_rows.extend(rec.probs_row(h, tq).iter().map(|&v| v as f32));
            }
        }
        let mut raw_activation = Vec::with_capacity(2 * dim);
        raw_activation.extend(base_state.x_t[tq * dim..(tq + 1) * dim].iter().map(|&v| v as f32));
        raw_activation.extend(base_state.x_e[tq * dim..(tq + 1) * dim].iter().map(|&v| v as f32));

        out.push(PredictionTrace {
            seq_id,
            position: pos as u32,
            token_id: tokens[pos],
            final_pred,
            layer_probs,
            layer_argmax,
            layer_second_prob: layer_second,
            gate_means,
            attn_rows,
            raw_attn_rows,
            raw_activation,
        });
    }
    Ok(out)
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f32s(w: &mut impl Write, vs: &[f32]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_u32s(w: &mut impl Write, vs: &[u32]) -> std::io::Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| truncated())?;
    Ok(u64::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| truncated())?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn get_u32s(r: &mut impl Read, n: usize) -> Result<Vec<u32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| truncated())?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn truncated() -> Error {
    Error::Format("trace file truncated".into())
}

/// Writes a trace set with its meta header.
pub fn write(path: &Path, meta: &TraceMeta, traces: &[PredictionTrace]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, meta.layers as u32)?;
    put_u32(&mut w, meta.heads as u32)?;
    put_u32(&mut w, meta.dim as u32)?;
    put_u32(&mut w, meta.vocab as u32)?;
    put_u32(&mut w, meta.baseline_layer as u32)?;
    put_u32(&mut w, FLAG_DUAL_ACTIVATION | FLAG_POS_IN_TOKEN_STREAM)?;
    put_u64(&mut w, traces.len() as u64)?;
    for t in traces {
        let row = t.position as usize;
        let lh = meta.layers * meta.heads;
        if t.layer_probs.len() != meta.layers
            || t.layer_argmax.len() != meta.layers
            || t.layer_second_prob.len() != meta.layers
            || t.gate_means.len() != lh
            || t.attn_rows.len() != lh * row
            || t.raw_attn_rows.len() != lh * row
            || t.raw_activation.len() != 2 * meta.dim
        {
            return Err(Error::Data(format!(
                "trace (seq {}, position {}) does not match meta shapes",
                t.seq_id, t.position
            )));
        }
        put_u64(&mut w, t.seq_id)?;
        put_u32(&mut w, t.position)?;
        put_u32(&mut w, t.token_id)?;
        put_u32(&mut w, t.final_pred)?;
        put_f32s(&mut w, &t.layer_probs)?;
        put_u32s(&mut w, &t.layer_argmax)?;
        put_f32s(&mut w, &t.layer_second_prob)?;
        put_f32s(&mut w, &t.gate_means)?;
        put_f32s(&mut w, &t.attn_rows)?;
        put_f32s(&mut w, &t.raw_attn_rows)?;
        put_f32s(&mut w, &t.raw_activation)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace file written by [`write`].
pub fn read(path: &Path) -> Result<(TraceMeta, Vec<PredictionTrace>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated())?;
    if magic != MAGIC {
        return Err(Error::Format("not a trace file (bad magic)".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported trace version {version}")));
    }
    let meta = TraceMeta {
        layers: get_u32(&mut r)? as usize,
        heads: get_u32(&mut r)? as usize,
        dim: get_u32(&mut r)? as usize,
        vocab: get_u32(&mut r)? as usize,
        baseline_layer: get_u32(&mut r)? as usize,
    };
    let _flags = get_u32(&mut r)?;
    let count = get_u64(&mut r)? as usize;
    let lh = meta.layers * meta.heads;
    let mut traces = Vec::with_capacity(count);
    for _ in 0..count {
        let seq_id = get_u64(&mut r)?;
        let position = get_u32(&mut r)?;
        if position == 0 {
            return Err(Error::Format("trace record has position 0".into()));
        }
        let token_id = get_u32(&mut r)?;
        let final_pred = get_u32(&mut r)?;
        let row = position as usize;
        traces.push(PredictionTrace {
            seq_id,
            position,
            token_id,
            final_pred,
            layer_probs: get_f32s(&mut r, meta.layers)?,
            layer_argmax: get_u32s(&mut r, meta.layers)?,
            layer_second_prob: get_f32s(&mut r, meta.layers)?,
            gate_means: get_f32s(&mut r, lh)?,
            attn_rows: get_f32s(&mut r, lh * row)?,
            raw_attn_rows: get_f32s(&mut r, lh * row)?,
            raw_activation: get_f32s(&mut r, 2 * meta.dim)?,
        });
    }
    Ok((meta, traces))
}

/// Meta block for a model, with the given baseline layer.
pub fn meta_for(model_layers: usize, heads: usize, dim: usize, vocab: usize, baseline_layer: usize) -> TraceMeta {
    TraceMeta {
        layers: model_layers,
        heads,
        dim,
        vocab,
        baseline_layer,
    }
}
