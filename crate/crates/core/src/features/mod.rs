//! Feature extraction from prediction traces.
//!
//! Three invariances shape every feature. Token identity: features read
//! only the numeric trace fields, never token strings. Permutation: all
//! attention-derived features except the explicit position pair (span,
//! local mass) are invariant under permuting key positions, exactly, not
//! just to rounding, because aggregations sort values into a canonical
//! order before accumulating. Topology: ordinal quantities such as the
//! stabilization layer are stored as scalars, never one-hot.
//!
//! Tiers: T1 is a 5-D summary, T2 the 163-D layout (167 with the position
//! block), TopK the 455-D sorted top-k extension. Block layouts are frozen
//! and covered by golden tests.
//!
//! Matrix file format (little-endian): magic "HFFM", version u32, tier tag
//! u32, rows u64, dim u32, then row-major f32 values. A TSV companion maps
//! rows back to (seq_id, position, token_id).

use crate::trace::{PredictionTrace, TraceMeta};
use crate::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"HFFM";
pub const VERSION: u32 = 1;

/// Peak effective attention below this marks a head as ghost for entropy;
/// gate mean below it suppresses the head's top-k block.
pub const GHOST_THRESHOLD: f64 = 0.1;

/// Local-attention window size for the local-mass feature.
pub const LOCAL_WINDOW: usize = 5;

/// Number of attention values kept per head in the top-k tier.
pub const TOP_K: usize = 5;

/// Feature tiers with fixed dimensionality per model geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    T1,
    T2,
    T2Pos,
    TopK,
}

impl Tier {
    pub fn dim(self, layers: usize, heads: usize) -> usize {
        match self {
            Tier::T1 => 5,
            Tier::T2 => tier2_dim(layers, heads),
            Tier::T2Pos => tier2_dim(layers, heads) + 4,
            Tier::TopK => topk_dim(layers, heads, TOP_K),
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Tier::T1 => 1,
            Tier::T2 => 2,
            Tier::T2Pos => 3,
            Tier::TopK => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(Tier::T1),
            2 => Ok(Tier::T2),
            3 => Ok(Tier::T2Pos),
            4 => Ok(Tier::TopK),
            other => Err(Error::Format(format!("unknown feature tier tag {other}"))),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "t1" => Ok(Tier::T1),
            "t2" => Ok(Tier::T2),
            "t2pos" => Ok(Tier::T2Pos),
            "topk" => Ok(Tier::TopK),
            other => Err(Error::Config(format!(
                "unknown tier {other:?}, expected t1|t2|t2pos|topk"
            ))),
        }
    }
}

/// Tier-2 width: trajectory (3L-1), stability 2, activation and entropy
/// blocks (2LH each).
pub fn tier2_dim(layers: usize, heads: usize) -> usize {
    (3 * layers - 1) + 2 + 4 * layers * heads
}

/// Top-k width: trajectory, stability, two LHk top-k blocks, two LH entropy
/// blocks, position 4.
pub fn topk_dim(layers: usize, heads: usize, k: usize) -> usize {
    (3 * layers - 1) + 2 + 2 * layers * heads * k + 2 * layers * heads + 4
}

/// Head groups feeding the Tier-1 mass features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadGroups {
    pub anchor: Vec<(usize, usize)>,
    pub entity: Vec<(usize, usize)>,
}

impl HeadGroups {
    /// Reference grouping: anchor heads (5,2) and (5,3), entity heads (5,4)
    /// and (5,5).
    pub fn reference() -> Self {
        HeadGroups {
            anchor: vec![(5, 2), (5, 3)],
            entity: vec![(5, 4), (5, 5)],
        }
    }

    pub fn validate(&self, layers: usize, heads: usize) -> Result<()> {
        for &(l, h) in self.anchor.iter().chain(&self.entity) {
            if l >= layers || h >= heads {
                return Err(Error::Config(format!(
                    "head group entry ({l},{h}) out of range for {layers}x{heads}"
                )));
            }
        }
        Ok(())
    }
}

/// Probability trajectory: `(traj_prob, traj_margin, traj_drops)`.
///
/// `traj_prob[l]` is the final prediction's probability at layer `l` when
/// that layer's argmax already matches the final prediction, else 0.
/// `traj_margin[l]` subtracts the layer's runner-up probability from that.
/// `traj_drops[l-1]` is the positive part of the fall from layer `l-1` to
/// `l` in `traj_prob`.
pub fn trajectory(trace: &PredictionTrace) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let layers = trace.layer_probs.len();
    let mut prob = Vec::with_capacity(layers);
    let mut margin = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = if trace.layer_argmax[l] == trace.final_pred {
            trace.layer_probs[l] as f64
        } else {
            0.0
        };
        prob.push(p);
        margin.push(p - trace.layer_second_prob[l] as f64);
    }
    let drops = (1..layers)
        .map(|l| (prob[l - 1] - prob[l]).max(0.0))
        .collect();
    (prob, margin, drops)
}

/// Stabilization scalars `(k_star, kappa)`.
///
/// `k_star` is the earliest layer from which every deeper layer's argmax
/// matches the final prediction; the final layer always matches, so
/// `k_star <= L-1`. `kappa` is the longest consecutive run of layers whose
/// argmax equals the ground-truth token.
pub fn stability(trace: &PredictionTrace) -> (usize, usize) {
    let layers = trace.layer_argmax.len();
    let mut k_star = layers - 1;
    while k_star > 0 && trace.layer_argmax[k_star - 1] == trace.final_pred {
        k_star -= 1;
    }
    let mut kappa = 0usize;
    let mut run = 0usize;
    for l in 0..layers {
        if trace.layer_argmax[l] == trace.token_id {
            run += 1;
            kappa = kappa.max(run);
        } else {
            run = 0;
        }
    }
    (k_star, kappa)
}

/// Per-head peak effective attention at one layer.
pub fn head_activation(trace: &PredictionTrace, meta: &TraceMeta, layer: usize) -> Vec<f64> {
    (0..meta.heads)
        .map(|h| {
            trace
                .attn_row(meta, layer, h)
                .iter()
                .fold(0.0f64, |acc, &v| acc.max(v as f64))
        })
        .collect()
}

/// Sums slice values in a canonical order (ascending), so the result does
/// not depend on how the inputs were stored.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let mut total = 0.0;
    for &v in values.iter() {
        total += v;
    }
    total
}

/// Per-head Shannon entropy (natural log) of the renormalized effective
/// attention row. Ghost heads, those whose peak effective attention falls
/// below the threshold, score exactly 0.
pub fn head_entropy(trace: &PredictionTrace, meta: &TraceMeta, layer: usize) -> Vec<f64> {
    let acts = head_activation(trace, meta, layer);
    (0..meta.heads)
        .map(|h| {
            if acts[h] < GHOST_THRESHOLD {
                return 0.0;
            }
            let mut vals: Vec<f64> = trace
                .attn_row(meta, layer, h)
                .iter()
                .map(|&v| v as f64)
                .collect();
            let total = sorted_sum(&mut vals);
            // The peak alone is >= 0.1, so total > 0 here.
            let mut ent = 0.0;
            for &v in vals.iter() {
                if v > 0.0 {
                    let p = v / total;
                    ent -= p * p.ln();
                }
            }
            ent
        })
        .collect()
}

/// Position pair at one layer: `(attn_span, local_mass)`.
///
/// Span is the attention-weighted mean distance from the query to its keys,
/// pooled over heads; 0 when the layer's total effective attention is 0.
/// Local mass sums effective attention over the window of the five keys
/// before the query (the query's own key excluded, window clipped at 0).
pub fn position_features(trace: &PredictionTrace, meta: &TraceMeta, layer: usize) -> (f64, f64) {
    let tq = trace.query_index();
    let mut weighted = 0.0f64;
    let mut total = 0.0f64;
    let mut local = 0.0f64;
    let window_lo = tq.saturating_sub(LOCAL_WINDOW);
    for h in 0..meta.heads {
        let row = trace.attn_row(meta, layer, h);
        for (k, &v) in row.iter().enumerate() {
            let v = v as f64;
            weighted += v * (tq - k) as f64;
            total += v;
            if k >= window_lo && k < tq {
                local += v;
            }
        }
    }
    let span = if total > 0.0 { weighted / total } else { 0.0 };
    (span, local)
}

/// The k largest effective-attention values of one head, descending,
/// zero-padded. A head whose gate mean falls below the ghost threshold
/// yields all zeros.
pub fn topk_row(trace: &PredictionTrace, meta: &TraceMeta, layer: usize, head: usize, k: usize) -> Vec<f64> {
    if (trace.gate_mean(meta, layer, head) as f64) < GHOST_THRESHOLD {
        return vec![0.0; k];
    }
    let mut vals: Vec<f64> = trace
        .attn_row(meta, layer, head)
        .iter()
        .map(|&v| v as f64)
        .collect();
    vals.sort_unstable_by(|a, b| f64::total_cmp(b, a));
    vals.resize(k, 0.0);
    vals.truncate(k);
    vals
}

/// Tier-1 vector: `[k_star, final confidence, anchor mass, entity mass,
/// final-layer span]`. Masses sum the listed heads' peak effective
/// attention at their listed layers.
pub fn tier1(trace: &PredictionTrace, meta: &TraceMeta, groups: &HeadGroups) -> Result<Vec<f32>> {
    groups.validate(meta.layers, meta.heads)?;
    let (k_star, _) = stability(trace);
    let confidence = trace.layer_probs[meta.layers - 1] as f64;
    let mass = |pairs: &[(usize, usize)]| -> f64 {
        let mut m = 0.0;
        for &(l, h) in pairs {
            m += trace
                .attn_row(meta, l, h)
                .iter()
                .fold(0.0f64, |acc, &v| acc.max(v as f64));
        }
        m
    };
    let (span, _) = position_features(trace, meta, meta.layers - 1);
    Ok(vec![
        k_star as f32,
        confidence as f32,
        mass(&groups.anchor) as f32,
        mass(&groups.entity) as f32,
        span as f32,
    ])
}

/// Tier-2 vector in the frozen layout. With `L=6, H=6`: traj_prob 0-5,
/// traj_margin 6-11, traj_drops 12-16, k_star 17, kappa 18, head_act_stable
/// 19-54, head_act_final 55-90, head_ent_stable 91-126, head_ent_final
/// 127-162, then optionally span_stable 163, span_final 164, local_stable
/// 165, local_final 166. The stable blocks are zero outside the k_star
/// layer's slice; the final blocks outside the last layer's slice.
pub fn tier2(trace: &PredictionTrace, meta: &TraceMeta, include_position: bool) -> Vec<f32> {
    let (layers, heads) = (meta.layers, meta.heads);
    let lh = layers * heads;
    let mut out = vec![0.0f32; tier2_dim(layers, heads) + if include_position { 4 } else { 0 }];
    let (prob, margin, drops) = trajectory(trace);
    let (k_star, kappa) = stability(trace);
    let stable_layer = k_star.min(layers - 1);
    let final_layer = layers - 1;

    for l in 0..layers {
        out[l] = prob[l] as f32;
        out[layers + l] = margin[l] as f32;
    }
    for (i, &d) in drops.iter().enumerate() {
        out[2 * layers + i] = d as f32;
    }
    let base = 3 * layers - 1;
    out[base] = k_star as f32;
    out[base + 1] = kappa as f32;

    let act_stable = base + 2;
    let act_final = act_stable + lh;
    let ent_stable = act_final + lh;
    let ent_final = ent_stable + lh;
    let stable_act = head_activation(trace, meta, stable_layer);
    let final_act = head_activation(trace, meta, final_layer);
    let stable_ent = head_entropy(trace, meta, stable_layer);
    let final_ent = head_entropy(trace, meta, final_layer);
    for h in 0..heads {
        out[act_stable + stable_layer * heads + h] = stable_act[h] as f32;
        out[act_final + final_layer * heads + h] = final_act[h] as f32;
        out[ent_stable + stable_layer * heads + h] = stable_ent[h] as f32;
        out[ent_final + final_layer * heads + h] = final_ent[h] as f32;
    }
    if include_position {
        let pos = ent_final + lh;
        let (span_s, local_s) = position_features(trace, meta, stable_layer);
        let (span_f, local_f) = position_features(trace, meta, final_layer);
        out[pos] = span_s as f32;
        out[pos + 1] = span_f as f32;
        out[pos + 2] = local_s as f32;
        out[pos + 3] = local_f as f32;
    }
    out
}

/// Top-k vector in the frozen layout. With `L=6, H=6, k=5`: trajectory
/// 0-16, stability 17-18, top-k stable 19-198, top-k final 199-378, entropy
/// stable 379-414, entropy final 415-450, position 451-454. Stable blocks
/// are zero outside the k_star layer's slice.
pub fn topk_features(trace: &PredictionTrace, meta: &TraceMeta, k: usize) -> Vec<f32> {
    let (layers, heads) = (meta.layers, meta.heads);
    let lh = layers * heads;
    let mut out = vec![0.0f32; topk_dim(layers, heads, k)];
    let (prob, margin, drops) = trajectory(trace);
    let (k_star, kappa) = stability(trace);
    let stable_layer = k_star.min(layers - 1);
    let final_layer = layers - 1;

    for l in 0..layers {
        out[l] = prob[l] as f32;
        out[layers + l] = margin[l] as f32;
    }
    for (i, &d) in drops.iter().enumerate() {
        out[2 * layers + i] = d as f32;
    }
    let base = 3 * layers - 1;
    out[base] = k_star as f32;
    out[base + 1] = kappa as f32;

    let topk_stable = base + 2;
    let topk_final = topk_stable + lh * k;
    let ent_stable = topk_final + lh * k;
    let ent_final = ent_stable + lh;
    let pos = ent_final + lh;

    for h in 0..heads {
        let s_row = topk_row(trace, meta, stable_layer, h, k);
        let f_row = topk_row(trace, meta, final_layer, h, k);
        for j in 0..k {
            out[topk_stable + (stable_layer * heads + h) * k + j] = s_row[j] as f32;
            out[topk_final + (final_layer * heads + h) * k + j] = f_row[j] as f32;
        }
    }
    let stable_ent = head_entropy(trace, meta, stable_layer);
    let final_ent = head_entropy(trace, meta, final_layer);
    for h in 0..heads {
        out[ent_stable + stable_layer * heads + h] = stable_ent[h] as f32;
        out[ent_final + final_layer * heads + h] = final_ent[h] as f32;
    }
    let (span_s, local_s) = position_features(trace, meta, stable_layer);
    let (span_f, local_f) = position_features(trace, meta, final_layer);
    out[pos] = span_s as f32;
    out[pos + 1] = span_f as f32;
    out[pos + 2] = local_s as f32;
    out[pos + 3] = local_f as f32;
    out
}

/// Extracts one tier for every trace, row-major.
pub fn extract_matrix(
    traces: &[PredictionTrace],
    meta: &TraceMeta,
    tier: Tier,
    groups: &HeadGroups,
) -> Result<FeatureMatrix> {
    let dim = tier.dim(meta.layers, meta.heads);
    let mut values = Vec::with_capacity(traces.len() * dim);
    for t in traces {
        let row = match tier {
            Tier::T1 => tier1(t, meta, groups)?,
            Tier::T2 => tier2(t, meta, false),
            Tier::T2Pos => tier2(t, meta, true),
            Tier::TopK => topk_features(t, meta, TOP_K),
        };
        debug_assert_eq!(row.len(), dim);
        values.extend_from_slice(&row);
    }
    Ok(FeatureMatrix {
        tier,
        rows: traces.len(),
        dim,
        values,
    })
}

/// Row-major feature matrix with its tier tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub tier: Tier,
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows as f64 for numeric pipelines.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&v| v as f64).collect())
            .collect()
    }
}

/// Writes a feature matrix file.
pub fn write_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    if m.values.len() != m.rows * m.dim {
        return Err(Error::Data(format!(
            "matrix has {} values for {}x{}",
            m.values.len(),
            m.rows,
            m.dim
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&m.tier.tag().to_le_bytes())?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.dim as u32).to_le_bytes())?;
    for v in &m.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature matrix file written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<FeatureMatrix> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("feature file truncated".into()))?;
    if magic != MAGIC {
        return Err(Error::Format("not a feature matrix file (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|_| Error::Format("feature file truncated".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    r.read_exact(&mut b4).map_err(|_| Error::Format("feature file truncated".into()))?;
    let tier = Tier::from_tag(u32::from_le_bytes(b4))?;
    r.read_exact(&mut b8).map_err(|_| Error::Format("feature file truncated".into()))?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4).map_err(|_| Error::Format("feature file truncated".into()))?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut bytes = vec![0u8; rows * dim * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("feature file truncated".into()))?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(FeatureMatrix {
        tier,
        rows,
        dim,
        values,
    })
}

/// Writes the TSV companion index mapping matrix rows to their traces.
pub fn write_index(path: &Path, traces: &[PredictionTrace]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "row\tseq_id\tposition\ttoken_id")?;
    for (i, t) in traces.iter().enumerate() {
        writeln!(w, "{i}\t{}\t{}\t{}", t.seq_id, t.position, t.token_id)?;
    }
    w.flush()?;
    Ok(())
}
