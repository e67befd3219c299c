//! Slow reference implementations used to check the fast paths.
//!
//! Everything here is written with plain index loops and shares no kernels
//! with the production modules: its own rotary encoding, its own softmax and
//! its own pooling.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::headcache::FrameKV;
use crate::model::{BlockInput, HeadRecord, ModelWeights};
use crate::profiler::HeadId;
use crate::rope::RopeParams;
use crate::tensor::TokenMatrix;

fn rotate_pairs(x: &mut [f64], start: usize, width: usize, pos: usize, base: f64) {
    let mut j = 0;
    while j < width {
        let theta = pos as f64 / base.powf(j as f64 / width as f64);
        let (a, b) = (x[start + j], x[start + j + 1]);
        x[start + j] = a * theta.cos() - b * theta.sin();
        x[start + j + 1] = a * theta.sin() + b * theta.cos();
        j += 2;
    }
}

/// Rotates a token vector laid out as `[temporal | height | width]`.
pub fn reference_rope(x: &[f64], t: usize, h: usize, w: usize, p: &RopeParams) -> Vec<f64> {
    let mut out = x.to_vec();
    rotate_pairs(&mut out, 0, p.d_t, t, p.base);
    rotate_pairs(&mut out, p.d_t, p.d_h, h, p.base);
    rotate_pairs(&mut out, p.d_t + p.d_h, p.d_w, w, p.base);
    out
}

fn project(x: &[f64], w: &TokenMatrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (c, o) in out.iter_mut().enumerate() {
        for (r, xv) in x.iter().enumerate() {
            *o += xv * w.get(r, c);
        }
    }
    out
}

/// Softmax-weighted sum of `values` by scaled dot products with `q`.
pub fn reference_attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in e.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w / z * x;
        }
    }
    out
}

/// Block-causal forward over `blocks` in one pass, every query attending to
/// every key of its own or an earlier block, temporal positions equal to
/// global frame indices. Returns the final hidden state of every token.
fn block_causal_pass(weights: &ModelWeights, blocks: &[BlockInput]) -> Result<Vec<Vec<f64>>> {
    let c = weights.config();
    let (s, f, d) = (c.tokens_per_frame, c.frames_per_block, c.head_dim);
    let rope = weights.rope();
    let mut x: Vec<Vec<f64>> = Vec::new();
    for b in blocks {
        for r in 0..b.hidden.rows() {
            x.push(b.hidden.row(r).to_vec());
        }
    }
    let n = x.len();
    let frame_of = |tok: usize| tok / s;
    let block_of = |tok: usize| tok / (s * f);
    for layer in &weights.layers {
        let mut concat = vec![vec![0.0; c.d_model()]; n];
        for (h, hw) in layer.heads.iter().enumerate() {
            let mut qs = Vec::with_capacity(n);
            let mut ks = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n);
            for (tok, xt) in x.iter().enumerate() {
                let t = frame_of(tok);
                let (gh, gw) = ((tok % s) / c.grid_w, (tok % s) % c.grid_w);
                qs.push(reference_rope(&project(xt, &hw.query), t, gh, gw, rope));
                ks.push(reference_rope(&project(xt, &hw.key), t, gh, gw, rope));
                vs.push(project(xt, &hw.value));
            }
            for (tok, q) in qs.iter().enumerate() {
                let visible = (block_of(tok) + 1) * s * f;
                let o = reference_attend(q, &ks[..visible], &vs[..visible]);
                concat[tok][h * d..(h + 1) * d].copy_from_slice(&o);
            }
        }
        for (xt, ct) in x.iter_mut().zip(&concat) {
            let delta = project(ct, &layer.output);
            for (a, b) in xt.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }
    Ok(x)
}

/// Full-recompute autoregressive reference: before emitting block `n` the
/// whole prefix `1..=n` is recomputed from scratch. Returns each block's
/// final hidden state, `f·s × d_model`.
pub fn full_recompute_rollout(weights: &ModelWeights, inputs: &[BlockInput]) -> Result<Vec<TokenMatrix>> {
    let c = weights.config();
    let per_block = c.tokens_per_frame * c.frames_per_block;
    for (i, b) in inputs.iter().enumerate() {
        if b.block_index != i + 1 {
            return Err(Error::Sequencing {
                expected: i + 1,
                got: b.block_index,
            });
        }
    }
    let mut out = Vec::with_capacity(inputs.len());
    for n in 1..=inputs.len() {
        let x = block_causal_pass(weights, &inputs[..n])?;
        let rows: Vec<f64> = x[(n - 1) * per_block..n * per_block].iter().flatten().copied().collect();
        out.push(TokenMatrix::from_vec(per_block, c.d_model(), rows)?);
    }
    Ok(out)
}

/// Every frame a head has produced, keyed by global frame index, holding
/// keys with spatial rotation only.
#[derive(Debug, Default)]
pub struct FrameArchive {
    frames: HashMap<(HeadId, usize), FrameKV>,
}

impl FrameArchive {
    pub fn record(&mut self, rec: &HeadRecord) {
        for fr in &rec.current {
            self.frames.insert((rec.head, fr.global_frame_index), fr.clone());
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Recomputes one head's output by attending over the full archived
/// history restricted to the tokens the head actually retained, each
/// rotated to the temporal index it was assembled at.
pub fn masked_attention_reference(
    archive: &FrameArchive,
    rec: &HeadRecord,
    rope: &RopeParams,
    frames_per_block: usize,
) -> Result<TokenMatrix> {
    let big_f = rec.context.len();
    if big_f < frames_per_block {
        return Err(Error::Precondition("context shorter than one block".into()));
    }
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for cf in &rec.context {
        for src in &cf.sources {
            let fr = archive
                .frames
                .get(&(rec.head, src.frame))
                .ok_or_else(|| Error::Precondition(format!("frame {} not archived for {}", src.frame, rec.head)))?;
            let mut k = fr.keys.row(src.token).to_vec();
            rotate_pairs(&mut k, 0, rope.d_t, cf.temporal_index, rope.base);
            keys.push(k);
            values.push(fr.values.row(src.token).to_vec());
        }
    }
    let per_frame = rec.queries.rows() / frames_per_block;
    let mut out = Vec::with_capacity(rec.queries.rows() * rec.queries.cols());
    for r in 0..rec.queries.rows() {
        let mut q = rec.queries.row(r).to_vec();
        rotate_pairs(&mut q, 0, rope.d_t, big_f - frames_per_block + r / per_frame, rope.base);
        out.extend(reference_attend(&q, &keys, &values));
    }
    TokenMatrix::from_vec(rec.queries.rows(), rec.queries.cols(), out)
}

fn pooled(m: &TokenMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            acc[c] += m.get(r, c);
        }
    }
    acc.iter().map(|v| v / m.rows() as f64).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Slot-averaged cosine of mean-pooled keys between entries `i` and `j`.
/// `entries[slot][entry]` holds key matrices.
fn entry_similarity(entries: &[Vec<TokenMatrix>], i: usize, j: usize) -> f64 {
    let mut total = 0.0;
    for slot in entries {
        total += cos(&pooled(&slot[i]), &pooled(&slot[j]));
    }
    total / entries.len() as f64
}

/// Novelty of `candidate[slot]` against `entries[slot][entry]`.
pub fn brute_force_novelty(candidate: &[TokenMatrix], entries: &[Vec<TokenMatrix>]) -> f64 {
    let n = entries.first().map_or(0, |v| v.len());
    if n == 0 {
        return -1.0;
    }
    let mut best = f64::NEG_INFINITY;
    for e in 0..n {
        let mut total = 0.0;
        for (slot, c) in entries.iter().zip(candidate) {
            total += cos(&pooled(c), &pooled(&slot[e]));
        }
        best = best.max(total / entries.len() as f64);
    }
    best
}

/// Most similar unordered pair; ties to the lexicographically smallest.
pub fn brute_force_redundant_pair(entries: &[Vec<TokenMatrix>]) -> (usize, usize) {
    let n = entries[0].len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((entry_similarity(entries, i, j), i, j));
        }
    }
    let top = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (_, i, j) = pairs.into_iter().find(|p| p.0 == top).expect("at least one pair");
    (i, j)
}

/// Merge victim among entries `1..n` (index 0 is the summary): highest mean
/// similarity to adjacent non-summary neighbours, ties to the smaller index.
pub fn brute_force_merge_victim(entries: &[Vec<TokenMatrix>]) -> usize {
    let n = entries[0].len();
    let mut scores = Vec::new();
    for j in 1..n {
        let mut neighbours = Vec::new();
        if j >= 2 {
            neighbours.push(j - 1);
        }
        if j + 1 < n {
            neighbours.push(j + 1);
        }
        let total: f64 = neighbours.iter().map(|&k| entry_similarity(entries, j, k)).sum();
        scores.push((j, total / neighbours.len() as f64));
    }
    let top = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scores.into_iter().find(|s| s.1 == top).expect("non-empty").0
}

/// Top-`k` by repeated arg-max, ties to the smaller index.
pub fn brute_force_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for (i, &v) in scores.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| v > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("untaken index remains");
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Mean per-token cosine between two equally shaped frame lists.
pub fn fidelity(output: &[TokenMatrix], reference: &[TokenMatrix]) -> Result<f64> {
    if output.len() != reference.len() {
        return Err(Error::Shape("frame counts differ".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in output.iter().zip(reference) {
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(Error::Shape("frame shapes differ".into()));
        }
        for r in 0..a.rows() {
            total += cos(a.row(r), b.row(r));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Shape("no tokens to compare".into()));
    }
    Ok(total / count as f64)
}
