//! Seeded block-wise autoregressive attention stack.
//!
//! A stand-in for a video DiT: no MLPs, only multi-head attention with a
//! residual per layer. Each block of `f` frames attends bidirectionally
//! within itself and to whatever history the cache layer hands it.
//!
//! Weight fill order (one ChaCha8 stream seeded with `seed`, standard normal
//! draws, row-major): input embedding `d_model × d_model`; then per layer,
//! per head `W_q`, `W_k`, `W_v` (`d_model × d`) followed by one uniform draw
//! for the head's query sharpness; then the layer's `W_o`
//! (`d_model × d_model`), spectrally clamped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assembler::{assemble, pack, packed_attention_with, reencode_temporal};
use crate::error::{Error, Result};
use crate::headcache::{FrameKV, TokenSource};
use crate::par::{self, Parallelism};
use crate::profiler::HeadId;
use crate::rope::{apply_rope, RopeParams, TokenPosition, SPATIAL};
use crate::tensor::{attention_weights, TokenMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    /// Per-head channel count.
    #[serde(rename = "d")]
    pub head_dim: usize,
    #[serde(rename = "s")]
    pub tokens_per_frame: usize,
    #[serde(rename = "f")]
    pub frames_per_block: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 6,
            head_dim: 16,
            tokens_per_frame: 16,
            frames_per_block: 3,
            grid_h: 4,
            grid_w: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn head_count(&self) -> usize {
        self.layers * self.heads
    }

    pub fn head_ids(&self) -> impl Iterator<Item = HeadId> {
        let h = self.heads;
        (0..self.layers * h).map(move |i| HeadId::new(i / h, i % h))
    }

    pub fn head_index(&self, id: HeadId) -> usize {
        id.layer * self.heads + id.head
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.tokens_per_frame == 0 || self.frames_per_block == 0 {
            return Err(Error::Config("L, H, d, s and f must all be at least 1".into()));
        }
        if self.grid_h * self.grid_w != self.tokens_per_frame {
            return Err(Error::Config(format!(
                "grid {}x{} does not hold {} tokens",
                self.grid_h, self.grid_w, self.tokens_per_frame
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("head dimension must be even".into()));
        }
        Ok(())
    }

    /// Global index of frame `j` of block `block` (1-based blocks).
    pub fn frame_index(&self, block: usize, j: usize) -> usize {
        self.frames_per_block * (block - 1) + j
    }

    pub fn spatial_positions(&self) -> Vec<(usize, usize)> {
        (0..self.tokens_per_frame).map(|t| (t / self.grid_w, t % self.grid_w)).collect()
    }
}

/// How block inputs are synthesised. Blocks inside one scene share a base
/// pattern and differ only by `jitter`; a new scene reseeds the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputSchedule {
    /// Blocks per scene; 0 keeps a single scene forever.
    pub scene_length: usize,
    /// Number of distinct scenes before they repeat; 0 never repeats.
    pub scene_cycle: usize,
    pub jitter: f64,
    /// Extra noise for profiling repeats `r > 0`.
    pub repeat_noise: f64,
    pub prompt_scale: f64,
    /// Amplitude multiplier on global frame 0.
    pub first_frame_gain: f64,
}

impl Default for InputSchedule {
    fn default() -> Self {
        Self {
            scene_length: 4,
            scene_cycle: 0,
            jitter: 0.1,
            repeat_noise: 0.05,
            prompt_scale: 0.1,
            first_frame_gain: 3.0,
        }
    }
}

/// Embedded hidden state for one block, `f·s × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInput {
    pub block_index: usize,
    pub hidden: TokenMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: TokenMatrix,
    pub key: TokenMatrix,
    pub value: TokenMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub output: TokenMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    rope: RopeParams,
    pub input: TokenMatrix,
    pub layers: Vec<LayerWeights>,
}

const OUTPUT_SPECTRAL_LIMIT: f64 = 0.5;

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> TokenMatrix {
    TokenMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Largest singular value by power iteration on `WᵀW`.
fn spectral_norm(w: &TokenMatrix) -> f64 {
    let n = w.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..100 {
        let wv: Vec<f64> = (0..w.rows()).map(|r| crate::tensor::dot(w.row(r), &v)).collect();
        let mut wtwv = vec![0.0; n];
        for (r, &a) in wv.iter().enumerate() {
            for (o, &b) in wtwv.iter_mut().zip(w.row(r)) {
                *o += a * b;
            }
        }
        let norm = wtwv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        v = wtwv.iter().map(|x| x / norm).collect();
    }
    sigma
}

/// Deterministic sub-stream keyed by `(seed, tag, indices)`.
pub fn sub_rng(seed: u64, tag: &str, idx: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    for i in idx {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

fn prompt_id(prompt: &str) -> u64 {
    let digest = Sha256::digest(prompt.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Draws weights for `config` from its seed.
pub fn init_model(config: ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let rope = RopeParams::for_head_dim(config.head_dim);
    rope.validate(config.head_dim)?;
    let dm = config.d_model();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 1.0 / (dm as f64).sqrt();
    let input = normal_matrix(&mut rng, dm, dm, scale);
    let layers = (0..config.layers)
        .map(|_| {
            let heads = (0..config.heads)
                .map(|_| {
                    let query = normal_matrix(&mut rng, dm, config.head_dim, scale);
                    let key = normal_matrix(&mut rng, dm, config.head_dim, scale);
                    let value = normal_matrix(&mut rng, dm, config.head_dim, scale);
                    let sharpness: f64 = rng.random_range(0.5..2.5);
                    HeadWeights {
                        query: query.map(|v| v * sharpness),
                        key,
                        value,
                    }
                })
                .collect();
            let mut output = normal_matrix(&mut rng, dm, dm, scale);
            let sigma = spectral_norm(&output);
            if sigma > OUTPUT_SPECTRAL_LIMIT {
                output = output.map(|v| v * OUTPUT_SPECTRAL_LIMIT / sigma);
            }
            LayerWeights { heads, output }
        })
        .collect();
    Ok(ModelWeights {
        config,
        rope,
        input,
        layers,
    })
}

/// Source of each head's history frames for the block being generated.
pub trait HistoryProvider: Sync {
    fn history(&self, head: HeadId) -> Vec<&FrameKV>;
}

/// Provider with no history at all.
pub struct NoHistory;

impl HistoryProvider for NoHistory {
    fn history(&self, _: HeadId) -> Vec<&FrameKV> {
        Vec::new()
    }
}

/// One attended frame as seen by a head, for oracle replay.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFrame {
    pub temporal_index: usize,
    pub global_frame_index: usize,
    pub is_summary: bool,
    pub sources: Vec<TokenSource>,
}

/// Per-head record of one generated block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub head: HeadId,
    /// Current-block queries with spatial rotation only.
    pub queries: TokenMatrix,
    /// Current-block frames as they will be written to the cache.
    pub current: Vec<FrameKV>,
    /// Attention output before the output projection.
    pub output: TokenMatrix,
    pub context: Vec<ContextFrame>,
    /// Key plus value scalars attended.
    pub attended_scalars: usize,
}

impl HeadRecord {
    pub fn frame_count(&self) -> usize {
        self.context.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub block_index: usize,
    /// Final hidden state per frame, `s × d_model` each.
    pub frames: Vec<TokenMatrix>,
    /// Layer-major head records.
    pub heads: Vec<HeadRecord>,
}

impl LatentBlock {
    pub fn hidden(&self) -> TokenMatrix {
        TokenMatrix::vstack(&self.frames).expect("frames share a width")
    }
}

/// Probe invoked with each head's attention weights and context frame count.
pub type Probe<'p> = &'p mut dyn FnMut(HeadId, &TokenMatrix, usize);

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rope(&self) -> &RopeParams {
        &self.rope
    }

    pub fn with_rope(mut self, rope: RopeParams) -> Result<Self> {
        rope.validate(self.config.head_dim)?;
        self.rope = rope;
        Ok(self)
    }

    /// Order-sensitive digest of every weight, as hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |m: &TokenMatrix| {
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.input);
        for l in &self.layers {
            for hw in &l.heads {
                feed(&hw.query);
                feed(&hw.key);
                feed(&hw.value);
            }
            feed(&l.output);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn prompt_embedding(&self, prompt: &str) -> Vec<f64> {
        let mut rng = sub_rng(self.config.seed, "prompt", &[prompt_id(prompt)]);
        (0..self.config.d_model()).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Textual key of `head`: the prompt embedding through its key projection.
    pub fn prompt_key(&self, prompt_embedding: &[f64], head: HeadId) -> Vec<f64> {
        let e = TokenMatrix::from_vec(1, prompt_embedding.len(), prompt_embedding.to_vec()).expect("non-empty");
        e.matmul(&self.layers[head.layer].heads[head.head].key)
            .expect("d_model columns")
            .into_data()
    }

    /// Embedded input of block `block` (1-based) under `prompt`.
    pub fn block_input(&self, prompt: &str, block: usize, repeat: usize, sched: &InputSchedule) -> BlockInput {
        let c = &self.config;
        let (s, dm) = (c.tokens_per_frame, c.d_model());
        let mut scene = if sched.scene_length == 0 { 0 } else { (block - 1) / sched.scene_length };
        if sched.scene_cycle > 0 {
            scene %= sched.scene_cycle;
        }
        let scene = scene as u64;
        let mut base_rng = sub_rng(c.seed, "scene", &[scene]);
        let dir: Vec<f64> = (0..dm).map(|_| base_rng.sample(StandardNormal)).collect();
        let pattern = normal_matrix(&mut base_rng, s, dm, 0.5);
        let mut frames = Vec::with_capacity(c.frames_per_block);
        for j in 0..c.frames_per_block {
            let g = c.frame_index(block, j);
            let mut jit = sub_rng(c.seed, "jitter", &[g as u64]);
            let mut rep = sub_rng(c.seed, "repeat", &[g as u64, repeat as u64]);
            let gain = if g == 0 { sched.first_frame_gain } else { 1.0 };
            frames.push(TokenMatrix::from_fn(s, dm, |t, ch| {
                let mut v = dir[ch] + pattern.get(t, ch) + sched.jitter * jit.sample::<f64, _>(StandardNormal);
                if repeat > 0 {
                    v += sched.repeat_noise * rep.sample::<f64, _>(StandardNormal);
                }
                v * gain
            }));
        }
        let noise = TokenMatrix::vstack(&frames).expect("equal widths");
        let mut hidden = noise.matmul(&self.input).expect("d_model square");
        let emb = self.prompt_embedding(prompt);
        for r in 0..hidden.rows() {
            for (v, e) in hidden.row_mut(r).iter_mut().zip(&emb) {
                *v += sched.prompt_scale * e;
            }
        }
        BlockInput {
            block_index: block,
            hidden,
        }
    }

    /// Runs one block through every layer against the provided history.
    pub fn generate_block(
        &self,
        history: &dyn HistoryProvider,
        input: &BlockInput,
        mode: Parallelism,
        mut probe: Option<Probe<'_>>,
    ) -> Result<LatentBlock> {
        let c = &self.config;
        let (f, s, d, dm) = (c.frames_per_block, c.tokens_per_frame, c.head_dim, c.d_model());
        if input.block_index == 0 {
            return Err(Error::Precondition("blocks are numbered from 1".into()));
        }
        if input.hidden.rows() != f * s || input.hidden.cols() != dm {
            return Err(Error::Shape(format!(
                "block input is {}x{}, expected {}x{dm}",
                input.hidden.rows(),
                input.hidden.cols(),
                f * s
            )));
        }
        let spatial = c.spatial_positions();
        let positions: Vec<TokenPosition> = (0..f * s)
            .map(|r| {
                let (h, w) = spatial[r % s];
                TokenPosition { t: 0, h, w }
            })
            .collect();
        let mut x = input.hidden.clone();
        let mut records = Vec::with_capacity(c.head_count());
        for (l, layer) in self.layers.iter().enumerate() {
            let projected: Vec<Result<(TokenMatrix, Vec<FrameKV>)>> = par::map(mode, &layer.heads, |hw| {
                let q = apply_rope(&x.matmul(&hw.query)?, &positions, &self.rope, &SPATIAL)?;
                let k = apply_rope(&x.matmul(&hw.key)?, &positions, &self.rope, &SPATIAL)?;
                let v = x.matmul(&hw.value)?;
                let frames = (0..f)
                    .map(|j| {
                        FrameKV::new(
                            k.slice_rows(j * s, (j + 1) * s),
                            v.slice_rows(j * s, (j + 1) * s),
                            spatial.clone(),
                            c.frame_index(input.block_index, j),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((q, frames))
            });
            let projected = projected.into_iter().collect::<Result<Vec<_>>>()?;

            let mut encoded = Vec::with_capacity(c.heads);
            let mut contexts = Vec::with_capacity(c.heads);
            for (h, (q, current)) in projected.iter().enumerate() {
                let id = HeadId::new(l, h);
                let seq = assemble(id, history.history(id), current);
                contexts.push((
                    seq.frames
                        .iter()
                        .enumerate()
                        .map(|(p, fr)| ContextFrame {
                            temporal_index: p,
                            global_frame_index: fr.global_frame_index,
                            is_summary: fr.is_summary,
                            sources: fr.provenance.clone(),
                        })
                        .collect::<Vec<_>>(),
                    seq.frames.iter().map(|fr| fr.scalar_count()).sum::<usize>(),
                ));
                encoded.push(reencode_temporal::<f64>(&seq, q, &self.rope)?);
            }
            let buf = pack(&encoded)?;
            let outputs = packed_attention_with(&buf, mode)?;
            if let Some(p) = probe.as_mut() {
                for enc in &encoded {
                    let w = attention_weights(&enc.queries, &enc.keys)?;
                    p(enc.head, &w, enc.frame_count);
                }
            }

            let mut concat = TokenMatrix::zeros(f * s, dm);
            for (h, out) in outputs.iter().enumerate() {
                for r in 0..f * s {
                    concat.row_mut(r)[h * d..(h + 1) * d].copy_from_slice(out.row(r));
                }
            }
            let delta = concat.matmul(&layer.output)?;
            for (xv, dv) in x.data_mut().iter_mut().zip(delta.data()) {
                *xv += dv;
            }
            for (((h, (q, current)), out), (context, scalars)) in
                projected.into_iter().enumerate().zip(outputs).zip(contexts)
            {
                records.push(HeadRecord {
                    head: HeadId::new(l, h),
                    queries: q,
                    current,
                    output: out,
                    context,
                    attended_scalars: scalars,
                });
            }
        }
        if !x.is_finite() {
            return Err(Error::Invariant(format!(
                "non-finite hidden state at block {}",
                input.block_index
            )));
        }
        let frames = (0..f).map(|j| x.slice_rows(j * s, (j + 1) * s)).collect();
        Ok(LatentBlock {
            block_index: input.block_index,
            frames,
            heads: records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 8,
            tokens_per_frame: 4,
            frames_per_block: 3,
            grid_h: 2,
            grid_w: 2,
            seed: 42,
        }
    }

    #[test]
    fn weights_are_deterministic() {
        let a = init_model(small()).unwrap();
        let b = init_model(small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn seeds_change_weights() {
        let a = init_model(ModelConfig { seed: 1, ..small() }).unwrap();
        let b = init_model(ModelConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.input, b.input);
    }

    #[test]
    fn golden_weight_checksum() {
        let w = init_model(small()).unwrap();
        assert_eq!(w.checksum(), GOLDEN_SEED42);
    }

    const GOLDEN_SEED42: &str = "12024a8f684805da6d98c04879aa151390dda6a4981eca8498606b52540667ba";

    #[test]
    fn invalid_configs() {
        assert!(init_model(ModelConfig { grid_w: 3, ..small() }).is_err());
        assert!(init_model(ModelConfig { head_dim: 5, ..small() }).is_err());
        assert!(init_model(ModelConfig { layers: 0, ..small() }).is_err());
    }

    #[test]
    fn output_projection_is_clamped() {
        let w = init_model(ModelConfig::default()).unwrap();
        for l in &w.layers {
            assert!(spectral_norm(&l.output) <= OUTPUT_SPECTRAL_LIMIT + 1e-9);
        }
    }

    #[test]
    fn first_block_attends_only_to_itself() {
        let w = init_model(small()).unwrap();
        let input = w.block_input("a cat", 1, 0, &InputSchedule::default());
        let b = w.generate_block(&NoHistory, &input, Parallelism::Sequential, None).unwrap();
        assert_eq!(b.frames.len(), 3);
        for h in &b.heads {
            assert_eq!(h.frame_count(), 3);
            assert_eq!(h.attended_scalars, 2 * 3 * 4 * 8);
        }
        let again = w.generate_block(&NoHistory, &input, Parallelism::default(), None).unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn prompt_changes_input() {
        let w = init_model(small()).unwrap();
        let s = InputSchedule::default();
        assert_ne!(w.block_input("a", 2, 0, &s), w.block_input("b", 2, 0, &s));
        assert_eq!(w.block_input("a", 2, 0, &s), w.block_input("a", 2, 0, &s));
    }
}
