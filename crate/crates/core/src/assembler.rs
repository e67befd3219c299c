//! Per-head context assembly, temporal re-encoding and variable-length
//! packing.
//!
//! Each head's history frames plus the current block are laid out in
//! assembly order, given contiguous temporal indices `0..F`, and packed with
//! every other head into one flat buffer described by per-head offsets. The
//! packed attention pass walks that buffer once, honouring head boundaries.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::headcache::FrameKV;
use crate::par::{self, Parallelism};
use crate::profiler::HeadId;
use crate::rope::{rotate_temporal_rows, RopeParams};
use crate::tensor::{Matrix, Scalar, TokenMatrix};

/// Ordered frames one head attends to; the current block is the tail.
#[derive(Debug, Clone)]
pub struct AssembledSequence<'a> {
    pub head: HeadId,
    pub frames: Vec<&'a FrameKV>,
    pub frames_per_block: usize,
}

impl<'a> AssembledSequence<'a> {
    /// Total frame count `F`, current block included.
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Temporal index of each frame: its assembly position.
    pub fn temporal_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).collect()
    }

    /// Temporal indices of the current block's query frames.
    pub fn query_indices(&self) -> Vec<usize> {
        let f = self.frame_count();
        (f - self.frames_per_block..f).collect()
    }

    pub fn token_count(&self) -> usize {
        self.frames.iter().map(|fr| fr.tokens()).sum()
    }
}

/// Concatenates history and current frames for one head.
pub fn assemble<'a>(
    head: HeadId,
    history: Vec<&'a FrameKV>,
    current: &'a [FrameKV],
) -> AssembledSequence<'a> {
    let mut frames = history;
    frames.extend(current.iter());
    AssembledSequence {
        head,
        frames,
        frames_per_block: current.len(),
    }
}

/// Flat keys, values and queries of one head, ready for attention.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence<T> {
    pub head: HeadId,
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
    pub queries: Matrix<T>,
    pub frame_count: usize,
    /// Per-key-token temporal index.
    pub key_temporal: Vec<usize>,
    /// Per-query-token temporal index.
    pub query_temporal: Vec<usize>,
    temporally_encoded: bool,
}

impl<T: Scalar> EncodedSequence<T> {
    /// Stacks the assembled frames without any temporal rotation.
    /// `queries` holds the current block's query tokens, frame-major.
    pub fn gather(seq: &AssembledSequence<'_>, queries: &TokenMatrix) -> Result<Self> {
        let f = seq.frames_per_block;
        if f == 0 || !queries.rows().is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "{} query tokens for {f} current frames",
                queries.rows()
            )));
        }
        let keys = TokenMatrix::vstack(seq.frames.iter().map(|fr| &fr.keys))?;
        let values = TokenMatrix::vstack(seq.frames.iter().map(|fr| &fr.values))?;
        let mut key_temporal = Vec::with_capacity(keys.rows());
        for (p, fr) in seq.frames.iter().enumerate() {
            key_temporal.extend(std::iter::repeat_n(p, fr.tokens()));
        }
        let per_frame = queries.rows() / f;
        let q_idx = seq.query_indices();
        let query_temporal = (0..queries.rows()).map(|r| q_idx[r / per_frame]).collect();
        Ok(Self {
            head: seq.head,
            keys: keys.cast(),
            values: values.cast(),
            queries: queries.cast(),
            frame_count: seq.frame_count(),
            key_temporal,
            query_temporal,
            temporally_encoded: false,
        })
    }

    pub fn is_temporally_encoded(&self) -> bool {
        self.temporally_encoded
    }

    /// Rotates keys and queries by their temporal indices. Fails if already
    /// applied.
    pub fn reencode_temporal(&mut self, rope: &RopeParams) -> Result<()> {
        if self.temporally_encoded {
            return Err(Error::DoubleTemporalRotation);
        }
        rotate_runs(&mut self.keys, &self.key_temporal, rope);
        rotate_runs(&mut self.queries, &self.query_temporal, rope);
        self.temporally_encoded = true;
        Ok(())
    }
}

fn rotate_runs<T: Scalar>(m: &mut Matrix<T>, idx: &[usize], rope: &RopeParams) {
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && idx[end] == idx[start] {
            end += 1;
        }
        rotate_temporal_rows(m, start, end, idx[start], rope);
        start = end;
    }
}

/// Gathers and temporally re-encodes one head's sequence.
pub fn reencode_temporal<T: Scalar>(
    seq: &AssembledSequence<'_>,
    queries: &TokenMatrix,
    rope: &RopeParams,
) -> Result<EncodedSequence<T>> {
    let mut enc = EncodedSequence::gather(seq, queries)?;
    enc.reencode_temporal(rope)?;
    Ok(enc)
}

/// Flat variable-length attention input for many heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBuffer<T> {
    pub dim: usize,
    pub heads: Vec<HeadId>,
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub queries: Vec<T>,
    pub key_offsets: Vec<usize>,
    pub key_lengths: Vec<usize>,
    pub query_offsets: Vec<usize>,
    pub query_lengths: Vec<usize>,
}

/// Lays sequences out in `(layer, head)` order.
pub fn pack<T: Scalar>(seqs: &[EncodedSequence<T>]) -> Result<PackedBuffer<T>> {
    let dim = seqs
        .first()
        .map(|s| s.keys.cols())
        .ok_or_else(|| Error::Shape("nothing to pack".into()))?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.sort_by_key(|&i| seqs[i].head);
    let mut buf = PackedBuffer {
        dim,
        heads: Vec::with_capacity(seqs.len()),
        keys: Vec::new(),
        values: Vec::new(),
        queries: Vec::new(),
        key_offsets: Vec::with_capacity(seqs.len()),
        key_lengths: Vec::with_capacity(seqs.len()),
        query_offsets: Vec::with_capacity(seqs.len()),
        query_lengths: Vec::with_capacity(seqs.len()),
    };
    let (mut k_off, mut q_off) = (0, 0);
    for i in order {
        let s = &seqs[i];
        if s.keys.cols() != dim || s.values.cols() != dim || s.queries.cols() != dim {
            return Err(Error::Shape(format!("head {} has mismatched width", s.head)));
        }
        buf.heads.push(s.head);
        buf.key_offsets.push(k_off);
        buf.key_lengths.push(s.keys.rows());
        buf.query_offsets.push(q_off);
        buf.query_lengths.push(s.queries.rows());
        buf.keys.extend_from_slice(s.keys.data());
        buf.values.extend_from_slice(s.values.data());
        buf.queries.extend_from_slice(s.queries.data());
        k_off += s.keys.rows();
        q_off += s.queries.rows();
    }
    Ok(buf)
}

/// Per-head `(keys, values, queries)` slices rebuilt from the flat buffer.
pub type Unpacked<T> = (HeadId, Matrix<T>, Matrix<T>, Matrix<T>);

impl<T: Scalar> PackedBuffer<T> {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn key_rows(&self) -> usize {
        self.keys.len() / self.dim
    }

    /// Offsets/lengths must tile the flat arrays exactly.
    pub fn check_integrity(&self) -> Result<()> {
        let n = self.heads.len();
        if [self.key_offsets.len(), self.key_lengths.len(), self.query_offsets.len(), self.query_lengths.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Integrity("bookkeeping arrays disagree in length".into()));
        }
        if self.dim == 0 || !self.keys.len().is_multiple_of(self.dim) || !self.queries.len().is_multiple_of(self.dim) {
            return Err(Error::Integrity("flat arrays are not whole rows".into()));
        }
        if self.keys.len() != self.values.len() {
            return Err(Error::Integrity("key and value buffers differ".into()));
        }
        let tile = |offsets: &[usize], lengths: &[usize], rows: usize, what: &str| -> Result<()> {
            let mut expect = 0;
            for (i, (&o, &l)) in offsets.iter().zip(lengths).enumerate() {
                if o != expect || l == 0 {
                    return Err(Error::Integrity(format!("{what} span {i} starts at {o}, expected {expect}")));
                }
                expect += l;
            }
            if expect != rows {
                return Err(Error::Integrity(format!("{what} spans cover {expect} of {rows} rows")));
            }
            Ok(())
        };
        tile(&self.key_offsets, &self.key_lengths, self.key_rows(), "key")?;
        tile(&self.query_offsets, &self.query_lengths, self.queries.len() / self.dim, "query")
    }

    pub fn unpack(&self) -> Result<Vec<Unpacked<T>>> {
        self.check_integrity()?;
        let d = self.dim;
        (0..self.heads.len())
            .map(|h| {
                let (ko, kl) = (self.key_offsets[h] * d, self.key_lengths[h] * d);
                let (qo, ql) = (self.query_offsets[h] * d, self.query_lengths[h] * d);
                Ok((
                    self.heads[h],
                    Matrix::from_vec(self.key_lengths[h], d, self.keys[ko..ko + kl].to_vec())?,
                    Matrix::from_vec(self.key_lengths[h], d, self.values[ko..ko + kl].to_vec())?,
                    Matrix::from_vec(self.query_lengths[h], d, self.queries[qo..qo + ql].to_vec())?,
                ))
            })
            .collect()
    }
}

/// Attention of one head read straight out of the flat buffer.
fn attend_span<T: Scalar>(q: &[T], k: &[T], v: &[T], d: usize) -> Vec<T> {
    let n_q = q.len() / d;
    let n_k = k.len() / d;
    let scale = T::one() / T::of_f64(d as f64).sqrt();
    let mut out = vec![T::zero(); n_q * d];
    let mut scores = vec![T::zero(); n_k];
    for i in 0..n_q {
        let qi = &q[i * d..(i + 1) * d];
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            let mut acc = T::zero();
            for c in 0..d {
                acc = acc + qi[c] * kj[c];
            }
            *s = acc * scale;
            max = max.max(*s);
        }
        let mut z = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z = z + *s;
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &s) in scores.iter().enumerate() {
            let w = s / z;
            let vj = &v[j * d..(j + 1) * d];
            for c in 0..d {
                oi[c] = oi[c] + w * vj[c];
            }
        }
    }
    out
}

/// One pass over the packed buffer; returns each head's output in buffer
/// order.
pub fn packed_attention_with<T: Scalar>(buf: &PackedBuffer<T>, mode: Parallelism) -> Result<Vec<Matrix<T>>> {
    buf.check_integrity()?;
    let d = buf.dim;
    par::map_range(mode, buf.heads.len(), |h| {
        let k = &buf.keys[buf.key_offsets[h] * d..(buf.key_offsets[h] + buf.key_lengths[h]) * d];
        let v = &buf.values[buf.key_offsets[h] * d..(buf.key_offsets[h] + buf.key_lengths[h]) * d];
        let q = &buf.queries[buf.query_offsets[h] * d..(buf.query_offsets[h] + buf.query_lengths[h]) * d];
        Matrix::from_vec(buf.query_lengths[h], d, attend_span(q, k, v, d))
    })
    .into_iter()
    .collect()
}

pub fn packed_attention<T: Scalar>(buf: &PackedBuffer<T>) -> Result<Vec<Matrix<T>>> {
    packed_attention_with(buf, Parallelism::default())
}

/// Little-endian debug dump: head count, key offsets, key lengths (u64),
/// then keys and values as f64.
pub fn write_dump<T: Scalar, W: Write>(buf: &PackedBuffer<T>, mut w: W) -> Result<()> {
    w.write_all(&(buf.heads.len() as u64).to_le_bytes())?;
    for &o in &buf.key_offsets {
        w.write_all(&(o as u64).to_le_bytes())?;
    }
    for &l in &buf.key_lengths {
        w.write_all(&(l as u64).to_le_bytes())?;
    }
    for v in buf.keys.iter().chain(&buf.values) {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Parsed dump: `(offsets, lengths, keys, values)`.
pub type Dump = (Vec<u64>, Vec<u64>, Vec<f64>, Vec<f64>);

pub fn read_dump<R: Read>(mut r: R) -> Result<Dump> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let word = |i: usize| -> Result<[u8; 8]> {
        bytes
            .get(i * 8..i * 8 + 8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Integrity("truncated dump".into()))
    };
    let n = u64::from_le_bytes(word(0)?) as usize;
    let offsets = (0..n).map(|i| word(1 + i).map(u64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
    let lengths = (0..n).map(|i| word(1 + n + i).map(u64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
    let start = 1 + 2 * n;
    let total = bytes.len() / 8 - start;
    if bytes.len() % 8 != 0 || !total.is_multiple_of(2) {
        return Err(Error::Integrity("dump payload is not whole key/value pairs".into()));
    }
    let scalars = (0..total).map(|i| word(start + i).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
    let (k, v) = scalars.split_at(total / 2);
    Ok((offsets, lengths, k.to_vec(), v.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::attention;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: usize = 4;
    const D: usize = 8;

    fn frame(idx: usize, rng: &mut ChaCha8Rng) -> FrameKV {
        let k = TokenMatrix::from_fn(S, D, |_, _| rng.random_range(-1.0..1.0));
        let v = TokenMatrix::from_fn(S, D, |_, _| rng.random_range(-1.0..1.0));
        FrameKV::new(k, v, (0..S).map(|t| (t / 2, t % 2)).collect(), idx).unwrap()
    }

    fn encoded(head: HeadId, history: usize, rng: &mut ChaCha8Rng) -> EncodedSequence<f64> {
        let hist: Vec<FrameKV> = (0..history).map(|i| frame(i, rng)).collect();
        let cur: Vec<FrameKV> = (0..3).map(|i| frame(100 + i, rng)).collect();
        let q = TokenMatrix::from_fn(3 * S, D, |_, _| rng.random_range(-1.0..1.0));
        let seq = assemble(head, hist.iter().collect(), &cur);
        reencode_temporal(&seq, &q, &RopeParams::for_head_dim(D)).unwrap()
    }

    #[test]
    fn local_window_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hist = [frame(11, &mut rng)];
        let cur: Vec<_> = (12..15).map(|i| frame(i, &mut rng)).collect();
        let seq = assemble(HeadId::new(0, 0), hist.iter().collect(), &cur);
        assert_eq!(seq.frame_count(), 4);
        assert_eq!(seq.query_indices(), vec![1, 2, 3]);
        assert_eq!(seq.temporal_indices(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn anchor_relative_span_is_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hist: Vec<_> = [0, 1, 2, 41].iter().map(|&i| frame(i, &mut rng)).collect();
        let cur: Vec<_> = (42..45).map(|i| frame(i, &mut rng)).collect();
        let seq = assemble(HeadId::new(0, 0), hist.iter().collect(), &cur);
        let q = seq.query_indices();
        assert_eq!(q.iter().max().unwrap() - seq.temporal_indices()[0], 6);
    }

    #[test]
    fn spatial_channels_untouched_by_reencoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hist: Vec<_> = (0..4).map(|i| frame(i, &mut rng)).collect();
        let cur: Vec<_> = (4..7).map(|i| frame(i, &mut rng)).collect();
        let q = TokenMatrix::from_fn(3 * S, D, |_, _| rng.random_range(-1.0..1.0));
        let seq = assemble(HeadId::new(0, 0), hist.iter().collect(), &cur);
        let raw = EncodedSequence::<f64>::gather(&seq, &q).unwrap();
        let enc = reencode_temporal::<f64>(&seq, &q, &RopeParams::for_head_dim(D)).unwrap();
        for r in 0..raw.keys.rows() {
            assert_eq!(&raw.keys.row(r)[D / 2..], &enc.keys.row(r)[D / 2..]);
        }
        // frame 0 sits at temporal index 0: unrotated
        assert_eq!(raw.keys.row(0), enc.keys.row(0));
        assert_ne!(raw.keys.row(S), enc.keys.row(S));
    }

    #[test]
    fn double_rotation_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = encoded(HeadId::new(0, 0), 2, &mut rng);
        assert_eq!(
            enc.reencode_temporal(&RopeParams::for_head_dim(D)),
            Err(Error::DoubleTemporalRotation)
        );
    }

    #[test]
    fn single_head_pack() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = encoded(HeadId::new(0, 0), 1, &mut rng);
        let buf = pack(std::slice::from_ref(&enc)).unwrap();
        assert_eq!(buf.key_offsets, vec![0]);
        assert_eq!(buf.key_lengths, vec![4 * S]);
        let out = packed_attention(&buf).unwrap();
        let direct = attention(&enc.queries, &enc.keys, &enc.values).unwrap();
        assert!(out[0].max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn prefix_sum_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seqs = vec![
            encoded(HeadId::new(0, 2), 8, &mut rng),
            encoded(HeadId::new(0, 0), 1, &mut rng),
            encoded(HeadId::new(0, 1), 4, &mut rng),
        ];
        let buf = pack(&seqs).unwrap();
        assert_eq!(buf.heads, vec![HeadId::new(0, 0), HeadId::new(0, 1), HeadId::new(0, 2)]);
        assert_eq!(buf.key_offsets, vec![0, 4 * S, 11 * S]);
        assert_eq!(buf.key_rows(), 22 * S);
    }

    #[test]
    fn unpack_inverts_pack() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seqs: Vec<_> = (0..6).map(|h| encoded(HeadId::new(h / 3, h % 3), rng.random_range(0..9), &mut rng)).collect();
        let buf = pack(&seqs).unwrap();
        for ((id, k, v, q), s) in buf.unpack().unwrap().into_iter().zip(&seqs) {
            assert_eq!(id, s.head);
            assert_eq!(k, s.keys);
            assert_eq!(v, s.values);
            assert_eq!(q, s.queries);
        }
    }

    #[test]
    fn corrupted_offsets_fail_integrity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seqs = vec![encoded(HeadId::new(0, 0), 2, &mut rng), encoded(HeadId::new(0, 1), 3, &mut rng)];
        let mut buf = pack(&seqs).unwrap();
        buf.key_offsets[1] += 1;
        assert!(matches!(packed_attention(&buf), Err(Error::Integrity(_))));
        let mut buf = pack(&seqs).unwrap();
        buf.key_lengths[1] -= 1;
        assert!(matches!(packed_attention(&buf), Err(Error::Integrity(_))));
    }

    #[test]
    fn zero_history_is_within_block_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = encoded(HeadId::new(0, 0), 0, &mut rng);
        assert_eq!(enc.frame_count, 3);
        let out = packed_attention(&pack(std::slice::from_ref(&enc)).unwrap()).unwrap();
        assert!(out[0].max_abs_diff(&attention(&enc.queries, &enc.keys, &enc.values).unwrap()) < 1e-12);
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let seqs = vec![encoded(HeadId::new(0, 0), 2, &mut rng), encoded(HeadId::new(1, 0), 5, &mut rng)];
        let buf = pack(&seqs).unwrap();
        let mut bytes = Vec::new();
        write_dump(&buf, &mut bytes).unwrap();
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        let (o, l, k, v) = read_dump(bytes.as_slice()).unwrap();
        assert_eq!(o, vec![0, 5 * S as u64]);
        assert_eq!(l, vec![5 * S as u64, 8 * S as u64]);
        assert_eq!(k, buf.keys);
        assert_eq!(v, buf.values);
    }
}
