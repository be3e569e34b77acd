//! Product quantization of posting vectors: per-subspace k-means codebooks,
//! nearest-centroid encoding and decode-then-dot search support.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::binio::{self, to_u32, ByteReader};
use crate::error::{check_dim, Error, Result};
use crate::index::{InvertedIndex, Payload, PostingList};

const MAGIC: &[u8; 4] = b"CTPQ";

/// Default cap on the number of vectors used to train a codebook.
pub const DEFAULT_SAMPLE_LIMIT: usize = 100_000;
pub const DEFAULT_ITERATIONS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    subvector_dim: usize,
    num_subspaces: usize,
    k: usize,
    /// `num_subspaces × k × subvector_dim`.
    centroids: Vec<f32>,
}

impl PqCodebook {
    pub fn new(subvector_dim: usize, num_subspaces: usize, k: usize, centroids: Vec<f32>) -> Result<Self> {
        if subvector_dim == 0 || num_subspaces == 0 || k == 0 {
            return Err(Error::contract("codebook sizes must be >= 1"));
        }
        let n = num_subspaces
            .checked_mul(k)
            .and_then(|x| x.checked_mul(subvector_dim))
            .ok_or_else(|| Error::contract("codebook size overflows"))?;
        check_dim(n, centroids.len())?;
        if !centroids.iter().all(|x| x.is_finite()) {
            return Err(Error::contract("centroids must be finite"));
        }
        Ok(Self {
            subvector_dim,
            num_subspaces,
            k,
            centroids,
        })
    }

    pub fn dim(&self) -> usize {
        self.subvector_dim * self.num_subspaces
    }

    pub fn subvector_dim(&self) -> usize {
        self.subvector_dim
    }

    pub fn num_subspaces(&self) -> usize {
        self.num_subspaces
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centroid(&self, subspace: usize, code: usize) -> &[f32] {
        let m = self.subvector_dim;
        let start = (subspace * self.k + code) * m;
        &self.centroids[start..start + m]
    }

    pub fn bits_per_dimension(&self) -> f64 {
        bits_per_dimension(self.dim(), self.subvector_dim, self.k)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 4 * self.centroids.len());
        out.extend_from_slice(MAGIC);
        binio::put_u32(&mut out, to_u32(self.subvector_dim, "subvector dim")?);
        binio::put_u32(&mut out, to_u32(self.k, "k")?);
        binio::put_u32(&mut out, to_u32(self.num_subspaces, "subspaces")?);
        binio::put_f32s(&mut out, &self.centroids);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.expect_magic(MAGIC)?;
        let m = r.u32()? as usize;
        let k = r.u32()? as usize;
        let s = r.u32()? as usize;
        let n = m
            .checked_mul(k)
            .and_then(|x| x.checked_mul(s))
            .ok_or_else(|| Error::format("codebook size overflows"))?;
        r.check_count(n, 4)?;
        let centroids = r.f32_vec(n)?;
        r.finish()?;
        Self::new(m, s, k, centroids).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Code bits per original dimension: `num_subspaces · ⌈log2 k⌉ / dim`.
pub fn bits_per_dimension(dim: usize, subvector_dim: usize, k: usize) -> f64 {
    let subspaces = dim / subvector_dim;
    let bits = if k <= 1 { 0 } else { usize::BITS - (k - 1).leading_zeros() };
    (subspaces as f64 * bits as f64) / dim as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PqTrainConfig {
    pub subvector_dim: usize,
    pub k: usize,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PqTrainReport {
    /// Number of centroids actually used, after capping at the distinct
    /// subvector count.
    pub effective_k: usize,
    /// Mean squared reconstruction error of the sample: entry 0 after
    /// initialization, entry `t` after Lloyd iteration `t`.
    pub mse_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], m: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(m).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn distinct_count(points: &[f64], m: usize) -> usize {
    let mut rows: Vec<&[f64]> = points.chunks_exact(m).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.dedup();
    rows.len()
}

fn kmeans_pp_init(points: &[f64], m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / m;
    let mut centroids = Vec::with_capacity(k * m);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * m..(first + 1) * m]);
    let mut d2: Vec<f64> = points
        .chunks_exact(m)
        .map(|p| sq_dist(p, &centroids[..m]))
        .collect();
    while centroids.len() < k * m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = Some(i);
                    break;
                }
                target -= d;
            }
            // rounding can exhaust `target` early; fall back to the last
            // point that is not already a centroid
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick * m..(pick + 1) * m].to_vec();
        for (p, d) in points.chunks_exact(m).zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.extend(c);
    }
    centroids
}

/// Lloyd's algorithm on one subspace. Returns centroids and the per-step
/// sum of squared errors.
fn lloyd(points: &[f64], m: usize, k: usize, iterations: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, m, k, &mut rng);
    let n = points.len() / m;
    let mut assign = vec![0usize; n];
    let mut trace = Vec::with_capacity(iterations + 1);

    let assign_all = |centroids: &[f64], assign: &mut [usize]| {
        for (a, p) in assign.iter_mut().zip(points.chunks_exact(m)) {
            *a = nearest(p, centroids, m).0;
        }
    };
    let sse = |centroids: &[f64], assign: &[usize]| -> f64 {
        assign
            .iter()
            .zip(points.chunks_exact(m))
            .map(|(&a, p)| sq_dist(p, &centroids[a * m..(a + 1) * m]))
            .sum()
    };

    assign_all(&centroids, &mut assign);
    trace.push(sse(&centroids, &assign));
    for it in 0..iterations {
        if it > 0 {
            assign_all(&centroids, &mut assign);
        }
        let mut sums = vec![0.0f64; k * m];
        let mut counts = vec![0usize; k];
        for (&a, p) in assign.iter().zip(points.chunks_exact(m)) {
            counts[a] += 1;
            for (s, x) in sums[a * m..(a + 1) * m].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centroid
            if counts[c] > 0 {
                for j in 0..m {
                    centroids[c * m + j] = sums[c * m + j] / counts[c] as f64;
                }
            }
        }
        trace.push(sse(&centroids, &assign));
    }
    (centroids, trace)
}

/// Trains a product quantizer on `vectors` (`n × dim`, row-major).
pub fn train_pq(vectors: &[f32], dim: usize, cfg: PqTrainConfig) -> Result<(PqCodebook, PqTrainReport)> {
    let m = cfg.subvector_dim;
    if dim == 0 || m == 0 || dim % m != 0 {
        return Err(Error::contract(format!("subvector dim {m} must divide vector dim {dim}")));
    }
    if cfg.k == 0 {
        return Err(Error::contract("k must be >= 1"));
    }
    check_dim(0, vectors.len() % dim)?;
    let n = vectors.len() / dim;
    if n == 0 {
        return Err(Error::contract("cannot train a codebook on an empty sample"));
    }
    let subspaces = dim / m;
    let split: Vec<Vec<f64>> = (0..subspaces)
        .map(|s| {
            vectors
                .chunks_exact(dim)
                .flat_map(|v| v[s * m..(s + 1) * m].iter().map(|&x| x as f64))
                .collect()
        })
        .collect();
    let effective_k = split
        .iter()
        .map(|pts| distinct_count(pts, m))
        .min()
        .unwrap_or(0)
        .min(cfg.k);

    let trained: Vec<(Vec<f64>, Vec<f64>)> = split
        .par_iter()
        .enumerate()
        .map(|(s, pts)| {
            let seed = cfg.seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            lloyd(pts, m, effective_k, cfg.iterations, seed)
        })
        .collect();

    let mut centroids = Vec::with_capacity(subspaces * effective_k * m);
    let mut mse_trace = vec![0.0; cfg.iterations + 1];
    for (c, trace) in &trained {
        centroids.extend(c.iter().map(|&x| x as f32));
        for (t, e) in mse_trace.iter_mut().zip(trace) {
            *t += e;
        }
    }
    for t in &mut mse_trace {
        *t /= n as f64;
    }
    let codebook = PqCodebook::new(m, subspaces, effective_k, centroids)?;
    Ok((
        codebook,
        PqTrainReport {
            effective_k,
            mse_trace,
        },
    ))
}

/// Nearest centroid per subspace (Euclidean), lowest index on ties.
pub fn pq_encode(v: &[f32], cb: &PqCodebook) -> Result<Vec<u32>> {
    check_dim(cb.dim(), v.len())?;
    let m = cb.subvector_dim;
    Ok(v.chunks_exact(m)
        .enumerate()
        .map(|(s, sub)| {
            let mut best = (0u32, f32::INFINITY);
            for c in 0..cb.k {
                let d: f32 = sub
                    .iter()
                    .zip(cb.centroid(s, c))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if d < best.1 {
                    best = (c as u32, d);
                }
            }
            best.0
        })
        .collect())
}

pub fn pq_decode(codes: &[u32], cb: &PqCodebook) -> Result<Vec<f32>> {
    check_dim(cb.num_subspaces, codes.len())?;
    let mut out = Vec::with_capacity(cb.dim());
    for (s, &c) in codes.iter().enumerate() {
        if c as usize >= cb.k {
            return Err(Error::contract(format!("code {c} out of range for k={}", cb.k)));
        }
        out.extend_from_slice(cb.centroid(s, c as usize));
    }
    Ok(out)
}

/// Decodes `num_subspaces` byte codes into `out`.
pub(crate) fn decode_u8_into(codes: &[u8], cb: &PqCodebook, out: &mut [f32]) {
    let m = cb.subvector_dim;
    for (s, &c) in codes.iter().enumerate() {
        out[s * m..(s + 1) * m].copy_from_slice(cb.centroid(s, c as usize));
    }
}

/// Collects up to `limit` posting vectors from a dense index, sampled
/// uniformly without replacement when the index holds more.
pub fn sample_index_vectors(index: &InvertedIndex, limit: usize, seed: u64) -> Result<Vec<f32>> {
    let dim = index.meta.dim;
    let mut all = Vec::new();
    for list in &index.postings {
        match &list.payload {
            Payload::Dense(v) => all.extend_from_slice(v),
            Payload::Codes(_) => return Err(Error::contract("index is already quantized")),
        }
    }
    let n = if dim == 0 { 0 } else { all.len() / dim };
    if n <= limit {
        return Ok(all);
    }
    let mut picks = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, limit).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .flat_map(|i| all[i * dim..(i + 1) * dim].iter().copied())
        .collect())
}

/// Replaces every dense payload by byte codes. Weights are kept exact so the
/// quantized index can still be pruned.
pub fn quantize_index(index: &InvertedIndex, cb: &PqCodebook) -> Result<InvertedIndex> {
    if index.meta.quantized_subspaces.is_some() {
        return Err(Error::contract("index is already quantized"));
    }
    check_dim(index.meta.dim, cb.dim())?;
    if cb.k > 256 {
        return Err(Error::contract("quantized indexes store u8 codes: k must be <= 256"));
    }
    let dim = index.meta.dim;
    let postings = index
        .postings
        .iter()
        .map(|list| {
            let Payload::Dense(v) = &list.payload else {
                unreachable!("dense index checked above")
            };
            let mut codes = Vec::with_capacity(list.len() * cb.num_subspaces);
            for row in v.chunks_exact(dim) {
                codes.extend(pq_encode(row, cb)?.into_iter().map(|c| c as u8));
            }
            Ok(PostingList {
                doc_ids: list.doc_ids.clone(),
                weights: list.weights.clone(),
                payload: Payload::Codes(codes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = index.clone();
    out.postings = postings;
    out.meta.quantized_subspaces = Some(cb.num_subspaces);
    Ok(out)
}
