//! Lexical router: maps a token vector to non-negative per-key scores with
//! `log(1 + relu(Wᵀv + b))`, keeps the strongest keys per token and
//! max-pools token scores to sequence level.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader};
use crate::error::{check_dim, Error, Result};
use crate::scoring::EncodedSequence;

const ROUTER_MAGIC: &[u8; 4] = b"LXRT";
const ROUTER_VERSION: u32 = 1;

/// Linear router parameters. `weights` is row-major with shape
/// `dim × key_count`, so `weights[i * key_count + k]` is `W[i][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    dim: usize,
    key_count: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl RouterParams {
    pub fn new(dim: usize, key_count: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if dim == 0 || key_count == 0 {
            return Err(Error::contract("router needs dim >= 1 and key_count >= 1"));
        }
        check_dim(dim * key_count, weights.len())?;
        check_dim(key_count, bias.len())?;
        if !weights.iter().chain(&bias).all(|x| x.is_finite()) {
            return Err(Error::contract("router parameters must be finite"));
        }
        Ok(Self {
            dim,
            key_count,
            weights,
            bias,
        })
    }

    pub fn zeros(dim: usize, key_count: usize) -> Result<Self> {
        Self::new(dim, key_count, vec![0.0; dim * key_count], vec![0.0; key_count])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn key_count(&self) -> usize {
        self.key_count
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Pre-activation scores `Wᵀv + b`.
    pub fn logits(&self, v: &[f32]) -> Result<Vec<f32>> {
        check_dim(self.dim, v.len())?;
        let mut out = self.bias.clone();
        for (row, &x) in self.weights.chunks_exact(self.key_count).zip(v) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * x;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.weights.len() + self.bias.len()));
        out.extend_from_slice(ROUTER_MAGIC);
        binio::put_u32(&mut out, ROUTER_VERSION);
        binio::put_u32(&mut out, self.dim as u32);
        binio::put_u32(&mut out, self.key_count as u32);
        binio::put_f32s(&mut out, &self.weights);
        binio::put_f32s(&mut out, &self.bias);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.expect_magic(ROUTER_MAGIC)?;
        let version = r.u32()?;
        if version != ROUTER_VERSION {
            return Err(Error::format(format!("unsupported router version {version}")));
        }
        let dim = r.u32()? as usize;
        let key_count = r.u32()? as usize;
        let n = dim
            .checked_mul(key_count)
            .ok_or_else(|| Error::format("router shape overflows"))?;
        r.check_count(n, 4)?;
        let weights = r.f32_vec(n)?;
        let bias = r.f32_vec(key_count)?;
        r.finish()?;
        Self::new(dim, key_count, weights, bias).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// One non-negative score per lexical key.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterRepresentation(pub Vec<f32>);

impl RouterRepresentation {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A selected routing key and its weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub key: u32,
    pub weight: f32,
}

impl Route {
    pub fn new(key: u32, weight: f32) -> Self {
        Self { key, weight }
    }
}

/// A contextualized token vector together with the keys it was routed to.
///
/// Routes are kept in descending weight order (ascending key on ties) and
/// never carry a zero weight; a token with no routes is deactivated.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedToken {
    pub token_id: u32,
    pub vector: Vec<f32>,
    pub routes: Vec<Route>,
}

impl RoutedToken {
    pub fn unrouted(token_id: u32, vector: Vec<f32>) -> Self {
        Self {
            token_id,
            vector,
            routes: Vec::new(),
        }
    }

    pub fn is_deactivated(&self) -> bool {
        self.routes.is_empty()
    }
}

/// Computes `log(1 + max(0, Wᵀv + b))` for every key.
pub fn router_representation(v: &[f32], params: &RouterParams) -> Result<RouterRepresentation> {
    let mut out = params.logits(v)?;
    for x in &mut out {
        *x = x.max(0.0).ln_1p();
    }
    Ok(RouterRepresentation(out))
}

fn by_weight_desc(a: &Route, b: &Route) -> Ordering {
    b.weight.total_cmp(&a.weight).then(a.key.cmp(&b.key))
}

/// Keeps at most `max_keys` strictly positive keys, heaviest first, ties
/// broken by ascending key id.
pub fn select_top_keys(rep: &RouterRepresentation, max_keys: usize) -> Result<Vec<Route>> {
    if max_keys == 0 {
        return Err(Error::contract("max_keys must be >= 1"));
    }
    let mut routes: Vec<Route> = rep
        .0
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(k, &w)| Route::new(k as u32, w))
        .collect();
    if routes.len() > max_keys {
        routes.select_nth_unstable_by(max_keys - 1, by_weight_desc);
        routes.truncate(max_keys);
    }
    routes.sort_unstable_by(by_weight_desc);
    Ok(routes)
}

/// Elementwise maximum over token-level representations.
pub fn pool_router_representations(reps: &[RouterRepresentation]) -> Result<RouterRepresentation> {
    let (first, rest) = reps
        .split_first()
        .ok_or_else(|| Error::contract("cannot pool an empty sequence"))?;
    let mut out = first.0.clone();
    for rep in rest {
        check_dim(out.len(), rep.len())?;
        for (o, &x) in out.iter_mut().zip(&rep.0) {
            if x > *o {
                *o = x;
            }
        }
    }
    Ok(RouterRepresentation(out))
}

/// Replaces the routes of every token in `seq` with the router's top keys.
pub fn route_sequence(
    seq: &EncodedSequence,
    params: &RouterParams,
    max_keys: usize,
) -> Result<EncodedSequence> {
    let tokens = seq
        .tokens
        .iter()
        .map(|t| {
            let rep = router_representation(&t.vector, params)?;
            Ok(RoutedToken {
                token_id: t.token_id,
                vector: t.vector.clone(),
                routes: select_top_keys(&rep, max_keys)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedSequence {
        id: seq.id.clone(),
        tokens,
        cls: seq.cls.clone(),
    })
}

/// Static lexical routing: each token goes to its own token id with weight 1.
pub fn route_by_token_id(seq: &EncodedSequence) -> EncodedSequence {
    route_with(seq, |t| t.token_id)
}

/// Every token goes to `key` with weight 1, which makes dynamic scoring
/// exhaustive over token pairs.
pub fn route_to_single_key(seq: &EncodedSequence, key: u32) -> EncodedSequence {
    route_with(seq, |_| key)
}

fn route_with(seq: &EncodedSequence, key_of: impl Fn(&RoutedToken) -> u32) -> EncodedSequence {
    EncodedSequence {
        id: seq.id.clone(),
        tokens: seq
            .tokens
            .iter()
            .map(|t| RoutedToken {
                token_id: t.token_id,
                vector: t.vector.clone(),
                routes: vec![Route::new(key_of(t), 1.0)],
            })
            .collect(),
        cls: seq.cls.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rep(v: &[f32]) -> RouterRepresentation {
        RouterRepresentation(v.to_vec())
    }

    #[test]
    fn zero_params_give_zero_representation() {
        let p = RouterParams::zeros(3, 4).unwrap();
        let r = router_representation(&[0.3, -1.0, 2.0], &p).unwrap();
        assert_eq!(r.0, vec![0.0; 4]);
    }

    #[test]
    fn single_key_unit_weight() {
        let p = RouterParams::new(1, 1, vec![1.0], vec![0.0]).unwrap();
        let r = router_representation(&[1.0], &p).unwrap();
        assert!((r.0[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn negative_preactivations_clamp() {
        let p = RouterParams::new(1, 2, vec![-3.0, 2.0], vec![0.0, -2.0]).unwrap();
        let r = router_representation(&[1.0], &p).unwrap();
        assert_eq!(r.0, vec![0.0, 0.0]);
    }

    #[test]
    fn representation_rejects_wrong_dim() {
        let p = RouterParams::zeros(2, 3).unwrap();
        assert!(matches!(
            router_representation(&[1.0], &p),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn params_reject_non_finite() {
        assert!(RouterParams::new(1, 1, vec![f32::NAN], vec![0.0]).is_err());
        assert!(RouterParams::new(0, 1, vec![], vec![0.0]).is_err());
    }

    #[test]
    fn top_keys_drop_zero_weights() {
        assert!(select_top_keys(&rep(&[0.0, 0.0, 0.0]), 5).unwrap().is_empty());
    }

    #[test]
    fn top_keys_tie_break_by_key() {
        let r = rep(&[0.2, 0.9, 0.9, 0.0]);
        assert_eq!(select_top_keys(&r, 1).unwrap(), vec![Route::new(1, 0.9)]);
        assert_eq!(
            select_top_keys(&r, 3).unwrap(),
            vec![Route::new(1, 0.9), Route::new(2, 0.9), Route::new(0, 0.2)]
        );
        assert!(select_top_keys(&r, 0).is_err());
    }

    #[test]
    fn pooling_examples() {
        let p = pool_router_representations(&[rep(&[1.0, 0.0]), rep(&[0.0, 2.0])]).unwrap();
        assert_eq!(p.0, vec![1.0, 2.0]);
        let single = pool_router_representations(&[rep(&[0.3, 0.7])]).unwrap();
        assert_eq!(single.0, vec![0.3, 0.7]);
        let p = pool_router_representations(&[
            rep(&[0.5, 0.1]),
            rep(&[0.4, 0.3]),
            rep(&[0.5, 0.2]),
        ])
        .unwrap();
        assert_eq!(p.0, vec![0.5, 0.3]);
        assert!(pool_router_representations(&[]).is_err());
        assert!(pool_router_representations(&[rep(&[1.0]), rep(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn params_file_round_trip_and_bad_magic() {
        let p = RouterParams::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![-1.0, 0.0, 1.0])
            .unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"LXRT");
        assert_eq!(RouterParams::from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(RouterParams::from_bytes(&bad).is_err());
        for cut in 0..bytes.len() {
            assert!(RouterParams::from_bytes(&bytes[..cut]).is_err());
        }
    }

    /// Sort-then-truncate reference for top-key selection.
    fn top_keys_oracle(w: &[f32], k: usize) -> Vec<Route> {
        let mut all: Vec<Route> = (0..w.len())
            .filter(|&i| w[i] > 0.0)
            .map(|i| Route::new(i as u32, w[i]))
            .collect();
        all.sort_by(|a, b| {
            b.weight
                .partial_cmp(&a.weight)
                .unwrap()
                .then(a.key.cmp(&b.key))
        });
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn representation_is_non_negative(
            v in prop::collection::vec(-10.0f32..10.0, 3),
            w in prop::collection::vec(-5.0f32..5.0, 12),
            b in prop::collection::vec(-5.0f32..5.0, 4),
        ) {
            let p = RouterParams::new(3, 4, w, b).unwrap();
            let r = router_representation(&v, &p).unwrap();
            prop_assert!(r.0.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }

        #[test]
        fn log_saturation_is_sublinear(x in 1e-3f64..1e3, lambda in 1.01f64..100.0) {
            prop_assert!((lambda * x).ln_1p() < lambda * x.ln_1p());
        }

        #[test]
        fn top_keys_match_sort_oracle(
            w in prop::collection::vec(prop_oneof![Just(0.0f32), Just(0.5f32), 0.0f32..3.0], 1..40),
            k in 1usize..8,
        ) {
            let r = RouterRepresentation(w.clone());
            let got = select_top_keys(&r, k).unwrap();
            prop_assert_eq!(&got, &top_keys_oracle(&w, k));
            prop_assert_eq!(got, select_top_keys(&r, k).unwrap());
        }

        #[test]
        fn pooling_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.0f32..5.0, 6), 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let reps: Vec<_> = rows.into_iter().map(RouterRepresentation).collect();
            let mut shuffled = reps.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                pool_router_representations(&reps).unwrap(),
                pool_router_representations(&shuffled).unwrap()
            );
        }
    }
}
