//! Little-endian on-disk layout:
//!
//! ```text
//! header   "CTDL" version dim cls_dim key_count tau(f32) doc_count flags
//! keys     key_count × { key_id entry_count entries }
//!          entry = doc_id(u32) weight(f32) payload
//!          payload = dim × f32, or num_subspaces × u8 when quantized
//! cls      doc_count × cls_dim × f32                        (FLAG_CLS)
//! tokens   token_count(u32) counts(u8 each) weights(f32)    (FLAG_ACTIVATIONS)
//! ids      doc_count × { len(u32) utf-8 bytes }
//! ```
//!
//! Flags: bit 0 cls store, bit 1 quantized, bit 2 token activations,
//! bits 8..16 scheme tag, bits 16..32 number of PQ subspaces.

use std::path::Path;

use super::{IndexMeta, InvertedIndex, Payload, PostingList, TokenActivations};
use crate::binio::{self, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::scoring::Scheme;

const MAGIC: &[u8; 4] = b"CTDL";
const VERSION: u32 = 1;

const FLAG_CLS: u32 = 1;
const FLAG_QUANTIZED: u32 = 1 << 1;
const FLAG_ACTIVATIONS: u32 = 1 << 2;

impl InvertedIndex {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.meta;
        let mut flags = (m.scheme.tag() as u32) << 8;
        if self.cls_store.is_some() {
            flags |= FLAG_CLS;
        }
        if let Some(s) = m.quantized_subspaces {
            if s > u16::MAX as usize {
                return Err(Error::contract("too many PQ subspaces for the index format"));
            }
            flags |= FLAG_QUANTIZED | ((s as u32) << 16);
        }
        if self.activations.is_some() {
            flags |= FLAG_ACTIVATIONS;
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        binio::put_u32(&mut out, VERSION);
        binio::put_u32(&mut out, to_u32(m.dim, "dim")?);
        binio::put_u32(&mut out, to_u32(m.cls_dim, "cls_dim")?);
        binio::put_u32(&mut out, to_u32(m.key_count, "key_count")?);
        binio::put_f32(&mut out, m.tau);
        binio::put_u32(&mut out, to_u32(m.doc_count, "doc_count")?);
        binio::put_u32(&mut out, flags);

        let stride = self.payload_stride();
        for (key, list) in self.postings.iter().enumerate() {
            binio::put_u32(&mut out, key as u32);
            binio::put_u32(&mut out, to_u32(list.len(), "posting length")?);
            for i in 0..list.len() {
                binio::put_u32(&mut out, list.doc_ids[i]);
                binio::put_f32(&mut out, list.weights[i]);
                match &list.payload {
                    Payload::Dense(v) => binio::put_f32s(&mut out, &v[i * stride..(i + 1) * stride]),
                    Payload::Codes(c) => out.extend_from_slice(&c[i * stride..(i + 1) * stride]),
                }
            }
        }
        if let Some(cls) = &self.cls_store {
            binio::put_f32s(&mut out, cls);
        }
        if let Some(act) = &self.activations {
            binio::put_u32(&mut out, to_u32(act.route_counts.len(), "token count")?);
            out.extend_from_slice(&act.route_counts);
            binio::put_f32s(&mut out, &act.weights);
        }
        for id in &self.doc_ids {
            binio::put_string(&mut out, id)?;
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported index version {version}")));
        }
        let dim = r.u32()? as usize;
        let cls_dim = r.u32()? as usize;
        let key_count = r.u32()? as usize;
        let tau = r.f32()?;
        let doc_count = r.u32()? as usize;
        let flags = r.u32()?;
        if tau.is_nan() || tau < 0.0 {
            return Err(Error::format(format!("invalid pruning threshold {tau}")));
        }
        if flags & !(FLAG_CLS | FLAG_QUANTIZED | FLAG_ACTIVATIONS | 0xFFFF_FF00) != 0 {
            return Err(Error::format(format!("unknown flag bits in {flags:#x}")));
        }
        let scheme = Scheme::from_tag(((flags >> 8) & 0xFF) as u8)
            .ok_or_else(|| Error::format("unknown scheme tag"))?;
        let quantized_subspaces = if flags & FLAG_QUANTIZED != 0 {
            let s = (flags >> 16) as usize;
            if s == 0 {
                return Err(Error::format("quantized index with zero subspaces"));
            }
            Some(s)
        } else if flags >> 16 != 0 {
            return Err(Error::format("subspace count set on a dense index"));
        } else {
            None
        };
        // every key block takes at least 8 bytes
        r.check_count(key_count, 8)?;

        let stride = quantized_subspaces.unwrap_or(dim);
        let payload_bytes = if quantized_subspaces.is_some() {
            stride
        } else {
            stride
                .checked_mul(4)
                .ok_or_else(|| Error::format("dimension overflows"))?
        };
        let entry_size = payload_bytes
            .checked_add(8)
            .ok_or_else(|| Error::format("dimension overflows"))?;

        let mut postings = Vec::with_capacity(key_count);
        for key in 0..key_count {
            let key_id = r.u32()? as usize;
            if key_id != key {
                return Err(Error::format(format!("expected key block {key}, found {key_id}")));
            }
            let n = r.u32()? as usize;
            r.check_count(n, entry_size)?;
            let mut doc_ids = Vec::with_capacity(n);
            let mut weights = Vec::with_capacity(n);
            let mut dense = Vec::new();
            let mut codes = Vec::new();
            for _ in 0..n {
                let doc = r.u32()?;
                if doc as usize >= doc_count {
                    return Err(Error::format(format!("doc id {doc} out of range in key {key}")));
                }
                if doc_ids.last().is_some_and(|&prev| prev > doc) {
                    return Err(Error::format(format!("unsorted posting list for key {key}")));
                }
                let w = r.f32()?;
                if !(w > tau) || !w.is_finite() {
                    return Err(Error::format(format!("entry weight {w} not above tau {tau}")));
                }
                doc_ids.push(doc);
                weights.push(w);
                if quantized_subspaces.is_some() {
                    codes.extend_from_slice(r.bytes(stride)?);
                } else {
                    dense.extend(r.f32_vec(stride)?);
                }
            }
            let payload = if quantized_subspaces.is_some() {
                Payload::Codes(codes)
            } else {
                Payload::Dense(dense)
            };
            postings.push(PostingList {
                doc_ids,
                weights,
                payload,
            });
        }

        let cls_store = if flags & FLAG_CLS != 0 {
            let n = doc_count
                .checked_mul(cls_dim)
                .ok_or_else(|| Error::format("cls store size overflows"))?;
            r.check_count(n, 4)?;
            Some(r.f32_vec(n)?)
        } else {
            None
        };

        let activations = if flags & FLAG_ACTIVATIONS != 0 {
            let tokens = r.u32()? as usize;
            let route_counts = r.bytes(tokens)?.to_vec();
            let total: usize = route_counts.iter().map(|&c| c as usize).sum();
            r.check_count(total, 4)?;
            let weights = r.f32_vec(total)?;
            Some(TokenActivations {
                route_counts,
                weights,
            })
        } else {
            None
        };

        r.check_count(doc_count, 4)?;
        let mut doc_ids = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            doc_ids.push(r.string()?);
        }
        r.finish()?;

        Ok(InvertedIndex {
            meta: IndexMeta {
                dim,
                cls_dim,
                key_count,
                tau,
                doc_count,
                scheme,
                quantized_subspaces,
            },
            postings,
            cls_store,
            doc_ids,
            activations,
        })
    }
}

pub fn save_index(index: &InvertedIndex, path: &Path) -> Result<()> {
    binio::atomic_write(path, &index.to_bytes()?)
}

pub fn load_index(path: &Path) -> Result<InvertedIndex> {
    InvertedIndex::from_bytes(&std::fs::read(path)?)
}
