//! Token-embedding files: JSON Lines for small, readable inputs and the
//! binary `CTEM` twin for bulk data. Both carry the same records:
//!
//! ```text
//! {"id": "d0", "cls": [..], "tokens": [{"tid": 7, "vec": [..], "routes": [[3, 0.8]]}]}
//! ```
//!
//! `cls` and `routes` are optional. Binary layout (little endian): magic,
//! version, token dim, cls dim, record count, then per record the id, a flag
//! word (bit 0 cls, bit 1 routes), the cls vector, the token count and per
//! token its id, vector and (with bit 1) route count plus `(key, weight)`.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binio::{atomic_write, put_f32, put_f32s, put_string, put_u32, to_u32, ByteReader};
use crate::error::{check_dim, Error, Result};
use crate::router::{Route, RoutedToken};
use crate::scoring::EncodedSequence;

const MAGIC: &[u8; 4] = b"CTEM";
const VERSION: u32 = 1;
const FLAG_CLS: u32 = 1;
const FLAG_ROUTES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    #[default]
    Jsonl,
    Binary,
}

impl fmt::Display for EmbeddingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingFormat::Jsonl => "jsonl",
            EmbeddingFormat::Binary => "binary",
        })
    }
}

impl FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json" => Ok(EmbeddingFormat::Jsonl),
            "binary" | "bin" | "ctem" => Ok(EmbeddingFormat::Binary),
            _ => Err(Error::contract(format!("unknown embedding format {s:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord {
    tid: u32,
    vec: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    routes: Vec<(u32, f32)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cls: Option<Vec<f32>>,
    tokens: Vec<TokenRecord>,
}

/// Shape checks shared by both readers: one token width and one cls width
/// per file, finite values and strictly positive route weights.
#[derive(Default)]
struct ShapeCheck {
    dim: Option<usize>,
    cls_dim: Option<usize>,
}

impl ShapeCheck {
    fn check(&mut self, seq: &EncodedSequence) -> Result<()> {
        for t in &seq.tokens {
            check_dim(*self.dim.get_or_insert(t.vector.len()), t.vector.len())?;
            if t.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("non-finite token vector in {:?}", seq.id)));
            }
            if t.routes.iter().any(|r| !(r.weight > 0.0 && r.weight.is_finite())) {
                return Err(Error::contract(format!("route weights must be positive in {:?}", seq.id)));
            }
        }
        if let Some(cls) = &seq.cls {
            check_dim(*self.cls_dim.get_or_insert(cls.len()), cls.len())?;
            if cls.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("non-finite cls vector in {:?}", seq.id)));
            }
        }
        Ok(())
    }
}

fn to_record(seq: &EncodedSequence) -> SequenceRecord {
    SequenceRecord {
        id: seq.id.clone(),
        cls: seq.cls.clone(),
        tokens: seq
            .tokens
            .iter()
            .map(|t| TokenRecord {
                tid: t.token_id,
                vec: t.vector.clone(),
                routes: t.routes.iter().map(|r| (r.key, r.weight)).collect(),
            })
            .collect(),
    }
}

fn from_record(rec: SequenceRecord) -> EncodedSequence {
    EncodedSequence {
        id: rec.id,
        cls: rec.cls,
        tokens: rec
            .tokens
            .into_iter()
            .map(|t| RoutedToken {
                token_id: t.tid,
                vector: t.vec,
                routes: t.routes.into_iter().map(|(k, w)| Route::new(k, w)).collect(),
            })
            .collect(),
    }
}

pub fn to_jsonl(seqs: &[EncodedSequence]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for seq in seqs {
        serde_json::to_writer(&mut out, &to_record(seq))?;
        out.write_all(b"\n")?;
    }
    Ok(out)
}

/// Parses JSON Lines; blank lines are skipped. `path` only labels errors.
pub fn parse_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Vec<EncodedSequence>> {
    let mut shapes = ShapeCheck::default();
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: SequenceRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let seq = from_record(rec);
        shapes.check(&seq).map_err(|e| at(e.to_string()))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn to_ctem_bytes(seqs: &[EncodedSequence]) -> Result<Vec<u8>> {
    let mut shapes = ShapeCheck::default();
    for seq in seqs {
        shapes.check(seq)?;
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(shapes.dim.unwrap_or(0), "token dim")?);
    put_u32(&mut out, to_u32(shapes.cls_dim.unwrap_or(0), "cls dim")?);
    put_u32(&mut out, to_u32(seqs.len(), "record count")?);
    for seq in seqs {
        put_string(&mut out, &seq.id)?;
        let routed = seq.tokens.iter().any(|t| !t.routes.is_empty());
        let flags = if seq.cls.is_some() { FLAG_CLS } else { 0 } | if routed { FLAG_ROUTES } else { 0 };
        put_u32(&mut out, flags);
        if let Some(cls) = &seq.cls {
            put_f32s(&mut out, cls);
        }
        put_u32(&mut out, to_u32(seq.tokens.len(), "token count")?);
        for t in &seq.tokens {
            put_u32(&mut out, t.token_id);
            put_f32s(&mut out, &t.vector);
            if routed {
                put_u32(&mut out, to_u32(t.routes.len(), "route count")?);
                for r in &t.routes {
                    put_u32(&mut out, r.key);
                    put_f32(&mut out, r.weight);
                }
            }
        }
    }
    Ok(out)
}

pub fn from_ctem_bytes(buf: &[u8]) -> Result<Vec<EncodedSequence>> {
    let mut r = ByteReader::new(buf);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported embedding file version {version}")));
    }
    let dim = r.u32()? as usize;
    let cls_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    // every record holds at least an id length, flags and a token count
    r.check_count(count, 12)?;
    let mut shapes = ShapeCheck::default();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.string()?;
        let flags = r.u32()?;
        if flags & !(FLAG_CLS | FLAG_ROUTES) != 0 {
            return Err(Error::format(format!("unknown record flags {flags:#x}")));
        }
        let cls = if flags & FLAG_CLS != 0 { Some(r.f32_vec(cls_dim)?) } else { None };
        let n_tokens = r.u32()? as usize;
        r.check_count(n_tokens, 4 + 4 * dim)?;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let token_id = r.u32()?;
            let vector = r.f32_vec(dim)?;
            let mut routes = Vec::new();
            if flags & FLAG_ROUTES != 0 {
                let n_routes = r.u32()? as usize;
                r.check_count(n_routes, 8)?;
                for _ in 0..n_routes {
                    let key = r.u32()?;
                    routes.push(Route::new(key, r.f32()?));
                }
            }
            tokens.push(RoutedToken {
                token_id,
                vector,
                routes,
            });
        }
        let seq = EncodedSequence { id, tokens, cls };
        shapes.check(&seq).map_err(|e| Error::format(e.to_string()))?;
        out.push(seq);
    }
    r.finish()?;
    Ok(out)
}

/// Reads either format, chosen by the leading magic bytes.
pub fn read_embeddings(path: &Path) -> Result<Vec<EncodedSequence>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        from_ctem_bytes(&bytes)
    } else {
        parse_jsonl(BufReader::new(bytes.as_slice()), path)
    }
}

pub fn write_embeddings(seqs: &[EncodedSequence], path: &Path, format: EmbeddingFormat) -> Result<()> {
    let bytes = match format {
        EmbeddingFormat::Jsonl => {
            let mut shapes = ShapeCheck::default();
            for seq in seqs {
                shapes.check(seq)?;
            }
            to_jsonl(seqs)?
        }
        EmbeddingFormat::Binary => to_ctem_bytes(seqs)?,
    };
    atomic_write(path, &bytes)
}
