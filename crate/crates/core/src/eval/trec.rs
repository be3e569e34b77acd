//! Plain-text run (`query_id doc_id rank score`) and qrels
//! (`query_id doc_id grade`) files. The six-column TREC run layout and the
//! four-column TREC qrels layout are accepted on input.

use std::fmt::Write as _;
use std::path::Path;

use super::{Qrels, Run};
use crate::binio::atomic_write;
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn parse_run(text: &str, path: &Path) -> Result<Run> {
    let mut rows: std::collections::BTreeMap<String, Vec<(usize, String, f32)>> = Default::default();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        let (qid, doc, rank, score) = match f.as_slice() {
            [] => continue,
            [q, d, r, s] => (*q, *d, *r, *s),
            [q, _, d, r, s, _] => (*q, *d, *r, *s),
            _ => return Err(parse_err(path, line_no, "expected `query_id doc_id rank score`")),
        };
        let rank: usize = rank
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad rank {rank:?}")))?;
        let score: f32 = score
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad score {score:?}")))?;
        rows.entry(qid.to_string()).or_default().push((rank, doc.to_string(), score));
    }
    let mut run = Run::new();
    for (qid, mut entries) in rows {
        entries.sort_by_key(|e| e.0);
        for (i, e) in entries.iter().enumerate() {
            if e.0 != i + 1 {
                return Err(parse_err(
                    path,
                    0,
                    format!("ranks of query {qid:?} are not unique and contiguous from 1"),
                ));
            }
        }
        run.insert(qid, entries.into_iter().map(|(_, d, s)| (d, s)).collect());
    }
    Ok(run)
}

pub fn parse_qrels(text: &str, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let (qid, doc, grade) = match f.as_slice() {
            [] => continue,
            [q, d, g] => (*q, *d, *g),
            [q, _, d, g] => (*q, *d, *g),
            _ => return Err(parse_err(path, n + 1, "expected `query_id doc_id grade`")),
        };
        let grade: i64 = grade
            .parse()
            .map_err(|_| parse_err(path, n + 1, format!("bad grade {grade:?}")))?;
        // negative grades (judged non-relevant in some collections) count as 0
        let grade = grade.max(0) as u32;
        qrels.entry(qid.to_string()).or_default().insert(doc.to_string(), grade);
    }
    Ok(qrels)
}

pub fn read_run(path: &Path) -> Result<Run> {
    parse_run(&std::fs::read_to_string(path)?, path)
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(&std::fs::read_to_string(path)?, path)
}

pub fn write_run(run: &Run, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (qid, ranked) in run {
        for (i, (doc, score)) in ranked.iter().enumerate() {
            let _ = writeln!(out, "{qid} {doc} {} {score}", i + 1);
        }
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (qid, judged) in qrels {
        for (doc, grade) in judged {
            let _ = writeln!(out, "{qid} {doc} {grade}");
        }
    }
    atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_parsing_and_validation() {
        let p = Path::new("run.txt");
        let run = parse_run("q1 d2 2 0.5\nq1 d1 1 0.9\n\nq2 Q0 d7 1 3.0 tag\n", p).unwrap();
        assert_eq!(run["q1"], vec![("d1".to_string(), 0.9), ("d2".to_string(), 0.5)]);
        assert_eq!(run["q2"].len(), 1);
        assert!(parse_run("q1 d1 1 0.9\nq1 d2 3 0.1\n", p).is_err());
        assert!(parse_run("q1 d1 1 0.9\nq1 d2 1 0.1\n", p).is_err());
        assert!(matches!(parse_run("q1 d1 x 0.1\n", p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn qrels_parsing() {
        let p = Path::new("qrels.txt");
        let q = parse_qrels("q1 d1 2\nq1 0 d2 1\nq2 d3 -1\n", p).unwrap();
        assert_eq!(q["q1"]["d1"], 2);
        assert_eq!(q["q1"]["d2"], 1);
        assert_eq!(q["q2"]["d3"], 0);
        assert!(parse_qrels("q1 d1\n", p).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new();
        run.insert("q".into(), vec![("a".into(), 2.5), ("b".into(), -1.0)]);
        write_run(&run, &dir.path().join("r")).unwrap();
        assert_eq!(read_run(&dir.path().join("r")).unwrap(), run);
        let mut qrels = Qrels::new();
        qrels.entry("q".into()).or_default().insert("a".into(), 3);
        write_qrels(&qrels, &dir.path().join("q")).unwrap();
        assert_eq!(read_qrels(&dir.path().join("q")).unwrap(), qrels);
    }
}
