use serde::Serialize;

use super::InvertedIndex;

/// Posting-size distribution and token activation summary of an index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexStats {
    /// Entries per lexical key; the last slot is the semantic (cls) key.
    pub per_key_counts: Vec<u64>,
    pub normalized_sizes: Vec<f64>,
    /// `activated_keys_histogram[n]` tokens kept exactly `n` routes.
    pub activated_keys_histogram: Vec<u64>,
    pub max_posting_len: u64,
    pub total_entries: u64,
    pub token_count: u64,
}

impl IndexStats {
    /// Largest lexical posting list over the mean lexical list size.
    /// Returns 0 for an index without lexical entries.
    pub fn balance_ratio(&self) -> f64 {
        let lexical = &self.per_key_counts[..self.per_key_counts.len() - 1];
        let total: u64 = lexical.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let max = lexical.iter().copied().max().unwrap_or(0);
        max as f64 / (total as f64 / lexical.len() as f64)
    }

    pub fn deactivated_tokens(&self) -> u64 {
        self.activated_keys_histogram.first().copied().unwrap_or(0)
    }
}

pub fn index_stats(index: &InvertedIndex) -> IndexStats {
    let mut per_key_counts: Vec<u64> = index.postings.iter().map(|p| p.len() as u64).collect();
    per_key_counts.push(if index.cls_store.is_some() {
        index.meta.doc_count as u64
    } else {
        0
    });
    let total_entries: u64 = per_key_counts.iter().sum();
    let normalized_sizes = per_key_counts
        .iter()
        .map(|&c| if total_entries == 0 { 0.0 } else { c as f64 / total_entries as f64 })
        .collect();
    let max_posting_len = index.postings.iter().map(|p| p.len() as u64).max().unwrap_or(0);

    let mut histogram = vec![0u64];
    let mut token_count = 0;
    if let Some(act) = &index.activations {
        for &n in &act.route_counts {
            let n = n as usize;
            if histogram.len() <= n {
                histogram.resize(n + 1, 0);
            }
            histogram[n] += 1;
        }
        token_count = act.route_counts.len() as u64;
    }

    IndexStats {
        per_key_counts,
        normalized_sizes,
        activated_keys_histogram: histogram,
        max_posting_len,
        total_entries,
        token_count,
    }
}
