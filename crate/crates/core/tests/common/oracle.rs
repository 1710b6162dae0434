//! Independent reference computations used to check the evaluator.

#![allow(dead_code)]

use annoloop_core::tagspan::{Span, SpanDoc};

/// Confusion cells over identical token streams, from bit masks.
pub fn mask_counts(n: usize, gold: u32, pred: u32) -> (u64, u64, u64, u64) {
    let all = if n == 32 { u32::MAX } else { (1u32 << n) - 1 };
    let tp = (gold & pred).count_ones() as u64;
    let fp = (!gold & pred & all).count_ones() as u64;
    let fn_ = (gold & !pred & all).count_ones() as u64;
    let tn = (!gold & !pred & all).count_ones() as u64;
    (tp, fp, fn_, tn)
}

/// Precision, recall and F1 written straight from their definitions,
/// with perfect scores only when both sides are empty.
pub fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = match (tp + fp, tp + fn_) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (d, _) => tp as f64 / d as f64,
    };
    let r = match (tp + fn_, tp + fp) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        (d, _) => tp as f64 / d as f64,
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Space-separated words; span per set bit of `mask`.
pub fn words_doc(words: &[String], mask: u32, label: &str) -> SpanDoc {
    let mut plain = String::new();
    let mut spans = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            plain.push(' ');
        }
        let start = plain.chars().count();
        plain.push_str(w);
        if mask >> i & 1 == 1 {
            spans.push(Span::new(label, start, start + w.chars().count()));
        }
    }
    SpanDoc::new(plain, spans)
}

fn is_subsequence_at(gold: &[&str], idx: &[usize], pred: &[&str]) -> Option<Vec<usize>> {
    // earliest prediction positions matching gold[idx] in order
    let mut out = Vec::with_capacity(idx.len());
    let mut j = 0;
    for &i in idx {
        while j < pred.len() && pred[j] != gold[i] {
            j += 1;
        }
        if j == pred.len() {
            return None;
        }
        out.push(j);
        j += 1;
    }
    Some(out)
}

/// Brute-force LCS by enumerating every subset of gold positions. Among the
/// longest, picks the lexicographically smallest gold index list, then the
/// earliest prediction positions.
pub fn brute_lcs(gold: &[&str], pred: &[&str]) -> Vec<(usize, usize)> {
    let n = gold.len();
    assert!(n <= 16, "brute force is exponential");
    let mut best: Option<(Vec<usize>, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let Some(pj) = is_subsequence_at(gold, &idx, pred) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((bi, _)) => idx.len() > bi.len() || (idx.len() == bi.len() && idx < *bi),
        };
        if better {
            best = Some((idx, pj));
        }
    }
    let (gi, pj) = best.unwrap_or_default();
    gi.into_iter().zip(pj).collect()
}
