//! Token-level evaluation of predicted span tags against a gold standard.
//!
//! Both texts are parsed, tokenized, and projected onto binary sequences
//! (1 = token touches a tagged span). Because a model may rewrite the source
//! text, the two token streams are aligned by a longest common subsequence
//! before counting confusion cells. Unaligned tagged tokens still count as
//! false negatives (gold side) or false positives (prediction side).

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::tagspan::{parse_tagged, LabelSet, SpanDoc};

/// Coverage below this flags the sample as [`MetricFlag::AlignmentDivergent`].
pub const DIVERGENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarySeq(pub Vec<u8>);

impl BinarySeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricFlag {
    AlignmentDivergent,
    EmptyGold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub alignment_coverage: f64,
    #[serde(default)]
    pub flags: Vec<MetricFlag>,
}

impl SampleMetrics {
    pub fn has_flag(&self, flag: MetricFlag) -> bool {
        self.flags.contains(&flag)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    /// (gold index, prediction index), strictly increasing in both.
    pub pairs: Vec<(usize, usize)>,
    pub coverage_num: usize,
    pub coverage_den: usize,
}

impl Alignment {
    pub fn coverage(&self) -> f64 {
        self.coverage_num as f64 / self.coverage_den.max(1) as f64
    }

    /// The identity alignment over two equal-length streams.
    pub fn identity(len: usize) -> Self {
        Alignment {
            pairs: (0..len).map(|i| (i, i)).collect(),
            coverage_num: len,
            coverage_den: len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("token [{start}, {end}) exceeds text of {len} chars")]
    TokenSpanMismatch { start: usize, end: usize, len: usize },
    #[error("sequence length {seq} does not match {tokens} tokens ({side})")]
    LengthMismatch {
        side: &'static str,
        seq: usize,
        tokens: usize,
    },
    #[error("alignment pair ({0}, {1}) out of range")]
    AlignmentOutOfRange(usize, usize),
    #[error("no evaluable samples")]
    NoEvaluableSamples,
}

fn is_word_char(c: char) -> bool {
    if c.is_alphanumeric() {
        return true;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::NonspacingMark
            | GeneralCategory::SpacingMark
            | GeneralCategory::EnclosingMark
    )
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Splits plain text into word runs and single-character punctuation tokens.
///
/// A word is a maximal run of letters, digits and combining marks; one
/// apostrophe flanked by letters stays inside the word ("don't").
pub fn tokenize(plain_text: &str) -> Vec<Token> {
    let chars: Vec<char> = plain_text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if is_word_char(c) {
            i += 1;
            while i < chars.len() {
                if is_word_char(chars[i]) {
                    i += 1;
                } else if is_apostrophe(chars[i])
                    && chars[i - 1].is_alphabetic()
                    && chars.get(i + 1).is_some_and(|n| n.is_alphabetic())
                {
                    i += 2;
                } else {
                    break;
                }
            }
        } else {
            i += 1;
        }
        tokens.push(Token {
            text: chars[start..i].iter().collect(),
            start_char: start,
            end_char: i,
        });
    }
    tokens
}

/// Labels each token 1 iff its char range intersects any span.
pub fn project_labels(doc: &SpanDoc, tokens: &[Token]) -> Result<BinarySeq, EvalError> {
    let len = doc.plain_text.chars().count();
    let mut out = Vec::with_capacity(tokens.len());
    // spans are sorted and disjoint, so a moving cursor suffices
    let mut cursor = 0usize;
    for tok in tokens {
        if tok.start_char >= tok.end_char || tok.end_char > len {
            return Err(EvalError::TokenSpanMismatch {
                start: tok.start_char,
                end: tok.end_char,
                len,
            });
        }
        while cursor < doc.spans.len() && doc.spans[cursor].end_char <= tok.start_char {
            cursor += 1;
        }
        let hit = doc.spans[cursor..]
            .iter()
            .take_while(|s| s.start_char < tok.end_char)
            .any(|s| s.end_char > tok.start_char);
        out.push(u8::from(hit));
    }
    Ok(BinarySeq(out))
}

/// Longest common subsequence over token texts.
///
/// Among maximum-length alignments the one with the lexicographically
/// smallest gold indices is returned, and then the earliest prediction
/// indices.
pub fn align(gold: &[Token], pred: &[Token]) -> Alignment {
    let (n, m) = (gold.len(), pred.len());
    if n == m && gold.iter().zip(pred).all(|(g, p)| g.text == p.text) {
        return Alignment::identity(n);
    }
    // suffix table: lcs[i][j] = LCS length of gold[i..], pred[j..]
    let width = m + 1;
    let mut lcs = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i * width + j] = if gold[i].text == pred[j].text {
                lcs[(i + 1) * width + j + 1] + 1
            } else {
                lcs[(i + 1) * width + j].max(lcs[i * width + j + 1])
            };
        }
    }
    // Pick the smallest gold index that still completes a longest
    // alignment, matched to its earliest prediction occurrence. The table
    // is non-increasing in j, so the first occurrence is always the best.
    let mut remaining = lcs[0];
    let mut pairs = Vec::with_capacity(remaining as usize);
    let (mut i, mut j) = (0, 0);
    while remaining > 0 {
        let next = (j..m).find(|&k| pred[k].text == gold[i].text);
        match next {
            Some(k) if lcs[(i + 1) * width + k + 1] + 1 == remaining => {
                pairs.push((i, k));
                remaining -= 1;
                j = k + 1;
            }
            _ => {}
        }
        i += 1;
    }
    Alignment {
        coverage_num: pairs.len(),
        coverage_den: n,
        pairs,
    }
}

/// Counts confusion cells over aligned pairs plus unaligned tokens.
pub fn confusion(
    gold: &BinarySeq,
    pred: &BinarySeq,
    alignment: &Alignment,
) -> Result<ConfusionCounts, EvalError> {
    let mut gold_used = vec![false; gold.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut counts = ConfusionCounts::default();
    for &(g, p) in &alignment.pairs {
        if g >= gold.len() || p >= pred.len() {
            return Err(EvalError::AlignmentOutOfRange(g, p));
        }
        gold_used[g] = true;
        pred_used[p] = true;
        match (gold.0[g], pred.0[p]) {
            (1, 1) => counts.tp += 1,
            (0, 1) => counts.fp += 1,
            (1, 0) => counts.fn_ += 1,
            _ => counts.tn += 1,
        }
    }
    for (label, used) in gold.0.iter().zip(&gold_used) {
        if !used {
            if *label == 1 {
                counts.fn_ += 1;
            } else {
                counts.tn += 1;
            }
        }
    }
    for (label, used) in pred.0.iter().zip(&pred_used) {
        if !used {
            if *label == 1 {
                counts.fp += 1;
            } else {
                counts.tn += 1;
            }
        }
    }
    Ok(counts)
}

/// Precision, recall and F1 from confusion counts.
///
/// An empty denominator yields 1 only when both sides are empty
/// (nothing predicted and nothing to find), otherwise 0.
pub fn metrics(counts: ConfusionCounts, coverage: f64) -> SampleMetrics {
    let ConfusionCounts { tp, fp, fn_, .. } = counts;
    let precision = if tp + fp == 0 {
        if tp + fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        if tp + fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let mut flags = Vec::new();
    if coverage < DIVERGENCE_THRESHOLD {
        flags.push(MetricFlag::AlignmentDivergent);
    }
    SampleMetrics {
        precision,
        recall,
        f1,
        counts,
        alignment_coverage: coverage,
        flags,
    }
}

/// Scores already-parsed documents.
pub fn evaluate_docs(gold: &SpanDoc, pred: &SpanDoc) -> SampleMetrics {
    let gold_tokens = tokenize(&gold.plain_text);
    let pred_tokens = tokenize(&pred.plain_text);
    // tokens come from the same text, so projection cannot fail
    let gold_seq = project_labels(gold, &gold_tokens).expect("tokens from gold text");
    let pred_seq = project_labels(pred, &pred_tokens).expect("tokens from pred text");
    let alignment = align(&gold_tokens, &pred_tokens);
    let counts = confusion(&gold_seq, &pred_seq, &alignment).expect("alignment within bounds");
    let mut m = metrics(counts, alignment.coverage());
    if gold_tokens.is_empty() {
        // nothing to align against; coverage is vacuous
        m.flags.retain(|f| *f != MetricFlag::AlignmentDivergent);
    }
    m
}

/// Full pipeline on two tagged strings. An empty (or all-whitespace) gold
/// string is flagged [`MetricFlag::EmptyGold`].
pub fn evaluate_pair(gold: &str, pred: &str, labels: &LabelSet) -> SampleMetrics {
    let gold_doc = parse_tagged(gold, labels);
    let pred_doc = parse_tagged(pred, labels);
    let mut m = evaluate_docs(&gold_doc, &pred_doc);
    if gold.trim().is_empty() {
        m.flags.push(MetricFlag::EmptyGold);
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub samples: usize,
}

/// Unweighted mean of per-sample metrics, skipping `EmptyGold` samples.
pub fn macro_average<'a, I>(samples: I) -> Result<MacroAverage, EvalError>
where
    I: IntoIterator<Item = &'a SampleMetrics>,
{
    let mut sum = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for m in samples {
        if m.has_flag(MetricFlag::EmptyGold) {
            continue;
        }
        sum.0 += m.precision;
        sum.1 += m.recall;
        sum.2 += m.f1;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::NoEvaluableSamples);
    }
    let d = n as f64;
    Ok(MacroAverage {
        precision: sum.0 / d,
        recall: sum.1 / d,
        f1: sum.2 / d,
        samples: n,
    })
}

/// Metrics over counts pooled across samples (`EmptyGold` skipped).
pub fn micro_average<'a, I>(samples: I) -> Result<SampleMetrics, EvalError>
where
    I: IntoIterator<Item = &'a SampleMetrics>,
{
    let mut total = ConfusionCounts::default();
    let mut n = 0usize;
    for m in samples {
        if m.has_flag(MetricFlag::EmptyGold) {
            continue;
        }
        total = total + m.counts;
        n += 1;
    }
    if n == 0 {
        return Err(EvalError::NoEvaluableSamples);
    }
    Ok(metrics(total, 1.0))
}

/// Four-decimal rendering used in summaries and exports.
pub fn fmt_metric(value: f64) -> String {
    format!("{value:.4}")
}
