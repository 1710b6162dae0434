//! Lenient parser and renderer for inline span tags such as
//! `<Metaphor>devoured</Metaphor>`.
//!
//! Only byte-exact `<Label>` / `</Label>` markers for a configured label set
//! are recognized. Everything else (attributes, whitespace inside brackets,
//! unknown labels) stays in the plain text as literal characters. Parsing
//! never fails: malformed constructs are salvaged and reported as
//! [`ParseWarning`]s.
//!
//! All offsets count Unicode scalar values, not bytes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    /// Inclusive, in chars of the plain text.
    pub start_char: usize,
    /// Exclusive.
    pub end_char: usize,
}

impl Span {
    pub fn new(label: impl Into<String>, start_char: usize, end_char: usize) -> Self {
        Span {
            label: label.into(),
            start_char,
            end_char,
        }
    }

    pub fn len(&self) -> usize {
        self.end_char.saturating_sub(self.start_char)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WarningKind {
    UnclosedTag,
    StrayCloseTag,
    UnknownLabel,
    NestedFlattened,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub kind: WarningKind,
    /// Char position of the offending marker in the tagged input.
    pub char_offset: usize,
}

/// Plain text plus sorted, pairwise disjoint labeled spans.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanDoc {
    pub plain_text: String,
    pub spans: Vec<Span>,
    #[serde(default)]
    pub warnings: Vec<ParseWarning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("invalid label {0:?}: must be nonempty without whitespace, angle brackets or a leading '/'")]
    InvalidLabel(String),
    #[error("invalid span doc: {0}")]
    InvalidSpanDoc(String),
}

/// Returns true when `label` can be used as a tag name.
pub fn is_valid_label(label: &str) -> bool {
    !label.is_empty()
        && !label.starts_with('/')
        && !label
            .chars()
            .any(|c| c.is_whitespace() || c == '<' || c == '>')
}

/// A validated, ordered set of tag labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: BTreeSet<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self, TagError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for label in labels {
            let label = label.into();
            if !is_valid_label(&label) {
                return Err(TagError::InvalidLabel(label));
            }
            set.insert(label);
        }
        if set.is_empty() {
            return Err(TagError::InvalidLabel(String::new()));
        }
        Ok(LabelSet { labels: set })
    }

    pub fn single(label: &str) -> Result<Self, TagError> {
        Self::new([label])
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }
}

enum Marker<'a, 'r> {
    Open(&'a str),
    Close(&'a str),
    Unknown(&'r str),
}

/// Inspects the input at a `<` and classifies what follows.
/// Returns the marker and its byte length.
fn scan_marker<'a, 'r>(rest: &'r str, labels: &'a LabelSet) -> Option<(Marker<'a, 'r>, usize)> {
    debug_assert!(rest.starts_with('<'));
    let (closing, body) = match rest[1..].strip_prefix('/') {
        Some(b) => (true, b),
        None => (false, &rest[1..]),
    };
    let end = body.find(|c: char| c == '>' || c == '<' || c.is_whitespace())?;
    if end == 0 || body.as_bytes()[end] != b'>' {
        return None;
    }
    let name = &body[..end];
    if !closing && name.starts_with('/') {
        return None;
    }
    let byte_len = 1 + usize::from(closing) + end + 1;
    match labels.labels.get(name) {
        Some(label) if closing => Some((Marker::Close(label), byte_len)),
        Some(label) => Some((Marker::Open(label), byte_len)),
        None => Some((Marker::Unknown(name), byte_len)),
    }
}

struct OpenState {
    depth: usize,
    start: usize,
    marker_offset: usize,
}

/// Parses tagged text into a [`SpanDoc`]. Total: every input yields a doc.
///
/// Same-label nesting or overlap is flattened to the union of the regions.
/// When spans of different labels overlap, the later one is clipped to begin
/// where the earlier one ends (and dropped if nothing remains).
pub fn parse_tagged(text: &str, labels: &LabelSet) -> SpanDoc {
    let mut plain = String::with_capacity(text.len());
    let mut plain_chars = 0usize;
    let mut input_chars = 0usize;
    let mut open: BTreeMap<&str, OpenState> = BTreeMap::new();
    let mut spans: Vec<(Span, usize)> = Vec::new();
    let mut warnings: Vec<ParseWarning> = Vec::new();
    let mut unknown_seen: BTreeSet<String> = BTreeSet::new();

    let mut byte = 0usize;
    while byte < text.len() {
        let rest = &text[byte..];
        if rest.starts_with('<') {
            if let Some((marker, len)) = scan_marker(rest, labels) {
                let marker_chars = rest[..len].chars().count();
                match marker {
                    Marker::Open(label) => {
                        match open.get_mut(label) {
                            Some(state) => {
                                state.depth += 1;
                                warnings.push(ParseWarning {
                                    kind: WarningKind::NestedFlattened,
                                    char_offset: input_chars,
                                });
                            }
                            None => {
                                open.insert(
                                    label,
                                    OpenState {
                                        depth: 1,
                                        start: plain_chars,
                                        marker_offset: input_chars,
                                    },
                                );
                            }
                        }
                        byte += len;
                        input_chars += marker_chars;
                        continue;
                    }
                    Marker::Close(label) => {
                        match open.get_mut(label) {
                            Some(state) if state.depth > 1 => state.depth -= 1,
                            Some(_) => {
                                let state = open.remove(label).expect("present");
                                push_span(&mut spans, label, &state, plain_chars);
                            }
                            None => warnings.push(ParseWarning {
                                kind: WarningKind::StrayCloseTag,
                                char_offset: input_chars,
                            }),
                        }
                        byte += len;
                        input_chars += marker_chars;
                        continue;
                    }
                    Marker::Unknown(name) => {
                        if !unknown_seen.contains(name) {
                            unknown_seen.insert(name.to_string());
                            warnings.push(ParseWarning {
                                kind: WarningKind::UnknownLabel,
                                char_offset: input_chars,
                            });
                        }
                        // literal text: fall through and copy the '<'
                    }
                }
            }
        }
        let ch = rest.chars().next().expect("nonempty");
        plain.push(ch);
        plain_chars += 1;
        input_chars += 1;
        byte += ch.len_utf8();
    }

    for (label, state) in open {
        warnings.push(ParseWarning {
            kind: WarningKind::UnclosedTag,
            char_offset: state.marker_offset,
        });
        push_span(&mut spans, label, &state, plain_chars);
    }

    let spans = normalize_spans(spans, &mut warnings);
    warnings.sort_by_key(|w| w.char_offset);
    SpanDoc {
        plain_text: plain,
        spans,
        warnings,
    }
}

fn push_span(spans: &mut Vec<(Span, usize)>, label: &str, state: &OpenState, end: usize) {
    if end > state.start {
        spans.push((Span::new(label, state.start, end), state.marker_offset));
    }
}

/// Sorts spans and enforces disjointness: same-label overlaps merge,
/// cross-label overlaps clip the later span.
fn normalize_spans(
    mut spans: Vec<(Span, usize)>,
    warnings: &mut Vec<ParseWarning>,
) -> Vec<Span> {
    spans.sort_by(|(a, _), (b, _)| {
        (a.start_char, a.end_char, &a.label).cmp(&(b.start_char, b.end_char, &b.label))
    });
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for (mut span, marker_offset) in spans {
        if let Some(last) = out.last_mut() {
            if span.start_char < last.end_char {
                if span.label == last.label {
                    last.end_char = last.end_char.max(span.end_char);
                    continue;
                }
                warnings.push(ParseWarning {
                    kind: WarningKind::NestedFlattened,
                    char_offset: marker_offset,
                });
                span.start_char = last.end_char;
                if span.start_char >= span.end_char {
                    continue;
                }
            }
        }
        out.push(span);
    }
    out
}

/// Plain text of [`parse_tagged`].
pub fn strip_tags(text: &str, labels: &LabelSet) -> String {
    parse_tagged(text, labels).plain_text
}

impl SpanDoc {
    pub fn new(plain_text: impl Into<String>, spans: Vec<Span>) -> Self {
        SpanDoc {
            plain_text: plain_text.into(),
            spans,
            warnings: Vec::new(),
        }
    }

    /// Distinct labels used by the spans.
    pub fn labels(&self) -> BTreeSet<&str> {
        self.spans.iter().map(|s| s.label.as_str()).collect()
    }

    /// Checks ordering, bounds, label validity, and that the plain text
    /// contains no literal marker that would be re-recognized on parse.
    pub fn validate(&self) -> Result<(), TagError> {
        let len = self.plain_text.chars().count();
        let mut prev_end = 0usize;
        for (i, span) in self.spans.iter().enumerate() {
            if !is_valid_label(&span.label) {
                return Err(TagError::InvalidLabel(span.label.clone()));
            }
            if span.start_char >= span.end_char || span.end_char > len {
                return Err(TagError::InvalidSpanDoc(format!(
                    "span {i} [{}, {}) out of bounds for text of {len} chars",
                    span.start_char, span.end_char
                )));
            }
            if i > 0 && span.start_char < prev_end {
                return Err(TagError::InvalidSpanDoc(format!(
                    "span {i} overlaps or is out of order"
                )));
            }
            prev_end = span.end_char;
        }
        for label in self.labels() {
            let open = format!("<{label}>");
            let close = format!("</{label}>");
            if self.plain_text.contains(&open) || self.plain_text.contains(&close) {
                return Err(TagError::InvalidSpanDoc(format!(
                    "plain text contains a literal {label} marker"
                )));
            }
        }
        Ok(())
    }

    /// Text covered by `span`.
    pub fn span_text(&self, span: &Span) -> String {
        self.plain_text
            .chars()
            .skip(span.start_char)
            .take(span.len())
            .collect()
    }
}

/// Inserts `<label>` / `</label>` markers at the span boundaries.
pub fn render_tagged(doc: &SpanDoc) -> Result<String, TagError> {
    doc.validate()?;
    let mut out = String::with_capacity(doc.plain_text.len() + doc.spans.len() * 24);
    let mut spans = doc.spans.iter().peekable();
    let mut current: Option<&Span> = None;
    for (idx, ch) in doc.plain_text.chars().enumerate() {
        if let Some(span) = current {
            if span.end_char == idx {
                out.push_str("</");
                out.push_str(&span.label);
                out.push('>');
                current = None;
            }
        }
        if current.is_none() {
            if let Some(span) = spans.next_if(|s| s.start_char == idx) {
                out.push('<');
                out.push_str(&span.label);
                out.push('>');
                current = Some(span);
            }
        }
        out.push(ch);
    }
    if let Some(span) = current {
        out.push_str("</");
        out.push_str(&span.label);
        out.push('>');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metaphor() -> LabelSet {
        LabelSet::single("Metaphor").unwrap()
    }

    fn warn(kind: WarningKind, char_offset: usize) -> ParseWarning {
        ParseWarning { kind, char_offset }
    }

    #[test]
    fn parses_simple_span() {
        let doc = parse_tagged("He <Metaphor>devoured</Metaphor> the book", &metaphor());
        assert_eq!(doc.plain_text, "He devoured the book");
        assert_eq!(doc.spans, vec![Span::new("Metaphor", 3, 11)]);
        assert!(doc.warnings.is_empty());
    }

    #[test]
    fn unclosed_tag_extends_to_end() {
        let doc = parse_tagged("a <Metaphor>b", &metaphor());
        assert_eq!(doc.plain_text, "a b");
        assert_eq!(doc.spans, vec![Span::new("Metaphor", 2, 3)]);
        assert_eq!(doc.warnings, vec![warn(WarningKind::UnclosedTag, 2)]);
    }

    #[test]
    fn stray_close_is_dropped() {
        let doc = parse_tagged("a</Metaphor> b", &metaphor());
        assert_eq!(doc.plain_text, "a b");
        assert!(doc.spans.is_empty());
        assert_eq!(doc.warnings, vec![warn(WarningKind::StrayCloseTag, 1)]);
    }

    #[test]
    fn unknown_label_is_literal() {
        let doc = parse_tagged("x <Foo>y</Foo>", &metaphor());
        assert_eq!(doc.plain_text, "x <Foo>y</Foo>");
        assert!(doc.spans.is_empty());
        assert_eq!(doc.warnings, vec![warn(WarningKind::UnknownLabel, 2)]);
    }

    #[test]
    fn near_miss_markers_are_literal_without_warning() {
        for text in ["a < Metaphor>b", "<metaphor x=1>", "1 < 2 > 0", "<>", "</>", "<<"] {
            let doc = parse_tagged(text, &metaphor());
            assert_eq!(doc.plain_text, text);
            assert!(doc.spans.is_empty());
            assert!(doc
                .warnings
                .iter()
                .all(|w| w.kind == WarningKind::UnknownLabel));
        }
    }

    #[test]
    fn case_sensitive_recognition() {
        let doc = parse_tagged("<metaphor>x</metaphor>", &metaphor());
        assert_eq!(doc.plain_text, "<metaphor>x</metaphor>");
        assert_eq!(doc.warnings, vec![warn(WarningKind::UnknownLabel, 0)]);
    }

    #[test]
    fn nested_same_label_flattens_to_union() {
        let doc = parse_tagged(
            "<Metaphor>a <Metaphor>b</Metaphor> c</Metaphor> d",
            &metaphor(),
        );
        assert_eq!(doc.plain_text, "a b c d");
        assert_eq!(doc.spans, vec![Span::new("Metaphor", 0, 5)]);
        assert_eq!(doc.warnings, vec![warn(WarningKind::NestedFlattened, 12)]);
    }

    #[test]
    fn adjacent_spans_stay_separate() {
        let doc = parse_tagged("<Metaphor>a</Metaphor><Metaphor>b</Metaphor>", &metaphor());
        assert_eq!(doc.plain_text, "ab");
        assert_eq!(
            doc.spans,
            vec![Span::new("Metaphor", 0, 1), Span::new("Metaphor", 1, 2)]
        );
    }

    #[test]
    fn empty_span_is_dropped() {
        let doc = parse_tagged("a<Metaphor></Metaphor>b", &metaphor());
        assert_eq!(doc.plain_text, "ab");
        assert!(doc.spans.is_empty());
    }

    #[test]
    fn offsets_count_chars_not_bytes() {
        let doc = parse_tagged("é <Metaphor>ü</Metaphor> ß", &metaphor());
        assert_eq!(doc.plain_text, "é ü ß");
        assert_eq!(doc.spans, vec![Span::new("Metaphor", 2, 3)]);
        assert_eq!(doc.span_text(&doc.spans[0]), "ü");
    }

    #[test]
    fn cross_label_overlap_clips_later_span() {
        let labels = LabelSet::new(["A", "B"]).unwrap();
        let doc = parse_tagged("<A>xy<B>z</A>w</B>", &labels);
        assert_eq!(doc.plain_text, "xyzw");
        assert_eq!(doc.spans, vec![Span::new("A", 0, 3), Span::new("B", 3, 4)]);
        assert!(doc
            .warnings
            .iter()
            .any(|w| w.kind == WarningKind::NestedFlattened));
    }

    #[test]
    fn render_examples() {
        let doc = SpanDoc::new("He devoured it", vec![Span::new("Metaphor", 3, 11)]);
        assert_eq!(render_tagged(&doc).unwrap(), "He <Metaphor>devoured</Metaphor> it");
        assert_eq!(render_tagged(&SpanDoc::new("abc", vec![])).unwrap(), "abc");
        let tail = SpanDoc::new("ab", vec![Span::new("M", 1, 2)]);
        assert_eq!(render_tagged(&tail).unwrap(), "a<M>b</M>");
    }

    #[test]
    fn render_rejects_invalid_docs() {
        let out_of_bounds = SpanDoc::new("ab", vec![Span::new("M", 1, 3)]);
        assert!(matches!(render_tagged(&out_of_bounds), Err(TagError::InvalidSpanDoc(_))));
        let overlapping = SpanDoc::new("abcd", vec![Span::new("M", 0, 2), Span::new("M", 1, 3)]);
        assert!(matches!(render_tagged(&overlapping), Err(TagError::InvalidSpanDoc(_))));
        let empty = SpanDoc::new("ab", vec![Span::new("M", 1, 1)]);
        assert!(render_tagged(&empty).is_err());
        let literal = SpanDoc::new("a <M> b", vec![Span::new("M", 0, 1)]);
        assert!(render_tagged(&literal).is_err());
        let bad_label = SpanDoc::new("ab", vec![Span::new("a b", 0, 1)]);
        assert!(matches!(render_tagged(&bad_label), Err(TagError::InvalidLabel(_))));
    }

    #[test]
    fn label_set_validation() {
        assert!(LabelSet::new(Vec::<String>::new()).is_err());
        assert!(LabelSet::single("has space").is_err());
        assert!(LabelSet::single("a<b").is_err());
        assert!(LabelSet::single("/x").is_err());
        assert!(LabelSet::single("Metaphor").is_ok());
    }

    #[test]
    fn strip_matches_examples() {
        assert_eq!(strip_tags("He <Metaphor>devoured</Metaphor> it", &metaphor()), "He devoured it");
        assert_eq!(strip_tags("no tags", &metaphor()), "no tags");
    }
}
