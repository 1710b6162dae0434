//! Property tests for the inline tag parser and renderer.

use annoloop_core::tagspan::{
    parse_tagged, render_tagged, strip_tags, LabelSet, Span, SpanDoc,
    WarningKind,
};
use proptest::prelude::*;

const LABELS: [&str; 2] = ["Metaphor", "Simile"];

fn labels() -> LabelSet {
    LabelSet::new(LABELS).unwrap()
}

fn contains_marker(text: &str) -> bool {
    LABELS
        .iter()
        .any(|l| text.contains(&format!("<{l}>")) || text.contains(&format!("</{l}>")))
}

/// Text segments, each optionally wrapped in a span.
fn segments() -> impl Strategy<Value = Vec<(String, Option<usize>)>> {
    let text = "[a-zA-Z0-9 .,;'’é漢<>/\n-]{0,8}";
    prop::collection::vec((text, prop::option::of(0..LABELS.len())), 0..8)
}

fn build_doc(parts: &[(String, Option<usize>)]) -> SpanDoc {
    let mut plain = String::new();
    let mut spans = Vec::new();
    let mut pos = 0usize;
    for (text, label) in parts {
        let len = text.chars().count();
        if let (Some(l), true) = (label, len > 0) {
            spans.push(Span::new(LABELS[*l], pos, pos + len));
        }
        plain.push_str(text);
        pos += len;
    }
    SpanDoc::new(plain, spans)
}

/// Tag-heavy noise: markers, fragments of markers and ordinary text.
fn noise() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("<Metaphor>".to_string()),
        Just("</Metaphor>".to_string()),
        Just("<Simile>".to_string()),
        Just("</Simile>".to_string()),
        Just("<Other>".to_string()),
        Just("</x>".to_string()),
        Just("<Meta".to_string()),
        Just("phor>".to_string()),
        "[a-z <>/é\n]{0,4}",
        any::<char>().prop_map(String::from),
    ];
    prop::collection::vec(piece, 0..16).prop_map(|v| v.concat())
}

fn check_structure(doc: &SpanDoc, labels: &LabelSet) {
    let len = doc.plain_text.chars().count();
    let mut prev_end = 0;
    for (i, s) in doc.spans.iter().enumerate() {
        assert!(labels.contains(&s.label), "foreign label {:?}", s.label);
        assert!(s.start_char < s.end_char && s.end_char <= len, "span {s:?} out of bounds");
        assert!(i == 0 || s.start_char >= prev_end, "spans overlap or unsorted");
        prev_end = s.end_char;
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 10_000,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn render_then_parse_round_trips(parts in segments()) {
        let doc = build_doc(&parts);
        prop_assume!(!contains_marker(&doc.plain_text));
        let rendered = render_tagged(&doc).unwrap();
        let parsed = parse_tagged(&rendered, &labels());
        prop_assert_eq!(&parsed.plain_text, &doc.plain_text);
        prop_assert_eq!(&parsed.spans, &doc.spans);
        // literal tag-like text in the plain text may only warn as unknown
        prop_assert!(
            parsed.warnings.iter().all(|w| w.kind == WarningKind::UnknownLabel),
            "{:?}",
            parsed.warnings
        );
    }

    #[test]
    fn parse_is_total_on_noise(input in noise()) {
        let labels = labels();
        let doc = parse_tagged(&input, &labels);
        check_structure(&doc, &labels);
        prop_assert_eq!(strip_tags(&input, &labels), doc.plain_text.clone());
        // once no literal marker survives in the plain text, the parse is a
        // fixed point of render/parse
        if !contains_marker(&doc.plain_text) {
            let again = parse_tagged(&render_tagged(&doc).unwrap(), &labels);
            prop_assert_eq!(again.plain_text, doc.plain_text);
            prop_assert_eq!(again.spans, doc.spans);
        }
    }

    #[test]
    fn untagged_text_is_unchanged(text in "[^<]{0,40}") {
        let doc = parse_tagged(&text, &labels());
        prop_assert_eq!(doc.plain_text, text);
        prop_assert!(doc.spans.is_empty());
        prop_assert!(doc.warnings.is_empty());
    }
}
