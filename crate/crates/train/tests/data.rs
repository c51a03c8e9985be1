use proptest::prelude::*;
use proptest::strategy::ValueTree;
use qfsum_core::Error;
use qfsum_tensor::Rng;
use qfsum_train::data::{gen_needle_task, load_jsonl, parse_jsonl, to_jsonl, write_jsonl, Example, NeedleConfig};

#[test]
fn empty_input_is_empty() {
    assert!(parse_jsonl("", "mem").unwrap().is_empty());
    assert!(parse_jsonl("\n  \n", "mem").unwrap().is_empty());
}

#[test]
fn missing_key_is_named() {
    let text = "{\"query\":\"q\",\"document\":\"d\",\"summaries\":[\"s\"]}\n{\"query\":\"q\",\"document\":\"d\"}\n";
    match parse_jsonl(text, "mem") {
        Err(Error::Schema { key, line }) => {
            assert_eq!(key, "summaries");
            assert_eq!(line, 2);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_line_reports_its_number() {
    let text = "{\"query\":\"q\",\"document\":\"d\",\"summaries\":[\"s\"]}\n\n{not json\n";
    assert!(matches!(parse_jsonl(text, "mem"), Err(Error::Data { line: 3, .. })));
    let empty = "{\"query\":\"q\",\"document\":\"d\",\"summaries\":[]}";
    assert!(matches!(parse_jsonl(empty, "mem"), Err(Error::Data { line: 1, .. })));
}

fn example() -> impl Strategy<Value = Example> {
    (
        prop::option::of("[a-z0-9-]{1,8}"),
        "\\PC{1,20}",
        "\\PC{0,60}",
        prop::collection::vec("\\PC{0,15}", 1..4),
    )
        .prop_map(|(id, query, document, summaries)| Example {
            id,
            query,
            document,
            summaries,
        })
}

#[test]
fn roundtrip_through_a_file() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let examples: Vec<Example> = (0..50)
        .map(|_| example().new_tree(&mut runner).unwrap().current())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    write_jsonl(&path, &examples).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), examples);
}

proptest! {
    #[test]
    fn roundtrip_in_memory(examples in prop::collection::vec(example(), 0..5)) {
        prop_assert_eq!(parse_jsonl(&to_jsonl(&examples).unwrap(), "mem").unwrap(), examples);
    }
}

#[test]
fn needle_answer_appears_in_document() {
    let cfg = NeedleConfig {
        n_examples: 1000,
        ..NeedleConfig::default()
    };
    for ex in gen_needle_task(&cfg, &mut Rng::seed(1)).unwrap() {
        let record = format!("{}={}", ex.query, ex.summaries[0]);
        assert!(ex.document.contains(&record), "{ex:?}");
        assert_eq!(ex.document.len(), cfg.doc_len);
    }
}

#[test]
fn needle_is_deterministic() {
    let cfg = NeedleConfig::default();
    assert_eq!(
        gen_needle_task(&cfg, &mut Rng::seed(3)).unwrap(),
        gen_needle_task(&cfg, &mut Rng::seed(3)).unwrap()
    );
    assert_ne!(
        gen_needle_task(&cfg, &mut Rng::seed(3)).unwrap(),
        gen_needle_task(&cfg, &mut Rng::seed(4)).unwrap()
    );
}

#[test]
fn single_pair_answer_is_the_only_value() {
    let cfg = NeedleConfig {
        n_pairs: 1,
        n_examples: 100,
        ..NeedleConfig::default()
    };
    for ex in gen_needle_task(&cfg, &mut Rng::seed(5)).unwrap() {
        let digits: String = ex.document.chars().filter(char::is_ascii_digit).collect();
        assert_eq!(digits, ex.summaries[0]);
    }
}

#[test]
fn needle_rejects_short_documents() {
    let cfg = NeedleConfig {
        n_pairs: 4,
        doc_len: 10,
        ..NeedleConfig::default()
    };
    assert!(matches!(gen_needle_task(&cfg, &mut Rng::seed(0)), Err(Error::Config(_))));
}
