use std::collections::HashSet;
use std::fs;

use earlybird::data::{
    batch_indices, gen_synthetic, load_dataset, parse_swapbug, read_corpus, swap_adjacent_operands, swapbug_label,
    synthetic_corpus, tokenize, tokenize_bytes, Example, RawDataset, SyntheticTaskSpec, TaskKind, BYTE_OFFSET, CLS,
    EOS, PAD, VOCAB_SIZE,
};
use earlybird::Error;
use proptest::prelude::*;

#[test]
fn tokenize_examples() {
    let t = tokenize("ab", 6);
    assert_eq!(t.ids, vec![CLS, BYTE_OFFSET + 97, BYTE_OFFSET + 98, EOS, PAD, PAD]);
    assert_eq!(t.attention_mask, vec![true, true, true, true, false, false]);
    assert_eq!(t.code_token_mask, vec![false, true, true, false, false, false]);
    // exactly fits with EOS
    assert_eq!(tokenize("abcd", 6).ids.last(), Some(&EOS));
    // one byte too many: the tail is cut and EOS is dropped
    let t = tokenize("abcde", 6);
    assert_eq!(t.ids, vec![CLS, 101, 102, 103, 104, 105]);
    assert!(t.eos_position().is_none());
    assert!(t.attention_mask.iter().all(|&m| m));
    assert_eq!(VOCAB_SIZE, 260);
    let t = tokenize("é", 5);
    assert_eq!(t.ids, vec![CLS, BYTE_OFFSET + 0xc3, BYTE_OFFSET + 0xa9, EOS, PAD]);
}

#[test]
fn dataset_round_trips_and_counts_classes() {
    let spec = SyntheticTaskSpec::new(TaskKind::Paren3, 60, 30, 30, 4);
    let raw = gen_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    raw.save(dir.path()).unwrap();
    assert_eq!(RawDataset::load(dir.path()).unwrap(), raw);
    let splits = load_dataset(dir.path(), 64).unwrap();
    assert_eq!(splits.num_classes, 3);
    assert_eq!(splits.class_counts.train, vec![20, 20, 20]);
    assert_eq!(splits.class_counts.valid, vec![10, 10, 10]);
    for (seq, ex) in splits.train.iter().zip(&raw.train) {
        assert_eq!(seq, &tokenize(&ex.text, 64).with_label(ex.label));
        seq.check_invariants().unwrap();
    }
}

#[test]
fn malformed_dataset_files_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let ok = serde_json::to_string(&Example { text: "x".into(), label: 0 }).unwrap();
    let other = serde_json::to_string(&Example { text: "y".into(), label: 1 }).unwrap();
    fs::write(dir.path().join("train.jsonl"), format!("{ok}\n{other}\n")).unwrap();
    fs::write(dir.path().join("valid.jsonl"), format!("{ok}\n\n{{\"text\": 3}}\n")).unwrap();
    fs::write(dir.path().join("test.jsonl"), format!("{ok}\n")).unwrap();
    let msg = load_dataset(dir.path(), 16).unwrap_err().to_string();
    assert!(msg.contains("valid.jsonl") && msg.contains("line 3"), "{msg}");

    fs::write(dir.path().join("valid.jsonl"), "{\"text\": \"z\", \"label\": 2}\n").unwrap();
    let msg = load_dataset(dir.path(), 16).unwrap_err().to_string();
    assert!(msg.contains("label 2"), "{msg}");

    fs::remove_file(dir.path().join("test.jsonl")).unwrap();
    assert!(matches!(load_dataset(dir.path(), 16), Err(Error::Dataset { .. })));
}

#[test]
fn corpus_accepts_strings_objects_and_raw_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    fs::write(&path, "\"a\\nb\"\n{\"text\": \"c\"}\nplain line\n\n").unwrap();
    assert_eq!(read_corpus(&path).unwrap(), vec!["a\nb".to_string(), "c".into(), "plain line".into()]);
}

#[test]
fn generators_are_deterministic_disjoint_and_balanced() {
    for kind in [TaskKind::Paren3, TaskKind::Swapbug2] {
        let spec = SyntheticTaskSpec::new(kind, 600, 200, 200, 9);
        let a = gen_synthetic(&spec).unwrap();
        assert_eq!(a, gen_synthetic(&spec).unwrap());
        assert_ne!(a, gen_synthetic(&SyntheticTaskSpec { seed: 10, ..spec.clone() }).unwrap());
        let mut seen = HashSet::new();
        for (_, split) in a.splits() {
            for ex in split {
                assert!(seen.insert(ex.text.clone()), "{kind:?} duplicate {:?}", ex.text);
                assert!(ex.text.len() <= spec.max_raw_len);
            }
        }
        for (_, split) in a.splits() {
            let mut n = vec![0usize; kind.num_classes()];
            split.iter().for_each(|e| n[e.label] += 1);
            let share: Vec<f64> = n.iter().map(|&c| c as f64 / split.len() as f64).collect();
            match kind {
                TaskKind::Paren3 => assert!(share.iter().all(|s| (s - 1.0 / 3.0).abs() < 0.01), "{share:?}"),
                TaskKind::Swapbug2 => assert!((share[1] - 0.1).abs() < 0.01, "{share:?}"),
            }
        }
    }
}

#[test]
fn generator_rejects_tiny_specs() {
    assert!(gen_synthetic(&SyntheticTaskSpec::new(TaskKind::Paren3, 20, 30, 30, 0)).is_err());
    let short = SyntheticTaskSpec { max_raw_len: 10, ..SyntheticTaskSpec::new(TaskKind::Swapbug2, 40, 40, 40, 0) };
    assert!(gen_synthetic(&short).is_err());
}

/// Recomputes the swapbug label from scratch: operand letters on the right
/// of `=`, which must be strictly increasing for class 0.
fn swapbug_oracle(text: &str) -> usize {
    let rhs = &text[text.find('=').unwrap() + 1..];
    let ops: Vec<char> = rhs.chars().filter(char::is_ascii_lowercase).collect();
    usize::from(ops.windows(2).any(|w| w[0] >= w[1]))
}

#[test]
fn swapbug_labels_match_operand_order() {
    let raw = gen_synthetic(&SyntheticTaskSpec::new(TaskKind::Swapbug2, 300, 100, 100, 2)).unwrap();
    for (_, split) in raw.splits() {
        for ex in split {
            assert!(parse_swapbug(&ex.text).is_some(), "{:?}", ex.text);
            assert_eq!(swapbug_oracle(&ex.text), ex.label, "{:?}", ex.text);
            assert_eq!(swapbug_label(&ex.text), Some(ex.label));
        }
    }
    assert_eq!(swap_adjacent_operands("r = a + (b * c)", 1), "r = a + (c * b)");
    assert_eq!(swap_adjacent_operands("r = a + b", 5), "r = a + b");
    assert_eq!(parse_swapbug("r = a + (b * c)"), Some(vec!['a', 'b', 'c']));
    assert_eq!(parse_swapbug("r = a + (b * c"), None);
    assert_eq!(parse_swapbug("x = a"), None);
}

#[test]
fn paren3_defects_are_recognisable() {
    let raw = gen_synthetic(&SyntheticTaskSpec::new(TaskKind::Paren3, 300, 60, 60, 5)).unwrap();
    for ex in &raw.train {
        let opens = ex.text.matches(['(', '[']).count();
        let closes = ex.text.matches([')', ']']).count();
        let unindented_body = ex.text.lines().skip(1).any(|l| !l.starts_with(' '));
        match ex.label {
            0 => assert!(closes < opens && !unindented_body, "{:?}", ex.text),
            1 => assert!(closes == opens && unindented_body, "{:?}", ex.text),
            2 => assert!(closes == opens && !unindented_body, "{:?}", ex.text),
            _ => unreachable!(),
        }
    }
}

#[test]
fn corpus_is_seeded() {
    let a = synthetic_corpus(TaskKind::Paren3, 50, 7, 60);
    assert_eq!(a.len(), 50);
    assert_eq!(a, synthetic_corpus(TaskKind::Paren3, 50, 7, 60));
    assert_ne!(a, synthetic_corpus(TaskKind::Paren3, 50, 8, 60));
}

#[test]
fn batches_cover_every_index_once() {
    let b = batch_indices(103, 32, 4, 2);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 32, 7]);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..103).collect::<Vec<_>>());
    assert_eq!(b, batch_indices(103, 32, 4, 2));
    assert_ne!(b, batch_indices(103, 32, 4, 3));
    assert_ne!(b, batch_indices(103, 32, 5, 2));
}

proptest! {
    #[test]
    fn framing_invariants_hold(bytes in proptest::collection::vec(any::<u8>(), 0..80), max_len in 1usize..64) {
        let t = tokenize_bytes(&bytes, max_len);
        prop_assert_eq!(t.len(), max_len);
        t.check_invariants().unwrap();
        // truncation oracle: the kept bytes are a prefix of the input
        let kept: Vec<u8> = t.ids.iter().filter(|&&id| id >= BYTE_OFFSET).map(|&id| (id - BYTE_OFFSET) as u8).collect();
        let room = max_len.saturating_sub(1);
        if bytes.len() + 2 <= max_len {
            prop_assert_eq!(&kept, &bytes);
            prop_assert_eq!(t.eos_position(), Some(bytes.len() + 1));
        } else {
            prop_assert_eq!(&kept[..], &bytes[..room.min(bytes.len())]);
            prop_assert!(t.eos_position().is_none());
        }
        prop_assert_eq!(t.code_token_count(), kept.len());
    }
}
