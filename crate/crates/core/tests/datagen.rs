use std::collections::{BTreeSet, HashSet};

use hap_core::datagen::{read_jsonl, write_jsonl, IoiTask, NameOrder, Slot, SplitCounts, BOS};
use hap_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn counts(train: usize, validation: usize, test: usize) -> SplitCounts {
    SplitCounts {
        train,
        validation,
        test,
    }
}

#[test]
fn ten_thousand_prompts_match_their_templates() {
    let task = IoiTask::standard();
    let splits = task.generate(counts(10_000, 0, 0), 2024).unwrap();
    let tok = task.tokenizer();
    for p in &splits.train {
        let t = &task.templates()[p.template_id];
        let fill = t
            .match_prompt(&p.clean_text)
            .unwrap_or_else(|| panic!("{:?} vs {:?}", p.clean_text, t.pattern));
        let bad = t.match_prompt(&p.corrupt_text).expect("corrupt text matches too");
        assert_eq!(p.clean_ids.len(), p.corrupt_ids.len());
        assert_ne!(p.io_id, p.s_id);
        assert_eq!(tok.word(p.io_id), Some(fill.a.as_str()));
        assert_eq!(tok.word(p.s_id), Some(fill.b.as_str()));
        assert!(p.clean_ids.contains(&p.io_id) && p.clean_ids.contains(&p.s_id));
        assert!(!p.corrupt_ids.contains(&p.io_id) && !p.corrupt_ids.contains(&p.s_id));
        assert_ne!(bad.a, bad.b);
        assert_eq!((bad.place, bad.object), (fill.place, fill.object));
        assert_eq!(p.clean_ids[0], tok.bos().unwrap());
        assert_eq!(tok.decode(&p.clean_ids[1..]).unwrap(), p.clean_text);
        assert_eq!(tok.encode(&p.clean_text).unwrap(), p.clean_ids[1..]);
    }
}

#[test]
fn default_split_sizes_without_repeats() {
    let task = IoiTask::standard();
    let splits = task.generate(SplitCounts::default(), 99).unwrap();
    assert_eq!(
        (splits.train.len(), splits.validation.len(), splits.test.len()),
        (200, 200, 1000)
    );
    let mut tuples = HashSet::new();
    for p in splits.train.iter().chain(&splits.validation).chain(&splits.test) {
        assert!(tuples.insert((p.template_id, p.clean_text.clone())), "{}", p.clean_text);
    }
    assert_eq!(task.generate(SplitCounts::default(), 99).unwrap(), splits);
    assert_ne!(task.generate(SplitCounts::default(), 100).unwrap().train, splits.train);
}

#[test]
fn both_name_orders_occur_in_small_splits() {
    let task = IoiTask::standard();
    for seed in 0..20 {
        let splits = task.generate(counts(200, 0, 0), seed).unwrap();
        let orders: HashSet<NameOrder> = splits
            .train
            .iter()
            .map(|p| task.templates()[p.template_id].order)
            .collect();
        assert_eq!(orders.len(), 2, "seed {seed}");
    }
}

#[test]
fn vocabulary_is_lexicon_plus_template_words_plus_bos() {
    let task = IoiTask::standard();
    let lex = task.lexicon();
    let words: BTreeSet<&str> = task.templates().iter().flat_map(|t| t.words()).collect();
    assert_eq!(
        task.tokenizer().vocab_size(),
        lex.names.len() + lex.places.len() + lex.objects.len() + words.len() + 1
    );
    assert_eq!((lex.names.len(), lex.places.len(), lex.objects.len()), (100, 20, 20));
    assert!(task.tokenizer().id(BOS).is_ok());
    assert_eq!(task.tokenizer().encode("to").unwrap().len(), 1);
}

#[test]
fn out_of_vocabulary_word_is_named() {
    let task = IoiTask::standard();
    match task.tokenizer().encode("Then, Zorblax went") {
        Err(Error::OutOfVocabulary(w)) => assert_eq!(w, "Zorblax"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn infeasible_request_reports_the_maximum() {
    let task = IoiTask::standard();
    let max = task.max_distinct();
    match task.generate(counts(max, 1, 0), 0) {
        Err(Error::Infeasible { max_feasible, .. }) => assert_eq!(max_feasible, max),
        other => panic!("{other:?}"),
    }
}

#[test]
fn jsonl_round_trip() {
    let task = IoiTask::standard();
    let pairs = task.generate(counts(50, 0, 0), 5).unwrap().train;
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &pairs).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 50);
    assert!(!text.contains('\r'));
    assert_eq!(read_jsonl(buf.as_slice()).unwrap(), pairs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corruption_preserves_length_and_replaces_names(seed in any::<u64>(), pick in 0usize..50) {
        let task = IoiTask::standard();
        let pair = task.generate(counts(50, 0, 0), seed).unwrap().train[pick].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let again = task.corrupt(&pair, &mut rng).unwrap();
        prop_assert_eq!(&again.clean_ids, &pair.clean_ids);
        prop_assert_eq!(again.corrupt_ids.len(), pair.clean_ids.len());
        prop_assert!(!again.corrupt_ids.contains(&pair.io_id));
        prop_assert!(!again.corrupt_ids.contains(&pair.s_id));
        let diff = pair
            .clean_ids
            .iter()
            .zip(&again.corrupt_ids)
            .filter(|(a, b)| a != b)
            .count();
        let name_slots = task.templates()[pair.template_id]
            .prompt_slots()
            .iter()
            .filter(|s| matches!(s, Slot::A | Slot::B))
            .count();
        prop_assert_eq!(diff, name_slots);
    }
}
