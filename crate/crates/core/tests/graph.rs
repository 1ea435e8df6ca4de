use std::collections::{BTreeMap, BTreeSet};

use hap_core::graph::{edge_count, GraphSchema, Reader, Writer};
use proptest::prelude::*;

/// Order in which a component runs: (layer, stage) with attention stage 0,
/// MLP stage 1; embedding first, logits last.
fn writer_time(w: &Writer) -> (usize, usize) {
    match *w {
        Writer::Embed => (0, 0),
        Writer::Head { layer, .. } => (1 + layer, 0),
        Writer::Mlp { layer } => (1 + layer, 1),
    }
}

fn reader_time(r: &Reader, layers: usize) -> (usize, usize) {
    match *r {
        Reader::Q { layer, .. } | Reader::K { layer, .. } | Reader::V { layer, .. } => (1 + layer, 0),
        Reader::MlpIn { layer } => (1 + layer, 1),
        Reader::Logits => (1 + layers, 0),
    }
}

fn brute_force(layers: usize, heads: usize) -> BTreeSet<(String, String)> {
    let mut writers = vec![Writer::Embed];
    let mut readers = Vec::new();
    for l in 0..layers {
        for h in 0..heads {
            writers.push(Writer::Head { layer: l, head: h });
            readers.push(Reader::Q { layer: l, head: h });
            readers.push(Reader::K { layer: l, head: h });
            readers.push(Reader::V { layer: l, head: h });
        }
        writers.push(Writer::Mlp { layer: l });
        readers.push(Reader::MlpIn { layer: l });
    }
    readers.push(Reader::Logits);
    let mut out = BTreeSet::new();
    for w in &writers {
        for r in &readers {
            if writer_time(w) < reader_time(r, layers) {
                out.insert((w.to_string(), r.to_string()));
            }
        }
    }
    out
}

#[test]
fn gpt2_small_shape() {
    assert_eq!(GraphSchema::enumerate(12, 12).unwrap().num_edges(), 32_491);
    assert_eq!(edge_count(12, 12), 32_491);
}

#[test]
fn brute_force_matches_closed_form() {
    for l in 1..=4 {
        for h in 1..=4 {
            let schema = GraphSchema::enumerate(l, h).unwrap();
            let brute = brute_force(l, h);
            assert_eq!(brute.len(), edge_count(l, h), "L={l} H={h}");
            let listed: BTreeSet<(String, String)> = schema
                .edges()
                .iter()
                .map(|e| (e.writer.to_string(), e.reader.to_string()))
                .collect();
            assert_eq!(listed, brute, "L={l} H={h}");
            for (i, e) in schema.edges().iter().enumerate() {
                assert_eq!(e.index, i);
            }
        }
    }
}

fn component(r: &Reader) -> String {
    match *r {
        Reader::Q { layer, head } | Reader::K { layer, head } | Reader::V { layer, head } => {
            Writer::Head { layer, head }.to_string()
        }
        Reader::MlpIn { layer } => Writer::Mlp { layer }.to_string(),
        Reader::Logits => "logits".into(),
    }
}

#[test]
fn precedence_is_a_strict_partial_order() {
    let schema = GraphSchema::enumerate(3, 3).unwrap();
    let mut succ: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for e in schema.edges() {
        succ.entry(e.writer.to_string())
            .or_default()
            .insert(component(&e.reader));
    }
    let nodes: BTreeSet<String> = succ.keys().cloned().chain(succ.values().flatten().cloned()).collect();
    // transitive closure
    let mut reach: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for n in &nodes {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<String> = succ.get(n).into_iter().flatten().cloned().collect();
        while let Some(x) = stack.pop() {
            if seen.insert(x.clone()) {
                stack.extend(succ.get(&x).into_iter().flatten().cloned());
            }
        }
        reach.insert(n.clone(), seen);
    }
    for a in &nodes {
        assert!(!reach[a].contains(a), "{a} precedes itself");
        for b in &reach[a] {
            assert!(!reach[b].contains(a), "{a} and {b} precede each other");
            for c in &reach[b] {
                assert!(reach[a].contains(c));
            }
        }
    }
}

#[test]
fn lookup_agrees_with_enumeration() {
    let schema = GraphSchema::enumerate(2, 3).unwrap();
    for e in schema.edges() {
        assert_eq!(schema.lookup(&e.writer, &e.reader).unwrap(), Some(e.index));
    }
    let late = Writer::Mlp { layer: 1 };
    assert_eq!(schema.lookup(&late, &Reader::Q { layer: 1, head: 0 }).unwrap(), None);
    assert!(schema.lookup(&Writer::Mlp { layer: 2 }, &Reader::Logits).is_err());
}

proptest! {
    #[test]
    fn closed_form_matches_enumeration(l in 1usize..7, h in 1usize..7) {
        prop_assert_eq!(GraphSchema::enumerate(l, h).unwrap().num_edges(), edge_count(l, h));
    }

    #[test]
    fn names_round_trip(l in 1usize..5, h in 1usize..5) {
        let schema = GraphSchema::enumerate(l, h).unwrap();
        for e in schema.edges() {
            let w: Writer = e.writer.to_string().parse().unwrap();
            let r: Reader = e.reader.to_string().parse().unwrap();
            prop_assert_eq!(w, e.writer);
            prop_assert_eq!(r, e.reader);
        }
    }
}
