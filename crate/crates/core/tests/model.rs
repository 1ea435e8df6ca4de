mod common;

use hap_core::autodiff::{Array, Tape};
use hap_core::eval::{kl_per_example, Metric};
use hap_core::graph::{Reader, Writer};
use hap_core::model::{
    train_toy_unchecked, GateSpec, LogitScope, MaskAssignment, Model, Routing, TokenBatch, TrainConfig, Weights,
};
use proptest::prelude::*;

use common::{config, max_abs_diff, model, same_length_pairs};

fn batches(n: usize, seed: u64) -> (TokenBatch, TokenBatch, Vec<usize>, Vec<usize>) {
    let pairs = same_length_pairs(n, seed);
    let clean: Vec<&[u32]> = pairs.iter().map(|p| p.clean_ids.as_slice()).collect();
    let corrupt: Vec<&[u32]> = pairs.iter().map(|p| p.corrupt_ids.as_slice()).collect();
    (
        TokenBatch::new(&clean).unwrap(),
        TokenBatch::new(&corrupt).unwrap(),
        pairs.iter().map(|p| p.io_id as usize).collect(),
        pairs.iter().map(|p| p.s_id as usize).collect(),
    )
}

#[test]
fn all_open_reproduces_clean_run() {
    let m = model(2, 2, 16, 3, 0.3);
    let (clean, corrupt, _, _) = batches(32, 1);
    let (clean_logits, _) = m.forward_full(&clean).unwrap();
    let (_, corrupt_cache) = m.forward_full(&corrupt).unwrap();
    let n = m.schema().num_edges();
    let masked = m
        .forward_masked(&clean, &corrupt_cache, &MaskAssignment::ones(n))
        .unwrap();
    assert!(max_abs_diff(clean_logits.data(), masked.data()) <= 1e-9);

    let (final_clean, _) = m.forward_final(&clean).unwrap();
    let final_masked = m
        .forward_masked_scoped(&clean, &corrupt_cache, &MaskAssignment::ones(n), LogitScope::Final)
        .unwrap();
    for kl in kl_per_example(&final_clean, &final_masked).unwrap() {
        assert!(kl <= 1e-9, "kl {kl}");
    }
}

#[test]
fn all_closed_reproduces_corrupt_run() {
    let m = model(2, 2, 16, 4, 0.3);
    let (clean, corrupt, _, _) = batches(32, 2);
    let (corrupt_logits, corrupt_cache) = m.forward_full(&corrupt).unwrap();
    let n = m.schema().num_edges();
    let masked = m
        .forward_masked(&clean, &corrupt_cache, &MaskAssignment::zeros(n))
        .unwrap();
    assert!(max_abs_diff(corrupt_logits.data(), masked.data()) <= 1e-9);
}

#[test]
fn cache_holds_every_writer() {
    let m = model(3, 2, 16, 5, 0.1);
    let (clean, _, _, _) = batches(4, 3);
    let (_, cache) = m.forward_full(&clean).unwrap();
    assert_eq!(cache.len(), 1 + 3 * 2 + 3);
    for w in cache.writers() {
        assert_eq!(w.shape(), &[4, clean.seq(), 16]);
    }
}

#[test]
fn half_open_edge_reads_the_midpoint() {
    let m = model(2, 2, 16, 6, 0.3);
    let schema = m.schema().clone();
    let (clean, corrupt, _, _) = batches(3, 4);
    let (_, clean_cache) = m.forward_full(&clean).unwrap();
    let (_, corrupt_cache) = m.forward_full(&corrupt).unwrap();

    let reader = Reader::K { layer: 1, head: 1 };
    let writer = Writer::Head { layer: 0, head: 0 };
    let edge = schema.lookup(&writer, &reader).unwrap().unwrap();
    let mut z = vec![1.0; schema.num_edges()];
    z[edge] = 0.5;

    let mut tape = Tape::new();
    let params = m.record_params(&mut tape, false).unwrap();
    let zid = tape.constant(Array::from_vec(z)).unwrap();
    let gate = GateSpec {
        z: zid,
        corrupt: &corrupt_cache,
        closed: None,
    };
    let nodes = m
        .forward_graph(&mut tape, &params, &clean, Routing::Gated(gate), LogitScope::Final)
        .unwrap();
    let got = tape.value(nodes.reader_inputs[schema.reader_index(&reader)]);

    let wi = schema.writer_index(&writer);
    let mut want = Array::zeros(got.shape());
    for u in 0..schema.prefix_len(&reader) {
        if u == wi {
            want.axpy(0.5, clean_cache.writer(u));
            want.axpy(0.5, corrupt_cache.writer(u));
        } else {
            want.add_assign(clean_cache.writer(u));
        }
    }
    assert!(max_abs_diff(got.data(), want.data()) <= 1e-12);
}

fn metric_under(m: &Model, clean: &TokenBatch, corrupt: &TokenBatch, z: &[f64], io: &[usize], s: &[usize]) -> f64 {
    let (_, cache) = m.forward_final(corrupt).unwrap();
    let logits = m
        .forward_masked_scoped(
            clean,
            &cache,
            &MaskAssignment::new(z.to_vec()).unwrap(),
            LogitScope::Final,
        )
        .unwrap();
    Metric::LogitDiff.values(&logits, io, s).iter().sum()
}

#[test]
fn mask_gradient_matches_finite_differences() {
    let m = model(2, 2, 16, 7, 0.4);
    let n = m.schema().num_edges();
    let (clean, corrupt, io, s) = batches(4, 5);
    let (_, cache) = m.forward_final(&corrupt).unwrap();
    let z0: Vec<f64> = (0..n).map(|i| 0.2 + 0.6 * ((i * 37) % 11) as f64 / 10.0).collect();

    let mut tape = Tape::new();
    let params = m.record_params(&mut tape, false).unwrap();
    let zid = tape.param(Array::from_vec(z0.clone())).unwrap();
    let gate = GateSpec {
        z: zid,
        corrupt: &cache,
        closed: None,
    };
    let nodes = m
        .forward_graph(&mut tape, &params, &clean, Routing::Gated(gate), LogitScope::Final)
        .unwrap();
    let loss = Metric::LogitDiff.record(&mut tape, nodes.logits, &io, &s).unwrap();
    let grad = m.backward(&tape, loss).unwrap().wrt(zid);

    let h = 1e-5;
    for e in (0..n).step_by(3) {
        let mut up = z0.clone();
        let mut down = z0.clone();
        up[e] += h;
        down[e] -= h;
        let fd = (metric_under(&m, &clean, &corrupt, &up, &io, &s)
            - metric_under(&m, &clean, &corrupt, &down, &io, &s))
            / (2.0 * h);
        let g = grad.data()[e];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        assert!(rel <= 1e-4 || (g - fd).abs() <= 1e-9, "edge {e}: analytic {g} fd {fd}");
    }
}

#[test]
fn logits_move_continuously_along_a_gate() {
    let m = model(2, 2, 16, 8, 0.4);
    let n = m.schema().num_edges();
    let (clean, corrupt, io, s) = batches(2, 6);
    let edge = m
        .schema()
        .lookup(&Writer::Embed, &Reader::V { layer: 1, head: 0 })
        .unwrap()
        .unwrap();
    let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    let values: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let mut z = vec![1.0; n];
            z[edge] = t;
            metric_under(&m, &clean, &corrupt, &z, &io, &s)
        })
        .collect();
    let jumps: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    for i in 1..jumps.len() - 1 {
        let local = jumps[i - 1].max(jumps[i + 1]).max(1e-12);
        assert!(
            jumps[i] <= 10.0 * local,
            "jump {} at z={} vs local {}",
            jumps[i],
            grid[i],
            local
        );
    }
}

#[test]
fn zero_weights_give_constant_logits() {
    let cfg = config(2, 2, 16);
    let m = Model::new(Weights::zeros(&cfg).unwrap()).unwrap();
    let (clean, _, _, _) = batches(3, 7);
    let (logits, _) = m.forward_full(&clean).unwrap();
    assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
}

#[test]
fn mask_length_is_checked() {
    let m = model(1, 1, 8, 9, 0.1);
    let (clean, corrupt, _, _) = batches(2, 8);
    let (_, cache) = m.forward_full(&corrupt).unwrap();
    assert!(m.forward_masked(&clean, &cache, &MaskAssignment::ones(7)).is_err());
}

#[test]
fn training_is_deterministic_and_lowers_loss() {
    let cfg = config(1, 2, 16);
    let train = common::pairs(256, 11);
    let val = common::pairs(64, 12);
    let hyper = TrainConfig {
        steps: 60,
        batch_size: 16,
        eval_every: 60,
        ..TrainConfig::default()
    };
    let a = train_toy_unchecked(&cfg, &train, &val, &hyper).unwrap();
    let b = train_toy_unchecked(&cfg, &train, &val, &hyper).unwrap();
    assert!(a.final_loss < a.initial_loss, "{} -> {}", a.initial_loss, a.final_loss);
    for ((na, wa), (_, wb)) in a.weights.params.named().iter().zip(b.weights.params.named()) {
        assert_eq!(wa.data(), wb.data(), "{na}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn binary_masks_stay_between_runs(seed in 0u64..1000, kept in prop::collection::btree_set(0usize..13, 0..13)) {
        // Every edge of a one-layer, two-head model; fidelity at the extremes
        // and finite logits everywhere in between.
        let m = model(1, 2, 8, seed, 0.3);
        prop_assert_eq!(m.schema().num_edges(), 13);
        let (clean, corrupt, _, _) = batches(2, seed);
        let (_, cache) = m.forward_full(&corrupt).unwrap();
        let kept: Vec<usize> = kept.into_iter().collect();
        let z = MaskAssignment::binary(13, &kept).unwrap();
        let logits = m.forward_masked(&clean, &cache, &z).unwrap();
        prop_assert!(logits.all_finite());
    }
}
