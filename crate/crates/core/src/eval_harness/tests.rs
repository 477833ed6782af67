use proptest::prelude::*;

use super::*;
use crate::cost_model::activated_params;
use crate::layers::FfnKind;
use crate::model::{build_model, ModelConfig, PlacementPolicy};
use crate::numerics::Tape;

#[test]
fn minimal_instance_is_needle_then_query() {
    let n = build_niah(5, 50, 1).unwrap();
    assert_eq!(
        n.tokens,
        vec![KEY_MARKER, n.key, n.value, QUERY_MARKER, n.key]
    );
    assert_eq!(n.answer, n.value);
    assert!(build_niah(4, 50, 1).is_err());
    assert!(build_niah(10, 5, 1).is_err());
}

#[test]
fn instances_are_seeded() {
    assert_eq!(
        build_niah(64, 100, 3).unwrap(),
        build_niah(64, 100, 3).unwrap()
    );
    assert_ne!(
        build_niah(64, 100, 3).unwrap(),
        build_niah(64, 100, 4).unwrap()
    );
}

proptest! {
    #[test]
    fn needle_occurs_once(len in 5usize..300, vocab in 6usize..500, seed in any::<u64>()) {
        let n = build_niah(len, vocab, seed).unwrap();
        prop_assert_eq!(n.tokens.len(), len);
        let keys: Vec<usize> = (0..len).filter(|&i| n.tokens[i] == KEY_MARKER).collect();
        prop_assert_eq!(keys, vec![n.needle_pos]);
        prop_assert_eq!(n.tokens.iter().filter(|&&t| t == QUERY_MARKER).count(), 1);
        prop_assert_eq!(&n.tokens[n.needle_pos..n.needle_pos + 3], &[KEY_MARKER, n.key, n.value]);
        prop_assert_eq!(n.query_pos, len - 2);
        prop_assert!(n.tokens.iter().all(|&t| t < vocab));
    }
}

/// Answers by looking up the needle, as a perfect retriever would.
struct Oracle(usize);

impl NextTokenModel for Oracle {
    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[tokens.len(), self.0]);
        let p = tokens.iter().position(|&t| t == KEY_MARKER).unwrap();
        out.set(tokens.len() - 1, tokens[p + 2], 10.0);
        Ok(out)
    }
}

struct Uniform(usize);

impl NextTokenModel for Uniform {
    fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(&[tokens.len(), self.0]))
    }
}

#[test]
fn forced_copy_scores_one() {
    let inst: Vec<_> = (0..20).map(|s| build_niah(40, 64, s).unwrap()).collect();
    assert_eq!(score_retrieval(&Oracle(64), &inst).unwrap().accuracy, 1.0);
}

#[test]
fn untrained_model_is_at_chance() {
    let config = ModelConfig::dense(2, 16, 32, 256, 2, 64);
    let model = build_model(&config, 0).unwrap();
    let inst: Vec<_> = (0..300).map(|s| build_niah(24, 256, s).unwrap()).collect();
    let score = score_retrieval(&model, &inst).unwrap();
    // Chance is 1/256; allow a generous binomial margin.
    assert!(score.correct <= 8, "{score:?}");
}

#[test]
fn uniform_model_has_ppl_vocab() {
    let corpus: Vec<usize> = (0..100).map(|i| i % 37).collect();
    let p = val_ppl(&Uniform(37), &corpus, 10).unwrap();
    assert!((p - 37.0).abs() < 1e-9);
    assert!(val_ppl(&Uniform(37), &[1], 10).is_err());
}

#[test]
fn ppl_matches_cross_entropy() {
    let config = ModelConfig::dense(2, 16, 32, 40, 2, 16);
    let model = build_model(&config, 3).unwrap();
    let corpus: Vec<usize> = (0..49).map(|i| (i * 7) % 40).collect();
    let p = val_ppl(&model, &corpus, 16).unwrap();
    let w = crate::data::pack_sequences(&corpus, 16);
    let inputs: Vec<usize> = w.iter().flat_map(|x| x.0.clone()).collect();
    let targets: Vec<usize> = w.iter().flat_map(|x| x.1.clone()).collect();
    let mut tape = Tape::inference();
    let l = model
        .loss(&mut tape, &inputs, &targets, w.len(), 16)
        .unwrap();
    assert!((p - tape.value(l).data()[0].exp()).abs() < 1e-9 * p);
}

#[test]
fn memorised_sequence_has_ppl_near_one() {
    struct Memo(Vec<usize>, usize);
    impl NextTokenModel for Memo {
        fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
            let mut out = Tensor::zeros(&[tokens.len(), self.1]);
            for i in 0..tokens.len() {
                out.set(i, self.0[i + 1], 50.0);
            }
            Ok(out)
        }
    }
    let seq: Vec<usize> = (0..33).map(|i| (i * 5) % 20).collect();
    let p = val_ppl(&Memo(seq.clone(), 20), &seq, 32).unwrap();
    assert!(p < 1.0 + 1e-9);
}

#[test]
fn activated_params_grow_with_context() {
    let config = ModelConfig::dense(3, 8, 16, 300, 2, 512)
        .with_placement(&PlacementPolicy::ratio(0.5, FfnKind::Stem))
        .unwrap();
    let model = build_model(&config, 0).unwrap();
    let inst = build_niah(256, 300, 7).unwrap();
    let lengths: Vec<usize> = (1..=256).step_by(15).collect();
    let active = activated_by_prefix(&model, &inst.tokens, &lengths).unwrap();
    let shared = model.count_params(&[]).unwrap().shared;
    for (w, l) in active.windows(2).zip(lengths.windows(2)) {
        assert!(w[0] <= w[1]);
        let grew = inst.tokens[..l[1]]
            .iter()
            .collect::<std::collections::BTreeSet<_>>()
            .len()
            > inst.tokens[..l[0]]
                .iter()
                .collect::<std::collections::BTreeSet<_>>()
                .len();
        assert_eq!(grew, w[1] > w[0]);
    }
    for (&l, &a) in lengths.iter().zip(&active) {
        assert_eq!(
            (a - shared) as u128,
            activated_params(1, 16, &inst.tokens[..l])
        );
    }
}

#[test]
fn sweep_reports_each_length() {
    let config = ModelConfig::dense(2, 8, 16, 64, 2, 64)
        .with_placement(&PlacementPolicy::ratio(0.5, FfnKind::Stem))
        .unwrap();
    let model = build_model(&config, 0).unwrap();
    let rows = niah_sweep(&model, &[16, 32, 64], 3, 1).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.length).collect::<Vec<_>>(),
        vec![16, 32, 64]
    );
    assert!(rows
        .windows(2)
        .all(|w| w[0].activated_params <= w[1].activated_params));
}
