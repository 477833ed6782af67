use proptest::prelude::*;

use super::*;

#[test]
fn zipf_head_mass_matches_harmonic_sum() {
    let z = Zipf::new(100, 1.0).unwrap();
    let h = |n: usize| (1..=n).map(|r| 1.0 / r as f64).sum::<f64>();
    assert!((z.head_mass(10) - h(10) / h(100)).abs() < 1e-12);
    assert_eq!(z.head_mass(0), 0.0);
    assert_eq!(z.head_mass(1000), 1.0);
}

#[test]
fn zipf_sample_frequencies_follow_the_law() {
    let s = zipf_stream(50, 1.2, 200_000, 9).unwrap();
    let z = Zipf::new(50, 1.2).unwrap();
    let mut counts = [0usize; 50];
    for &t in &s {
        counts[t] += 1;
    }
    for r in [0, 1, 5, 20] {
        let p = z.head_mass(r + 1) - z.head_mass(r);
        let f = counts[r] as f64 / s.len() as f64;
        assert!((f - p).abs() < 0.01, "rank {r}: {f} vs {p}");
    }
}

#[test]
fn zipf_rejects_bad_parameters() {
    assert!(Zipf::new(0, 1.0).is_err());
    assert!(Zipf::new(10, 0.0).is_err());
    assert!(Zipf::new(10, f64::NAN).is_err());
}

#[test]
fn batch_depends_only_on_seed_and_step() {
    let stream: Vec<usize> = (0..500).collect();
    let s = BatchSampler::new(3, 4, 16).unwrap();
    let late_first = s.batch_at(7, &stream).unwrap();
    for step in 0..7 {
        s.batch_at(step, &stream).unwrap();
    }
    assert_eq!(s.batch_at(7, &stream).unwrap(), late_first);
    assert_ne!(s.batch_at(8, &stream).unwrap(), late_first);
    for w in 0..4 {
        let i = &late_first.inputs[w * 16..(w + 1) * 16];
        let t = &late_first.targets[w * 16..(w + 1) * 16];
        assert!(i.windows(2).all(|p| p[1] == p[0] + 1));
        assert_eq!(t[0], i[0] + 1);
    }
}

#[test]
fn batch_rejects_short_corpus() {
    let s = BatchSampler::new(0, 1, 16).unwrap();
    assert!(s.batch_at(0, &[1; 16]).is_err());
    s.batch_at(0, &[1; 17]).unwrap();
}

#[test]
fn packing_shifts_targets() {
    let w = pack_sequences(&[1, 2, 3, 4, 5, 6, 7], 3);
    assert_eq!(
        w,
        vec![
            (vec![1, 2, 3], vec![2, 3, 4]),
            (vec![4, 5, 6], vec![5, 6, 7])
        ]
    );
}

#[test]
fn markov_corpus_stays_in_range_and_is_reproducible() {
    let a = markov_corpus(100, 2, 5000, 4, 0.05, 1).unwrap();
    assert_eq!(a, markov_corpus(100, 2, 5000, 4, 0.05, 1).unwrap());
    assert!(a.iter().all(|&t| (2..100).contains(&t)));
    assert!(markov_corpus(3, 2, 10, 4, 0.05, 1).is_err());
}

#[test]
fn markov_corpus_is_predictable() {
    // Each token has at most `fanout` successors outside restarts.
    let a = markov_corpus(200, 2, 20_000, 2, 0.0, 4).unwrap();
    let mut succ = vec![std::collections::BTreeSet::new(); 200];
    for p in a.windows(2) {
        succ[p[0]].insert(p[1]);
    }
    assert!(succ.iter().all(|s| s.len() <= 2));
}

#[test]
fn country_names_are_unique() {
    let w = CountryWorld::new(256).unwrap();
    let mut all: Vec<&String> = w.countries.iter().chain(&w.capitals).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 512);
    assert!(CountryWorld::new(257).is_err());
}

#[test]
fn country_corpus_is_in_vocabulary() {
    let w = CountryWorld::new(20).unwrap();
    let text = w.corpus(500, 1);
    let mut words: Vec<String> = CountryWorld::function_words()
        .iter()
        .map(|s| s.to_string())
        .collect();
    words.extend(w.countries.iter().cloned());
    words.extend(w.capitals.iter().cloned());
    let tok = Tokenizer::word_from_list(&words);
    assert!(!tok.encode(&text).contains(&UNK_ID));
    assert_eq!(tok.encode(&w.prompt(3)).len(), 5);
}

#[test]
fn byte_ids_are_offset_by_two() {
    let t = Tokenizer::Byte;
    assert_eq!(t.encode("A"), vec![65 + 2]);
    assert_eq!(t.vocab_size(), 258);
}

#[test]
fn word_vocab_ranks_by_frequency() {
    let t = Tokenizer::word_from_text("b a b c b a", 4).unwrap();
    assert_eq!(t.vocab_size(), 4);
    assert_eq!(t.encode("b a c"), vec![2, 3, UNK_ID]);
    assert_eq!(t.decode(&[2, 3, UNK_ID, PAD_ID]).unwrap(), "b a <unk>");
    assert!(t.decode(&[9]).is_err());
}

#[test]
fn tokenizer_serializes() {
    let t = Tokenizer::word_from_list(&["x", "y"]);
    let json = serde_json::to_string(&t).unwrap();
    assert_eq!(serde_json::from_str::<Tokenizer>(&json).unwrap(), t);
}

proptest! {
    #[test]
    fn byte_round_trip(s in ".*") {
        let t = Tokenizer::Byte;
        prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
    }

    #[test]
    fn word_round_trip(words in prop::collection::vec("[a-z]{1,5}", 1..20)) {
        let t = Tokenizer::word_from_list(&words);
        let text = words.join(" ");
        prop_assert_eq!(t.decode(&t.encode(&text)).unwrap(), text);
    }
}
