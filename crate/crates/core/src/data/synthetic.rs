//! Deterministic synthetic corpora.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::zipf::Zipf;
use crate::error::{Error, Result};

/// Token stream from a sparse first-order Markov chain over ids
/// `first_id..vocab`: each token has `fanout` successors with weights halving
/// in turn, and with probability `restart` the chain jumps to a Zipf-drawn
/// token instead.
pub fn markov_corpus(
    vocab: usize,
    first_id: usize,
    len: usize,
    fanout: usize,
    restart: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if first_id + 1 >= vocab {
        return Err(Error::config(format!("no free ids in {first_id}..{vocab}")));
    }
    if fanout == 0 {
        return Err(Error::config("markov fanout must be positive"));
    }
    let n = vocab - first_id;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_rank: Vec<usize> = (first_id..vocab).collect();
    by_rank.shuffle(&mut rng);
    let successors: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            (0..fanout)
                .map(|_| first_id + rng.random_range(0..n))
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..fanout).map(|i| 0.5f64.powi(i as i32)).collect();
    let total: f64 = weights.iter().sum();
    let zipf = Zipf::new(n, 1.0)?;
    let mut out = Vec::with_capacity(len);
    let mut cur = by_rank[zipf.sample(&mut rng)];
    for _ in 0..len {
        out.push(cur);
        if rng.random::<f64>() < restart {
            cur = by_rank[zipf.sample(&mut rng)];
        } else {
            let mut u = rng.random::<f64>() * total;
            let succ = &successors[cur - first_id];
            let mut pick = succ[fanout - 1];
            for (w, &s) in weights.iter().zip(succ) {
                if u < *w {
                    pick = s;
                    break;
                }
                u -= w;
            }
            cur = pick;
        }
    }
    Ok(out)
}

const SYLLABLES: [&str; 16] = [
    "ba", "ke", "lo", "mi", "nu", "ra", "si", "to", "ve", "zu", "da", "fe", "gi", "ho", "ja", "pe",
];

/// A made-up world of countries and their capitals, rendered as
/// whitespace-separated sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountryWorld {
    pub countries: Vec<String>,
    pub capitals: Vec<String>,
}

impl CountryWorld {
    /// At most 256 pairs; names are unique syllable combinations.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > SYLLABLES.len() * SYLLABLES.len() {
            return Err(Error::config(format!("country count {n} outside 1..=256")));
        }
        let pair = |i: usize| (SYLLABLES[i % 16], SYLLABLES[(i / 16 + 5) % 16]);
        Ok(CountryWorld {
            countries: (0..n)
                .map(|i| {
                    let (a, b) = pair(i);
                    format!("{a}{b}land")
                })
                .collect(),
            capitals: (0..n)
                .map(|i| {
                    let (a, b) = pair(i);
                    format!("{b}{a}ton")
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.countries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.countries.is_empty()
    }

    /// The fixed non-name words used by the templates.
    pub fn function_words() -> Vec<&'static str> {
        vec![
            "the", "capital", "of", "is", ".", "city", "country", "a", "and", "its", "people",
            "from", "visit", "often", "in", "lies",
        ]
    }

    /// Prompt whose next word should be the capital of country `i`.
    pub fn prompt(&self, i: usize) -> String {
        format!("the capital of {} is", self.countries[i])
    }

    fn sentence(&self, i: usize, template: usize) -> String {
        let (c, k) = (&self.countries[i], &self.capitals[i]);
        match template {
            0 => format!("the capital of {c} is {k} ."),
            1 => format!("{k} is the capital of {c} ."),
            2 => format!("{c} is a country and its capital is {k} ."),
            3 => format!("people from {c} often visit {k} ."),
            _ => format!("the city {k} lies in {c} ."),
        }
    }

    /// `n` sentences, countries and templates drawn uniformly.
    pub fn corpus(&self, n: usize, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let i = rng.random_range(0..self.len());
            let t = rng.random_range(0..5);
            out.push(self.sentence(i, t));
        }
        out.join(" ")
    }
}
