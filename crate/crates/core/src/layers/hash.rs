use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed token-id → expert assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashRouter {
    mapping: Vec<usize>,
    experts: usize,
}

impl HashRouter {
    /// Seeded permutation of the vocabulary followed by `mod K`.
    pub fn build(vocab: usize, experts: usize, seed: u64) -> Result<Self> {
        Self::check(vocab, experts)?;
        let mut perm: Vec<usize> = (0..vocab).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(HashRouter {
            mapping: perm.into_iter().map(|p| p % experts).collect(),
            experts,
        })
    }

    /// Plain `t mod K` with no permutation.
    pub fn modulo(vocab: usize, experts: usize) -> Result<Self> {
        Self::check(vocab, experts)?;
        Ok(HashRouter {
            mapping: (0..vocab).map(|t| t % experts).collect(),
            experts,
        })
    }

    /// Explicit mapping; rejected unless bucket sizes differ by at most one.
    pub fn from_mapping(mapping: Vec<usize>, experts: usize) -> Result<Self> {
        Self::check(mapping.len(), experts)?;
        if let Some(&bad) = mapping.iter().find(|&&e| e >= experts) {
            return Err(Error::Index {
                index: bad,
                bound: experts,
            });
        }
        let router = HashRouter { mapping, experts };
        let sizes = router.bucket_sizes();
        let (lo, hi) = (sizes.iter().min().copied(), sizes.iter().max().copied());
        if hi.unwrap_or(0) - lo.unwrap_or(0) > 1 {
            return Err(Error::config(
                "hash mapping is not balanced within one token",
            ));
        }
        Ok(router)
    }

    fn check(vocab: usize, experts: usize) -> Result<()> {
        if experts == 0 {
            return Err(Error::config("hash router needs at least one expert"));
        }
        if experts > vocab {
            return Err(Error::config(format!(
                "{experts} experts exceed vocabulary of {vocab}"
            )));
        }
        Ok(())
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn vocab(&self) -> usize {
        self.mapping.len()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn route(&self, token: usize) -> Result<usize> {
        self.mapping.get(token).copied().ok_or(Error::Index {
            index: token,
            bound: self.mapping.len(),
        })
    }

    pub fn bucket_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.experts];
        for &e in &self.mapping {
            sizes[e] += 1;
        }
        sizes
    }
}
