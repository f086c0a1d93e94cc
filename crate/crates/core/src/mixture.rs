//! Weighted interleaving of several record corpora.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WEIGHT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixtureError {
    #[error("weights sum to {sum}, expected 1 (tolerance {WEIGHT_TOLERANCE})")]
    WeightSumMismatch { sum: f64 },
    #[error("unknown corpus tag `{0}`")]
    UnknownTag(String),
    #[error("duplicate corpus tag `{0}`")]
    DuplicateTag(String),
    #[error("invalid weight {weight} for `{tag}`")]
    InvalidWeight { tag: String, weight: f64 },
    #[error("corpus `{0}` has positive weight but no records")]
    EmptyCorpus(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub tag: String,
    pub weight: f64,
}

/// Corpus tags with sampling weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureSpec {
    entries: Vec<MixtureEntry>,
}

impl MixtureSpec {
    pub fn new(entries: Vec<MixtureEntry>) -> Result<Self, MixtureError> {
        Self::check_entries(&entries)?;
        let sum: f64 = entries.iter().map(|e| e.weight).sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(MixtureError::WeightSumMismatch { sum });
        }
        Ok(MixtureSpec { entries })
    }

    /// Rescale arbitrary non-negative weights (percentages, counts) to sum to one.
    pub fn normalized(mut entries: Vec<MixtureEntry>) -> Result<Self, MixtureError> {
        Self::check_entries(&entries)?;
        let sum: f64 = entries.iter().map(|e| e.weight).sum();
        if sum <= 0.0 {
            return Err(MixtureError::WeightSumMismatch { sum });
        }
        for e in &mut entries {
            e.weight /= sum;
        }
        Self::new(entries)
    }

    fn check_entries(entries: &[MixtureEntry]) -> Result<(), MixtureError> {
        let mut seen = HashSet::new();
        for e in entries {
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(MixtureError::InvalidWeight {
                    tag: e.tag.clone(),
                    weight: e.weight,
                });
            }
            if !seen.insert(e.tag.as_str()) {
                return Err(MixtureError::DuplicateTag(e.tag.clone()));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[MixtureEntry] {
        &self.entries
    }

    pub fn weight_of(&self, tag: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.tag == tag).map(|e| e.weight)
    }
}

/// Stream of `(tag, record index)` draws.
///
/// Each draw picks a corpus with probability equal to its weight; inside a
/// corpus, indices walk a fixed seeded permutation and wrap around once it
/// is exhausted.
pub struct MixtureStream {
    tags: Vec<String>,
    perms: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    chooser: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    remaining: usize,
}

impl Iterator for MixtureStream {
    type Item = (String, usize);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let k = self.chooser.sample(&mut self.rng);
        let perm = &self.perms[k];
        let idx = perm[self.cursors[k] % perm.len()];
        self.cursors[k] += 1;
        Some((self.tags[k].clone(), idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for MixtureStream {}

pub fn build_mixture(
    corpora: &[(String, usize)],
    spec: &MixtureSpec,
    total: usize,
    seed: u64,
) -> Result<MixtureStream, MixtureError> {
    let mut tags = Vec::new();
    let mut weights = Vec::new();
    let mut perms = Vec::new();
    let mut perm_rng = ChaCha8Rng::seed_from_u64(seed);
    for entry in &spec.entries {
        let &(_, count) = corpora
            .iter()
            .find(|(t, _)| *t == entry.tag)
            .ok_or_else(|| MixtureError::UnknownTag(entry.tag.clone()))?;
        // Every spec corpus gets a permutation, even zero-weight ones, so that
        // adding a zero-weight corpus does not perturb the others.
        let mut perm: Vec<usize> = (0..count).collect();
        perm.shuffle(&mut perm_rng);
        if entry.weight == 0.0 {
            continue;
        }
        if count == 0 {
            return Err(MixtureError::EmptyCorpus(entry.tag.clone()));
        }
        tags.push(entry.tag.clone());
        weights.push(entry.weight);
        perms.push(perm);
    }
    let chooser = WeightedIndex::new(&weights)
        .map_err(|_| MixtureError::WeightSumMismatch { sum: weights.iter().sum() })?;
    Ok(MixtureStream {
        cursors: vec![0; tags.len()],
        tags,
        perms,
        chooser,
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6D69_7874)),
        remaining: total,
    })
}
