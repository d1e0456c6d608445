//! Seeded synthetic knowledge graphs with category-patterned relations.
//!
//! Entity `i` belongs to category `i mod n_categories`. Each relation draws a
//! source and a target category; a `1 - noise_rate` share of its triples link a
//! source-category head to a target-category tail, the rest are uniform over all
//! entity pairs. Triples are distinct within a relation.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{CategoryMap, Split, Triple, TripleStore, Vocab};
use crate::error::{KgError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_categories: usize,
    pub n_relations: usize,
    pub triples_per_relation: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: 200,
            n_categories: 4,
            n_relations: 6,
            triples_per_relation: 300,
            noise_rate: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories < 2 {
            return Err(KgError::Config("n_categories must be at least 2".into()));
        }
        if self.n_entities < self.n_categories {
            return Err(KgError::Config("fewer entities than categories".into()));
        }
        if self.n_relations == 0 {
            return Err(KgError::Config("n_relations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(KgError::Config(format!(
                "noise_rate {} outside [0, 1)",
                self.noise_rate
            )));
        }
        let all_pairs = self.n_entities * self.n_entities;
        if self.triples_per_relation > all_pairs {
            return Err(KgError::Config(format!(
                "{} triples per relation exceed {} distinct entity pairs",
                self.triples_per_relation, all_pairs
            )));
        }
        let smallest = self.n_entities / self.n_categories;
        if self.clean_per_relation() > smallest * smallest {
            return Err(KgError::Config(format!(
                "{} patterned triples per relation exceed {} pairs between two categories",
                self.clean_per_relation(),
                smallest * smallest
            )));
        }
        Ok(())
    }

    fn noisy_per_relation(&self) -> usize {
        (self.noise_rate * self.triples_per_relation as f64).round() as usize
    }

    fn clean_per_relation(&self) -> usize {
        self.triples_per_relation - self.noisy_per_relation()
    }

    /// `(train, valid, test)` sizes produced by the 80/10/10 split.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_relations * self.triples_per_relation;
        let train = n * 8 / 10;
        let valid = n / 10;
        (train, valid, n - train - valid)
    }
}

/// Source and target category of each synthetic relation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationPattern {
    pub source: usize,
    pub target: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticKg {
    pub store: TripleStore,
    pub categories: CategoryMap,
    pub patterns: Vec<RelationPattern>,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticKg> {
    config.validate()?;
    let mut rng = rng::seeded(config.seed);
    let n = config.n_entities;
    let m = config.n_categories;

    let mut vocab = Vocab::new();
    for e in 0..n {
        vocab.intern_entity(&format!("e{e}"));
    }
    for r in 0..config.n_relations {
        vocab.intern_relation(&format!("r{r}"));
    }
    let labels: Vec<Option<usize>> = (0..n).map(|e| Some(e % m)).collect();
    let members: Vec<Vec<usize>> = (0..m).map(|c| (c..n).step_by(m).collect()).collect();

    let mut patterns = Vec::with_capacity(config.n_relations);
    let mut triples = Vec::with_capacity(config.n_relations * config.triples_per_relation);
    for r in 0..config.n_relations {
        let pattern = RelationPattern {
            source: rng.gen_range(0..m),
            target: rng.gen_range(0..m),
        };
        let mut used = HashSet::new();
        let src = &members[pattern.source];
        let tgt = &members[pattern.target];
        while used.len() < config.clean_per_relation() {
            let h = src[rng.gen_range(0..src.len())];
            let t = tgt[rng.gen_range(0..tgt.len())];
            if used.insert((h, t)) {
                triples.push(Triple::new(h, r, t));
            }
        }
        while used.len() < config.triples_per_relation {
            let h = rng.gen_range(0..n);
            let t = rng.gen_range(0..n);
            if used.insert((h, t)) {
                triples.push(Triple::new(h, r, t));
            }
        }
        patterns.push(pattern);
    }

    triples.shuffle(&mut rng);
    let (n_train, n_valid, _) = config.split_sizes();
    let test = triples.split_off(n_train + n_valid);
    let valid = triples.split_off(n_train);
    let store = TripleStore::new(triples, valid, test, vocab)?;
    Ok(SyntheticKg {
        store,
        categories: CategoryMap::from_labels(labels, m),
        patterns,
    })
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `categories.tsv` into `dir`.
pub fn write_synthetic(kg: &SyntheticKg, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| KgError::io(dir, e))?;
    kg.store.write_split(Split::Train, &dir.join("train.tsv"))?;
    kg.store.write_split(Split::Valid, &dir.join("valid.tsv"))?;
    kg.store.write_split(Split::Test, &dir.join("test.tsv"))?;
    kg.categories.write(&kg.store.vocab, &dir.join("categories.tsv"))
}
