//! Difficult-pair selection and balanced batch assembly.
//!
//! A pair is difficult when its latent point sits at least two standard
//! deviations (in the infinity norm) away from the mean of its own class
//! target. Candidates are scored in eval mode under a frozen parameter
//! snapshot. A batch is emitted only once `b/2` difficult pairs of each class
//! have been collected from one candidate window. Otherwise the whole window
//! is discarded.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::target::{PairLabel, TargetSpec};

/// Where a candidate came from: two dataset items and whether each was flipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairOrigin {
    pub item1: usize,
    pub item2: usize,
    pub flip1: bool,
    pub flip2: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub id1: u32,
    pub id2: u32,
    pub label: PairLabel,
    pub origin: PairOrigin,
}

impl SamplePair {
    pub fn from_dataset(dataset: &Dataset, origin: PairOrigin) -> Result<Self> {
        if origin.item1 == origin.item2 {
            return Err(Error::Input(format!("self-pair of item {}", origin.item1)));
        }
        let n = dataset.len();
        if origin.item1 >= n || origin.item2 >= n {
            return Err(Error::Input(format!(
                "pair ({}, {}) out of range for {n} items",
                origin.item1, origin.item2
            )));
        }
        let id1 = dataset.items[origin.item1].identity;
        let id2 = dataset.items[origin.item2].identity;
        Ok(Self {
            x1: dataset.input(origin.item1, origin.flip1),
            x2: dataset.input(origin.item2, origin.flip2),
            id1,
            id2,
            label: if id1 == id2 {
                PairLabel::Matching
            } else {
                PairLabel::NonMatching
            },
            origin,
        })
    }

    pub fn is_matching(&self) -> bool {
        self.label.is_matching()
    }
}

/// Stacks the two sides of a slice of pairs into `n x input_dim` matrices.
pub fn stack_pairs<'a>(pairs: impl IntoIterator<Item = &'a SamplePair>) -> Result<(Matrix, Matrix)> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut n = 0;
    let mut dim = None;
    for p in pairs {
        let d = *dim.get_or_insert(p.x1.len());
        if p.x1.len() != d || p.x2.len() != d {
            return Err(Error::shape("stack_pairs", "pairs have mixed input sizes"));
        }
        left.extend_from_slice(&p.x1);
        right.extend_from_slice(&p.x2);
        n += 1;
    }
    let d = dim.unwrap_or(0);
    Ok((Matrix::new(n, d, left)?, Matrix::new(n, d, right)?))
}

/// `||z - mu 1||_inf >= 2 sigma` for the target of the pair's own class.
pub fn is_difficult(z: &[f64], label: PairLabel, target: &TargetSpec) -> bool {
    let side = target.side(label);
    let dev = z.iter().fold(0.0f64, |m, v| m.max((v - side.mu).abs()));
    dev >= 2.0 * side.sigma
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub matching: Vec<SamplePair>,
    pub non_matching: Vec<SamplePair>,
    pub b: usize,
}

impl PairBatch {
    pub fn iter(&self) -> impl Iterator<Item = &SamplePair> {
        self.matching.iter().chain(&self.non_matching)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MiningStats {
    pub seen_m: usize,
    pub seen_n: usize,
    pub difficult_m: usize,
    pub difficult_n: usize,
}

impl MiningStats {
    pub fn seen(&self) -> usize {
        self.seen_m + self.seen_n
    }

    pub fn difficult_fraction_m(&self) -> f64 {
        ratio(self.difficult_m, self.seen_m)
    }

    pub fn difficult_fraction_n(&self) -> f64 {
        ratio(self.difficult_n, self.seen_n)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FillOutcome {
    /// Batch assembled; `consumed` candidates from the front of the pool were scanned.
    Batch {
        batch: PairBatch,
        stats: MiningStats,
        consumed: usize,
    },
    /// The pool ran out before both quotas were met. The whole pool is spent.
    Discard(MiningStats),
}

/// Candidates are forwarded in chunks of this many pairs.
const SCORE_CHUNK: usize = 64;

fn check_batch_size(b: usize) -> Result<()> {
    if b < 4 || !b.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "batch size must be even and >= 4 (two rows per class), got {b}"
        )));
    }
    Ok(())
}

/// Latent points for a slice of pairs under `params` in eval mode.
pub fn score_pairs(pairs: &[SamplePair], params: &ModelParams) -> Result<Matrix> {
    let (x1, x2) = stack_pairs(pairs)?;
    params.latent(&x1, &x2)
}

/// Scans a candidate pool in order and keeps the first `b/2` difficult pairs
/// of each class.
///
/// `params` is used read-only in eval mode, so the selection can be
/// re-checked against the same snapshot afterwards.
pub fn fill_batch(pool: &[SamplePair], params: &ModelParams, target: &TargetSpec, b: usize) -> Result<FillOutcome> {
    check_batch_size(b)?;
    let quota = b / 2;
    let mut matching = Vec::with_capacity(quota);
    let mut non_matching = Vec::with_capacity(quota);
    let mut stats = MiningStats::default();

    for (chunk_index, chunk) in pool.chunks(SCORE_CHUNK).enumerate() {
        let z = score_pairs(chunk, params)?;
        for (row, pair) in chunk.iter().enumerate() {
            let difficult = is_difficult(z.row(row), pair.label, target);
            let (seen, hits, bucket) = match pair.label {
                PairLabel::Matching => (&mut stats.seen_m, &mut stats.difficult_m, &mut matching),
                PairLabel::NonMatching => (&mut stats.seen_n, &mut stats.difficult_n, &mut non_matching),
            };
            *seen += 1;
            if difficult {
                *hits += 1;
                if bucket.len() < quota {
                    bucket.push(pair.clone());
                }
            }
            if matching.len() == quota && non_matching.len() == quota {
                return Ok(FillOutcome::Batch {
                    batch: PairBatch {
                        matching,
                        non_matching,
                        b,
                    },
                    stats,
                    consumed: chunk_index * SCORE_CHUNK + row + 1,
                });
            }
        }
    }
    Ok(FillOutcome::Discard(stats))
}

/// Largest `||z - mu 1||_inf` relative to `sigma` for the pair's own class.
pub fn deviation(z: &[f64], label: PairLabel, target: &TargetSpec) -> f64 {
    let side = target.side(label);
    z.iter().fold(0.0f64, |m, v| m.max((v - side.mu).abs())) / side.sigma
}

/// Relaxed fill: the `b/2` candidates of each class that lie farthest from
/// their class mean, difficult or not. Ties keep pool order.
///
/// Returns `None` when the pool holds fewer than `b/2` candidates of a class.
pub fn fill_hardest(pool: &[SamplePair], params: &ModelParams, target: &TargetSpec, b: usize) -> Result<Option<(PairBatch, MiningStats)>> {
    check_batch_size(b)?;
    let quota = b / 2;
    let mut stats = MiningStats::default();
    let mut ranked_m = Vec::new();
    let mut ranked_n = Vec::new();
    for (chunk_index, chunk) in pool.chunks(SCORE_CHUNK).enumerate() {
        let z = score_pairs(chunk, params)?;
        for (row, pair) in chunk.iter().enumerate() {
            let dev = deviation(z.row(row), pair.label, target);
            let hard = is_difficult(z.row(row), pair.label, target) as usize;
            let index = chunk_index * SCORE_CHUNK + row;
            match pair.label {
                PairLabel::Matching => {
                    stats.seen_m += 1;
                    stats.difficult_m += hard;
                    ranked_m.push((dev, index));
                }
                PairLabel::NonMatching => {
                    stats.seen_n += 1;
                    stats.difficult_n += hard;
                    ranked_n.push((dev, index));
                }
            }
        }
    }
    if ranked_m.len() < quota || ranked_n.len() < quota {
        return Ok(None);
    }
    let pick = |mut ranked: Vec<(f64, usize)>| -> Vec<SamplePair> {
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked[..quota].iter().map(|&(_, i)| pool[i].clone()).collect()
    };
    Ok(Some((
        PairBatch {
            matching: pick(ranked_m),
            non_matching: pick(ranked_n),
            b,
        },
        stats,
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochConfig {
    /// Identities drawn per epoch (720 in the full-scale setting).
    #[serde(default = "default_identities")]
    pub identities_per_epoch: usize,
    #[serde(default = "default_min_images")]
    pub min_images: usize,
    /// Cap on candidates per class before flip augmentation.
    #[serde(default = "default_pair_cap")]
    pub max_pairs_per_class: usize,
    /// Adds one randomly flipped copy of every candidate.
    #[serde(default = "default_true")]
    pub flip_augment: bool,
}

fn default_identities() -> usize {
    50
}
fn default_min_images() -> usize {
    5
}
fn default_pair_cap() -> usize {
    2000
}
fn default_true() -> bool {
    true
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            identities_per_epoch: default_identities(),
            min_images: default_min_images(),
            max_pairs_per_class: default_pair_cap(),
            flip_augment: true,
        }
    }
}

/// Identities that have at least `min_images` items, with their item indices.
pub fn eligible_identities(dataset: &Dataset, min_images: usize) -> Vec<(u32, Vec<usize>)> {
    dataset
        .by_identity()
        .into_iter()
        .enumerate()
        .filter_map(|(id, items)| {
            if items.len() >= min_images.max(1) {
                Some((id as u32, items))
            } else {
                log::warn!(
                    "identity {id} has {} items (< {min_images}); excluded from sampling",
                    items.len()
                );
                None
            }
        })
        .collect()
}

/// Builds one epoch's shuffled candidate stream.
///
/// Matching candidates are unordered item pairs within an identity,
/// non-matching candidates are unordered pairs across identities. Either
/// class is subsampled without replacement when it exceeds the cap.
pub fn sample_epoch(dataset: &Dataset, config: &EpochConfig, rng: &mut ChaCha8Rng) -> Result<Vec<SamplePair>> {
    let mut eligible = eligible_identities(dataset, config.min_images);
    eligible.shuffle(rng);
    eligible.truncate(config.identities_per_epoch);
    eligible.sort_by_key(|(id, _)| *id);

    let mut matching: Vec<(usize, usize)> = Vec::new();
    for (_, items) in &eligible {
        for (i, &a) in items.iter().enumerate() {
            for &b in &items[i + 1..] {
                matching.push((a, b));
            }
        }
    }
    if matching.len() > config.max_pairs_per_class {
        matching = matching
            .choose_multiple(rng, config.max_pairs_per_class)
            .copied()
            .collect();
    }

    let sizes: Vec<usize> = eligible.iter().map(|(_, v)| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let cross_count = (total * total - sizes.iter().map(|s| s * s).sum::<usize>()) / 2;
    let mut non_matching: Vec<(usize, usize)> = Vec::new();
    if cross_count <= config.max_pairs_per_class {
        for (gi, (_, a_items)) in eligible.iter().enumerate() {
            for (_, b_items) in &eligible[gi + 1..] {
                for &a in a_items {
                    for &b in b_items {
                        non_matching.push((a, b));
                    }
                }
            }
        }
    } else {
        let pool: Vec<usize> = eligible.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let mut seen = HashSet::new();
        while non_matching.len() < config.max_pairs_per_class {
            let a = *pool.choose(rng).expect("non-empty pool");
            let b = *pool.choose(rng).expect("non-empty pool");
            if dataset.items[a].identity == dataset.items[b].identity {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if seen.insert(key) {
                non_matching.push(key);
            }
        }
    }

    let mut origins = Vec::with_capacity(2 * (matching.len() + non_matching.len()));
    for (a, b) in matching.into_iter().chain(non_matching) {
        let (a, b) = if rng.random::<bool>() { (a, b) } else { (b, a) };
        origins.push(PairOrigin {
            item1: a,
            item2: b,
            flip1: false,
            flip2: false,
        });
        if config.flip_augment {
            let state = rng.random_range(1..4u8);
            origins.push(PairOrigin {
                item1: a,
                item2: b,
                flip1: state & 1 != 0,
                flip2: state & 2 != 0,
            });
        }
    }
    origins.shuffle(rng);
    origins
        .into_iter()
        .map(|o| SamplePair::from_dataset(dataset, o))
        .collect()
}
