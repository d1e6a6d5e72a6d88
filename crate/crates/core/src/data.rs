//! Identity-labelled datasets, the synthetic cluster generator and the
//! `BMNDS1` binary format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "BMNDS1" | modality u8 | width u32 | height u32 | input_dim u32 | count u32
//! count x ( identity u32 | input_dim x f32 )
//! ```
//!
//! Identity ids must be dense from zero.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 6] = b"BMNDS1";
const HEADER_LEN: u64 = 6 + 1 + 4 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Modality {
    Vector,
    /// Single-channel image flattened row-major, `height` rows of `width` pixels.
    Image { width: u32, height: u32 },
}

impl Modality {
    fn tag(self) -> u8 {
        match self {
            Modality::Vector => 0,
            Modality::Image { .. } => 1,
        }
    }
}

/// Horizontal mirror for images, `(x, y) -> (width - x - 1, y)`; full
/// coordinate reversal for plain vectors. Both are involutions.
pub fn flip<T: Copy>(x: &[T], modality: Modality) -> Vec<T> {
    match modality {
        Modality::Vector => x.iter().rev().copied().collect(),
        Modality::Image { width, .. } => {
            let w = width as usize;
            x.chunks(w)
                .flat_map(|row| row.iter().rev().copied())
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub identity: u32,
    pub input: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modality: Modality,
    pub input_dim: usize,
    pub items: Vec<Item>,
    /// Set when every input lies in `[-1, 1]`.
    pub normalized: bool,
}

impl Dataset {
    pub fn new(modality: Modality, input_dim: usize, items: Vec<Item>) -> Result<Self> {
        if let Modality::Image { width, height } = modality {
            if (width as usize) * (height as usize) != input_dim {
                return Err(Error::Config(format!(
                    "image {width}x{height} does not match input_dim {input_dim}"
                )));
            }
        }
        if let Some((i, item)) = items.iter().enumerate().find(|(_, it)| it.input.len() != input_dim) {
            return Err(Error::shape(
                "dataset",
                format!("item {i} has {} values, expected {input_dim}", item.input.len()),
            ));
        }
        let normalized = items
            .iter()
            .all(|it| it.input.iter().all(|v| (-1.0..=1.0).contains(v)));
        let ds = Self {
            modality,
            input_dim,
            items,
            normalized,
        };
        ds.check_dense_ids()?;
        Ok(ds)
    }

    fn check_dense_ids(&self) -> Result<()> {
        let ids: BTreeSet<u32> = self.items.iter().map(|it| it.identity).collect();
        for (expected, id) in ids.iter().enumerate() {
            if *id as usize != expected {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("identity ids are not dense: missing id {expected}"),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn identity_count(&self) -> usize {
        self.items
            .iter()
            .map(|it| it.identity as usize + 1)
            .max()
            .unwrap_or(0)
    }

    /// Item indices grouped by identity, indexed by identity id.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.identity_count()];
        for (i, it) in self.items.iter().enumerate() {
            groups[it.identity as usize].push(i);
        }
        groups
    }

    /// Input of item `index` as `f64`, flipped when requested.
    pub fn input(&self, index: usize, flipped: bool) -> Vec<f64> {
        let raw = &self.items[index].input;
        if flipped {
            flip(raw, self.modality).into_iter().map(f64::from).collect()
        } else {
            raw.iter().map(|&v| f64::from(v)).collect()
        }
    }

    /// Subset containing the given identities, relabelled densely in the given order.
    pub fn subset(&self, identities: &[u32]) -> Result<Dataset> {
        let mut items = Vec::new();
        for (new_id, &old) in identities.iter().enumerate() {
            items.extend(
                self.items
                    .iter()
                    .filter(|it| it.identity == old)
                    .map(|it| Item {
                        identity: new_id as u32,
                        input: it.input.clone(),
                    }),
            );
        }
        Dataset::new(self.modality, self.input_dim, items)
    }

    /// Splits off `held_out` randomly chosen identities as a disjoint test set.
    pub fn split_identities(&self, held_out: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let n = self.identity_count();
        if held_out >= n {
            return Err(Error::DatasetInsufficient(format!(
                "cannot hold out {held_out} of {n} identities"
            )));
        }
        let mut ids: Vec<u32> = (0..n as u32).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (test, train) = ids.split_at(held_out);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (width, height) = match self.modality {
            Modality::Vector => (0, 0),
            Modality::Image { width, height } => (width, height),
        };
        let mut out = Vec::with_capacity(HEADER_LEN as usize + self.items.len() * (4 + 4 * self.input_dim));
        out.extend_from_slice(DATASET_MAGIC);
        out.push(self.modality.tag());
        out.extend_from_slice(&width.to_le_bytes());
        out.extend_from_slice(&height.to_le_bytes());
        out.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        for item in &self.items {
            out.extend_from_slice(&item.identity.to_le_bytes());
            for v in &item.input {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(6, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {:?}, expected \"BMNDS1\"", String::from_utf8_lossy(magic)),
            });
        }
        let tag_offset = r.offset();
        let tag = r.u8("modality tag")?;
        let width = r.u32("width")?;
        let height = r.u32("height")?;
        let input_dim = r.u32("input_dim")? as usize;
        let count = r.u32("item count")? as usize;
        let modality = match tag {
            0 => Modality::Vector,
            1 => Modality::Image { width, height },
            other => {
                return Err(Error::Format {
                    offset: tag_offset,
                    detail: format!("unknown modality tag {other}"),
                })
            }
        };
        let item_len = 4 + 4 * input_dim as u64;
        let expected = HEADER_LEN + count as u64 * item_len;
        if bytes.len() as u64 != expected {
            let offset = if (bytes.len() as u64) < expected {
                HEADER_LEN + ((bytes.len() as u64 - HEADER_LEN) / item_len) * item_len
            } else {
                expected
            };
            return Err(Error::Format {
                offset,
                detail: format!(
                    "expected {expected} bytes for {count} items of dimension {input_dim}, file has {}",
                    bytes.len()
                ),
            });
        }
        let mut items = Vec::with_capacity(count);
        for i in 0..count {
            let identity = r.u32("identity")?;
            let mut input = Vec::with_capacity(input_dim);
            for _ in 0..input_dim {
                input.push(r.f32(&format!("item {i}"))?);
            }
            items.push(Item { identity, input });
        }
        Dataset::new(modality, input_dim, items)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Gaussian identity clusters: centres `~ N(0, sigma_b^2 I)`, items `centre + N(0, sigma_w^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub input_dim: usize,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 50 identities x 20 items in 16 dimensions, `sigma_w = 0.1`, `sigma_b = 1`, seed 7.
    pub fn benchmark() -> Self {
        Self {
            n_identities: 50,
            images_per_identity: 20,
            input_dim: 16,
            sigma_w: 0.1,
            sigma_b: 1.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.images_per_identity == 0 || self.input_dim == 0 {
            return Err(Error::Config("synthetic counts must all be >= 1".into()));
        }
        if !(self.sigma_w >= 0.0 && self.sigma_w < self.sigma_b) {
            return Err(Error::Config(format!(
                "need 0 <= sigma_w < sigma_b, got sigma_w = {} and sigma_b = {}",
                self.sigma_w, self.sigma_b
            )));
        }
        Ok(())
    }
}

/// Draws the clusters and rescales everything by the global max-abs into `[-1, 1]`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let between = Normal::new(0.0, spec.sigma_b).expect("valid sigma_b");
    let within = Normal::new(0.0, spec.sigma_w).expect("valid sigma_w");
    let mut raw: Vec<(u32, Vec<f64>)> = Vec::with_capacity(spec.n_identities * spec.images_per_identity);
    for id in 0..spec.n_identities {
        let centre: Vec<f64> = (0..spec.input_dim).map(|_| between.sample(&mut rng)).collect();
        for _ in 0..spec.images_per_identity {
            let x = centre.iter().map(|c| c + within.sample(&mut rng)).collect();
            raw.push((id as u32, x));
        }
    }
    let max_abs = raw
        .iter()
        .flat_map(|(_, x)| x.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max_abs > 0.0 { 1.0 / max_abs } else { 1.0 };
    let items = raw
        .into_iter()
        .map(|(identity, x)| Item {
            identity,
            input: x.iter().map(|v| ((v * scale) as f32).clamp(-1.0, 1.0)).collect(),
        })
        .collect();
    Dataset::new(Modality::Vector, spec.input_dim, items)
}
