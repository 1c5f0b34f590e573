//! In-memory volume sets and the batches drawn from them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::container::read_volume;
use crate::dataset::manifest::{Manifest, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::augment::{augment, zscore, AugmentConfig};

/// Volumes of one split, held as raw `[D, H, W]` buffers.
#[derive(Clone, Debug, Default)]
pub struct VolumeSet {
    pub dims: [usize; 3],
    pub ids: Vec<String>,
    pub ages: Vec<f64>,
    pub volumes: Vec<Vec<f32>>,
}

impl VolumeSet {
    pub fn new(dims: [usize; 3]) -> Self {
        VolumeSet {
            dims,
            ..VolumeSet::default()
        }
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    /// Adds a `[1, D, H, W]` or `[D, H, W]` volume.
    pub fn push(&mut self, id: impl Into<String>, age: f64, volume: Tensor<f32>) -> Result<()> {
        let s = volume.shape();
        let ok = match s {
            [1, d, h, w] | [d, h, w] => [*d, *h, *w] == self.dims,
            _ => false,
        };
        if !ok {
            return Err(Error::dim(format!(
                "volume {s:?} does not match dataset extents {:?}",
                self.dims
            )));
        }
        self.ids.push(id.into());
        self.ages.push(age);
        self.volumes.push(volume.into_data());
        Ok(())
    }

    /// Loads every record of `split` from the directory holding `manifest`.
    pub fn load(dir: impl AsRef<Path>, manifest: &Manifest, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set: Option<VolumeSet> = None;
        for r in manifest.split(split) {
            let v = read_volume(dir.join(&r.path))?;
            let dims = match v.shape() {
                [1, d, h, w] | [d, h, w] => [*d, *h, *w],
                other => {
                    return Err(Error::dim(format!(
                        "volume {} has shape {other:?}, expected [1, D, H, W]",
                        r.id
                    )))
                }
            };
            set.get_or_insert_with(|| VolumeSet::new(dims))
                .push(r.id.clone(), r.age, v)?;
        }
        set.ok_or_else(|| Error::Manifest(format!("split {split} is empty")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Sequential,
    /// Shuffled by a generator seeded from `(seed, epoch)`.
    Shuffled {
        seed: u64,
        epoch: u64,
    },
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, D, H, W]`, z-scored per volume.
    pub x: Tensor<f32>,
    pub ages: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Mixes a seed with up to two counters into a generator seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn epoch_order(n: usize, order: Order) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Order::Shuffled { seed, epoch } = order {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, 0)));
    }
    idx
}

/// Batches over `set` in `order`, keeping the final short batch. Augmented
/// sets draw a per-volume generator from `(aug_seed, epoch, index)`.
pub struct BatchIter<'a> {
    set: &'a VolumeSet,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    augment: Option<(AugmentConfig, u64, u64)>,
}

impl<'a> BatchIter<'a> {
    pub fn new(set: &'a VolumeSet, batch_size: usize, order: Order) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        Ok(BatchIter {
            set,
            order: epoch_order(set.len(), order),
            batch_size,
            pos: 0,
            augment: None,
        })
    }

    pub fn with_augmentation(mut self, cfg: AugmentConfig, seed: u64, epoch: u64) -> Self {
        self.augment = Some((cfg, seed, epoch));
        self
    }

    fn prepare(&self, i: usize) -> Result<Vec<f32>> {
        let v = &self.set.volumes[i];
        match &self.augment {
            Some((cfg, seed, epoch)) => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(*seed, *epoch + 1, i as u64 + 1));
                Ok(zscore(&augment(v, self.set.dims, cfg, &mut rng)?))
            }
            None => Ok(zscore(v)),
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let [d, h, w] = self.set.dims;
        let mut data = Vec::with_capacity(indices.len() * d * h * w);
        for &i in &indices {
            match self.prepare(i) {
                Ok(v) => data.extend(v),
                Err(e) => return Some(Err(e)),
            }
        }
        let ages = indices.iter().map(|&i| self.set.ages[i]).collect();
        Some(Tensor::new(&[indices.len(), 1, d, h, w], data).map(|x| Batch { x, ages, indices }))
    }
}
