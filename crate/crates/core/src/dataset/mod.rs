//! Phantom datasets: generation, the on-disk volume container, the CSV
//! manifest, splits and batching.

pub mod batches;
pub mod container;
pub mod manifest;
pub mod phantom;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use batches::{derive_seed, Batch, BatchIter, Order, VolumeSet};
pub use container::{read_volume, write_volume};
pub use manifest::{
    kfold, split_counts, split_dataset, Manifest, Split, VolumeRecord, MANIFEST_FILE,
};
pub use phantom::{gen_phantom, PhantomParams};

use crate::agedist::{MAX_AGE, MIN_AGE};
use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Ages uniform on `[14, 97]` from a generator seeded with `seed`.
pub fn sample_ages(count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    (0..count)
        .map(|_| rng.random_range(MIN_AGE as f64..=MAX_AGE as f64))
        .collect()
}

/// Writes `count` phantoms and their manifest into `dir`.
pub fn generate_dataset(
    dir: impl AsRef<Path>,
    count: usize,
    params: &PhantomParams,
    fractions: [f64; 3],
) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ages = sample_ages(count, params.seed);
    let mut records = Vec::with_capacity(count);
    for (i, &age) in ages.iter().enumerate() {
        let id = format!("phantom_{i:05}");
        let path = PathBuf::from(format!("{id}.vol"));
        let p = PhantomParams {
            seed: derive_seed(params.seed, i as u64 + 1, 1),
            ..params.clone()
        };
        write_volume(&gen_phantom(age, &p)?, dir.join(&path))?;
        records.push(VolumeRecord {
            id,
            age,
            split: Split::Train,
            path,
        });
    }
    let manifest = split_dataset(&Manifest::new(records)?, fractions, params.seed)?;
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// In-memory phantoms split like [`generate_dataset`], without touching disk.
pub fn generate_in_memory(
    count: usize,
    params: &PhantomParams,
    fractions: [f64; 3],
) -> Result<[VolumeSet; 3]> {
    let ages = sample_ages(count, params.seed);
    let records: Vec<VolumeRecord> = ages
        .iter()
        .enumerate()
        .map(|(i, &age)| VolumeRecord {
            id: format!("phantom_{i:05}"),
            age,
            split: Split::Train,
            path: PathBuf::new(),
        })
        .collect();
    let manifest = split_dataset(&Manifest::new(records)?, fractions, params.seed)?;
    let mut sets = [(); 3].map(|_| VolumeSet::new(params.shape));
    for (i, r) in manifest.records.iter().enumerate() {
        let p = PhantomParams {
            seed: derive_seed(params.seed, i as u64 + 1, 1),
            ..params.clone()
        };
        let slot = Split::ALL
            .iter()
            .position(|&s| s == r.split)
            .expect("known split");
        sets[slot].push(r.id.clone(), r.age, gen_phantom(r.age, &p)?)?;
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_and_memory_agree() {
        let dir = tempfile::tempdir().unwrap();
        let params = PhantomParams {
            shape: [4, 4, 4],
            noise_sigma: 0.05,
            seed: 11,
        };
        let m = generate_dataset(dir.path(), 10, &params, DEFAULT_FRACTIONS).unwrap();
        assert_eq!(Manifest::read(dir.path().join(MANIFEST_FILE)).unwrap(), m);
        let mem = generate_in_memory(10, &params, DEFAULT_FRACTIONS).unwrap();
        for (slot, split) in Split::ALL.iter().enumerate() {
            let disk = VolumeSet::load(dir.path(), &m, *split).unwrap();
            assert_eq!(disk.ids, mem[slot].ids);
            assert_eq!(disk.volumes, mem[slot].volumes);
        }
    }

    #[test]
    fn ages_in_range() {
        assert!(sample_ages(1000, 3)
            .iter()
            .all(|a| (14.0..=97.0).contains(a)));
    }
}
