//! Dataset index: a CSV of `id,age,split,path` rows.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agedist::{MAX_AGE, MIN_AGE};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub id: String,
    pub age: f64,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<VolumeRecord>,
}

impl Manifest {
    pub fn new(records: Vec<VolumeRecord>) -> Result<Self> {
        let m = Manifest { records };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for r in &self.records {
            if !(MIN_AGE as f64..=MAX_AGE as f64).contains(&r.age) {
                return Err(Error::Manifest(format!(
                    "record {} has age {} outside [{MIN_AGE}, {MAX_AGE}]",
                    r.id, r.age
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&VolumeRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn ages(&self, split: Split) -> Vec<f64> {
        self.split(split).iter().map(|r| r.age).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(["id", "age", "split", "path"])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                &r.age.to_string(),
                r.split.as_str(),
                &r.path.to_string_lossy(),
            ])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = r
            .headers()
            .map_err(|e| Error::Manifest(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "age", "split", "path"] {
            return Err(Error::Manifest(format!(
                "header must be id,age,split,path, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut records = Vec::new();
        for (line, row) in r.records().enumerate() {
            let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 2)))?;
            let age: f64 = row[1]
                .parse()
                .map_err(|_| Error::Manifest(format!("row {}: bad age {:?}", line + 2, &row[1])))?;
            records.push(VolumeRecord {
                id: row[0].to_string(),
                age,
                split: row[2].parse()?,
                path: PathBuf::from(&row[3]),
            });
        }
        Manifest::new(records)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_csv(&text)
    }
}

/// Split sizes from fractions by largest remainder; always sums to `n`.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Seeded shuffle of the records, then train/val/test tags by `fractions`.
pub fn split_dataset(m: &Manifest, fractions: [f64; 3], seed: u64) -> Result<Manifest> {
    let counts = split_counts(m.records.len(), fractions)?;
    let mut order: Vec<usize> = (0..m.records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = m.clone();
    for (pos, &i) in order.iter().enumerate() {
        out.records[i].split = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Re-tags the non-test records for fold `fold` of `k`: one seeded group
/// becomes validation and the rest training. Test records are untouched.
pub fn kfold(m: &Manifest, k: usize, fold: usize, seed: u64) -> Result<Manifest> {
    if k < 2 || fold >= k {
        return Err(Error::arg(format!("fold {fold} of {k} is invalid")));
    }
    let mut pool: Vec<usize> = (0..m.records.len())
        .filter(|&i| m.records[i].split != Split::Test)
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = m.clone();
    for (pos, &i) in pool.iter().enumerate() {
        out.records[i].split = if pos % k == fold {
            Split::Val
        } else {
            Split::Train
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| VolumeRecord {
                    id: format!("s{i:04}"),
                    age: 14.0 + (i % 84) as f64,
                    split: Split::Train,
                    path: PathBuf::from(format!("s{i:04}.vol")),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn eighty_ten_ten() {
        let m = split_dataset(&records(100), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(m.split(Split::Train).len(), 80);
        assert_eq!(m.split(Split::Val).len(), 10);
        assert_eq!(m.split(Split::Test).len(), 10);
        assert_eq!(m, split_dataset(&records(100), [0.8, 0.1, 0.1], 3).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let m = split_dataset(&records(7), [0.6, 0.2, 0.2], 1).unwrap();
        let text = m.to_csv().unwrap();
        assert!(text.starts_with("id,age,split,path\n"));
        assert!(!text.contains('\r'));
        assert_eq!(Manifest::from_csv(&text).unwrap(), m);
    }

    #[test]
    fn bad_manifests() {
        assert!(Manifest::from_csv("id,age\n").is_err());
        assert!(Manifest::from_csv("id,age,split,path\na,12,train,a.vol\n").is_err());
        assert!(Manifest::from_csv("id,age,split,path\na,20,dev,a.vol\n").is_err());
        assert!(
            Manifest::from_csv("id,age,split,path\na,20,train,a.vol\na,30,val,b.vol\n").is_err()
        );
    }

    #[test]
    fn kfold_keeps_test_fixed() {
        let m = split_dataset(&records(50), [0.8, 0.1, 0.1], 2).unwrap();
        let test: Vec<_> = m.split(Split::Test).iter().map(|r| r.id.clone()).collect();
        let mut val_total = 0;
        for fold in 0..4 {
            let f = kfold(&m, 4, fold, 9).unwrap();
            let t: Vec<_> = f.split(Split::Test).iter().map(|r| r.id.clone()).collect();
            assert_eq!(t, test);
            val_total += f.split(Split::Val).len();
        }
        assert_eq!(val_total, 45);
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 0usize..300, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
            let (a, b) = (a.min(1.0 - 1e-12), b * (1.0 - a));
            let f = [a, b, 1.0 - a - b];
            let counts = split_counts(n, f).unwrap();
            prop_assert_eq!(counts.iter().sum::<usize>(), n);
            for i in 0..3 {
                prop_assert!((counts[i] as f64 - f[i] * n as f64).abs() < 1.0 + 1e-9);
            }
            let m = split_dataset(&records(n), f, seed).unwrap();
            let total: usize = Split::ALL.iter().map(|&s| m.split(s).len()).sum();
            prop_assert_eq!(total, n);
        }
    }
}
