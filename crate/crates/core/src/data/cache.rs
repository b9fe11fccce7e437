//! On-disk dataset format: one JSONL file per client plus `meta.json`.
//! Floats are written in shortest round-trip decimal form, so a reload is
//! bit-exact.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClientDataset, FederatedDataset, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_clients: usize,
    num_classes: usize,
    input_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    split: Split,
    label: usize,
    x: Vec<f64>,
}

fn client_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("client_{id:05}.jsonl"))
}

pub fn save_dataset(dir: &Path, ds: &FederatedDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in &ds.clients {
        let path = client_file(dir, c.client_id);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let lines = c
            .train
            .iter()
            .map(|s| (Split::Train, s))
            .chain(c.test.iter().map(|s| (Split::Test, s)));
        for (split, s) in lines {
            let line = Line {
                split,
                label: s.label,
                x: s.x.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let meta = Meta {
        num_clients: ds.num_clients(),
        num_classes: ds.num_classes,
        input_dim: ds.input_dim,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<FederatedDataset> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let mut clients = Vec::with_capacity(meta.num_clients);
    for id in 0..meta.num_clients {
        let path = client_file(dir, id);
        let reader = BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)?;
            let s = Sample::new(parsed.x, parsed.label);
            match parsed.split {
                Split::Train => train.push(s),
                Split::Test => test.push(s),
            }
        }
        clients.push(ClientDataset {
            client_id: id,
            train,
            test,
        });
    }
    FederatedDataset::new(clients, meta.num_classes, meta.input_dim)
}

/// Content-addressed store of built datasets. The key is the SHA-256 of the
/// canonical JSON of whatever describes the dataset (partition spec, source
/// files).
#[derive(Debug, Clone)]
pub struct DatasetCache {
    root: PathBuf,
}

impl DatasetCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetCache { root: root.into() }
    }

    pub fn key<T: Serialize>(descriptor: &T) -> Result<String> {
        let canonical = serde_json::to_vec(descriptor)?;
        Ok(hex::encode(Sha256::digest(&canonical)))
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path_for(key).join("meta.json").is_file()
    }

    pub fn get_or_build<T, F>(&self, descriptor: &T, build: F) -> Result<FederatedDataset>
    where
        T: Serialize,
        F: FnOnce() -> Result<FederatedDataset>,
    {
        let key = Self::key(descriptor)?;
        let dir = self.path_for(&key);
        if self.contains(&key) {
            info!("dataset cache hit {key}");
            return load_dataset(&dir);
        }
        let ds = build()?;
        // write to a scratch dir first so a crash never leaves a half entry
        let tmp = self.root.join(format!(".{key}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        save_dataset(&tmp, &ds)?;
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        info!("dataset cached as {key}");
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, PartitionScheme, PartitionSpec};

    #[test]
    fn jsonl_round_trip_is_exact() {
        let ds = gen_synthetic(1.0, 1.0, &[6, 9, 4], 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn cache_hits_and_misses_by_content() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DatasetCache::new(dir.path());
        let mut spec = PartitionSpec {
            scheme: PartitionScheme::Synthetic { phi1: 1.0, phi2: 1.0 },
            num_clients: 3,
            total_samples: 30,
            power_law_gamma: 1.0,
            min_per_client: 2,
            seed: 1,
        };
        let mut builds = 0;
        let a = cache
            .get_or_build(&spec, || {
                builds += 1;
                crate::data::build_dataset(&spec, None)
            })
            .unwrap();
        let b = cache
            .get_or_build(&spec, || {
                builds += 1;
                crate::data::build_dataset(&spec, None)
            })
            .unwrap();
        assert_eq!(builds, 1);
        assert_eq!(a, b);
        let k1 = DatasetCache::key(&spec).unwrap();
        spec.seed = 2;
        assert_ne!(k1, DatasetCache::key(&spec).unwrap());
        assert!(!cache.contains(&DatasetCache::key(&spec).unwrap()));
    }
}
