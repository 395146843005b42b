use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, DatasetMeta, Trajectory};
use crate::container;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "LATENTLAB-DATASET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub horizon: usize,
    pub pool_seed: u64,
}

/// Everything in a dataset file except the payload. Payload order per
/// trajectory: observations, actions, rewards, endo states, distractor
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub meta: DatasetMeta,
    pub label_mask: Vec<bool>,
    pub trajectories: Vec<TrajectoryHeader>,
}

impl DatasetHeader {
    fn lengths(&self, tr: &TrajectoryHeader) -> [usize; 5] {
        let h = tr.horizon;
        [
            (h + 1) * self.meta.d_obs,
            2 * h,
            h,
            (h + 1) * 6,
            (h + 1) * self.meta.distractor_dim(),
        ]
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let header = DatasetHeader {
        meta: ds.meta.clone(),
        label_mask: ds.label_mask.clone(),
        trajectories: ds
            .trajectories
            .iter()
            .map(|t| TrajectoryHeader { horizon: t.horizon, pool_seed: t.pool_seed })
            .collect(),
    };
    let mut payload = Vec::new();
    for t in &ds.trajectories {
        for part in [&t.observations, &t.actions, &t.rewards, &t.endo, &t.distractor] {
            payload.extend_from_slice(part);
        }
    }
    container::write(path, DATASET_MAGIC, DATASET_VERSION, &header, &payload)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, payload): (DatasetHeader, Vec<f64>) =
        container::read(path, DATASET_MAGIC, DATASET_VERSION)?;
    let expected: usize = header.trajectories.iter().map(|t| header.lengths(t).iter().sum::<usize>()).sum();
    if expected != payload.len() || header.label_mask.len() != header.trajectories.len() {
        return Err(Error::Format(format!(
            "dataset payload has {} values, header implies {expected}",
            payload.len()
        )));
    }
    let mut rest = payload.as_slice();
    let mut take = |n: usize| {
        let (head, tail) = rest.split_at(n);
        rest = tail;
        head.to_vec()
    };
    let trajectories = header
        .trajectories
        .iter()
        .map(|th| {
            let [o, a, r, e, d] = header.lengths(th);
            Trajectory {
                horizon: th.horizon,
                pool_seed: th.pool_seed,
                observations: take(o),
                actions: take(a),
                rewards: take(r),
                endo: take(e),
                distractor: take(d),
            }
        })
        .collect();
    Ok(Dataset { meta: header.meta, trajectories, label_mask: header.label_mask })
}

/// Reads metadata, label mask and per-trajectory sizes without the payload.
pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader> {
    container::read_header(path, DATASET_MAGIC, DATASET_VERSION)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distsuite::dataset::{collect_dataset, CollectConfig};

    fn tiny() -> Dataset {
        collect_dataset(&CollectConfig { n_traj: 3, horizon: 7, label_budget: 2, ..CollectConfig::default() })
            .unwrap()
    }

    #[test]
    fn round_trip_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let ds = tiny();
        save_dataset(&ds, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
        let h = read_dataset_header(&p).unwrap();
        assert_eq!(h.meta, ds.meta);
        assert_eq!(h.label_mask, ds.label_mask);
        assert_eq!(h.trajectories.len(), 3);
    }

    #[test]
    fn identical_seeds_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        save_dataset(&tiny(), &a).unwrap();
        save_dataset(&tiny(), &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn corruption_and_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        save_dataset(&tiny(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x01;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Checksum { .. })));
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        save_dataset(&tiny(), &p).unwrap();
        let text = std::fs::read(&p).unwrap();
        let s = String::from_utf8_lossy(&text).replacen("\"version\":1", "\"version\":9", 1);
        let mut patched = s.as_bytes().to_vec();
        // Lossy conversion may alter payload bytes; only the header matters here.
        patched.truncate(text.len().min(patched.len()));
        std::fs::write(&p, &patched).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Version { found: 9, .. })));
    }
}
