//! Prepared-dataset directories.
//!
//! Layout:
//! ```text
//! <dir>/manifest.json   counts + seed
//! <dir>/user_map.csv    external_id,dense_id
//! <dir>/item_map.csv    external_id,dense_id
//! <dir>/train.csv       user,item
//! <dir>/test.csv        user,item
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{IdMap, ImplicitDataset};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

pub fn save_dataset(ds: &ImplicitDataset, dir: impl AsRef<Path>, seed: u64) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_map(&ds.users, &dir.join("user_map.csv"))?;
    write_map(&ds.items, &dir.join("item_map.csv"))?;

    let mut w = csv::Writer::from_path(dir.join("train.csv"))?;
    w.write_record(["user", "item"])?;
    for (u, items) in ds.train_positives.iter().enumerate() {
        for i in items {
            w.write_record([u.to_string(), i.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(dir.join("train.csv"), e))?;

    let mut w = csv::Writer::from_path(dir.join("test.csv"))?;
    w.write_record(["user", "item"])?;
    for (u, i) in ds.test_item.iter().enumerate() {
        w.write_record([u.to_string(), i.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("test.csv"), e))?;

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        n_users: ds.n_users(),
        n_items: ds.n_items(),
        n_train: ds.n_train(),
        n_test: ds.test_item.len(),
        seed,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(ImplicitDataset, DatasetManifest)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(snapshot_error(dir, format!("unsupported format version {}", manifest.format_version)));
    }
    let users = read_map(&dir.join("user_map.csv"))?;
    let items = read_map(&dir.join("item_map.csv"))?;
    if users.len() != manifest.n_users || items.len() != manifest.n_items {
        return Err(snapshot_error(dir, "index maps disagree with manifest counts"));
    }
    let mut train = vec![Vec::new(); users.len()];
    for (u, i) in read_pairs(&dir.join("train.csv"))? {
        train
            .get_mut(u)
            .ok_or_else(|| snapshot_error(dir, format!("train.csv: user {u} out of range")))?
            .push(i);
    }
    let mut test = vec![usize::MAX; users.len()];
    for (u, i) in read_pairs(&dir.join("test.csv"))? {
        *test
            .get_mut(u)
            .ok_or_else(|| snapshot_error(dir, format!("test.csv: user {u} out of range")))? = i;
    }
    if test.contains(&usize::MAX) {
        return Err(snapshot_error(dir, "test.csv: some users have no test item"));
    }
    let ds = ImplicitDataset::new(users, items, train, test)?;
    if ds.n_train() != manifest.n_train {
        return Err(snapshot_error(dir, "train.csv disagrees with manifest count"));
    }
    Ok((ds, manifest))
}

fn snapshot_error(dir: &Path, message: impl Into<String>) -> Error {
    Error::Snapshot {
        path: dir.to_path_buf(),
        message: message.into(),
    }
}

fn write_map(map: &IdMap, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["external_id", "dense_id"])?;
    for (dense, ext) in map.externals().iter().enumerate() {
        w.write_record([ext.as_str(), &dense.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_map(path: &Path) -> Result<IdMap> {
    let mut rows: Vec<(usize, String)> = Vec::new();
    for rec in csv::Reader::from_path(path)?.deserialize() {
        let (ext, dense): (String, usize) = rec?;
        rows.push((dense, ext));
    }
    rows.sort_by_key(|(d, _)| *d);
    if rows.iter().enumerate().any(|(i, (d, _))| i != *d) {
        return Err(snapshot_error(path, "dense ids are not 0..n"));
    }
    Ok(IdMap::from_ordered(rows.into_iter().map(|(_, e)| e).collect()))
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    csv::Reader::from_path(path)?
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{binarize_and_filter, leave_one_out_split, parse_ratings, RatingFormat};

    #[test]
    fn roundtrip_is_exact() {
        let text = "u1,i1,5,1\nu1,\"i,2\",3,2\nu1,i3,1,3\nu2,i1,2,9\nu2,i3,4,4\n";
        let raw = parse_ratings(format!("user,item,rating,timestamp\n{text}").as_bytes(), RatingFormat::Csv, "mem").unwrap();
        let ds = leave_one_out_split(binarize_and_filter(&raw, 2).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = save_dataset(&ds, dir.path(), 42).unwrap();
        let (back, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(manifest, written);
        assert_eq!(manifest.seed, 42);
    }

    #[test]
    fn missing_dir_is_error() {
        assert!(load_dataset("/nonexistent/fedclr").is_err());
    }
}
