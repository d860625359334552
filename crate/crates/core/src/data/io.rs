use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ItemFeatures, UserProfile};

use super::{Dataset, LabeledExample};

/// File names inside a dataset directory.
pub struct DatasetFiles;

impl DatasetFiles {
    pub const META: &'static str = "dataset.json";
    pub const USERS: &'static str = "users.jsonl";
    pub const ITEMS: &'static str = "items.jsonl";
    pub const EVENTS: &'static str = "events.jsonl";
    pub const EXAMPLES: &'static str = "examples.jsonl";

    pub const ALL: [&'static str; 5] = [
        Self::META,
        Self::USERS,
        Self::ITEMS,
        Self::EVENTS,
        Self::EXAMPLES,
    ];
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    holdout_start: u64,
    n_users: usize,
    n_items: usize,
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

/// Writes the dataset into `dir`, creating it if needed. Existing dataset
/// files are only replaced when `force` is set.
pub fn write_dataset(dir: &Path, ds: &Dataset, force: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = DatasetFiles::ALL.iter().map(|f| dir.join(f)).collect();
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::invalid(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    let meta = Meta {
        version: 1,
        holdout_start: ds.holdout_start,
        n_users: ds.users.len(),
        n_items: ds.items.len(),
    };
    let meta_path = dir.join(DatasetFiles::META);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;
    write_jsonl(&dir.join(DatasetFiles::USERS), &ds.users)?;
    write_jsonl(&dir.join(DatasetFiles::ITEMS), &ds.items)?;
    write_jsonl(
        &dir.join(DatasetFiles::EVENTS),
        ds.examples.iter().flatten().map(LabeledExample::record),
    )?;
    write_jsonl(&dir.join(DatasetFiles::EXAMPLES), ds.examples.iter().flatten())?;
    Ok(paths)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(DatasetFiles::META);
    let meta: Meta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;
    let users: Vec<UserProfile> = read_jsonl(&dir.join(DatasetFiles::USERS))?;
    let items: Vec<ItemFeatures> = read_jsonl(&dir.join(DatasetFiles::ITEMS))?;
    let rows: Vec<LabeledExample> = read_jsonl(&dir.join(DatasetFiles::EXAMPLES))?;
    if users.len() != meta.n_users || items.len() != meta.n_items {
        return Err(Error::invalid("dataset files disagree with dataset.json counts"));
    }
    let mut examples = vec![Vec::new(); users.len()];
    for row in rows {
        let stream = examples
            .get_mut(row.user as usize)
            .ok_or_else(|| Error::invalid(format!("example for unknown user {}", row.user)))?;
        stream.push(row);
    }
    for stream in &mut examples {
        stream.sort_by_key(|e| e.ts);
    }
    Ok(Dataset {
        users,
        items,
        examples,
        holdout_start: meta.holdout_start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, WorldConfig};

    #[test]
    fn dataset_round_trips_and_refuses_overwrite() {
        let cfg = WorldConfig {
            n_users: 12,
            n_items: 30,
            n_devices: 12,
            events_per_user: 25,
            ..WorldConfig::default()
        };
        let (_, ds) = build_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested/data");
        write_dataset(&out, &ds, false).unwrap();
        assert_eq!(read_dataset(&out).unwrap(), ds);
        assert!(write_dataset(&out, &ds, false).is_err());
        write_dataset(&out, &ds, true).unwrap();
    }

    #[test]
    fn example_lines_carry_exact_field_names() {
        let row = LabeledExample {
            user: 1,
            item: 2,
            ts: 3,
            watch_ratio: 0.5,
            like: 1,
            comment: 0,
            share: 0,
            author: 4,
            tag: 5,
            l_pro_lvr: 1,
            l_max_time: 0,
            l_vtr: 1,
            pscore: -0.25,
        };
        let v: serde_json::Value = serde_json::to_value(row).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        let mut want = vec![
            "user", "item", "ts", "watch_ratio", "like", "comment", "share", "author", "tag",
            "l_pro_lvr", "l_max_time", "l_vtr", "pscore",
        ];
        want.sort();
        assert_eq!(keys, want);
    }
}
