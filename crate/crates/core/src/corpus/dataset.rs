//! On-disk dataset format: a directory with `images/*.png`, a JSON-Lines
//! `index.jsonl` (one record per sample) and a `splits.json` with three
//! patient-id arrays.

use super::{Sample, SplitSet};
use crate::error::{Error, Result};
use crate::imgutil;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexRecord {
    pub patient_id: String,
    pub image_id: String,
    pub image_file: String,
    pub label: String,
    pub report_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

pub fn write_index(dir: &Path, records: &[IndexRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("index.jsonl"))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRecord>> {
    let f = fs::File::open(dir.join("index.jsonl"))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_split_file(dir: &Path, split: &SplitSet) -> Result<()> {
    let ids = |v: &[Sample]| -> Vec<String> {
        let set: BTreeSet<String> = v.iter().map(|s| s.patient_id.clone()).collect();
        set.into_iter().collect()
    };
    let sf = SplitFile {
        train: ids(&split.train),
        validation: ids(&split.validation),
        test: ids(&split.test),
    };
    fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&sf)?)?;
    Ok(())
}

pub fn read_split_file(dir: &Path) -> Result<SplitFile> {
    let s = fs::read_to_string(dir.join("splits.json"))?;
    Ok(serde_json::from_str(&s)?)
}

/// Load a record's image from the dataset directory.
pub fn load_image(dir: &Path, rec: &IndexRecord) -> Result<ndarray::Array2<f64>> {
    imgutil::load_png(&dir.join(&rec.image_file))
}

/// Partition already-built samples according to a split file.
pub fn apply_split(samples: Vec<Sample>, split: &SplitFile) -> Result<SplitSet> {
    let train: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let val: BTreeSet<&str> = split.validation.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    let mut out = SplitSet::default();
    for s in samples {
        let pid = s.patient_id.as_str();
        if train.contains(pid) {
            out.train.push(s);
        } else if val.contains(pid) {
            out.validation.push(s);
        } else if test.contains(pid) {
            out.test.push(s);
        } else {
            return Err(Error::Corpus(format!(
                "patient {pid} not present in split file"
            )));
        }
    }
    Ok(out)
}
