//! JSONL dataset records and bundles.
//!
//! Each line is one record:
//! `{"id", "split", "video_id", "language"?, "features", "caption"?}`.
//! When any record carries a caption block the file is cross-modal: records
//! without a caption are videos and captions point at them by `video_id`.
//! Otherwise every record is a point whose class label is its `video_id`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::CaptionRecord;
use crate::synthetic::{LabeledPoint, RingDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBlock {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nouns: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbs: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub split: Split,
    pub video_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<CaptionBlock>,
}

impl DatasetRecord {
    pub fn caption_record(&self) -> Option<CaptionRecord> {
        let c = self.caption.as_ref()?;
        Some(CaptionRecord {
            id: self.id.clone(),
            video_id: self.video_id.clone(),
            language: self.language.clone().unwrap_or_else(|| "en".into()),
            text: c.text.clone(),
            nouns: c.nouns.clone(),
            verbs: c.verbs.clone(),
            features: self.features.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    /// Labelled points retrieved against each other.
    Unimodal,
    /// Videos and captions.
    CrossModal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl DatasetBundle {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn mode(&self) -> DatasetMode {
        if self.all().any(|r| r.caption.is_some()) {
            DatasetMode::CrossModal
        } else {
            DatasetMode::Unimodal
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn split(&self, split: Split) -> &[DatasetRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Groups records by split, checking ids, dimensions and matches.
    pub fn from_records(records: Vec<DatasetRecord>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        let cross = records.iter().any(|r| r.caption.is_some());
        let mut video_dim = None;
        let mut caption_dim = None;
        for r in &records {
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("record features"));
            }
            let slot = if r.caption.is_some() { &mut caption_dim } else { &mut video_dim };
            match *slot {
                None => *slot = Some(r.features.len()),
                Some(d) if d != r.features.len() => {
                    return Err(Error::DimensionMismatch { expected: d, got: r.features.len() });
                }
                Some(_) => {}
            }
        }
        if video_dim == Some(0) || caption_dim == Some(0) {
            return Err(Error::Schema { line: 0, msg: "features must not be empty".into() });
        }
        let mut bundle = DatasetBundle { train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for r in records {
            match r.split {
                Split::Train => bundle.train.push(r),
                Split::Val => bundle.val.push(r),
                Split::Test => bundle.test.push(r),
            }
        }
        if cross {
            for split in [Split::Train, Split::Val, Split::Test] {
                let recs = bundle.split(split);
                let videos: BTreeMap<&str, &DatasetRecord> =
                    recs.iter().filter(|r| r.caption.is_none()).map(|r| (r.id.as_str(), r)).collect();
                let mut matched = BTreeSet::new();
                for c in recs.iter().filter(|r| r.caption.is_some()) {
                    if !videos.contains_key(c.video_id.as_str()) {
                        return Err(Error::Schema {
                            line: 0,
                            msg: format!("caption {} refers to video {} outside its split", c.id, c.video_id),
                        });
                    }
                    matched.insert(c.video_id.as_str());
                }
                if split == Split::Test {
                    if let Some(v) = videos.keys().find(|v| !matched.contains(*v)) {
                        return Err(Error::Schema { line: 0, msg: format!("test video {v} has no caption") });
                    }
                }
            }
        }
        Ok(bundle)
    }
}

const REQUIRED_FIELDS: [&str; 4] = ["id", "split", "video_id", "features"];

/// Parses one JSONL line, reporting schema problems against `line`.
pub fn parse_record(text: &str, line: usize) -> Result<DatasetRecord> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Schema { line, msg: format!("invalid JSON: {e}") })?;
    let obj = value.as_object().ok_or_else(|| Error::Schema { line, msg: "record must be an object".into() })?;
    if let Some(missing) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
        return Err(Error::Schema { line, msg: format!("missing field `{missing}`") });
    }
    serde_json::from_value(value).map_err(|e| Error::Schema { line, msg: e.to_string() })
}

pub fn read_dataset(reader: impl BufRead) -> Result<DatasetBundle> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line, i + 1)?);
    }
    DatasetBundle::from_records(records)
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_dataset(BufReader::new(file))
}

pub fn write_records<'a>(mut w: impl Write, records: impl IntoIterator<Item = &'a DatasetRecord>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Class label used for ring points, parsed back by [`ring_class`].
pub fn class_label(class_id: u32) -> String {
    format!("class-{class_id}")
}

pub fn ring_class(label: &str) -> Result<u32> {
    label
        .strip_prefix("class-")
        .and_then(|k| k.parse().ok())
        .ok_or_else(|| Error::Config(format!("label `{label}` is not of the form class-<k>")))
}

/// Ring points as dataset records, features being the raw coordinates.
pub fn ring_records(data: &RingDataset) -> Vec<DatasetRecord> {
    let record = |prefix: &str, split: Split, i: usize, p: &LabeledPoint| DatasetRecord {
        id: format!("{prefix}-{i:05}"),
        split,
        video_id: class_label(p.class_id),
        language: None,
        features: p.xy.to_vec(),
        caption: None,
    };
    data.train
        .iter()
        .enumerate()
        .map(|(i, p)| record("train", Split::Train, i, p))
        .chain(data.test.iter().enumerate().map(|(i, p)| record("test", Split::Test, i, p)))
        .collect()
}
