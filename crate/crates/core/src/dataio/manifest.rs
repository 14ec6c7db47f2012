//! TOML dataset manifest.
//!
//! ```toml
//! [dataset]
//! streams = ["s1", "s2", "s3"]
//! student_stream = "s3"
//! segments = 32
//!
//! [[videos]]
//! id = "test-000"
//! split = "test"
//! label = 1
//! frames = 1024
//! class = "c2"
//! intervals = [[96, 240]]
//! features = { s1 = "test-000.s1.dakf", s2 = "test-000.s2.dakf", s3 = "test-000.s3.dakf" }
//! ```
//!
//! Feature paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split, Video};
use super::features::{load_features, segment_pool};
use super::DataError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub streams: Vec<String>,
    pub student_stream: String,
    #[serde(default = "default_segments")]
    pub segments: usize,
}

fn default_segments() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub id: String,
    pub split: Split,
    pub label: u8,
    pub frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default)]
    pub intervals: Vec<[usize; 2]>,
    pub features: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset: ManifestHeader,
    #[serde(default)]
    pub videos: Vec<ManifestVideo>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let m: Self = toml::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String, DataError> {
        toml::to_string(self).map_err(|e| DataError::Manifest(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        self.validate()?;
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn student_index(&self) -> Result<usize, DataError> {
        self.dataset
            .streams
            .iter()
            .position(|s| *s == self.dataset.student_stream)
            .ok_or_else(|| {
                DataError::Manifest(format!(
                    "student stream `{}` is not a declared stream",
                    self.dataset.student_stream
                ))
            })
    }

    /// Structural checks that do not touch the feature files.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Manifest(msg));
        let h = &self.dataset;
        if h.streams.is_empty() {
            return bad("no streams declared".into());
        }
        if h.segments == 0 {
            return bad("segment count must be positive".into());
        }
        let declared: BTreeSet<&str> = h.streams.iter().map(String::as_str).collect();
        if declared.len() != h.streams.len() {
            return bad("duplicate stream names".into());
        }
        self.student_index()?;
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            if !ids.insert(v.id.as_str()) {
                return bad(format!("duplicate video id `{}`", v.id));
            }
            if v.label > 1 {
                return bad(format!("video `{}` has label {}", v.id, v.label));
            }
            for s in &h.streams {
                if !v.features.contains_key(s) {
                    return bad(format!("video `{}` is missing stream `{s}`", v.id));
                }
            }
            if let Some(extra) = v.features.keys().find(|k| !declared.contains(k.as_str())) {
                return bad(format!("video `{}` lists undeclared stream `{extra}`", v.id));
            }
            if v.split == Split::Test && v.label == 1 && v.intervals.is_empty() {
                return bad(format!("anomalous test video `{}` lacks temporal annotations", v.id));
            }
            for &[s, e] in &v.intervals {
                if s >= e || e > v.frames {
                    return bad(format!("video `{}` has invalid interval [{s}, {e})", v.id));
                }
            }
        }
        Ok(())
    }

    /// Loads every feature file, pools it to the segment count and builds the dataset.
    pub fn load(&self, base: &Path) -> Result<Dataset, DataError> {
        self.validate()?;
        let videos = self
            .videos
            .iter()
            .map(|v| {
                let streams = self
                    .dataset
                    .streams
                    .iter()
                    .map(|s| {
                        let path = base.join(&v.features[s]);
                        let clips = load_features(&path).map_err(|e| match e {
                            DataError::Io(io) => DataError::Manifest(format!("{}: {io}", path.display())),
                            other => other,
                        })?;
                        segment_pool(&clips, self.dataset.segments)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Video {
                    id: v.id.clone(),
                    split: v.split,
                    label: v.label,
                    frames: v.frames,
                    intervals: v.intervals.iter().map(|&[s, e]| (s, e)).collect(),
                    class: v.class.clone(),
                    streams,
                })
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Dataset::new(self.dataset.streams.clone(), self.student_index()?, videos)
    }

    /// Reads the manifest at `path` and loads its dataset.
    pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
        let m = Self::read(path)?;
        m.load(path.parent().unwrap_or_else(|| Path::new(".")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[dataset]
streams = ["a", "b"]
student_stream = "b"
segments = 4

[[videos]]
id = "v0"
split = "train"
label = 0
frames = 64
features = { a = "v0.a.dakf", b = "v0.b.dakf" }

[[videos]]
id = "v1"
split = "test"
label = 1
frames = 64
class = "c1"
intervals = [[8, 20]]
features = { a = "v1.a.dakf", b = "v1.b.dakf" }
"#;

    #[test]
    fn parses_and_round_trips() {
        let m = DatasetManifest::parse(GOOD).unwrap();
        assert_eq!(m.student_index().unwrap(), 1);
        assert_eq!(m.videos[1].intervals, vec![[8, 20]]);
        assert_eq!(DatasetManifest::parse(&m.to_toml().unwrap()).unwrap(), m);
    }

    #[test]
    fn rejects_missing_stream() {
        let text = GOOD.replace(r#"features = { a = "v0.a.dakf", b = "v0.b.dakf" }"#, r#"features = { a = "v0.a.dakf" }"#);
        assert!(DatasetManifest::parse(&text).is_err());
    }

    #[test]
    fn rejects_unannotated_test_anomaly() {
        let text = GOOD.replace("intervals = [[8, 20]]\n", "");
        assert!(DatasetManifest::parse(&text).is_err());
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = GOOD.replace(r#"id = "v1""#, r#"id = "v0""#);
        assert!(DatasetManifest::parse(&text).is_err());
    }

    #[test]
    fn rejects_unknown_student_and_bad_interval() {
        assert!(DatasetManifest::parse(&GOOD.replace(r#"student_stream = "b""#, r#"student_stream = "z""#)).is_err());
        assert!(DatasetManifest::parse(&GOOD.replace("[[8, 20]]", "[[8, 90]]")).is_err());
    }
}
