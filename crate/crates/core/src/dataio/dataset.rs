use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::diffcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DataError::Manifest(format!("unknown split `{other}`"))),
        }
    }
}

/// One video: a video-level label and one pooled `n_s × d_t` matrix per stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub split: Split,
    /// 1 for anomalous, 0 for normal.
    pub label: u8,
    pub frames: usize,
    /// Half-open anomalous frame ranges.
    pub intervals: Vec<(usize, usize)>,
    pub class: Option<String>,
    pub streams: Vec<Tensor>,
}

impl Video {
    pub fn segments(&self) -> usize {
        self.streams.first().map_or(0, Tensor::rows)
    }

    /// Per-frame ground truth derived from the intervals.
    pub fn frame_labels(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.frames];
        for &(start, end) in &self.intervals {
            for l in &mut labels[start.min(self.frames)..end.min(self.frames)] {
                *l = 1;
            }
        }
        labels
    }
}

/// Videos of both splits sharing one stream layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub stream_names: Vec<String>,
    /// Index of the stream the student consumes.
    pub student_stream: usize,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn new(stream_names: Vec<String>, student_stream: usize, videos: Vec<Video>) -> Result<Self, DataError> {
        let ds = Self {
            stream_names,
            student_stream,
            videos,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn stream_count(&self) -> usize {
        self.stream_names.len()
    }

    pub fn stream_width(&self, t: usize) -> usize {
        self.videos.first().map_or(0, |v| v.streams[t].cols())
    }

    pub fn stream_widths(&self) -> Vec<usize> {
        (0..self.stream_count()).map(|t| self.stream_width(t)).collect()
    }

    pub fn train(&self) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(|v| v.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(|v| v.split == Split::Test)
    }

    pub fn stream_index(&self, name: &str) -> Option<usize> {
        self.stream_names.iter().position(|s| s == name)
    }

    /// Keeps only the listed streams, in the given order.
    ///
    /// The student stream follows its data when retained and falls back to
    /// the first kept stream otherwise.
    pub fn with_streams(&self, keep: &[usize]) -> Result<Dataset, DataError> {
        if keep.is_empty() || keep.iter().any(|&t| t >= self.stream_count()) {
            return Err(DataError::Manifest(format!("invalid stream selection {keep:?}")));
        }
        let videos = self
            .videos
            .iter()
            .map(|v| Video {
                streams: keep.iter().map(|&t| v.streams[t].clone()).collect(),
                ..v.clone()
            })
            .collect();
        Dataset::new(
            keep.iter().map(|&t| self.stream_names[t].clone()).collect(),
            keep.iter().position(|&t| t == self.student_stream).unwrap_or(0),
            videos,
        )
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Manifest(msg));
        if self.stream_names.is_empty() {
            return bad("no streams declared".into());
        }
        if self.student_stream >= self.stream_count() {
            return bad(format!("student stream index {} out of range", self.student_stream));
        }
        let mut ids = BTreeSet::new();
        let widths: Option<Vec<usize>> = self.videos.first().map(|v| v.streams.iter().map(Tensor::cols).collect());
        for v in &self.videos {
            if !ids.insert(v.id.as_str()) {
                return bad(format!("duplicate video id `{}`", v.id));
            }
            if v.streams.len() != self.stream_count() {
                return bad(format!(
                    "video `{}` has {} streams, expected {}",
                    v.id,
                    v.streams.len(),
                    self.stream_count()
                ));
            }
            if v.label > 1 {
                return bad(format!("video `{}` has label {}", v.id, v.label));
            }
            let n = v.segments();
            for (t, s) in v.streams.iter().enumerate() {
                if s.rank() != 2 || s.rows() != n {
                    return bad(format!("video `{}` stream {t} has shape {:?}", v.id, s.shape()));
                }
                if widths.as_ref().is_some_and(|w| w[t] != s.cols()) {
                    return bad(format!("video `{}` stream {t} width {} differs from other videos", v.id, s.cols()));
                }
                if !s.is_finite() {
                    return bad(format!("video `{}` stream {t} contains non-finite values", v.id));
                }
            }
            if v.frames == 0 {
                return bad(format!("video `{}` has no frames", v.id));
            }
            for &(s, e) in &v.intervals {
                if s >= e || e > v.frames {
                    return bad(format!("video `{}` has invalid interval [{s}, {e})", v.id));
                }
            }
            if v.split == Split::Test && v.label == 1 && v.intervals.is_empty() {
                return bad(format!("anomalous test video `{}` lacks temporal annotations", v.id));
            }
            if v.label == 0 && !v.intervals.is_empty() {
                return bad(format!("normal video `{}` carries anomalous intervals", v.id));
            }
        }
        Ok(())
    }
}
