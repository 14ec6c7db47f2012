//! Teacher scores to soft segment labels: smoothing, then min-max scaling.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataio::{csv_reader, csv_writer, DataError, Dataset};
use crate::error::{Error, Result};
use crate::models::Model;

/// Centered moving average of odd width with edge-replication padding.
pub fn moving_average(scores: &[f64], width: usize) -> Result<Vec<f64>> {
    if width == 0 || width % 2 == 0 {
        return Err(Error::config(format!("smoothing width {width} must be odd and positive")));
    }
    if width > scores.len() {
        return Err(Error::config(format!(
            "smoothing width {width} exceeds sequence length {}",
            scores.len()
        )));
    }
    let n = scores.len() as i64;
    let r = (width / 2) as i64;
    Ok((0..n)
        .map(|i| {
            (i - r..=i + r)
                .map(|j| scores[j.clamp(0, n - 1) as usize])
                .sum::<f64>()
                / width as f64
        })
        .collect())
}

/// Maps scores onto `[0, 1]`; a constant sequence maps to all zeros.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| ((s - min) / range).clamp(0.0, 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Odd moving-average width; 1 disables smoothing.
    pub epsilon: usize,
    pub normalize: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epsilon: 3,
            normalize: true,
        }
    }
}

/// Refines one anomalous video's teacher scores.
pub fn refine_scores(scores: &[f64], cfg: &RefineConfig) -> Result<Vec<f64>> {
    let smoothed = moving_average(scores, cfg.epsilon)?;
    Ok(if cfg.normalize {
        min_max_normalize(&smoothed)
    } else {
        smoothed
    })
}

/// Soft segment labels per training video.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelStore {
    pub labels: BTreeMap<String, Vec<f64>>,
    pub epsilon: usize,
}

impl PseudoLabelStore {
    pub fn get(&self, video_id: &str) -> Option<&[f64]> {
        self.labels.get(video_id).map(Vec::as_slice)
    }

    pub fn write_csv<W: Write>(&self, out: W, fingerprint: &str) -> Result<()> {
        let mut w = csv_writer(out, fingerprint, &["video_id", "segment_index", "label"])?;
        for (id, labels) in &self.labels {
            for (i, y) in labels.iter().enumerate() {
                w.write_record([id.as_str(), &i.to_string(), &format!("{y:?}")])
                    .map_err(DataError::from)?;
            }
        }
        w.flush().map_err(DataError::from)?;
        Ok(())
    }

    /// Reads the CSV layout of [`Self::write_csv`]; segments must be contiguous from 0.
    pub fn read_csv<R: Read>(input: R, epsilon: usize) -> Result<Self> {
        let mut rdr = csv_reader(input);
        let mut labels: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(DataError::from)?;
            let bad = || DataError::Format(format!("bad pseudo-label row {rec:?}"));
            if rec.len() != 3 {
                return Err(bad().into());
            }
            let idx: usize = rec[1].parse().map_err(|_| bad())?;
            let y: f64 = rec[2].parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&y) {
                return Err(bad().into());
            }
            let seq = labels.entry(rec[0].to_string()).or_default();
            if idx != seq.len() {
                return Err(bad().into());
            }
            seq.push(y);
        }
        Ok(Self { labels, epsilon })
    }
}

/// Scores every training video with the teacher and refines the anomalous ones.
/// Normal videos receive all-zero labels.
pub fn build_pseudo_labels(teacher: &Model, dataset: &Dataset, cfg: &RefineConfig) -> Result<PseudoLabelStore> {
    let mut labels = BTreeMap::new();
    for video in dataset.train() {
        let n = video.segments();
        let y = if video.label == 1 {
            let streams: Vec<_> = video.streams.iter().collect();
            let out = teacher.forward(&streams)?;
            refine_scores(&out.scores, cfg)?
        } else {
            vec![0.0; n]
        };
        labels.insert(video.id.clone(), y);
    }
    Ok(PseudoLabelStore {
        labels,
        epsilon: cfg.epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn width_one_is_identity() {
        let s = [0.3, 0.9, 0.1, 0.4];
        assert_eq!(moving_average(&s, 1).unwrap(), s.to_vec());
    }

    #[test]
    fn width_three_examples() {
        assert_eq!(moving_average(&[0.0, 0.0, 3.0, 0.0, 0.0], 3).unwrap(), vec![0.0, 1.0, 1.0, 1.0, 0.0]);
        assert_eq!(moving_average(&[3.0, 0.0, 0.0], 3).unwrap(), vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_widths() {
        assert!(moving_average(&[1.0, 2.0], 2).is_err());
        assert!(moving_average(&[1.0, 2.0], 0).is_err());
        assert!(moving_average(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(min_max_normalize(&[1.0, 3.0, 5.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[2.0, 2.0, 2.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(min_max_normalize(&[0.2, 0.8]), vec![0.0, 1.0]);
    }

    #[test]
    fn peak_survives_identity_smoothing() {
        let mut s = vec![0.1; 32];
        s[2] = 0.9;
        let cfg = RefineConfig {
            epsilon: 1,
            normalize: true,
        };
        let y = refine_scores(&s, &cfg).unwrap();
        assert_eq!(y[2], 1.0);
        assert!(y.iter().enumerate().all(|(i, &v)| i == 2 || v == 0.0));
    }

    #[test]
    fn csv_round_trip_and_rejections() {
        let mut store = PseudoLabelStore {
            labels: BTreeMap::new(),
            epsilon: 3,
        };
        store.labels.insert("a".into(), vec![0.0, 0.25, 1.0]);
        store.labels.insert("b".into(), vec![0.0, 0.0, 0.0]);
        let mut buf = Vec::new();
        store.write_csv(&mut buf, "abc").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# config-fingerprint: abc\nvideo_id,segment_index,label\n"));
        assert_eq!(PseudoLabelStore::read_csv(buf.as_slice(), 3).unwrap(), store);

        let gap = "video_id,segment_index,label\na,0,0.5\na,2,0.1\n";
        assert!(PseudoLabelStore::read_csv(gap.as_bytes(), 3).is_err());
        let range = "video_id,segment_index,label\na,0,1.5\n";
        assert!(PseudoLabelStore::read_csv(range.as_bytes(), 3).is_err());
    }

    proptest! {
        #[test]
        fn smoothing_stays_within_input_range(s in prop::collection::vec(-3.0f64..3.0, 1..40), half in 0usize..5) {
            let width = (2 * half + 1).min(if s.len() % 2 == 1 { s.len() } else { s.len() - 1 }).max(1);
            let out = moving_average(&s, width).unwrap();
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(out.len(), s.len());
            prop_assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn constant_sequences_keep_their_mean(c in -2.0f64..2.0, n in 1usize..30) {
            let s = vec![c; n];
            let w = if n % 2 == 1 { n } else { n - 1 };
            let out = moving_average(&s, w.max(1)).unwrap();
            prop_assert!(out.iter().all(|&v| (v - c).abs() < 1e-12));
        }

        #[test]
        fn normalized_output_hits_both_ends(s in prop::collection::vec(0.0f64..1.0, 2..40)) {
            let out = min_max_normalize(&s);
            prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let distinct = s.iter().any(|&v| v != s[0]);
            if distinct {
                prop_assert!(out.contains(&0.0));
                prop_assert!(out.contains(&1.0));
            }
        }

        #[test]
        fn one_hot_sequences_are_fixed_points(n in 2usize..40, pos in 0usize..40) {
            let mut s = vec![0.0; n];
            s[pos % n] = 1.0;
            let cfg = RefineConfig { epsilon: 1, normalize: true };
            prop_assert_eq!(refine_scores(&s, &cfg).unwrap(), s);
        }
    }
}
