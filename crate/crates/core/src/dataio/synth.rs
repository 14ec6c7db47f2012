//! Synthetic multi-stream videos with planted anomalies.
//!
//! Every clip of every stream is isotropic standard-normal noise. Clips whose
//! center frame falls inside an anomalous interval additionally carry
//! `snr · gain[t][c] · u[t][c]`, where `u[t][c]` is a fixed random unit
//! direction for class `c` in stream `t` and `gain[t][c]` is that stream's
//! visibility of the class (0 = invisible).
//!
//! Normal activity is planted the same way: any clip, in any video, may carry
//! one of a bank of nuisance directions at the same magnitude in every
//! stream, so that feature energy alone does not reveal anomalies.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split, Video};
use super::features::{save_features, segment_pool};
use super::manifest::{DatasetManifest, ManifestHeader, ManifestVideo};
use super::DataError;
use crate::diffcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_normal: usize,
    pub train_anomalous: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    /// Inclusive range of clips per video.
    pub min_clips: usize,
    pub max_clips: usize,
    pub clip_frames: usize,
    pub stream_names: Vec<String>,
    pub stream_widths: Vec<usize>,
    pub classes: Vec<String>,
    /// `visibility[t][c]`: gain of class `c`'s signal in stream `t`.
    pub visibility: Vec<Vec<f64>>,
    pub snr: f64,
    /// Expected share of clips covered by normal nuisance events.
    pub nuisance_rate: f64,
    /// Length in clips of one nuisance event.
    pub nuisance_burst: usize,
    /// Size of the nuisance direction bank per stream.
    pub nuisance_directions: usize,
    /// Target share of anomalous frames over all generated frames.
    pub anomaly_fraction: f64,
    pub segments: usize,
    pub student_stream: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            train_normal: 80,
            train_anomalous: 80,
            test_normal: 30,
            test_anomalous: 30,
            min_clips: 40,
            max_clips: 96,
            clip_frames: 16,
            stream_names: vec!["s1".into(), "s2".into(), "s3".into()],
            stream_widths: vec![64, 64, 32],
            classes: vec!["c1".into(), "c2".into(), "c3".into()],
            visibility: vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0], vec![0.5, 0.5, 0.5]],
            snr: 6.0,
            nuisance_rate: 0.3,
            nuisance_directions: 8,
            nuisance_burst: 8,
            anomaly_fraction: 0.073,
            segments: 32,
            student_stream: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::Format(format!("synthetic config: {msg}")));
        let streams = self.stream_names.len();
        if streams == 0 || self.stream_widths.len() != streams || self.visibility.len() != streams {
            return bad("stream names, widths and visibility rows must align");
        }
        if self.stream_widths.contains(&0) {
            return bad("stream widths must be positive");
        }
        if self.classes.is_empty() || self.visibility.iter().any(|row| row.len() != self.classes.len()) {
            return bad("visibility rows need one gain per class");
        }
        if self.visibility.iter().flatten().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad("gains must be finite and non-negative");
        }
        for c in 0..self.classes.len() {
            if self.visibility.iter().all(|row| row[c] == 0.0) {
                return bad("every class must be visible to at least one stream");
            }
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            return bad("anomaly fraction must lie in (0, 1)");
        }
        if self.train_normal == 0 || self.train_anomalous == 0 || self.test_normal == 0 || self.test_anomalous == 0 {
            return bad("every split needs normal and anomalous videos");
        }
        if self.min_clips == 0 || self.min_clips > self.max_clips || self.clip_frames == 0 {
            return bad("invalid clip range");
        }
        if self.segments == 0 || self.student_stream >= streams {
            return bad("invalid segment count or student stream");
        }
        if !(0.0..=1.0).contains(&self.nuisance_rate) || (self.nuisance_rate > 0.0 && (self.nuisance_directions == 0 || self.nuisance_burst == 0)) {
            return bad("invalid nuisance settings");
        }
        if !(self.snr.is_finite() && self.snr >= 0.0) {
            return bad("snr must be finite and non-negative");
        }
        Ok(())
    }
}

/// Raw generated clips with their manifest records.
#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub record: ManifestVideo,
    /// One `n_c × d_t` clip matrix per stream, values representable in `f32`.
    pub clips: Vec<Tensor>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct Plan {
    id: String,
    split: Split,
    class: Option<usize>,
    clips: usize,
}

/// Generates every video's clip features, deterministic in `cfg.seed`.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthVideo>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions: Vec<Vec<Vec<f64>>> = cfg
        .stream_widths
        .iter()
        .map(|&d| (0..cfg.classes.len()).map(|_| unit_vector(&mut rng, d)).collect())
        .collect();
    let nuisance: Vec<Vec<Vec<f64>>> = cfg
        .stream_widths
        .iter()
        .map(|&d| (0..cfg.nuisance_directions).map(|_| unit_vector(&mut rng, d)).collect())
        .collect();

    let mut plans = Vec::new();
    for (split, normal, anomalous) in [
        (Split::Train, cfg.train_normal, cfg.train_anomalous),
        (Split::Test, cfg.test_normal, cfg.test_anomalous),
    ] {
        for i in 0..normal + anomalous {
            plans.push(Plan {
                id: format!("{split}-{i:03}"),
                split,
                class: (i >= normal).then(|| (i - normal) % cfg.classes.len()),
                clips: rng.random_range(cfg.min_clips..=cfg.max_clips),
            });
        }
    }

    // Spread the anomalous-frame budget over anomalous videos in proportion
    // to their length, with per-video jitter.
    let total_frames: usize = plans.iter().map(|p| p.clips * cfg.clip_frames).sum();
    let budget = cfg.anomaly_fraction * total_frames as f64;
    let weights: Vec<f64> = plans
        .iter()
        .map(|p| match p.class {
            Some(_) => (p.clips * cfg.clip_frames) as f64 * rng.random_range(0.7..1.3),
            None => 0.0,
        })
        .collect();
    let weight_sum: f64 = weights.iter().sum();

    let mut out = Vec::with_capacity(plans.len());
    for (plan, w) in plans.iter().zip(&weights) {
        let frames = plan.clips * cfg.clip_frames;
        let intervals = match plan.class {
            Some(_) => {
                let len = ((budget * w / weight_sum).round() as usize).clamp(cfg.clip_frames, frames * 3 / 5);
                let start = rng.random_range(0..=frames - len);
                vec![[start, start + len]]
            }
            None => Vec::new(),
        };
        let mut events: Vec<Option<usize>> = vec![None; plan.clips];
        if cfg.nuisance_rate > 0.0 {
            let start_p = (cfg.nuisance_rate / cfg.nuisance_burst as f64).min(1.0);
            for c in 0..plan.clips {
                if rng.random::<f64>() < start_p {
                    let b = rng.random_range(0..cfg.nuisance_directions);
                    for e in &mut events[c..(c + cfg.nuisance_burst).min(plan.clips)] {
                        *e = Some(b);
                    }
                }
            }
        }
        let streams = directions
            .iter()
            .enumerate()
            .map(|(t, dirs)| {
                let d = cfg.stream_widths[t];
                let mut data = Vec::with_capacity(plan.clips * d);
                for (c, event) in events.iter().enumerate() {
                    let center = c * cfg.clip_frames + cfg.clip_frames / 2;
                    let active = intervals.iter().any(|&[s, e]| (s..e).contains(&center));
                    let signal = match plan.class {
                        Some(k) if active && cfg.visibility[t][k] > 0.0 => Some((cfg.snr * cfg.visibility[t][k], &dirs[k])),
                        _ => None,
                    };
                    let background = event.map(|b| (cfg.snr, &nuisance[t][b]));
                    for j in 0..d {
                        let mut v: f64 = rng.sample(StandardNormal);
                        if let Some((a, u)) = signal {
                            v += a * u[j];
                        }
                        if let Some((a, u)) = background {
                            v += a * u[j];
                        }
                        data.push(v as f32 as f64);
                    }
                }
                Tensor::new(vec![plan.clips, d], data).map_err(|e| DataError::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(SynthVideo {
            record: ManifestVideo {
                id: plan.id.clone(),
                split: plan.split,
                label: u8::from(plan.class.is_some()),
                frames,
                class: plan.class.map(|k| cfg.classes[k].clone()),
                intervals,
                features: cfg
                    .stream_names
                    .iter()
                    .map(|s| (s.clone(), format!("{}.{s}.dakf", plan.id)))
                    .collect(),
            },
            clips: streams,
        });
    }
    Ok(out)
}

fn manifest_for(cfg: &SynthConfig, videos: &[SynthVideo]) -> DatasetManifest {
    DatasetManifest {
        dataset: ManifestHeader {
            streams: cfg.stream_names.clone(),
            student_stream: cfg.stream_names[cfg.student_stream].clone(),
            segments: cfg.segments,
        },
        videos: videos.iter().map(|v| v.record.clone()).collect(),
    }
}

/// Generates the dataset in memory; identical to writing and reloading it.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    let videos = synthesize(cfg)?;
    let manifest = manifest_for(cfg, &videos);
    manifest.validate()?;
    let records = videos
        .into_iter()
        .map(|v| {
            let streams = v
                .clips
                .iter()
                .map(|c| segment_pool(c, cfg.segments))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Video {
                id: v.record.id,
                split: v.record.split,
                label: v.record.label,
                frames: v.record.frames,
                intervals: v.record.intervals.iter().map(|&[s, e]| (s, e)).collect(),
                class: v.record.class,
                streams,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Dataset::new(cfg.stream_names.clone(), cfg.student_stream, records)
}

/// Writes feature files and `manifest.toml` into `dir`, returning the manifest path.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf, DataError> {
    let videos = synthesize(cfg)?;
    fs::create_dir_all(dir)?;
    for v in &videos {
        for (name, clips) in cfg.stream_names.iter().zip(&v.clips) {
            save_features(&dir.join(&v.record.features[name]), clips)?;
        }
    }
    let path = dir.join("manifest.toml");
    manifest_for(cfg, &videos).write(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            train_normal: 6,
            train_anomalous: 6,
            test_normal: 3,
            test_anomalous: 3,
            min_clips: 8,
            max_clips: 20,
            segments: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_fraction_lands_near_target() {
        let videos = synthesize(&SynthConfig::default()).unwrap();
        let total: usize = videos.iter().map(|v| v.record.frames).sum();
        let anomalous: usize = videos
            .iter()
            .flat_map(|v| v.record.intervals.iter().map(|[s, e]| e - s))
            .sum();
        let frac = anomalous as f64 / total as f64;
        assert!((0.053..=0.093).contains(&frac), "{frac}");
        assert_eq!(videos.len(), 220);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 7, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn files_reload_to_the_in_memory_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic(&small(), dir.path()).unwrap();
        let loaded = DatasetManifest::load_dataset(&path).unwrap();
        assert_eq!(loaded, generate_synthetic(&small()).unwrap());
        assert_eq!(loaded.stream_names[loaded.student_stream], "s3");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small();
        cfg.visibility[0][1] = 0.0;
        cfg.visibility[1][1] = 0.0;
        cfg.visibility[2][1] = 0.0;
        assert!(cfg.validate().is_err());
        assert!(SynthConfig { anomaly_fraction: 1.0, ..small() }.validate().is_err());
        assert!(SynthConfig { stream_widths: vec![4, 4], ..small() }.validate().is_err());
    }

    fn welch_t(a: &[f64], b: &[f64]) -> f64 {
        let stats = |x: &[f64]| {
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            (n, m, v)
        };
        let (na, ma, va) = stats(a);
        let (nb, mb, vb) = stats(b);
        (ma - mb) / (va / na + vb / nb).sqrt()
    }

    #[test]
    fn hidden_class_leaves_other_streams_unchanged() {
        let cfg = SynthConfig::default();
        let videos = synthesize(&cfg).unwrap();
        let energies = |stream: usize| {
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for v in videos.iter().filter(|v| v.record.class.as_deref() == Some("c1")) {
                let x = &v.clips[stream];
                for c in 0..x.shape()[0] {
                    let center = c * cfg.clip_frames + cfg.clip_frames / 2;
                    let e = x.row(c).iter().map(|a| a * a).sum::<f64>();
                    if v.record.intervals.iter().any(|&[s, e]| (s..e).contains(&center)) {
                        inside.push(e);
                    } else {
                        outside.push(e);
                    }
                }
            }
            welch_t(&inside, &outside)
        };
        assert!(energies(0) > 10.0, "visible stream should separate");
        assert!(energies(1).abs() < 4.0, "hidden stream t = {}", energies(1));
    }
}
