//! Piecewise-stationary synthetic streams with known generating maps.
//!
//! Segment `s` draws features i.i.d. from `N(mean_s, std_s^2 I)` and sets
//! `y = A_s m + b_s + noise`, where `m` is the mean of the last
//! `summary_len` raw feature rows (fewer at the very start).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Latency, Schema, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerFeature {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PerFeature {
    fn resolve(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerFeature::Scalar(v) => Ok(vec![*v; n]),
            PerFeature::Vector(v) if v.len() == n => Ok(v.clone()),
            PerFeature::Vector(v) => Err(Error::Config(format!("{what} has {} entries, expected {n}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub len: usize,
    #[serde(default = "zero")]
    pub mean: PerFeature,
    #[serde(default = "one")]
    pub std: PerFeature,
    /// `K x F` generating matrix.
    pub gain: Vec<Vec<f64>>,
    /// Per-target intercept; zeros when omitted.
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
}

fn zero() -> PerFeature {
    PerFeature::Scalar(0.0)
}

fn one() -> PerFeature {
    PerFeature::Scalar(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub features: usize,
    pub targets: usize,
    #[serde(default = "default_summary")]
    pub summary_len: usize,
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    pub segments: Vec<Segment>,
}

fn default_summary() -> usize {
    4
}

/// Generated stream plus the ground truth used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthStream {
    pub stream: Stream,
    /// First time index of every segment after the first.
    pub drift_points: Vec<usize>,
    /// Noise-free targets.
    pub clean_targets: Vec<Vec<f64>>,
    /// Segment index of every sample.
    pub segment_of: Vec<usize>,
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SynthSpec = toml::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.targets == 0 || self.summary_len == 0 {
            return Err(Error::Config("features, targets and summary_len must be positive".into()));
        }
        if self.segments.is_empty() {
            return Err(Error::Config("at least one segment is required".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.gain.len() != self.targets || s.gain.iter().any(|r| r.len() != self.features) {
                return Err(Error::Config(format!("segment {i}: gain must be targets x features")));
            }
            if s.offset.as_ref().is_some_and(|o| o.len() != self.targets) {
                return Err(Error::Config(format!("segment {i}: offset must have one entry per target")));
            }
            s.mean.resolve(self.features, "mean")?;
            let std = s.std.resolve(self.features, "std")?;
            if std.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!("segment {i}: std must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Two segments of four features and two targets: the second segment
    /// shifts every feature mean by `shift` and changes the generating map.
    pub fn two_segment(first: usize, second: usize, shift: f64, noise_std: f64, seed: u64) -> Self {
        let gain1 = vec![vec![1.0, 0.5, -0.5, 0.25], vec![0.3, -1.0, 0.8, 0.5]];
        let gain2 = vec![vec![0.25, -0.5, 1.0, 0.5], vec![-0.8, 0.5, 0.3, -1.0]];
        SynthSpec {
            features: 4,
            targets: 2,
            summary_len: 4,
            noise_std,
            seed,
            segments: vec![
                Segment {
                    len: first,
                    mean: PerFeature::Scalar(0.0),
                    std: PerFeature::Scalar(1.0),
                    gain: gain1,
                    offset: Some(vec![0.0, 1.0]),
                },
                Segment {
                    len: second,
                    mean: PerFeature::Scalar(shift),
                    std: PerFeature::Scalar(1.0),
                    gain: gain2,
                    offset: Some(vec![1.0, -1.0]),
                },
            ],
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            features: (0..self.features).map(|i| format!("x{i}")).collect(),
            targets: (0..self.targets).map(|i| format!("y{i}")).collect(),
            mask: None,
        }
    }
}

/// Draws a stream from `spec` with the given seed.
pub fn synth_stream(spec: &SynthSpec, seed: u64, latency: Latency) -> Result<SynthStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.features;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.total_len());
    let mut labels = Vec::with_capacity(spec.total_len());
    let mut clean_targets = Vec::with_capacity(spec.total_len());
    let mut segment_of = Vec::with_capacity(spec.total_len());
    let mut drift_points = Vec::new();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (si, seg) in spec.segments.iter().enumerate() {
        if si > 0 {
            drift_points.push(rows.len());
        }
        let mean = seg.mean.resolve(f, "mean")?;
        let std = seg.std.resolve(f, "std")?;
        let offset = seg.offset.clone().unwrap_or_else(|| vec![0.0; spec.targets]);
        for _ in 0..seg.len {
            let x: Vec<f64> = (0..f).map(|i| mean[i] + std[i] * std_normal.sample(&mut rng)).collect();
            rows.push(x);
            let start = rows.len().saturating_sub(spec.summary_len);
            let recent = &rows[start..];
            let m: Vec<f64> = (0..f)
                .map(|i| recent.iter().map(|r| r[i]).sum::<f64>() / recent.len() as f64)
                .collect();
            let clean: Vec<f64> = seg
                .gain
                .iter()
                .zip(&offset)
                .map(|(row, b)| b + row.iter().zip(&m).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            let noisy = clean
                .iter()
                .map(|v| v + spec.noise_std * std_normal.sample(&mut rng))
                .collect();
            labels.push(Some(noisy));
            clean_targets.push(clean);
            segment_of.push(si);
        }
    }
    let schema = spec.schema();
    let stream = Stream::from_rows(rows, labels, latency)?.with_names(schema.features, schema.targets);
    Ok(SynthStream {
        stream,
        drift_points,
        clean_targets,
        segment_of,
    })
}

/// Writes a generated stream as CSV (features then targets, with header).
pub fn write_csv(stream: &Stream, path: &Path) -> Result<()> {
    let mut w = super::report::csv_writer(path)?;
    let header: Vec<&str> = stream
        .feature_names
        .iter()
        .chain(&stream.target_names)
        .map(String::as_str)
        .collect();
    w.write_record(&header)?;
    for s in stream.samples() {
        let mut row: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
        match s.ground_truth() {
            Some(y) => row.extend(y.iter().map(|v| format!("{v:?}"))),
            None => row.extend(std::iter::repeat_n(String::new(), stream.n_targets())),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{mmd2, GaussianKernel};
    use crate::ingest::{read_csv, Schema};

    #[test]
    fn deterministic_and_segmented() {
        let spec = SynthSpec::two_segment(50, 30, 3.0, 0.1, 0);
        let a = synth_stream(&spec, 4, Latency::Steps(0)).unwrap();
        let b = synth_stream(&spec, 4, Latency::Steps(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.drift_points, vec![50]);
        assert_eq!(a.stream.len(), 80);
        assert_ne!(a, synth_stream(&spec, 5, Latency::Steps(0)).unwrap());
    }

    #[test]
    fn single_segment_has_no_drift_points() {
        let mut spec = SynthSpec::two_segment(40, 0, 0.0, 0.1, 0);
        spec.segments.truncate(1);
        assert!(synth_stream(&spec, 0, Latency::Steps(0)).unwrap().drift_points.is_empty());
    }

    #[test]
    fn noiseless_generator_is_exact() {
        let spec = SynthSpec::two_segment(20, 20, 3.0, 0.0, 0);
        let s = synth_stream(&spec, 1, Latency::Steps(0)).unwrap();
        for (t, clean) in s.clean_targets.iter().enumerate() {
            assert_eq!(s.stream.sample(t).ground_truth().unwrap(), clean.as_slice());
        }
    }

    #[test]
    fn mean_shift_separates_segments() {
        let spec = SynthSpec::two_segment(400, 400, 3.0, 0.1, 0);
        let s = synth_stream(&spec, 2, Latency::Steps(0)).unwrap();
        let rows: Vec<Vec<f64>> = s.stream.samples().iter().map(|x| x.x.clone()).collect();
        let k = GaussianKernel::for_dimension(4).unwrap();
        let between = mmd2(&rows[..400], &rows[400..], &k).unwrap();
        let within = mmd2(&rows[..200], &rows[200..400], &k).unwrap();
        assert!(between > 0.1, "{between}");
        assert!(within < between / 10.0);
    }

    #[test]
    fn csv_round_trip() {
        let spec = SynthSpec::two_segment(10, 10, 3.0, 0.1, 0);
        let s = synth_stream(&spec, 3, Latency::Steps(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_csv(&s.stream, &path).unwrap();
        let schema: Schema = spec.schema();
        let back = read_csv(std::fs::File::open(&path).unwrap(), &schema, Latency::Steps(2)).unwrap();
        assert_eq!(back, s.stream);
    }

    #[test]
    fn spec_from_toml() {
        let text = r#"
            features = 2
            targets = 1
            noise_std = 0.1
            [[segments]]
            len = 5
            gain = [[1.0, 2.0]]
            [[segments]]
            len = 5
            mean = [3.0, 3.0]
            gain = [[1.0, 2.0]]
            offset = [0.5]
        "#;
        let spec: SynthSpec = toml::from_str(text).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.summary_len, 4);
        assert_eq!(synth_stream(&spec, 0, Latency::Steps(0)).unwrap().drift_points, vec![5]);
        let bad: SynthSpec = toml::from_str(&text.replace("[[1.0, 2.0]]\n            offset", "[[1.0]]\n            offset")).unwrap();
        assert!(bad.validate().is_err());
    }
}
