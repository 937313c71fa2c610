//! Loading, cleaning, normalizing and windowing of multivariate streams,
//! plus the label-latency visibility rule.
//!
//! A [`Stream`] is an immutable, chronologically indexed sequence of
//! [`Sample`]s. Labels are attached to every sample up front but are only
//! handed out through [`Stream::label_at`] / [`visible_labels`], which refuse
//! to expose a label before its release time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Delay between the arrival of a sample and the release of its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Latency {
    Steps(usize),
    /// Labels are never released.
    Never,
}

impl Latency {
    pub fn release_time(self, t: usize) -> Option<usize> {
        match self {
            Latency::Steps(tau) => t.checked_add(tau),
            Latency::Never => None,
        }
    }
}

/// One timestamped feature vector with an optional (delayed) label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: usize,
    pub x: Vec<f64>,
    y: Option<Vec<f64>>,
    /// `None` when the label is never released.
    pub label_release_t: Option<usize>,
}

impl Sample {
    pub fn new(t: usize, x: Vec<f64>, y: Option<Vec<f64>>, latency: Latency) -> Self {
        Self {
            t,
            x,
            y,
            label_release_t: latency.release_time(t),
        }
    }

    pub fn is_released(&self, now: usize) -> bool {
        self.label_release_t.is_some_and(|r| r <= now)
    }

    /// The label, if it exists and has been released by `now`.
    pub fn label(&self, now: usize) -> Option<&[f64]> {
        if self.is_released(now) {
            self.y.as_deref()
        } else {
            None
        }
    }

    /// Ground truth regardless of latency. Only for offline fitting and
    /// post-hoc evaluation, never for the online loop.
    pub fn ground_truth(&self) -> Option<&[f64]> {
        self.y.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    samples: Vec<Sample>,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
}

impl Stream {
    /// Builds a stream from aligned rows. `labels[i]` is the label of row `i`.
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        labels: Vec<Option<Vec<f64>>>,
        latency: Latency,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::dim("stream labels", rows.len(), labels.len()));
        }
        let nf = rows.first().map_or(0, Vec::len);
        let nk = labels.iter().flatten().next().map_or(0, Vec::len);
        for r in &rows {
            if r.len() != nf {
                return Err(Error::dim("stream row", nf, r.len()));
            }
        }
        for y in labels.iter().flatten() {
            if y.len() != nk {
                return Err(Error::dim("stream label", nk, y.len()));
            }
        }
        let samples = rows
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(t, (x, y))| Sample::new(t, x, y, latency))
            .collect();
        Ok(Self {
            samples,
            feature_names: (0..nf).map(|i| format!("x{i}")).collect(),
            target_names: (0..nk).map(|i| format!("y{i}")).collect(),
        })
    }

    pub fn with_names(mut self, features: Vec<String>, targets: Vec<String>) -> Self {
        self.feature_names = features;
        self.target_names = targets;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_targets(&self) -> usize {
        self.target_names.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, t: usize) -> &Sample {
        &self.samples[t]
    }

    pub fn features(&self, t: usize) -> &[f64] {
        &self.samples[t].x
    }

    /// Label of sample `t` as seen at time `now`.
    pub fn label_at(&self, t: usize, now: usize) -> Option<&[f64]> {
        self.samples.get(t).and_then(|s| s.label(now))
    }

    /// Returns a copy with every feature vector mapped through `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                x: minmax_normalize(&s.x, stats),
                ..s.clone()
            })
            .collect();
        Self {
            samples,
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }

    /// Labels of samples before `boundary` count as historical and are
    /// released on arrival; later samples keep their latency.
    pub fn with_historical_prefix(mut self, boundary: usize) -> Self {
        for s in self.samples.iter_mut().take(boundary) {
            s.label_release_t = Some(s.t);
        }
        self
    }

    /// Copy of the stream with a different latency.
    pub fn with_latency(&self, latency: Latency) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                label_release_t: latency.release_time(s.t),
                ..s.clone()
            })
            .collect();
        Self {
            samples,
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
        }
    }
}

/// Feature min/max fitted on the offline split, plus target statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
    pub target_min: Vec<f64>,
    pub target_max: Vec<f64>,
}

impl NormStats {
    /// Fits statistics on samples with `t < boundary` only.
    pub fn fit(stream: &Stream, boundary: usize) -> Self {
        let nf = stream.n_features();
        let nk = stream.n_targets();
        let end = boundary.min(stream.len());
        let mut feature_min = vec![f64::INFINITY; nf];
        let mut feature_max = vec![f64::NEG_INFINITY; nf];
        let mut ys: Vec<Vec<f64>> = vec![Vec::new(); nk];
        for s in &stream.samples[..end] {
            for (f, &v) in s.x.iter().enumerate() {
                feature_min[f] = feature_min[f].min(v);
                feature_max[f] = feature_max[f].max(v);
            }
            if let Some(y) = s.ground_truth() {
                for (k, &v) in y.iter().enumerate() {
                    ys[k].push(v);
                }
            }
        }
        for f in 0..nf {
            if !feature_min[f].is_finite() {
                feature_min[f] = 0.0;
                feature_max[f] = 0.0;
            }
        }
        let target_mean = ys.iter().map(|v| crate::linalg::mean(v)).collect();
        let target_std = ys
            .iter()
            .map(|v| crate::linalg::population_variance(v).sqrt())
            .collect();
        let target_min = ys
            .iter()
            .map(|v| v.iter().copied().fold(f64::INFINITY, f64::min))
            .map(|m| if m.is_finite() { m } else { 0.0 })
            .collect();
        let target_max = ys
            .iter()
            .map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .map(|m| if m.is_finite() { m } else { 0.0 })
            .collect();
        Self {
            feature_min,
            feature_max,
            target_mean,
            target_std,
            target_min,
            target_max,
        }
    }

    /// Identity statistics (min 0, max 1) for `nf` features.
    pub fn identity(nf: usize, nk: usize) -> Self {
        Self {
            feature_min: vec![0.0; nf],
            feature_max: vec![1.0; nf],
            target_mean: vec![0.0; nk],
            target_std: vec![1.0; nk],
            target_min: vec![0.0; nk],
            target_max: vec![1.0; nk],
        }
    }

    /// Target `k` mapped onto the offline min-max scale. A constant target
    /// uses a unit range.
    pub fn scale_target(&self, k: usize, v: f64) -> f64 {
        let range = self.target_max[k] - self.target_min[k];
        if range > 0.0 {
            (v - self.target_min[k]) / range
        } else {
            v - self.target_min[k]
        }
    }

    pub fn target_range(&self, k: usize) -> f64 {
        let r = self.target_max[k] - self.target_min[k];
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }
}

/// Fills gaps in one feature series. Interior runs are linearly
/// interpolated between the nearest observed neighbours, boundary runs take
/// the nearest observed value.
pub fn interpolate_missing(series: &[Option<f64>], name: &str) -> Result<Vec<f64>> {
    let observed: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    let (&first, &last) = match (observed.first(), observed.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::AllMissing(name.to_string())),
    };
    let mut out = vec![0.0; series.len()];
    for slot in out.iter_mut().take(first) {
        *slot = series[first].unwrap();
    }
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (series[a].unwrap(), series[b].unwrap());
        out[a] = va;
        let span = (b - a) as f64;
        for i in a + 1..b {
            let w = (i - a) as f64 / span;
            out[i] = va + (vb - va) * w;
        }
    }
    out[last] = series[last].unwrap();
    for slot in out.iter_mut().skip(last + 1) {
        *slot = series[last].unwrap();
    }
    Ok(out)
}

/// Min-max scaling with the frozen offline statistics. Constant features map to 0.
pub fn minmax_normalize(x: &[f64], stats: &NormStats) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(f, &v)| {
            let (lo, hi) = (stats.feature_min[f], stats.feature_max[f]);
            if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.0
            }
        })
        .collect()
}

/// `F x L` input window; column `j` holds the features at time `end - L + 1 + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWindow {
    pub data: Matrix,
    pub end: usize,
}

impl InputWindow {
    pub fn len(&self) -> usize {
        self.data.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.cols() == 0
    }

    pub fn start(&self) -> usize {
        self.end + 1 - self.len()
    }
}

/// Window of the `len` feature vectors ending at `t` (inclusive).
pub fn make_window(stream: &Stream, t: usize, len: usize) -> Result<InputWindow> {
    if len == 0 || t + 1 < len || t >= stream.len() {
        return Err(Error::WindowUnavailable { t, len });
    }
    let cols: Vec<&[f64]> = (t + 1 - len..=t).map(|s| stream.features(s)).collect();
    Ok(InputWindow {
        data: Matrix::from_columns(&cols),
        end: t,
    })
}

/// All `(t, y)` pairs whose label has been released by `now`.
pub fn visible_labels(stream: &Stream, now: usize) -> Vec<(usize, &[f64])> {
    stream
        .samples
        .iter()
        .filter_map(|s| s.label(now).map(|y| (s.t, y)))
        .collect()
}

/// Names the feature, target and optional mask columns of a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub features: Vec<String>,
    pub targets: Vec<String>,
    #[serde(default)]
    pub mask: Option<String>,
}

impl Schema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Schema = toml::from_str(&text)?;
        if schema.features.is_empty() {
            return Err(Error::Ingest("schema lists no feature columns".into()));
        }
        if schema.targets.is_empty() {
            return Err(Error::Ingest("schema lists no target columns".into()));
        }
        Ok(schema)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }
}

fn parse_cell(cell: &str) -> Result<Option<f64>> {
    let c = cell.trim();
    if c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    c.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Ingest(format!("cannot parse `{c}` as a number")))
}

fn mask_keeps(cell: &str) -> Result<bool> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" | "" => Ok(false),
        other => Err(Error::Ingest(format!("bad mask value `{other}`"))),
    }
}

/// Reads an aligned CSV (one row per production cycle), drops masked rows,
/// interpolates feature gaps and attaches labels with the given latency.
/// Rows with any missing target are unlabeled.
pub fn load_csv(path: &Path, schema: &Schema, latency: Latency) -> Result<Stream> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, latency)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema, latency: Latency) -> Result<Stream> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Ingest(format!("column `{name}` not found")))
    };
    let fcols = schema
        .features
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;
    let tcols = schema
        .targets
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;
    let mcol = schema.mask.as_deref().map(find).transpose()?;

    let mut feats: Vec<Vec<Option<f64>>> = vec![Vec::new(); fcols.len()];
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if let Some(m) = mcol {
            if !mask_keeps(rec.get(m).unwrap_or(""))? {
                continue;
            }
        }
        for (f, &c) in fcols.iter().enumerate() {
            feats[f].push(parse_cell(rec.get(c).unwrap_or(""))?);
        }
        let y = tcols
            .iter()
            .map(|&c| parse_cell(rec.get(c).unwrap_or("")))
            .collect::<Result<Vec<_>>>()?;
        labels.push(y.into_iter().collect::<Option<Vec<f64>>>());
    }
    let filled = feats
        .iter()
        .zip(&schema.features)
        .map(|(col, name)| interpolate_missing(col, name))
        .collect::<Result<Vec<_>>>()?;
    let n = labels.len();
    let rows = (0..n)
        .map(|i| filled.iter().map(|c| c[i]).collect())
        .collect();
    Ok(Stream::from_rows(rows, labels, latency)?
        .with_names(schema.features.clone(), schema.targets.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_stream(n: usize, latency: Latency) -> Stream {
        let rows = (0..n).map(|t| vec![t as f64, -(t as f64)]).collect();
        let labels = (0..n).map(|t| Some(vec![t as f64 * 10.0])).collect();
        Stream::from_rows(rows, labels, latency).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(
            interpolate_missing(&[Some(1.0), None, Some(3.0)], "a").unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            interpolate_missing(&[None, Some(5.0), Some(5.0), None], "a").unwrap(),
            vec![5.0; 4]
        );
        // Line through (0, 0) and (3, 6) evaluated at 1 and 2.
        let oracle = |i: f64| 0.0 + (6.0 - 0.0) / 3.0 * i;
        assert_eq!(
            interpolate_missing(&[Some(0.0), None, None, Some(6.0)], "a").unwrap(),
            vec![0.0, oracle(1.0), oracle(2.0), 6.0]
        );
    }

    #[test]
    fn all_missing_feature_is_named() {
        let err = interpolate_missing(&[None, None], "moisture").unwrap_err();
        assert!(err.to_string().contains("moisture"));
    }

    #[test]
    fn minmax_examples() {
        let stats = NormStats {
            feature_min: vec![2.0, 0.0, 3.0],
            feature_max: vec![6.0, 1.0, 3.0],
            ..NormStats::identity(3, 0)
        };
        assert_eq!(minmax_normalize(&[2.0, 0.0, 3.0], &stats), vec![0.0, 0.0, 0.0]);
        assert_eq!(minmax_normalize(&[6.0, 1.0, 3.0], &stats)[..2], [1.0, 1.0]);
        let scalar_oracle = (5.0 - 2.0) / (6.0 - 2.0);
        assert_eq!(minmax_normalize(&[5.0, 0.5, 7.0], &stats)[0], scalar_oracle);
        // constant feature
        assert_eq!(minmax_normalize(&[5.0, 0.5, 7.0], &stats)[2], 0.0);
    }

    #[test]
    fn windows() {
        let s = ramp_stream(12, Latency::Steps(0));
        let w = make_window(&s, 5, 1).unwrap();
        assert_eq!(w.data.column(0), s.features(5).to_vec());
        assert!(matches!(
            make_window(&s, 10 - 2, 10),
            Err(Error::WindowUnavailable { .. })
        ));
        let w = make_window(&s, 11, 12).unwrap();
        assert_eq!(w.len(), 12);
        let slice_oracle: Vec<Vec<f64>> = s.samples()[0..12].iter().map(|x| x.x.clone()).collect();
        for (j, col) in slice_oracle.iter().enumerate() {
            assert_eq!(&w.data.column(j), col);
        }
        assert_eq!(w.start(), 0);
    }

    #[test]
    fn label_visibility() {
        let s = ramp_stream(10, Latency::Steps(0));
        assert_eq!(visible_labels(&s, 9).len(), 10);

        let s = ramp_stream(10, Latency::Steps(5));
        assert!(s.label_at(8, 8).is_none());
        assert!(s.label_at(3, 8).is_some());

        let s = ramp_stream(10, Latency::Steps(3));
        let brute: Vec<usize> = (0..10).filter(|&t| t + 3 <= 7).collect();
        let got: Vec<usize> = visible_labels(&s, 7).iter().map(|p| p.0).collect();
        assert_eq!(got, brute);
        assert_eq!(got, (0..=4).collect::<Vec<_>>());

        let s = ramp_stream(10, Latency::Never);
        assert!(visible_labels(&s, usize::MAX).is_empty());
    }

    #[test]
    fn csv_with_gaps_and_mask() {
        let data = "a,b,m,y\n1,,1,10\n,4,0,11\n3,6,1,\n5,8,1,13\n";
        let schema = Schema {
            features: vec!["a".into(), "b".into()],
            targets: vec!["y".into()],
            mask: Some("m".into()),
        };
        let s = read_csv(data.as_bytes(), &schema, Latency::Steps(1)).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.features(0), &[1.0, 6.0]);
        assert_eq!(s.features(1), &[3.0, 6.0]);
        assert_eq!(s.features(2), &[5.0, 8.0]);
        assert!(s.sample(1).ground_truth().is_none());
        assert_eq!(s.label_at(2, 3), Some(&[13.0][..]));
        assert_eq!(s.label_at(2, 2), None);
    }

    #[test]
    fn stats_ignore_samples_after_boundary() {
        let s = ramp_stream(20, Latency::Steps(0));
        let st = NormStats::fit(&s, 10);
        assert_eq!(st.feature_max[0], 9.0);
        let full = NormStats::fit(&s, 20);
        assert_ne!(st, full);
    }
}
