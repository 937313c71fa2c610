//! Adaptation-set construction: current labels, similar history, then
//! resampled and perturbed variants until the target size is reached.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{diagonal_variance, perturb_window, resample_window, ResampleOp};
use super::replay::ReplayBuffer;
use crate::drift::{mmd2, DetectionWindow, GaussianKernel};
use crate::error::{Error, Result};
use crate::ingest::{make_window, Stream};
use crate::predictor::{Example, MemoryContext};

/// Where an adaptation entry came from, in priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    CurrentLabeled,
    SimilarHistory,
    Resampled,
    Perturbed,
}

impl Source {
    /// 0 for current labels, 1 for history, 2 for synthetic entries.
    pub fn priority(self) -> u8 {
        match self {
            Source::CurrentLabeled => 0,
            Source::SimilarHistory => 1,
            Source::Resampled | Source::Perturbed => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationEntry {
    pub example: Example,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Composition {
    pub current_labeled: usize,
    pub similar_history: usize,
    pub resampled: usize,
    pub perturbed: usize,
}

impl Composition {
    pub fn total(&self) -> usize {
        self.current_labeled + self.similar_history + self.resampled + self.perturbed
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdaptationSet {
    pub entries: Vec<AdaptationEntry>,
}

impl AdaptationSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn composition(&self) -> Composition {
        let mut c = Composition::default();
        for e in &self.entries {
            match e.source {
                Source::CurrentLabeled => c.current_labeled += 1,
                Source::SimilarHistory => c.similar_history += 1,
                Source::Resampled => c.resampled += 1,
                Source::Perturbed => c.perturbed += 1,
            }
        }
        c
    }

    /// True when no entry precedes one of higher priority.
    pub fn priority_ordered(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| w[0].source.priority() <= w[1].source.priority())
    }

    pub fn examples(&self) -> Vec<Example> {
        self.entries.iter().map(|e| e.example.clone()).collect()
    }
}

/// A run of consecutive replay records scored against the current window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Index of the first record in the buffer.
    pub start: usize,
    pub len: usize,
    pub score: f64,
}

/// Scores every stride-1 run of `current.len()` consecutive buffer records by
/// MMD against `current` (after projecting each record with `project`) and
/// keeps those strictly below `tau_h`, best first.
pub fn retrieve_similar(
    buffer: &ReplayBuffer,
    current: &DetectionWindow,
    tau_h: f64,
    kernel: &GaussianKernel,
    project: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<Candidate>> {
    let len = current.len();
    if len == 0 || buffer.len() < len {
        return Ok(Vec::new());
    }
    let projected: Vec<Vec<f64>> = buffer.records().map(|r| project(&r.x)).collect();
    let mut out = Vec::new();
    for start in 0..=projected.len() - len {
        let score = mmd2(&projected[start..start + len], &current.vectors, kernel)?;
        if score < tau_h {
            out.push(Candidate { start, len, score });
        }
    }
    out.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.start.cmp(&b.start)));
    Ok(out)
}

/// Size and augmentation settings for [`build_adaptation_set`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetParams {
    /// Minimum set size.
    pub n_ft: usize,
    /// Similarity threshold for history retrieval.
    pub tau_h: f64,
    /// Perturbation magnitude.
    pub epsilon: f64,
    /// Predictor input window length.
    pub window: usize,
}

/// Everything the builder reads; `stream` holds normalized features.
pub struct SetInputs<'a> {
    pub now: usize,
    pub stream: &'a Stream,
    pub buffer: &'a ReplayBuffer,
    pub current: &'a DetectionWindow,
    pub kernel: &'a GaussianKernel,
    pub project: &'a dyn Fn(&[f64]) -> Vec<f64>,
    pub context: &'a dyn Fn(usize) -> MemoryContext,
}

fn example_at(inputs: &SetInputs<'_>, window: usize, t: usize, target: &[f64]) -> Option<Example> {
    let w = make_window(inputs.stream, t, window).ok()?;
    Some(Example {
        t,
        window: w.data,
        context: (inputs.context)(t),
        target: target.to_vec(),
    })
}

/// Fills an adaptation set in priority order: labeled samples inside the
/// current detection window, samples from similar history windows, then
/// alternating rounds of resampled and perturbed variants of those until at
/// least `n_ft` entries exist.
pub fn build_adaptation_set<R: Rng + ?Sized>(
    inputs: &SetInputs<'_>,
    params: &SetParams,
    rng: &mut R,
) -> Result<AdaptationSet> {
    let mut set = AdaptationSet::default();
    let n_ft = params.n_ft;
    let full = |set: &AdaptationSet| set.len() >= n_ft;

    let cur = inputs.current;
    let first = (cur.end + 1).saturating_sub(cur.len());
    let mut used = std::collections::BTreeSet::new();
    for t in first..=cur.end {
        if full(&set) {
            break;
        }
        if let Some(y) = inputs.stream.label_at(t, inputs.now) {
            if let Some(example) = example_at(inputs, params.window, t, y) {
                used.insert(t);
                set.entries.push(AdaptationEntry {
                    example,
                    source: Source::CurrentLabeled,
                });
            }
        }
    }

    if !full(&set) {
        let candidates = retrieve_similar(inputs.buffer, cur, params.tau_h, inputs.kernel, inputs.project)?;
        'outer: for c in candidates {
            for i in c.start..c.start + c.len {
                if full(&set) {
                    break 'outer;
                }
                let rec = inputs.buffer.get(i).expect("candidate inside buffer");
                if rec.t > inputs.now || !used.insert(rec.t) {
                    continue;
                }
                if let Some(example) = example_at(inputs, params.window, rec.t, &rec.y) {
                    set.entries.push(AdaptationEntry {
                        example,
                        source: Source::SimilarHistory,
                    });
                }
            }
        }
    }

    let base_len = set.len();
    if base_len == 0 {
        return Err(Error::NoLabels { t: inputs.now });
    }
    if full(&set) {
        return Ok(set);
    }

    let rows: Vec<&[f64]> = set.entries.iter().map(|e| inputs.stream.features(e.example.t)).collect();
    let features = inputs.stream.n_features();
    let var = diagonal_variance(&rows, features);

    loop {
        for source in [Source::Resampled, Source::Perturbed] {
            for i in 0..base_len {
                if full(&set) {
                    return Ok(set);
                }
                let base = &set.entries[i].example;
                let window = match source {
                    Source::Resampled => resample_window(&base.window, ResampleOp::random(rng)),
                    _ => perturb_window(&base.window, params.epsilon, &var, rng),
                };
                let example = Example {
                    window,
                    ..base.clone()
                };
                set.entries.push(AdaptationEntry { example, source });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::replay::ReplayRecord;
    use super::*;
    use crate::ingest::Latency;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ramp(n: usize, latency: Latency) -> Stream {
        let rows: Vec<Vec<f64>> = (0..n).map(|t| vec![t as f64 / n as f64, 0.5]).collect();
        let labels = (0..n).map(|t| Some(vec![t as f64])).collect();
        Stream::from_rows(rows, labels, latency).unwrap()
    }

    fn identity(x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn no_context(_t: usize) -> MemoryContext {
        MemoryContext {
            pooled: Vec::new(),
            present: Vec::new(),
        }
    }

    fn window_of(stream: &Stream, end: usize, len: usize) -> DetectionWindow {
        DetectionWindow::new((end + 1 - len..=end).map(|t| stream.features(t).to_vec()).collect(), end)
    }

    #[test]
    fn current_labels_alone_can_fill_the_set() {
        let stream = ramp(400, Latency::Steps(0));
        let current = window_of(&stream, 399, 300);
        let buffer = ReplayBuffer::new(10);
        let kernel = GaussianKernel::for_dimension(2).unwrap();
        let inputs = SetInputs {
            now: 399,
            stream: &stream,
            buffer: &buffer,
            current: &current,
            kernel: &kernel,
            project: &identity,
            context: &no_context,
        };
        let params = SetParams { n_ft: 300, tau_h: 0.05, epsilon: 0.01, window: 4 };
        let set = build_adaptation_set(&inputs, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let c = set.composition();
        assert_eq!((c.current_labeled, c.total()), (300, 300));
    }

    #[test]
    fn synthetic_fill_counts() {
        // 10 current labels and 40 retrievable history samples.
        let n = 200;
        let stream = ramp(n, Latency::Steps(0));
        let current = window_of(&stream, 150, 10);
        let mut buffer = ReplayBuffer::new(100);
        for t in 100..140 {
            buffer.push(ReplayRecord { t, x: stream.features(150).to_vec(), y: vec![t as f64] });
        }
        let kernel = GaussianKernel::for_dimension(2).unwrap();
        let inputs = SetInputs {
            now: 150,
            stream: &stream,
            buffer: &buffer,
            current: &current,
            kernel: &kernel,
            project: &identity,
            context: &no_context,
        };
        let params = SetParams { n_ft: 300, tau_h: 0.05, epsilon: 0.01, window: 4 };
        let set = build_adaptation_set(&inputs, &params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = set.composition();
        assert_eq!(c.current_labeled, 10);
        assert_eq!(c.similar_history, 40);
        // Reference enumerator: alternate rounds of 50 resampled / 50 perturbed.
        let mut left = 250;
        let (mut rs, mut pt) = (0, 0);
        let mut round = 0;
        while left > 0 {
            let take = left.min(50);
            if round % 2 == 0 { rs += take } else { pt += take }
            left -= take;
            round += 1;
        }
        assert_eq!((c.resampled, c.perturbed), (rs, pt));
        assert_eq!(c.total(), 300);
        assert!(set.priority_ordered());
        for e in &set.entries[50..] {
            let src = set.entries.iter().find(|b| b.example.t == e.example.t).unwrap();
            assert_eq!(src.example.target, e.example.target);
        }
    }

    #[test]
    fn no_labels_aborts() {
        let stream = ramp(50, Latency::Never);
        let current = window_of(&stream, 49, 5);
        let buffer = ReplayBuffer::new(10);
        let kernel = GaussianKernel::for_dimension(2).unwrap();
        let inputs = SetInputs {
            now: 49,
            stream: &stream,
            buffer: &buffer,
            current: &current,
            kernel: &kernel,
            project: &identity,
            context: &no_context,
        };
        let params = SetParams { n_ft: 30, tau_h: 0.05, epsilon: 0.01, window: 4 };
        let err = build_adaptation_set(&inputs, &params, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::NoLabels { t: 49 })));
    }

    #[test]
    fn retrieval_keeps_same_regime_only() {
        // Biased MMD between two same-distribution windows of n unit-variance
        // vectors averages about 1.44/n here, so windows must be long enough
        // for same-regime scores to fall below the threshold.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 3;
        let len = 60;
        let mut draw = |mu: f64| -> Vec<f64> {
            (0..dim).map(|_| mu + { let v: f64 = StandardNormal.sample(&mut rng); v }).collect()
        };
        let mut buffer = ReplayBuffer::new(400);
        for t in 0..300 {
            let mu = if t < 150 { 0.0 } else { 3.0 };
            buffer.push(ReplayRecord { t, x: draw(mu), y: vec![0.0] });
        }
        let current = DetectionWindow::new((0..len).map(|_| draw(0.0)).collect(), 500);
        let kernel = GaussianKernel::for_dimension(dim).unwrap();
        let tau = 0.05;
        let found = retrieve_similar(&buffer, &current, tau, &kernel, identity).unwrap();

        // Brute force every candidate.
        let xs: Vec<Vec<f64>> = buffer.records().map(|r| r.x.clone()).collect();
        let mut expected: Vec<(usize, f64)> = (0..=300 - len)
            .map(|s| (s, mmd2(&xs[s..s + len], &current.vectors, &kernel).unwrap()))
            .filter(|(_, v)| *v < tau)
            .collect();
        expected.sort_by(|a, b| a.1.total_cmp(&b.1));
        assert_eq!(found.iter().map(|c| c.start).collect::<Vec<_>>(), expected.iter().map(|e| e.0).collect::<Vec<_>>());
        assert!(found.len() > 10);
        // Pure second-regime windows never qualify; qualifying windows are
        // mostly first-regime.
        assert!(found.iter().all(|c| c.start + c.len / 2 < 150));
        assert!(found.iter().any(|c| c.start + c.len <= 150));
        assert!(found.windows(2).all(|w| w[0].score <= w[1].score));

        // An exact copy of the current window always scores 0.
        let mut buffer = ReplayBuffer::new(len);
        for (i, v) in current.vectors.iter().enumerate() {
            buffer.push(ReplayRecord { t: i, x: v.clone(), y: vec![0.0] });
        }
        let found = retrieve_similar(&buffer, &current, tau, &kernel, identity).unwrap();
        assert!(found[0].score.abs() < 1e-12);
        let lowest = found[0].score;
        assert!(retrieve_similar(&buffer, &current, lowest, &kernel, identity).unwrap().is_empty());
        assert!(retrieve_similar(&ReplayBuffer::new(3), &current, tau, &kernel, identity).unwrap().is_empty());
    }
}
