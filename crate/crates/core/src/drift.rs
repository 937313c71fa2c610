//! Unsupervised drift awareness.
//!
//! The squared MMD between the reference window (recorded at the last
//! adaptation) and the current detection window is mapped onto a severity
//! level. Detection is gated by window fill and a cooldown, and the first
//! `N_init` adaptation events are capped at the mildest level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::squared_distance;

/// Gaussian RBF kernel `exp(-|a-b|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    sigma: f64,
    inv_two_sigma2: f64,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!(
                "kernel bandwidth must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            sigma,
            inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
        })
    }

    /// Bandwidth tied to the representation dimension: `sqrt(C / 2)`.
    pub fn for_dimension(dim: usize) -> Result<Self> {
        Self::new((dim as f64 / 2.0).sqrt())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        (-squared_distance(a, b) * self.inv_two_sigma2).exp()
    }
}

pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    Ok(GaussianKernel::new(sigma)?.eval(a, b))
}

/// `L_w` chronologically ordered feature vectors ending at time `end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionWindow {
    pub vectors: Vec<Vec<f64>>,
    pub end: usize,
}

impl DetectionWindow {
    pub fn new(vectors: Vec<Vec<f64>>, end: usize) -> Self {
        Self { vectors, end }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Biased squared MMD between two equally sized windows, diagonal terms included.
pub fn mmd2(reference: &[Vec<f64>], current: &[Vec<f64>], kernel: &GaussianKernel) -> Result<f64> {
    let n = reference.len();
    if current.len() != n {
        return Err(Error::dim("mmd2 window length", n, current.len()));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let within = |w: &[Vec<f64>]| -> f64 {
        // k is symmetric with k(a, a) = 1
        let mut s = n as f64;
        for i in 0..n {
            for j in i + 1..n {
                s += 2.0 * kernel.eval(&w[i], &w[j]);
            }
        }
        s
    };
    let mut cross = 0.0;
    for a in reference {
        for b in current {
            cross += kernel.eval(a, b);
        }
    }
    let inv = 1.0 / (n * n) as f64;
    Ok(within(reference) * inv + within(current) * inv - 2.0 * cross * inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mild: f64,
    pub moderate: f64,
    pub severe: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            mild: 0.05,
            moderate: 0.12,
            severe: 0.2,
        }
    }
}

impl Thresholds {
    /// Thresholds that never fire.
    pub fn disabled() -> Self {
        Self {
            mild: f64::INFINITY,
            moderate: f64::INFINITY,
            severe: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |a: f64, b: f64| a < b || (a == f64::INFINITY && b == f64::INFINITY);
        if self.mild.is_nan()
            || !increasing(self.mild, self.moderate)
            || !increasing(self.moderate, self.severe)
        {
            return Err(Error::Config(format!(
                "drift thresholds must be strictly increasing: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Severity level in `{0, 1, 2, 3}` with left-closed intervals.
pub fn categorize(v: f64, th: &Thresholds) -> u8 {
    if v >= th.severe {
        3
    } else if v >= th.moderate {
        2
    } else if v >= th.mild {
        1
    } else {
        0
    }
}

/// Caps `level` at 1 while the cumulative adaptation count is at most `n_init`.
pub fn apply_initial_cap(level: u8, count: usize, n_init: usize) -> u8 {
    if count <= n_init {
        level.min(1)
    } else {
        level
    }
}

/// Proof that a drift-triggered fine-tuning run finished; required to promote
/// the reference window.
#[derive(Debug)]
pub struct CompletedAdaptation {
    pub(crate) t: usize,
}

impl CompletedAdaptation {
    pub(crate) fn at(t: usize) -> Self {
        Self { t }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftState {
    pub reference: Option<DetectionWindow>,
    /// Time of the most recent adaptation (or adaptation attempt).
    pub t_last: Option<usize>,
    pub cooldown: usize,
    /// Cumulative number of drift events that triggered adaptation.
    pub events: usize,
    pub thresholds: Thresholds,
    pub n_init: usize,
    pub window_len: usize,
    pub kernel: GaussianKernel,
}

/// Result of one drift evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftAssessment {
    pub score: f64,
    pub raw_level: u8,
    pub effective_level: u8,
}

impl DriftState {
    pub fn new(
        dim: usize,
        window_len: usize,
        cooldown: usize,
        thresholds: Thresholds,
        n_init: usize,
    ) -> Result<Self> {
        thresholds.validate()?;
        if window_len == 0 {
            return Err(Error::Config("detection window length must be positive".into()));
        }
        Ok(Self {
            reference: None,
            t_last: None,
            cooldown,
            events: 0,
            thresholds,
            n_init,
            window_len,
            kernel: GaussianKernel::for_dimension(dim)?,
        })
    }

    /// Installs the initial reference (e.g. the tail of the offline split).
    pub fn bootstrap(&mut self, reference: DetectionWindow) {
        self.reference = Some(reference);
    }

    pub fn should_detect(&self, now: usize, window_fill: usize) -> bool {
        window_fill == self.window_len
            && self.reference.is_some()
            && self
                .t_last
                .is_none_or(|last| now.saturating_sub(last) >= self.cooldown)
    }

    /// Scores the current window against the reference and applies the
    /// initial cap as if this event were the next adaptation.
    pub fn assess(&self, current: &DetectionWindow) -> Result<DriftAssessment> {
        let reference = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::Config("no reference window".into()))?;
        let score = mmd2(&reference.vectors, &current.vectors, &self.kernel)?;
        let raw_level = categorize(score, &self.thresholds);
        let effective_level = apply_initial_cap(raw_level, self.events + 1, self.n_init);
        Ok(DriftAssessment {
            score,
            raw_level,
            effective_level,
        })
    }

    /// Starts a cooldown without an adaptation (e.g. no labels to fine-tune on).
    pub fn note_attempt(&mut self, now: usize) {
        self.t_last = Some(now);
    }

    /// Records `current` as the new reference after a completed adaptation.
    pub fn promote_reference(&mut self, current: DetectionWindow, done: CompletedAdaptation) {
        debug_assert!(done.t >= current.end, "adaptation must cover the current window");
        self.reference = Some(current);
        self.t_last = Some(done.t);
        self.events += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_mmd(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
        let k = |x: &[f64], y: &[f64]| {
            let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
            (-d / (2.0 * sigma * sigma)).exp()
        };
        let n = a.len() as f64;
        let mut s = 0.0;
        for x in a {
            for y in a {
                s += k(x, y) / (n * n);
            }
        }
        for x in b {
            for y in b {
                s += k(x, y) / (n * n);
            }
        }
        for x in a {
            for y in b {
                s -= 2.0 * k(x, y) / (n * n);
            }
        }
        s
    }

    #[test]
    fn kernel_examples() {
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.7).unwrap(), 1.0);
        let v = gaussian_kernel(&[0.0], &[1.3], 1.3).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.6065).abs() < 1e-4);
        let far = gaussian_kernel(&[0.0], &[10.0], 1.0).unwrap();
        assert!(far < 1e-21);
        assert!(gaussian_kernel(&[0.0], &[1.0], 0.0).is_err());
        assert!(gaussian_kernel(&[0.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn mmd_examples() {
        let k = GaussianKernel::new(1.0).unwrap();
        let a = vec![vec![0.0], vec![0.0]];
        let b = vec![vec![1.0], vec![1.0]];
        let v = mmd2(&a, &b, &k).unwrap();
        let oracle = brute_mmd(&a, &b, 1.0);
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.7869).abs() < 1e-4);
        assert_eq!(mmd2(&b, &a, &k).unwrap(), v);
        assert!(mmd2(&a, &a, &k).unwrap().abs() < 1e-12);
        assert!(mmd2(&a, &b[..1], &k).is_err());
    }

    #[test]
    fn severity_boundaries() {
        let th = Thresholds::default();
        assert_eq!(categorize(0.04, &th), 0);
        assert_eq!(categorize(0.049, &th), 0);
        assert_eq!(categorize(0.05, &th), 1);
        assert_eq!(categorize(0.12, &th), 2);
        assert_eq!(categorize(0.2, &th), 3);
        assert_eq!(categorize(0.25, &th), 3);
        assert_eq!(categorize(1e9, &Thresholds::disabled()), 0);
        assert!(Thresholds { mild: 0.1, moderate: 0.1, severe: 0.2 }.validate().is_err());
        assert!(Thresholds::disabled().validate().is_ok());
    }

    #[test]
    fn initial_cap() {
        assert_eq!(apply_initial_cap(3, 2, 3), 1);
        assert_eq!(apply_initial_cap(3, 4, 3), 3);
        for c in 0..10 {
            assert_eq!(apply_initial_cap(0, c, 3), 0);
        }
    }

    fn window(vals: &[f64], end: usize) -> DetectionWindow {
        DetectionWindow::new(vals.iter().map(|&v| vec![v, -v]).collect(), end)
    }

    #[test]
    fn detection_gating() {
        let mut st = DriftState::new(2, 3, 3, Thresholds::default(), 3).unwrap();
        assert_eq!(st.kernel.sigma(), 1.0);
        // no reference yet
        assert!(!st.should_detect(10, 3));
        st.bootstrap(window(&[0.0, 0.1, 0.2], 9));
        assert!(!st.should_detect(10, 2));
        assert!(st.should_detect(10, 3));

        let cur = window(&[1.0, 1.1, 1.2], 10);
        st.promote_reference(cur.clone(), CompletedAdaptation::at(10));
        assert_eq!(st.events, 1);
        assert!(st.assess(&cur).unwrap().score.abs() < 1e-12);
        assert!(!st.should_detect(11, 3));
        assert!(!st.should_detect(12, 3));
        assert!(st.should_detect(13, 3));
        st.promote_reference(window(&[1.0, 1.1, 1.3], 13), CompletedAdaptation::at(13));
        assert_eq!(st.events, 2);
    }

    #[test]
    fn cap_counts_current_event() {
        let mut st = DriftState::new(1, 1, 0, Thresholds::default(), 3).unwrap();
        st.bootstrap(DetectionWindow::new(vec![vec![0.0]], 0));
        let far = DetectionWindow::new(vec![vec![100.0]], 1);
        for i in 0..3 {
            assert_eq!(st.assess(&far).unwrap().effective_level, 1);
            st.promote_reference(DetectionWindow::new(vec![vec![0.0]], i + 1), CompletedAdaptation::at(i + 1));
        }
        let a = st.assess(&far).unwrap();
        assert_eq!((a.raw_level, a.effective_level), (3, 3));
    }

    #[test]
    fn mean_shift_monotonicity() {
        // Expected MMD grows with the shift; check rank correlation over repetitions.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = GaussianKernel::for_dimension(4).unwrap();
        let deltas: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        let mut means = Vec::new();
        for &d in &deltas {
            let mut acc = 0.0;
            for _ in 0..200 {
                let draw = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Vec<f64>> {
                    (0..5)
                        .map(|_| {
                            (0..4)
                                .map(|_| { let v: f64 = StandardNormal.sample(rng); v } + shift)
                                .collect()
                        })
                        .collect()
                };
                let a = draw(&mut rng, 0.0);
                let b = draw(&mut rng, d);
                acc += mmd2(&a, &b, &k).unwrap();
            }
            means.push(acc / 200.0);
        }
        let rho = spearman(&deltas, &means);
        assert!(rho > 0.9, "spearman {rho}, means {means:?}");
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    proptest! {
        #[test]
        fn mmd_nonnegative_symmetric_and_matches_oracle(
            n in 1usize..8,
            c in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
            };
            let (a, b) = (draw(), draw());
            let k = GaussianKernel::for_dimension(c).unwrap();
            let v = mmd2(&a, &b, &k).unwrap();
            prop_assert!(v >= -1e-9);
            prop_assert!((v - mmd2(&b, &a, &k).unwrap()).abs() < 1e-9);
            prop_assert!((v - brute_mmd(&a, &b, k.sigma())).abs() < 1e-12);
        }

        #[test]
        fn categorize_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let th = Thresholds::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(categorize(lo, &th) <= categorize(hi, &th));
        }
    }
}
