//! Paired permutation test and percentile bootstrap.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::models::N_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    BalancedAccuracyDiff,
    AccuracyDiff,
}

impl FromStr for Statistic {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "balanced-accuracy" | "balanced-accuracy-diff" | "bal-acc" => {
                Ok(Statistic::BalancedAccuracyDiff)
            }
            "accuracy" | "accuracy-diff" => Ok(Statistic::AccuracyDiff),
            other => Err(MetricsError::UnknownStatistic(other.to_string())),
        }
    }
}

/// Per-slide correctness of two systems on the same slides.
#[derive(Clone, Debug)]
pub struct PairedOutcomes {
    class: Vec<usize>,
    correct_a: Vec<bool>,
    correct_b: Vec<bool>,
    support: [usize; N_CLASSES],
}

impl PairedOutcomes {
    pub fn new(truth: &[usize], pred_a: &[usize], pred_b: &[usize]) -> Result<Self, MetricsError> {
        if truth.len() != pred_a.len() || truth.len() != pred_b.len() {
            return Err(MetricsError::LengthMismatch {
                left: pred_a.len(),
                right: pred_b.len(),
            });
        }
        if truth.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut support = [0; N_CLASSES];
        for &t in truth {
            if t >= N_CLASSES {
                return Err(MetricsError::LabelOutOfRange(t));
            }
            support[t] += 1;
        }
        Ok(Self {
            class: truth.to_vec(),
            correct_a: truth.iter().zip(pred_a).map(|(t, p)| t == p).collect(),
            correct_b: truth.iter().zip(pred_b).map(|(t, p)| t == p).collect(),
            support,
        })
    }

    pub fn len(&self) -> usize {
        self.class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_empty()
    }

    /// Statistic with slide `i`'s outcomes swapped wherever `swap(i)` holds.
    pub fn statistic_with(&self, statistic: Statistic, swap: impl Fn(usize) -> bool) -> f64 {
        let mut hits_a = [0usize; N_CLASSES];
        let mut hits_b = [0usize; N_CLASSES];
        for i in 0..self.class.len() {
            let (a, b) = if swap(i) {
                (self.correct_b[i], self.correct_a[i])
            } else {
                (self.correct_a[i], self.correct_b[i])
            };
            hits_a[self.class[i]] += usize::from(a);
            hits_b[self.class[i]] += usize::from(b);
        }
        match statistic {
            Statistic::AccuracyDiff => {
                let n = self.class.len() as f64;
                (hits_a.iter().sum::<usize>() as f64 - hits_b.iter().sum::<usize>() as f64) / n
            }
            Statistic::BalancedAccuracyDiff => {
                let mut diff = 0.0;
                let mut classes = 0usize;
                for c in 0..N_CLASSES {
                    if self.support[c] > 0 {
                        diff += (hits_a[c] as f64 - hits_b[c] as f64) / self.support[c] as f64;
                        classes += 1;
                    }
                }
                diff / classes as f64
            }
        }
    }

    pub fn observed(&self, statistic: Statistic) -> f64 {
        self.statistic_with(statistic, |_| false)
    }
}

const TIE_TOLERANCE: f64 = 1e-12;

/// Two-sided sign-flip permutation test:
/// `p = (1 + #{|T_perm| ≥ |T_obs|}) / (1 + n_permutations)`.
pub fn paired_permutation_test(
    outcomes: &PairedOutcomes,
    statistic: Statistic,
    n_permutations: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if n_permutations == 0 {
        return Err(MetricsError::InvalidArgument("n_permutations must be >= 1"));
    }
    let observed = outcomes.observed(statistic).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips = vec![false; outcomes.len()];
    let mut extreme = 0usize;
    for _ in 0..n_permutations {
        for f in flips.iter_mut() {
            *f = rng.random::<bool>();
        }
        let t = outcomes.statistic_with(statistic, |i| flips[i]);
        if t.abs() >= observed - TIE_TOLERANCE {
            extreme += 1;
        }
    }
    Ok((1 + extreme) as f64 / (1 + n_permutations) as f64)
}

/// Bootstrap replicates of a metric over slide resamples.
#[derive(Clone, Debug)]
pub struct BootstrapDistribution {
    pub point: f64,
    /// Replicate values, sorted ascending.
    pub samples: Vec<f64>,
    /// Resamples on which the metric was undefined.
    pub skipped: usize,
}

impl BootstrapDistribution {
    fn quantile(&self, q: f64) -> f64 {
        let n = self.samples.len();
        if n == 1 {
            return self.samples[0];
        }
        let h = (n - 1) as f64 * q;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        self.samples[lo] + (h - lo as f64) * (self.samples[hi] - self.samples[lo])
    }

    /// Percentile interval `(low, high)` at `level`.
    pub fn interval(&self, level: f64) -> (f64, f64) {
        let tail = (1.0 - level) / 2.0;
        (self.quantile(tail), self.quantile(1.0 - tail))
    }

    /// Interval as signed offsets from the point estimate.
    pub fn offsets(&self, level: f64) -> (f64, f64) {
        let (lo, hi) = self.interval(level);
        (lo - self.point, hi - self.point)
    }
}

/// Resamples `n` slides with replacement `n_resamples` times. `metric`
/// receives slide indices and returns `None` when undefined on a resample.
pub fn bootstrap<F>(
    n: usize,
    metric: F,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapDistribution, MetricsError>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    if n_resamples == 0 {
        return Err(MetricsError::InvalidArgument("n_resamples must be >= 1"));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all).ok_or(MetricsError::Undefined)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut samples = Vec::with_capacity(n_resamples);
    let mut skipped = 0;
    for _ in 0..n_resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        match metric(&idx) {
            Some(v) => samples.push(v),
            None => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(MetricsError::Undefined);
    }
    if skipped * 100 > n_resamples {
        log::warn!("bootstrap: metric undefined on {skipped} of {n_resamples} resamples");
    }
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    Ok(BootstrapDistribution {
        point,
        samples,
        skipped,
    })
}

/// Renders `point (-lo, +hi)` in percent with one decimal, plus ` *` when
/// `significant`.
pub fn format_with_ci(point: f64, offsets: (f64, f64), significant: bool) -> String {
    let mut s = format!(
        "{:.1} (-{:.1}, +{:.1})",
        100.0 * point,
        100.0 * offsets.0.abs(),
        100.0 * offsets.1.abs()
    );
    if significant {
        s.push_str(" *");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact sign-flip p-value by enumerating all 2^n swap patterns.
    fn exact_p(o: &PairedOutcomes, s: Statistic) -> f64 {
        let n = o.len();
        let obs = o.observed(s).abs();
        let total = 1usize << n;
        let hits = (0..total)
            .filter(|mask| o.statistic_with(s, |i| mask >> i & 1 == 1).abs() >= obs - 1e-12)
            .count();
        hits as f64 / total as f64
    }

    #[test]
    fn permutation_matches_enumeration() {
        let truth = [0, 1, 2, 3, 0, 1, 2, 3, 2, 0];
        let a = [0, 1, 2, 3, 0, 1, 2, 2, 2, 0];
        let b = [0, 2, 2, 2, 1, 1, 3, 2, 2, 0];
        let o = PairedOutcomes::new(&truth, &a, &b).unwrap();
        for s in [Statistic::BalancedAccuracyDiff, Statistic::AccuracyDiff] {
            let exact = exact_p(&o, s);
            let mc = paired_permutation_test(&o, s, 20_000, 3).unwrap();
            assert!((mc - exact).abs() <= 0.02, "{s:?}: {mc} vs {exact}");
        }
    }

    #[test]
    fn identical_systems_give_p_one() {
        let t = [0, 1, 2, 3, 1];
        let o = PairedOutcomes::new(&t, &[0, 0, 2, 1, 1], &[0, 0, 2, 1, 1]).unwrap();
        assert_eq!(
            paired_permutation_test(&o, Statistic::BalancedAccuracyDiff, 999, 1).unwrap(),
            1.0
        );
    }

    #[test]
    fn p_value_bounds() {
        let t = vec![0usize; 30];
        let o = PairedOutcomes::new(&t, &t, &vec![1; 30]).unwrap();
        let p = paired_permutation_test(&o, Statistic::AccuracyDiff, 1000, 5).unwrap();
        assert!((1.0 / 1001.0..0.01).contains(&p));
    }

    #[test]
    fn perfect_predictor_has_zero_width_interval() {
        let truth = [0, 1, 2, 3, 0, 1];
        let d = bootstrap(
            truth.len(),
            |idx| {
                Some(
                    idx.iter().filter(|&&i| truth[i] == truth[i]).count() as f64 / idx.len() as f64,
                )
            },
            500,
            2,
        )
        .unwrap();
        assert_eq!(d.point, 1.0);
        assert_eq!(d.offsets(0.95), (0.0, 0.0));
    }

    #[test]
    fn intervals_nest() {
        let correct: Vec<bool> = (0..200).map(|i| i % 3 != 0).collect();
        let d = bootstrap(
            correct.len(),
            |idx| Some(idx.iter().filter(|&&i| correct[i]).count() as f64 / idx.len() as f64),
            1000,
            9,
        )
        .unwrap();
        let (lo95, hi95) = d.interval(0.95);
        let (lo90, hi90) = d.interval(0.90);
        assert!(lo95 <= lo90 && hi90 <= hi95);
        assert!(lo95 <= d.point && d.point <= hi95);
    }

    #[test]
    fn undefined_resamples_are_counted() {
        let d = bootstrap(
            4,
            |idx| if idx.contains(&0) { Some(1.0) } else { None },
            400,
            4,
        )
        .unwrap();
        assert!(d.skipped > 0);
        assert_eq!(d.samples.len() + d.skipped, 400);
    }

    #[test]
    fn quantile_interpolates_linearly() {
        let d = BootstrapDistribution {
            point: 2.0,
            samples: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            skipped: 0,
        };
        // h = 4 * 0.025 = 0.1
        let (lo, hi) = d.interval(0.95);
        assert!((lo - 1.1).abs() < 1e-12);
        assert!((hi - 4.9).abs() < 1e-12);
    }

    #[test]
    fn statistic_names_parse() {
        assert_eq!(
            "bal-acc".parse::<Statistic>().unwrap(),
            Statistic::BalancedAccuracyDiff
        );
        assert!("f1".parse::<Statistic>().is_err());
    }
}
