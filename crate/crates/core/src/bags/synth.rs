//! Synthetic slide bags whose difficulty drives both the feature evidence and
//! the non-expert's grading errors.
//!
//! Each slide draws a class `c` and a difficulty `δ ∈ [0,1]`. Harder slides
//! carry fewer patches of their worst-grade prototype and are more likely to
//! be mis-graded by the simulated non-expert.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::write_bag;
use super::manifest::{Manifest, ManifestEntry, Split, MANIFEST_FILE};
use super::{Bag, BagError};
use crate::diff::Tensor;
use crate::gleason::{consensus_level, ConsensusLevel, GleasonScore, SlideClass};

/// Consensus split reported for the reference cohort, in percent.
pub const REFERENCE_CONSENSUS: [f64; 3] = [67.7, 14.0, 18.3];
pub const MIN_INSTANCES: usize = 68;
pub const MAX_INSTANCES: usize = 1187;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

/// `clamp(base + slope · δ^power, 0, 1)`; non-decreasing in `δ` for `slope ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub base: f64,
    pub slope: f64,
    pub power: f64,
}

impl ErrorCurve {
    pub const ZERO: ErrorCurve = ErrorCurve {
        base: 0.0,
        slope: 0.0,
        power: 1.0,
    };

    pub fn at(&self, difficulty: f64) -> f64 {
        (self.base + self.slope * difficulty.powf(self.power)).clamp(0.0, 1.0)
    }
}

/// Fraction of worst-grade patches, linear between `easy` (δ=0) and `hard` (δ=1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCurve {
    pub easy: f64,
    pub hard: f64,
}

impl EvidenceCurve {
    pub fn at(&self, difficulty: f64) -> f64 {
        (self.easy + (self.hard - self.easy) * difficulty).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    pub class_prior: [f64; 4],
    /// Difficulty distribution per class (benign, G3, G4, G5).
    pub difficulty: [BetaParams; 4],
    pub evidence: EvidenceCurve,
    /// Share of the non-evidence patches drawn from lower-grade prototypes;
    /// the remainder is background.
    pub lower_grade_fraction: f64,
    /// Probability that the non-expert moves the worst grade to an adjacent class.
    pub nonexpert_error: ErrorCurve,
    /// Probability that the non-expert changes the other grade of the score.
    pub secondary_error: ErrorCurve,
    pub noise: f64,
    /// Multiplies the 68..1187 instance-count range.
    pub size_factor: f64,
    pub seed: u64,
    /// Consensus percentages to warn against when missed by more than 3 points.
    pub target_consensus: Option<[f64; 3]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 600,
            n_val: 150,
            n_test: 150,
            feature_dim: 32,
            class_prior: [0.35, 0.18, 0.35, 0.12],
            difficulty: [
                BetaParams { a: 2.0, b: 5.0 },
                BetaParams { a: 4.0, b: 3.0 },
                BetaParams { a: 2.0, b: 4.0 },
                BetaParams { a: 4.0, b: 3.0 },
            ],
            evidence: EvidenceCurve {
                easy: 0.4,
                hard: 0.01,
            },
            lower_grade_fraction: 0.6,
            nonexpert_error: ErrorCurve {
                base: 0.02,
                slope: 0.6,
                power: 1.5,
            },
            secondary_error: ErrorCurve {
                base: 0.12,
                slope: 0.68,
                power: 1.0,
            },
            noise: 0.3,
            size_factor: 0.1,
            seed: 7,
            target_consensus: Some(REFERENCE_CONSENSUS),
        }
    }
}

impl SynthConfig {
    /// Splits `total` slides in the 4:1:1 train/val/test proportion.
    pub fn with_total(mut self, total: usize) -> Self {
        let val = total / 6;
        let test = total / 6;
        self.n_val = val;
        self.n_test = test;
        self.n_train = total - val - test;
        self
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn instance_range(&self) -> (usize, usize) {
        let lo = ((MIN_INSTANCES as f64 * self.size_factor).round() as usize).max(1);
        let hi = ((MAX_INSTANCES as f64 * self.size_factor).round() as usize).max(lo);
        (lo, hi)
    }

    pub fn validate(&self) -> Result<(), BagError> {
        let bad = |m: &str| Err(BagError::Config(m.to_string()));
        if self.total() == 0 {
            return bad("at least one slide is required");
        }
        if self.feature_dim < 2 {
            return bad("feature dimension must be at least 2");
        }
        let prior_sum: f64 = self.class_prior.iter().sum();
        if self.class_prior.iter().any(|p| !(0.0..=1.0).contains(p))
            || (prior_sum - 1.0).abs() > 1e-9
        {
            return bad("class prior must be a probability vector");
        }
        if self.difficulty.iter().any(|b| !(b.a > 0.0 && b.b > 0.0)) {
            return bad("beta parameters must be positive");
        }
        let probs = [
            self.evidence.easy,
            self.evidence.hard,
            self.lower_grade_fraction,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("fractions must lie in [0, 1]");
        }
        for c in [self.nonexpert_error, self.secondary_error] {
            if c.slope < 0.0 || c.power <= 0.0 || !(0.0..=1.0).contains(&c.base) {
                return bad("error curves need base in [0,1], slope >= 0, power > 0");
            }
        }
        if self.noise.is_nan()
            || self.noise < 0.0
            || self.size_factor.is_nan()
            || self.size_factor <= 0.0
        {
            return bad("noise must be >= 0 and size factor > 0");
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index < self.n_train {
            Split::Train
        } else if index < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Labels and difficulty of one simulated slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideMeta {
    pub index: usize,
    pub class: SlideClass,
    pub difficulty: f64,
    pub expert: GleasonScore,
    pub nonexpert: GleasonScore,
    pub worst_grade_error: bool,
}

fn slide_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn sample_class(rng: &mut impl Rng, prior: &[f64; 4]) -> SlideClass {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return SlideClass::ALL[i];
        }
    }
    // Rounding residue in the prior sum.
    SlideClass::ALL[prior.iter().rposition(|p| *p > 0.0).unwrap_or(3)]
}

fn expert_score(rng: &mut impl Rng, class: SlideClass) -> GleasonScore {
    let pick = |rng: &mut dyn rand::RngCore, options: &[(u8, u8)]| {
        let (a, b) = options[rng.random_range(0..options.len())];
        GleasonScore::Graded {
            primary: a,
            secondary: b,
        }
    };
    match class {
        SlideClass::Benign => GleasonScore::Benign,
        SlideClass::Gleason3 => pick(rng, &[(3, 3)]),
        SlideClass::Gleason4 => pick(rng, &[(3, 4), (4, 3), (4, 4)]),
        SlideClass::Gleason5 => pick(rng, &[(3, 5), (5, 3), (4, 5), (5, 4), (5, 5)]),
    }
}

/// Moves the worst grade of `score` to `target`'s grade, clamping the other
/// grade so it never exceeds the new worst grade.
fn regrade(score: GleasonScore, target: SlideClass) -> GleasonScore {
    let new_worst = target.grade();
    if new_worst == 0 {
        return GleasonScore::Benign;
    }
    match score {
        GleasonScore::Benign => GleasonScore::Graded {
            primary: new_worst,
            secondary: new_worst,
        },
        GleasonScore::Graded { primary, secondary } => {
            let worst = primary.max(secondary);
            let map = |g: u8| {
                if g == worst {
                    new_worst
                } else {
                    g.min(new_worst)
                }
            };
            GleasonScore::Graded {
                primary: map(primary),
                secondary: map(secondary),
            }
        }
    }
}

/// Changes the non-worst grade to another tumour grade not above the worst.
fn change_other_grade(rng: &mut impl Rng, score: GleasonScore) -> GleasonScore {
    let GleasonScore::Graded { primary, secondary } = score else {
        return score;
    };
    let worst = primary.max(secondary);
    // The "other" slot is the secondary one unless the worst sits there alone.
    let other_is_primary = secondary == worst && primary != worst;
    let other = if other_is_primary { primary } else { secondary };
    let options: Vec<u8> = (3..=worst).filter(|&g| g != other).collect();
    if options.is_empty() {
        return score;
    }
    let g = options[rng.random_range(0..options.len())];
    if other_is_primary {
        GleasonScore::Graded {
            primary: g,
            secondary,
        }
    } else {
        GleasonScore::Graded {
            primary,
            secondary: g,
        }
    }
}

fn adjacent_class(rng: &mut impl Rng, class: SlideClass) -> SlideClass {
    let i = class.index();
    let j = match i {
        0 => 1,
        3 => 2,
        _ => {
            if rng.random::<bool>() {
                i + 1
            } else {
                i - 1
            }
        }
    };
    SlideClass::ALL[j]
}

fn sample_meta(config: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> SlideMeta {
    let class = sample_class(rng, &config.class_prior);
    let bp = config.difficulty[class.index()];
    let difficulty: f64 = Beta::new(bp.a, bp.b).expect("validated beta").sample(rng);
    let expert = expert_score(rng, class);

    let worst_grade_error = rng.random::<f64>() < config.nonexpert_error.at(difficulty);
    let mut nonexpert = if worst_grade_error {
        regrade(expert, adjacent_class(rng, class))
    } else {
        expert
    };
    if rng.random::<f64>() < config.secondary_error.at(difficulty) {
        nonexpert = change_other_grade(rng, nonexpert);
    }
    SlideMeta {
        index,
        class,
        difficulty,
        expert,
        nonexpert,
        worst_grade_error,
    }
}

/// Labels for every slide, without features.
pub fn sample_slide_meta(config: &SynthConfig) -> Vec<SlideMeta> {
    (0..config.total())
        .map(|i| sample_meta(config, i, &mut slide_rng(config.seed, i)))
        .collect()
}

/// Unit-norm class prototypes (benign, G3, G4, G5) followed by a background
/// prototype; orthonormal whenever the dimension allows.
pub fn prototypes(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(5);
    for _ in 0..5 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= proj * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

fn build_bag(
    config: &SynthConfig,
    meta: &SlideMeta,
    protos: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Bag {
    let (lo, hi) = config.instance_range();
    let n = rng.random_range(lo..=hi);
    let c = meta.class.index();
    let mut evidence = (config.evidence.at(meta.difficulty) * n as f64).round() as usize;
    if c > 0 {
        evidence = evidence.max(1);
    }
    let evidence = evidence.min(n);
    let rest = n - evidence;
    let lower = (config.lower_grade_fraction * rest as f64).round() as usize;

    // Prototype index per instance: class prototypes 0..4, background 4.
    let mut kinds = Vec::with_capacity(n);
    kinds.extend(std::iter::repeat_n(c, evidence));
    for _ in 0..lower {
        kinds.push(if c == 0 { 4 } else { rng.random_range(0..c) });
    }
    kinds.resize(n, 4);
    kinds.shuffle(rng);

    let d = config.feature_dim;
    let mut features = Vec::with_capacity(n * d);
    for &k in &kinds {
        for &m in &protos[k] {
            let z: f64 = rng.sample(StandardNormal);
            features.push(f64::from((m + config.noise * z) as f32));
        }
    }

    // Unique cells on a square grid large enough to hold n patches.
    let side = ((n as f64 * 1.5).sqrt().ceil() as usize).max(1);
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(rng);
    let mut coords: Vec<(i32, i32)> = cells[..n]
        .iter()
        .map(|&cell| ((cell % side) as i32, (cell / side) as i32))
        .collect();
    coords.sort_by_key(|&(x, y)| (y, x));

    Bag {
        slide_id: slide_id(meta.index),
        features: Tensor::matrix(n, d, features).expect("n x d features"),
        coords,
    }
}

pub fn slide_id(index: usize) -> String {
    format!("slide_{index:05}")
}

/// Achieved label statistics of a generated dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthSummary {
    pub level_counts: [usize; 3],
    /// Consensus counts per expert class.
    pub class_level_counts: [[usize; 3]; 4],
    pub warnings: Vec<String>,
    pub manifest_path: PathBuf,
}

impl SynthSummary {
    pub fn from_meta(metas: &[SlideMeta]) -> Self {
        let mut s = SynthSummary::default();
        for m in metas {
            let level = consensus_level(m.expert, m.nonexpert);
            s.level_counts[level.index()] += 1;
            s.class_level_counts[m.class.index()][level.index()] += 1;
        }
        s
    }

    pub fn total(&self) -> usize {
        self.level_counts.iter().sum()
    }

    /// Percentages for (homogeneous, heterogeneous, no consensus).
    pub fn percentages(&self) -> [f64; 3] {
        let t = self.total().max(1) as f64;
        self.level_counts.map(|c| 100.0 * c as f64 / t)
    }

    pub fn percentage(&self, level: ConsensusLevel) -> f64 {
        self.percentages()[level.index()]
    }
}

/// Writes `manifest.tsv` and `bags/<slide>.wsdb` under `out_dir`.
pub fn generate_synthetic(
    config: &SynthConfig,
    out_dir: impl AsRef<Path>,
) -> Result<SynthSummary, BagError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let bag_dir = out_dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| BagError::io(&bag_dir, e))?;

    let protos = prototypes(config.feature_dim, config.seed);
    let mut metas = Vec::with_capacity(config.total());
    let mut entries = Vec::with_capacity(config.total());
    for index in 0..config.total() {
        let mut rng = slide_rng(config.seed, index);
        let meta = sample_meta(config, index, &mut rng);
        let bag = build_bag(config, &meta, &protos, &mut rng);
        let rel = PathBuf::from("bags").join(format!("{}.wsdb", bag.slide_id));
        write_bag(&bag, out_dir.join(&rel))?;
        entries.push(ManifestEntry {
            slide_id: bag.slide_id.clone(),
            bag_path: rel,
            expert_score: meta.expert,
            nonexpert_score: Some(meta.nonexpert),
            split: config.split_of(index),
        });
        metas.push(meta);
    }
    let manifest = Manifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.to_text()).map_err(|e| BagError::io(&manifest_path, e))?;

    let mut summary = SynthSummary::from_meta(&metas);
    summary.manifest_path = manifest_path;
    if let Some(target) = config.target_consensus {
        let achieved = summary.percentages();
        if achieved
            .iter()
            .zip(target)
            .any(|(a, t)| (a - t).abs() > 3.0)
        {
            let msg = format!(
                "consensus split {:.1}/{:.1}/{:.1} misses target {:.1}/{:.1}/{:.1} by more than 3 points",
                achieved[0], achieved[1], achieved[2], target[0], target[1], target[2]
            );
            log::warn!("{msg}");
            summary.warnings.push(msg);
        }
    }
    Ok(summary)
}

/// Bag features only, for in-memory experiments that skip the file round trip.
pub fn generate_in_memory(config: &SynthConfig) -> Result<Vec<(SlideMeta, Bag)>, BagError> {
    config.validate()?;
    let protos = prototypes(config.feature_dim, config.seed);
    Ok((0..config.total())
        .map(|index| {
            let mut rng = slide_rng(config.seed, index);
            let meta = sample_meta(config, index, &mut rng);
            let bag = build_bag(config, &meta, &protos, &mut rng);
            (meta, bag)
        })
        .collect())
}
