//! Gleason scores, the four slide classes, expert/non-expert consensus levels
//! and the difficulty score and loss weight derived from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GleasonError {
    #[error(
        "cannot parse Gleason score {0:?}: expected \"benign\" or \"a+b\" with single-digit grades"
    )]
    Malformed(String),
    #[error("Gleason grade out of range 1..5 in {0:?}")]
    GradeOutOfRange(String),
    #[error("invalid weight triple (w_nc={nc}, w_hec={hec}, w_hoc={hoc}): {reason}")]
    InvalidWeights {
        nc: f64,
        hec: f64,
        hoc: f64,
        reason: &'static str,
    },
    #[error("class index {0} out of range 0..4")]
    ClassIndex(usize),
}

/// A pathologist's slide-level diagnosis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GleasonScore {
    Benign,
    /// Most frequent grade first, then the highest secondary grade.
    Graded {
        primary: u8,
        secondary: u8,
    },
}

impl GleasonScore {
    pub fn graded(primary: u8, secondary: u8) -> Result<Self, GleasonError> {
        if !(1..=5).contains(&primary) || !(1..=5).contains(&secondary) {
            return Err(GleasonError::GradeOutOfRange(format!(
                "{primary}+{secondary}"
            )));
        }
        Ok(GleasonScore::Graded { primary, secondary })
    }

    /// All 26 distinct scores: benign plus every ordered pair of grades.
    pub fn all() -> Vec<GleasonScore> {
        let mut out = vec![GleasonScore::Benign];
        for a in 1..=5 {
            for b in 1..=5 {
                out.push(GleasonScore::Graded {
                    primary: a,
                    secondary: b,
                });
            }
        }
        out
    }
}

impl fmt::Display for GleasonScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GleasonScore::Benign => f.write_str("benign"),
            GleasonScore::Graded { primary, secondary } => write!(f, "{primary}+{secondary}"),
        }
    }
}

impl FromStr for GleasonScore {
    type Err = GleasonError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_score(s)
    }
}

pub fn parse_score(text: &str) -> Result<GleasonScore, GleasonError> {
    let t = text.trim();
    if t.eq_ignore_ascii_case("benign") {
        return Ok(GleasonScore::Benign);
    }
    let bytes = t.as_bytes();
    if bytes.len() != 3
        || bytes[1] != b'+'
        || !bytes[0].is_ascii_digit()
        || !bytes[2].is_ascii_digit()
    {
        return Err(GleasonError::Malformed(text.to_string()));
    }
    let (a, b) = (bytes[0] - b'0', bytes[2] - b'0');
    if !(1..=5).contains(&a) || !(1..=5).contains(&b) {
        return Err(GleasonError::GradeOutOfRange(text.to_string()));
    }
    Ok(GleasonScore::Graded {
        primary: a,
        secondary: b,
    })
}

/// Grades 1 and 2 and the benign marker all map to grade token 0.
fn normalize_grade(g: u8) -> u8 {
    if g <= 2 {
        0
    } else {
        g
    }
}

/// Highest grade present, with benign grades reported as 0.
pub fn worst_grade(score: GleasonScore) -> u8 {
    match score {
        GleasonScore::Benign => 0,
        GleasonScore::Graded { primary, secondary } => normalize_grade(primary.max(secondary)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SlideClass {
    Benign = 0,
    Gleason3 = 1,
    Gleason4 = 2,
    Gleason5 = 3,
}

impl SlideClass {
    pub const ALL: [SlideClass; 4] = [
        SlideClass::Benign,
        SlideClass::Gleason3,
        SlideClass::Gleason4,
        SlideClass::Gleason5,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self, GleasonError> {
        Self::ALL.get(i).copied().ok_or(GleasonError::ClassIndex(i))
    }

    /// The worst grade this class stands for (0 for benign).
    pub fn grade(self) -> u8 {
        match self {
            SlideClass::Benign => 0,
            SlideClass::Gleason3 => 3,
            SlideClass::Gleason4 => 4,
            SlideClass::Gleason5 => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SlideClass::Benign => "Benign",
            SlideClass::Gleason3 => "Gleason 3",
            SlideClass::Gleason4 => "Gleason 4",
            SlideClass::Gleason5 => "Gleason 5",
        }
    }
}

impl fmt::Display for SlideClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn class_of(score: GleasonScore) -> SlideClass {
    match worst_grade(score) {
        3 => SlideClass::Gleason3,
        4 => SlideClass::Gleason4,
        5 => SlideClass::Gleason5,
        _ => SlideClass::Benign,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConsensusLevel {
    Homogeneous,
    Heterogeneous,
    NoConsensus,
}

impl ConsensusLevel {
    pub const ALL: [ConsensusLevel; 3] = [
        ConsensusLevel::Homogeneous,
        ConsensusLevel::Heterogeneous,
        ConsensusLevel::NoConsensus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            ConsensusLevel::Homogeneous => "homogeneous",
            ConsensusLevel::Heterogeneous => "heterogeneous",
            ConsensusLevel::NoConsensus => "no-consensus",
        }
    }
}

impl fmt::Display for ConsensusLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Sorted pair of benign-normalized grade tokens.
fn grade_multiset(score: GleasonScore) -> [u8; 2] {
    match score {
        GleasonScore::Benign => [0, 0],
        GleasonScore::Graded { primary, secondary } => {
            let (a, b) = (normalize_grade(primary), normalize_grade(secondary));
            [a.min(b), a.max(b)]
        }
    }
}

pub fn consensus_level(expert: GleasonScore, nonexpert: GleasonScore) -> ConsensusLevel {
    if grade_multiset(expert) == grade_multiset(nonexpert) {
        ConsensusLevel::Homogeneous
    } else if worst_grade(expert) == worst_grade(nonexpert) {
        ConsensusLevel::Heterogeneous
    } else {
        ConsensusLevel::NoConsensus
    }
}

/// Numeric difficulty attached to each consensus level, used as the
/// regression target of the multi-task head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsdScale {
    pub homogeneous: f64,
    pub heterogeneous: f64,
    pub no_consensus: f64,
}

impl Default for WsdScale {
    fn default() -> Self {
        Self {
            homogeneous: 0.0,
            heterogeneous: 0.5,
            no_consensus: 1.0,
        }
    }
}

impl WsdScale {
    pub fn score(&self, level: ConsensusLevel) -> f64 {
        match level {
            ConsensusLevel::Homogeneous => self.homogeneous,
            ConsensusLevel::Heterogeneous => self.heterogeneous,
            ConsensusLevel::NoConsensus => self.no_consensus,
        }
    }
}

pub fn wsd_score(level: ConsensusLevel) -> f64 {
    WsdScale::default().score(level)
}

/// Per-level classification loss weights `(w_nc, w_hec, w_hoc)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTriple {
    pub no_consensus: f64,
    pub heterogeneous: f64,
    pub homogeneous: f64,
}

impl WeightTriple {
    pub const UNIT: WeightTriple = WeightTriple {
        no_consensus: 1.0,
        heterogeneous: 1.0,
        homogeneous: 1.0,
    };

    pub fn new(no_consensus: f64, heterogeneous: f64, homogeneous: f64) -> Self {
        Self {
            no_consensus,
            heterogeneous,
            homogeneous,
        }
    }

    /// Checks the recommended ranges: `w_hoc = 1`, `w_hec ∈ [1.3, 4]`,
    /// `w_nc ∈ [2, 10]`. With `allow_out_of_range` only positivity and
    /// finiteness are enforced.
    pub fn validate(&self, allow_out_of_range: bool) -> Result<(), GleasonError> {
        let err = |reason| GleasonError::InvalidWeights {
            nc: self.no_consensus,
            hec: self.heterogeneous,
            hoc: self.homogeneous,
            reason,
        };
        let all = [self.no_consensus, self.heterogeneous, self.homogeneous];
        if all.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(err("weights must be finite and positive"));
        }
        if allow_out_of_range {
            return Ok(());
        }
        if self.homogeneous != 1.0 {
            return Err(err("w_hoc must be 1.0"));
        }
        if !(1.3..=4.0).contains(&self.heterogeneous) {
            return Err(err("w_hec must lie in [1.3, 4.0]"));
        }
        if !(2.0..=10.0).contains(&self.no_consensus) {
            return Err(err("w_nc must lie in [2.0, 10.0]"));
        }
        Ok(())
    }

    pub fn weight(&self, level: ConsensusLevel) -> f64 {
        match level {
            ConsensusLevel::NoConsensus => self.no_consensus,
            ConsensusLevel::Heterogeneous => self.heterogeneous,
            ConsensusLevel::Homogeneous => self.homogeneous,
        }
    }
}

impl fmt::Display for WeightTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{})",
            self.no_consensus, self.heterogeneous, self.homogeneous
        )
    }
}

pub fn wsd_weight(
    level: ConsensusLevel,
    weights: &WeightTriple,
    allow_out_of_range: bool,
) -> Result<f64, GleasonError> {
    weights.validate(allow_out_of_range)?;
    Ok(weights.weight(level))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusRecord {
    pub slide_id: String,
    pub expert: GleasonScore,
    pub nonexpert: GleasonScore,
    pub level: ConsensusLevel,
    pub wsd: f64,
    pub weight: f64,
}

impl ConsensusRecord {
    pub fn new(
        slide_id: impl Into<String>,
        expert: GleasonScore,
        nonexpert: GleasonScore,
        scale: &WsdScale,
        weights: &WeightTriple,
    ) -> Self {
        let level = consensus_level(expert, nonexpert);
        Self {
            slide_id: slide_id.into(),
            expert,
            nonexpert,
            level,
            wsd: scale.score(level),
            weight: weights.weight(level),
        }
    }

    pub fn label(&self) -> SlideClass {
        class_of(self.expert)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(a: u8, b: u8) -> GleasonScore {
        GleasonScore::graded(a, b).unwrap()
    }

    #[test]
    fn parses_scores() {
        assert_eq!(parse_score("3+5").unwrap(), g(3, 5));
        assert_eq!(parse_score("benign").unwrap(), GleasonScore::Benign);
        assert_eq!(parse_score("BeNiGn").unwrap(), GleasonScore::Benign);
        assert!(matches!(
            parse_score("3+6"),
            Err(GleasonError::GradeOutOfRange(_))
        ));
        assert!(matches!(
            parse_score("0+3"),
            Err(GleasonError::GradeOutOfRange(_))
        ));
        assert!(matches!(
            parse_score("3-4"),
            Err(GleasonError::Malformed(_))
        ));
        assert!(matches!(
            parse_score("34+4"),
            Err(GleasonError::Malformed(_))
        ));
        let err = parse_score("7+1x").unwrap_err().to_string();
        assert!(err.contains("7+1x"));
    }

    #[test]
    fn display_round_trips_all_scores() {
        for s in GleasonScore::all() {
            assert_eq!(parse_score(&s.to_string()).unwrap(), s);
        }
    }

    #[test]
    fn worst_grade_and_class() {
        assert_eq!(worst_grade(g(3, 5)), 5);
        assert_eq!(worst_grade(g(2, 2)), 0);
        assert_eq!(worst_grade(GleasonScore::Benign), 0);
        assert_eq!(class_of(g(4, 3)), SlideClass::Gleason4);
        assert_eq!(class_of(g(1, 2)), SlideClass::Benign);
        assert_eq!(class_of(g(5, 5)), SlideClass::Gleason5);
    }

    #[test]
    fn consensus_examples() {
        use ConsensusLevel::*;
        assert_eq!(consensus_level(g(3, 4), g(4, 3)), Homogeneous);
        assert_eq!(consensus_level(g(4, 4), g(3, 4)), Heterogeneous);
        assert_eq!(consensus_level(g(4, 5), g(4, 3)), NoConsensus);
        assert_eq!(
            consensus_level(GleasonScore::Benign, GleasonScore::Benign),
            Homogeneous
        );
        assert_eq!(consensus_level(GleasonScore::Benign, g(1, 2)), Homogeneous);
        assert_eq!(consensus_level(GleasonScore::Benign, g(3, 3)), NoConsensus);
    }

    #[test]
    fn wsd_scores_are_ordered() {
        assert_eq!(wsd_score(ConsensusLevel::Homogeneous), 0.0);
        assert_eq!(wsd_score(ConsensusLevel::Heterogeneous), 0.5);
        assert_eq!(wsd_score(ConsensusLevel::NoConsensus), 1.0);
    }

    #[test]
    fn weights_select_by_level() {
        let w = WeightTriple::new(4.0, 3.0, 1.0);
        assert_eq!(
            wsd_weight(ConsensusLevel::NoConsensus, &w, false).unwrap(),
            4.0
        );
        assert_eq!(
            wsd_weight(ConsensusLevel::Heterogeneous, &w, false).unwrap(),
            3.0
        );
        assert_eq!(
            wsd_weight(ConsensusLevel::Homogeneous, &w, false).unwrap(),
            1.0
        );
    }

    #[test]
    fn weight_range_validation_is_soft() {
        let ablation = WeightTriple::new(1.0, 1.7, 2.0);
        assert!(wsd_weight(ConsensusLevel::Homogeneous, &ablation, false).is_err());
        assert_eq!(
            wsd_weight(ConsensusLevel::Homogeneous, &ablation, true).unwrap(),
            2.0
        );
        assert!(WeightTriple::new(11.0, 3.0, 1.0).validate(false).is_err());
        assert!(WeightTriple::new(4.0, 1.2, 1.0).validate(false).is_err());
        assert!(WeightTriple::new(4.0, -1.0, 1.0).validate(true).is_err());
        assert!(WeightTriple::UNIT.validate(true).is_ok());
    }

    #[test]
    fn record_fields_are_consistent() {
        let r = ConsensusRecord::new(
            "s1",
            g(4, 5),
            g(4, 3),
            &WsdScale::default(),
            &WeightTriple::new(4.0, 3.0, 1.0),
        );
        assert_eq!(r.level, ConsensusLevel::NoConsensus);
        assert_eq!(r.wsd, 1.0);
        assert_eq!(r.weight, 4.0);
        assert_eq!(r.label(), SlideClass::Gleason5);
    }
}
