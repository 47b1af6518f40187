//! Tab-separated slide manifest.
//!
//! One record per line: `slide_id  bag_path  expert  nonexpert  split`.
//! `nonexpert` is `-` when absent. Blank lines and lines starting with `#`
//! are ignored. `bag_path` is relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::BagError;
use crate::gleason::{
    class_of, parse_score, ConsensusRecord, GleasonScore, SlideClass, WeightTriple, WsdScale,
};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "#slide_id\tbag_path\texpert\tnonexpert\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = BagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(BagError::UnknownSplit(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub bag_path: PathBuf,
    pub expert_score: GleasonScore,
    pub nonexpert_score: Option<GleasonScore>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn label(&self) -> SlideClass {
        class_of(self.expert_score)
    }

    pub fn consensus(&self, scale: &WsdScale, weights: &WeightTriple) -> Option<ConsensusRecord> {
        self.nonexpert_score.map(|ne| {
            ConsensusRecord::new(self.slide_id.clone(), self.expert_score, ne, scale, weights)
        })
    }

    pub fn to_line(&self) -> String {
        let ne = self
            .nonexpert_score
            .map(|s| s.to_string())
            .unwrap_or_else(|| "-".to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.slide_id,
            self.bag_path.display(),
            self.expert_score,
            ne,
            self.split
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative bag paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn bag_file(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.bag_path)
    }

    pub fn split_counts(&self) -> [(Split, usize); 3] {
        Split::ALL.map(|s| (s, self.entries.iter().filter(|e| e.split == s).count()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }
}

pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<Manifest, BagError> {
    parse_entries(text, root.into(), true)
}

/// Like [`parse_manifest`] but accepts train slides without a non-expert
/// score, for tools that report on incomplete annotations.
pub fn parse_manifest_lenient(text: &str, root: impl Into<PathBuf>) -> Result<Manifest, BagError> {
    parse_entries(text, root.into(), false)
}

fn parse_entries(text: &str, root: PathBuf, strict: bool) -> Result<Manifest, BagError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(BagError::Manifest {
                line: line_no,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let score = |text: &str| {
            parse_score(text).map_err(|e| BagError::Manifest {
                line: line_no,
                message: e.to_string(),
            })
        };
        let expert_score = score(fields[2])?;
        let nonexpert_score = match fields[3].trim() {
            "-" | "" => None,
            other => Some(score(other)?),
        };
        let split: Split = fields[4]
            .trim()
            .parse()
            .map_err(|e: BagError| BagError::Manifest {
                line: line_no,
                message: e.to_string(),
            })?;
        let slide_id = fields[0].trim().to_string();
        if slide_id.is_empty() {
            return Err(BagError::Manifest {
                line: line_no,
                message: "empty slide id".into(),
            });
        }
        if strict && split == Split::Train && nonexpert_score.is_none() {
            return Err(BagError::MissingNonExpert {
                line: line_no,
                slide_id,
            });
        }
        if !seen.insert(slide_id.clone()) {
            return Err(BagError::DuplicateSlide {
                line: line_no,
                slide_id,
            });
        }
        entries.push(ManifestEntry {
            slide_id,
            bag_path: PathBuf::from(fields[1].trim()),
            expert_score,
            nonexpert_score,
            split,
        });
    }
    let manifest = Manifest { entries, root };
    if manifest.entries.is_empty() {
        log::warn!("manifest contains no entries");
    } else {
        let counts = manifest.split_counts();
        log::info!(
            "manifest: {} train, {} val, {} test",
            counts[0].1,
            counts[1].1,
            counts[2].1
        );
    }
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, BagError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| BagError::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, root)
}

/// Entries of one split, ordered by slide id.
pub fn split_bags<'a>(
    entries: &'a [ManifestEntry],
    split: &str,
) -> Result<Vec<&'a ManifestEntry>, BagError> {
    let split: Split = split.parse()?;
    let mut out: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == split).collect();
    out.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gleason::ConsensusLevel;

    #[test]
    fn parses_homogeneous_train_entry() {
        let m = parse_manifest("s1\tbags/s1.wsdb\t3+4\t4+3\ttrain\n", "/data").unwrap();
        assert_eq!(m.entries.len(), 1);
        let rec = m.entries[0]
            .consensus(&WsdScale::default(), &WeightTriple::UNIT)
            .unwrap();
        assert_eq!(rec.level, ConsensusLevel::Homogeneous);
        assert_eq!(
            m.bag_file(&m.entries[0]),
            PathBuf::from("/data/bags/s1.wsdb")
        );
    }

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("", ".").unwrap().entries.is_empty());
        assert!(parse_manifest(&format!("{MANIFEST_HEADER}\n\n"), ".")
            .unwrap()
            .entries
            .is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "a\ta.wsdb\t3+3\t3+3\ttrain\na\tb.wsdb\t3+3\t-\ttest\n";
        assert!(matches!(
            parse_manifest(text, "."),
            Err(BagError::DuplicateSlide { line: 2, .. })
        ));
    }

    #[test]
    fn train_entries_need_nonexpert() {
        assert!(matches!(
            parse_manifest("a\ta.wsdb\t3+3\t-\ttrain\n", "."),
            Err(BagError::MissingNonExpert { .. })
        ));
        assert!(parse_manifest("a\ta.wsdb\t3+3\t-\ttest\n", ".").is_ok());
    }

    #[test]
    fn bad_scores_and_splits_report_line() {
        let err = parse_manifest("a\ta.wsdb\t3+6\t3+3\ttrain\n", ".").unwrap_err();
        assert!(err.to_string().contains("3+6"), "{err}");
        assert!(matches!(
            parse_manifest("a\ta.wsdb\t3+3\t3+3\tholdout\n", "."),
            Err(BagError::Manifest { line: 1, .. })
        ));
        assert!(parse_manifest("a\ta.wsdb\t3+3\n", ".").is_err());
    }

    #[test]
    fn text_round_trip() {
        let text = "b\tb.wsdb\t4+5\t4+4\ttrain\na\ta.wsdb\tbenign\t-\tval\n";
        let m = parse_manifest(text, ".").unwrap();
        assert_eq!(parse_manifest(&m.to_text(), ".").unwrap(), m);
    }

    #[test]
    fn split_filter() {
        let text =
            "c\tc\t3+3\t3+3\ttrain\nb\tb\t3+3\t-\tval\na\ta\t3+3\t-\tval\nd\td\t3+3\t-\ttest\n";
        let m = parse_manifest(text, ".").unwrap();
        let val = split_bags(&m.entries, "val").unwrap();
        assert_eq!(
            val.iter().map(|e| e.slide_id.as_str()).collect::<Vec<_>>(),
            ["a", "b"]
        );
        let train_only = parse_manifest("c\tc\t3+3\t3+3\ttrain\n", ".").unwrap();
        assert!(split_bags(&train_only.entries, "test").unwrap().is_empty());
        assert!(matches!(
            split_bags(&m.entries, "dev"),
            Err(BagError::UnknownSplit(_))
        ));
    }
}
