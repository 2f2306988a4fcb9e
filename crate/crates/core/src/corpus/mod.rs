//! Bias-benchmark data: StereoSet-style triples, Crows-Pairs-style contrast
//! pairs, forget/retain partitioning and chunk streaming.
//!
//! Both on-disk formats are JSON lines. A StereoSet record carries
//! `id, bias_type, context, stereotype, anti_stereotype, unrelated`; a
//! Crows-Pairs record carries `id, bias_type, sent_more, sent_less`.
//! Intrasentence and intersentence items are both flattened into a shared
//! `context` plus a candidate continuation.

mod chunk;
mod partition;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use chunk::{ChunkSizes, ChunkStream, DataChunk, ForgetMember};
pub use partition::{
    apply_swap, build_partitions, Partitions, PartitionState, Passage, Role, SwapEvent,
};

/// Social-bias category.
///
/// StereoSet uses the first four; Crows-Pairs adds the rest (its
/// `race-color` label is folded into [`BiasType::Race`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasType {
    Gender,
    Profession,
    Race,
    Religion,
    Socioeconomic,
    SexualOrientation,
    Age,
    Nationality,
    Disability,
    PhysicalAppearance,
}

impl BiasType {
    pub const STEREOSET: [BiasType; 4] = [
        BiasType::Gender,
        BiasType::Profession,
        BiasType::Race,
        BiasType::Religion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BiasType::Gender => "gender",
            BiasType::Profession => "profession",
            BiasType::Race => "race",
            BiasType::Religion => "religion",
            BiasType::Socioeconomic => "socioeconomic",
            BiasType::SexualOrientation => "sexual-orientation",
            BiasType::Age => "age",
            BiasType::Nationality => "nationality",
            BiasType::Disability => "disability",
            BiasType::PhysicalAppearance => "physical-appearance",
        }
    }

    pub fn is_stereoset(self) -> bool {
        Self::STEREOSET.contains(&self)
    }
}

impl fmt::Display for BiasType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "gender" => BiasType::Gender,
            "profession" => BiasType::Profession,
            "race" | "race-color" => BiasType::Race,
            "religion" => BiasType::Religion,
            "socioeconomic" => BiasType::Socioeconomic,
            "sexual-orientation" => BiasType::SexualOrientation,
            "age" => BiasType::Age,
            "nationality" => BiasType::Nationality,
            "disability" => BiasType::Disability,
            "physical-appearance" => BiasType::PhysicalAppearance,
            other => return Err(format!("unknown bias_type {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One stereotype / anti-stereotype / unrelated triple sharing a context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoInstance {
    pub id: String,
    pub bias_type: BiasType,
    #[serde(default)]
    pub context: String,
    pub stereotype: String,
    pub anti_stereotype: String,
    pub unrelated: String,
}

/// A Crows-Pairs item: a more- and a less-stereotypical sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub id: String,
    pub bias_type: BiasType,
    pub more_stereotypical: String,
    pub less_stereotypical: String,
}

#[derive(Deserialize)]
struct RawStereo {
    id: String,
    bias_type: String,
    #[serde(default)]
    context: String,
    stereotype: String,
    anti_stereotype: String,
    unrelated: String,
}

#[derive(Deserialize)]
struct RawPair {
    id: String,
    bias_type: String,
    sent_more: String,
    sent_less: String,
}

#[derive(Serialize)]
struct RawPairOut<'a> {
    id: &'a str,
    bias_type: BiasType,
    sent_more: &'a str,
    sent_less: &'a str,
}

/// Resolves `path` to a JSONL file: directories are joined with the split's
/// file name, files are used as-is.
pub fn split_path(path: &Path, split: Split) -> PathBuf {
    if path.is_dir() {
        path.join(split.file_name())
    } else {
        path.to_path_buf()
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_bias(line: usize, raw: &str) -> Result<BiasType> {
    raw.parse()
        .map_err(|message| Error::Schema { line, message })
}

/// Loads one StereoSet-format split. `path` may be the JSONL file itself or
/// a directory holding `train.jsonl` / `dev.jsonl` / `test.jsonl`.
pub fn load_stereoset(path: &Path, split: Split) -> Result<Vec<StereoInstance>> {
    let path = split_path(path, split);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, text) in read_lines(&path)? {
        let raw: RawStereo = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let bias_type = parse_bias(line, &raw.bias_type)?;
        if !bias_type.is_stereoset() {
            return Err(Error::Schema {
                line,
                message: format!("bias_type {bias_type} is not a StereoSet category"),
            });
        }
        let inst = StereoInstance {
            id: raw.id,
            bias_type,
            context: raw.context,
            stereotype: raw.stereotype,
            anti_stereotype: raw.anti_stereotype,
            unrelated: raw.unrelated,
        };
        validate_instance(&inst).map_err(|message| Error::Schema { line, message })?;
        if !seen.insert(inst.id.clone()) {
            return Err(Error::DuplicateId { id: inst.id, line });
        }
        out.push(inst);
    }
    Ok(out)
}

fn validate_instance(inst: &StereoInstance) -> std::result::Result<(), String> {
    for (name, text) in [
        ("stereotype", &inst.stereotype),
        ("anti_stereotype", &inst.anti_stereotype),
        ("unrelated", &inst.unrelated),
    ] {
        if text.trim().is_empty() {
            return Err(format!("{name} is empty for id {:?}", inst.id));
        }
    }
    if inst.stereotype == inst.anti_stereotype {
        return Err(format!(
            "stereotype equals anti_stereotype for id {:?}",
            inst.id
        ));
    }
    Ok(())
}

/// Loads a Crows-Pairs-format JSONL file.
pub fn load_crows_pairs(path: &Path) -> Result<Vec<ContrastPair>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, text) in read_lines(path)? {
        let raw: RawPair = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let bias_type = parse_bias(line, &raw.bias_type)?;
        if raw.sent_more.trim().is_empty() || raw.sent_less.trim().is_empty() {
            return Err(Error::Schema {
                line,
                message: format!("empty sentence for id {:?}", raw.id),
            });
        }
        if raw.sent_more == raw.sent_less {
            return Err(Error::DegeneratePair { id: raw.id, line });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId { id: raw.id, line });
        }
        out.push(ContrastPair {
            id: raw.id,
            bias_type,
            more_stereotypical: raw.sent_more,
            less_stereotypical: raw.sent_less,
        });
    }
    Ok(out)
}

pub fn write_stereoset(path: &Path, instances: &[StereoInstance]) -> Result<()> {
    let mut buf = String::new();
    for inst in instances {
        buf.push_str(&serde_json::to_string(inst).expect("instance serializes"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_crows_pairs(path: &Path, pairs: &[ContrastPair]) -> Result<()> {
    let mut buf = String::new();
    for p in pairs {
        let raw = RawPairOut {
            id: &p.id,
            bias_type: p.bias_type,
            sent_more: &p.more_stereotypical,
            sent_less: &p.less_stereotypical,
        };
        buf.push_str(&serde_json::to_string(&raw).expect("pair serializes"));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Per-type instance counts.
pub fn type_counts<'a, I>(types: I) -> BTreeMap<BiasType, usize>
where
    I: IntoIterator<Item = &'a BiasType>,
{
    let mut counts = BTreeMap::new();
    for t in types {
        *counts.entry(*t).or_insert(0) += 1;
    }
    counts
}

pub fn stereoset_counts(instances: &[StereoInstance]) -> BTreeMap<BiasType, usize> {
    type_counts(instances.iter().map(|i| &i.bias_type))
}

pub fn crows_pairs_counts(pairs: &[ContrastPair]) -> BTreeMap<BiasType, usize> {
    type_counts(pairs.iter().map(|p| &p.bias_type))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const REC: &str = r#"{"id":"a","bias_type":"gender","context":"The nurse said","stereotype":"she","anti_stereotype":"he","unrelated":"spoon"}"#;

    #[test]
    fn loads_and_counts() {
        let f = write(&[
            REC,
            r#"{"id":"b","bias_type":"race","context":"","stereotype":"x y","anti_stereotype":"x z","unrelated":"q"}"#,
        ]);
        let got = load_stereoset(f.path(), Split::Train).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].id, "a");
        assert_eq!(got[1].context, "");
        let counts = stereoset_counts(&got);
        assert_eq!(counts[&BiasType::Gender], 1);
        assert_eq!(counts[&BiasType::Race], 1);
    }

    #[test]
    fn empty_file_is_empty() {
        let f = write(&[]);
        let got = load_stereoset(f.path(), Split::Dev).unwrap();
        assert!(got.is_empty());
        assert!(stereoset_counts(&got).is_empty());
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write(&[REC, REC]);
        let err = load_stereoset(f.path(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
        assert!(matches!(err, Error::DuplicateId { line: 2, .. }));
    }

    #[test]
    fn malformed_names_line() {
        let f = write(&[REC, "{not json"]);
        let err = load_stereoset(f.path(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn unknown_bias_type_is_schema_error() {
        let f = write(&[
            r#"{"id":"a","bias_type":"weather","context":"","stereotype":"a","anti_stereotype":"b","unrelated":"c"}"#,
        ]);
        let err = load_stereoset(f.path(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 1, .. }), "{err}");
        // crows-pairs categories are not StereoSet categories
        let f = write(&[
            r#"{"id":"a","bias_type":"age","context":"","stereotype":"a","anti_stereotype":"b","unrelated":"c"}"#,
        ]);
        assert!(load_stereoset(f.path(), Split::Train).is_err());
    }

    #[test]
    fn identical_candidates_rejected() {
        let f = write(&[
            r#"{"id":"a","bias_type":"gender","context":"","stereotype":"a","anti_stereotype":"a","unrelated":"c"}"#,
        ]);
        assert!(load_stereoset(f.path(), Split::Train).is_err());
    }

    #[test]
    fn directory_resolves_split_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("dev.jsonl"), format!("{REC}\n")).unwrap();
        let got = load_stereoset(dir.path(), Split::Dev).unwrap();
        assert_eq!(got.len(), 1);
        assert!(load_stereoset(dir.path(), Split::Test).is_err());
    }

    #[test]
    fn crows_pairs_loading() {
        let f = write(&[
            r#"{"id":"1","bias_type":"gender","sent_more":"She cried.","sent_less":"He cried."}"#,
            r#"{"id":"2","bias_type":"race-color","sent_more":"a b","sent_less":"a c"}"#,
        ]);
        let pairs = load_crows_pairs(f.path()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].bias_type, BiasType::Race);
        assert_eq!(crows_pairs_counts(&pairs)[&BiasType::Gender], 1);
    }

    #[test]
    fn gender_only_file() {
        let f = write(&[
            r#"{"id":"1","bias_type":"gender","sent_more":"a","sent_less":"b"}"#,
            r#"{"id":"2","bias_type":"gender","sent_more":"c","sent_less":"d"}"#,
        ]);
        let pairs = load_crows_pairs(f.path()).unwrap();
        assert!(pairs.iter().all(|p| p.bias_type == BiasType::Gender));
    }

    #[test]
    fn degenerate_pair_rejected() {
        let f = write(&[r#"{"id":"1","bias_type":"gender","sent_more":"a","sent_less":"a"}"#]);
        let err = load_crows_pairs(f.path()).unwrap_err();
        assert!(err.to_string().contains("degenerate pair"), "{err}");
    }

    #[test]
    fn crows_pairs_writer_round_trips() {
        let pairs = vec![ContrastPair {
            id: "7".into(),
            bias_type: BiasType::Religion,
            more_stereotypical: "x".into(),
            less_stereotypical: "y".into(),
        }];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_crows_pairs(f.path(), &pairs).unwrap();
        assert_eq!(load_crows_pairs(f.path()).unwrap(), pairs);
    }
}
