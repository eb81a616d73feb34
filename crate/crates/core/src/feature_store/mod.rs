//! Clip features, the `SNFR1` interchange format, cross-validation folds and
//! synthetic datasets.

mod folds;
mod format;
mod synth;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use folds::{kfold, stratified_kfold, FoldPlan};
pub use format::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, FORMAT_VERSION, HEADER_LEN, MAGIC};
pub use synth::{reference_class_counts, reference_class_proportions, synth_complementary, synth_with, SynthOptions, SynthSignal};

/// Width of every feature token, for both modalities.
pub const FEATURE_DIM: usize = 768;

/// Content class. The integer codes are part of the file format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Safe = 0,
    Sexual = 1,
    Violent = 2,
    Both = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Safe, Label::Sexual, Label::Violent, Label::Both];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Safe => "Safe",
            Label::Sexual => "Sexual",
            Label::Violent => "Violent",
            Label::Both => "Both",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One clip: `audio` holds `T_a × 768` and `video` `T_v × 768` values,
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: u64,
    pub label: Label,
    pub audio: Vec<f32>,
    pub video: Vec<f32>,
}

impl ClipRecord {
    pub fn audio_tokens(&self) -> usize {
        self.audio.len() / FEATURE_DIM
    }

    pub fn video_tokens(&self) -> usize {
        self.video.len() / FEATURE_DIM
    }
}

/// Records sharing one token layout. Construct through [`Dataset::new`] so
/// the invariants hold.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    audio_tokens: u16,
    video_tokens: u16,
    records: Vec<ClipRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("non-finite feature value in clip {clip_id}")]
    NonFinite { clip_id: u64 },
    #[error("feature dimension {found} (expected {expected})", expected = FEATURE_DIM)]
    DimMismatch { found: u32 },
    #[error("invalid label code {0}")]
    BadLabel(u8),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("class {label} has {count} records, fewer than {k} folds")]
    TooFewPerClass { label: Label, count: usize, k: usize },
}

impl Dataset {
    pub fn new(audio_tokens: u16, video_tokens: u16, records: Vec<ClipRecord>) -> Result<Self, DataError> {
        if audio_tokens == 0 || video_tokens == 0 {
            return Err(DataError::Invalid("token counts must be at least 1".into()));
        }
        let (na, nv) = (audio_tokens as usize * FEATURE_DIM, video_tokens as usize * FEATURE_DIM);
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.audio.len() != na || r.video.len() != nv {
                return Err(DataError::Invalid(format!(
                    "clip {} has {}/{} values, expected {na}/{nv}",
                    r.clip_id,
                    r.audio.len(),
                    r.video.len()
                )));
            }
            if !r.audio.iter().chain(&r.video).all(|v| v.is_finite()) {
                return Err(DataError::NonFinite { clip_id: r.clip_id });
            }
            if !seen.insert(r.clip_id) {
                return Err(DataError::Invalid(format!("duplicate clip id {}", r.clip_id)));
            }
        }
        Ok(Self { audio_tokens, video_tokens, records })
    }

    pub fn empty() -> Self {
        Self { audio_tokens: 1, video_tokens: 1, records: Vec::new() }
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ClipRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn audio_tokens(&self) -> usize {
        self.audio_tokens as usize
    }

    pub fn video_tokens(&self) -> usize {
        self.video_tokens as usize
    }

    /// Record count per label, indexed by label code.
    pub fn class_counts(&self) -> [usize; Label::COUNT] {
        let mut counts = [0; Label::COUNT];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }
}
