use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

/// Kind of NLP task a prompt is optimized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskKind {
    /// Named entity recognition, scored on exact character spans.
    Ner,
    /// Single-label classification.
    Cls,
    /// Extractive reading comprehension.
    Mrc,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task kind `{0}` (expected NER, CLS or MRC)")]
pub struct UnknownTaskKind(pub alloc::string::String);

impl FromStr for TaskKind {
    type Err = UnknownTaskKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NER" => Ok(TaskKind::Ner),
            "CLS" => Ok(TaskKind::Cls),
            "MRC" => Ok(TaskKind::Mrc),
            _ => Err(UnknownTaskKind(s.into())),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Ner => "NER",
            TaskKind::Cls => "CLS",
            TaskKind::Mrc => "MRC",
        })
    }
}
