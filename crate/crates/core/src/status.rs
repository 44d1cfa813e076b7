use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Task-level completion label shared by the critic, the trajectory store, and
/// repair feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CompletionStatus {
    Accomplished,
    PartiallyAccomplished,
    NotAccomplished,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown completion status '{0}'")]
pub struct UnknownStatus(pub String);

impl CompletionStatus {
    pub const ALL: [CompletionStatus; 3] = [
        CompletionStatus::Accomplished,
        CompletionStatus::PartiallyAccomplished,
        CompletionStatus::NotAccomplished,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompletionStatus::Accomplished => "Accomplished",
            CompletionStatus::PartiallyAccomplished => "Partially accomplished",
            CompletionStatus::NotAccomplished => "Not accomplished",
        }
    }

    /// Case-insensitive, ignoring spaces, underscores and hyphens, so
    /// "Partially accomplished", "PartiallyAccomplished" and
    /// "Partially_Accomplished" all map to the same variant.
    pub fn canonicalize(raw: &str) -> Option<Self> {
        let folded: String = raw
            .chars()
            .filter(|c| !matches!(c, ' ' | '_' | '-' | '\t'))
            .flat_map(char::to_lowercase)
            .collect();
        match folded.as_str() {
            "accomplished" => Some(CompletionStatus::Accomplished),
            "partiallyaccomplished" => Some(CompletionStatus::PartiallyAccomplished),
            "notaccomplished" => Some(CompletionStatus::NotAccomplished),
            _ => None,
        }
    }

    /// Accomplished or partially accomplished.
    pub fn is_success(self) -> bool {
        matches!(
            self,
            CompletionStatus::Accomplished | CompletionStatus::PartiallyAccomplished
        )
    }
}

impl fmt::Display for CompletionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompletionStatus {
    type Err = UnknownStatus;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::canonicalize(s).ok_or_else(|| UnknownStatus(s.to_string()))
    }
}

impl Serialize for CompletionStatus {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CompletionStatus {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}
