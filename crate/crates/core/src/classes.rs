use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Diagnostic short-names, sorted. A class's label code is its index here.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"];

pub const NUM_CLASSES: usize = 7;

/// The seven diagnostic categories of pigmented lesions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionClass {
    /// Actinic keratoses and intraepithelial carcinoma.
    Akiec,
    /// Basal cell carcinoma.
    Bcc,
    /// Benign keratosis-like lesions.
    Bkl,
    /// Dermatofibroma.
    Df,
    /// Melanoma.
    Mel,
    /// Melanocytic nevi.
    Nv,
    /// Vascular lesions.
    Vasc,
}

impl LesionClass {
    pub const ALL: [LesionClass; NUM_CLASSES] = [
        LesionClass::Akiec,
        LesionClass::Bcc,
        LesionClass::Bkl,
        LesionClass::Df,
        LesionClass::Mel,
        LesionClass::Nv,
        LesionClass::Vasc,
    ];

    pub fn short_name(self) -> &'static str {
        CLASS_NAMES[self.code() as usize]
    }

    /// Numeric label in `0..7`, fixed by lexicographic order of short-names.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<LesionClass> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown lesion class {0:?}")]
pub struct UnknownClassName(pub String);

impl FromStr for LesionClass {
    type Err = UnknownClassName;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CLASS_NAMES
            .iter()
            .position(|&n| n == s)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| UnknownClassName(s.to_string()))
    }
}

/// Label mapping exported alongside checkpoints: index = label code.
pub fn label_map() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}
