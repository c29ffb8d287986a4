use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Damage severity class. The numeric index is the classifier output index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DamageLabel {
    Mild = 0,
    Moderate = 1,
    Severe = 2,
    /// Pre-disaster imagery in the four-class experiment.
    NoDamage = 3,
}

impl DamageLabel {
    pub const DAMAGE: [DamageLabel; 3] = [Self::Mild, Self::Moderate, Self::Severe];
    pub const ALL: [DamageLabel; 4] = [Self::Mild, Self::Moderate, Self::Severe, Self::NoDamage];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mild => "mild",
            Self::Moderate => "moderate",
            Self::Severe => "severe",
            Self::NoDamage => "no_damage",
        }
    }

    pub fn is_damage(self) -> bool {
        self != Self::NoDamage
    }
}

impl fmt::Display for DamageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DamageLabel {
    type Err = Error;

    /// Accepts the class name or its index.
    fn from_str(s: &str) -> Result<Self, Error> {
        let t = s.trim();
        if let Ok(i) = t.parse::<usize>() {
            return Self::from_index(i).ok_or_else(|| Error::Invalid(format!("class index {i} out of range")));
        }
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::Invalid(format!("unknown damage label `{t}`")))
    }
}
