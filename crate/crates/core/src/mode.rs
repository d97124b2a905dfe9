use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which variant of the archive loop produced a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Archive of every valid child; each parent modifies itself.
    Full,
    /// The root agent performs every modification; meta capability frozen.
    NoSelfImprove,
    /// Only the newest valid child is kept and it is always the next parent.
    NoOpenEnded,
    /// Each modification is preceded by a templated instruction request.
    DgmFixedInstruction,
    /// Parents are chosen by the most recently archived agent's own routine.
    ModifiableSelection,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Full,
        Mode::NoSelfImprove,
        Mode::NoOpenEnded,
        Mode::DgmFixedInstruction,
        Mode::ModifiableSelection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoSelfImprove => "no-self-improve",
            Mode::NoOpenEnded => "no-open-ended",
            Mode::DgmFixedInstruction => "dgm-fixed-instruction",
            Mode::ModifiableSelection => "modifiable-selection",
        }
    }

    /// Whether every valid child is retained.
    pub fn keeps_archive(self) -> bool {
        !matches!(self, Mode::NoOpenEnded)
    }

    /// Whether children may alter their own meta capability.
    pub fn self_improves(self) -> bool {
        !matches!(self, Mode::NoSelfImprove)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownMode(pub String);

impl fmt::Display for UnknownMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown mode `{}`", self.0)
    }
}

impl std::error::Error for UnknownMode {}

impl FromStr for Mode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UnknownMode(s.to_string()))
    }
}
