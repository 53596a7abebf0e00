//! Model hyperparameters and the small enums shared across modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which token groups a reference-frame query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropagationMode {
    /// own frame, other reference frames and the current frame
    A,
    /// own frame and other reference frames
    B,
    /// own frame and the current frame
    C,
    /// own frame only
    D,
}

impl PropagationMode {
    pub const ALL: [PropagationMode; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn sees_other_refs(self) -> bool {
        matches!(self, Self::A | Self::B)
    }

    pub fn sees_current(self) -> bool {
        matches!(self, Self::A | Self::C)
    }
}

impl FromStr for PropagationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            other => Err(Error::Config(format!("unknown propagation mode `{other}`"))),
        }
    }
}

impl fmt::Display for PropagationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
        };
        f.write_str(c)
    }
}

/// Which backbone blocks exchange information across frames. The others
/// restrict every span to itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockLocations {
    #[default]
    All,
    /// first half of the blocks
    First,
    /// last half of the blocks
    Last,
    /// every other block, ending with the last one
    Alternate,
}

impl BlockLocations {
    pub const ALL: [BlockLocations; 4] = [Self::All, Self::First, Self::Last, Self::Alternate];

    pub fn joint_flags(self, depth: usize) -> Vec<bool> {
        let half = depth.div_ceil(2);
        (0..depth)
            .map(|i| match self {
                Self::All => true,
                Self::First => i < half,
                Self::Last => i >= depth - half,
                Self::Alternate => (depth - 1 - i) % 2 == 0,
            })
            .collect()
    }
}

impl FromStr for BlockLocations {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Self::All),
            "first" => Ok(Self::First),
            "last" => Ok(Self::Last),
            "alternate" => Ok(Self::Alternate),
            other => Err(Error::Config(format!("unknown block locations `{other}`"))),
        }
    }
}

impl fmt::Display for BlockLocations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::All => "all",
            Self::First => "first",
            Self::Last => "last",
            Self::Alternate => "alternate",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Training frame height and width; positional embeddings cover this grid.
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Blocks used to fold decoder tokens into the memory token.
    pub update_blocks: usize,
    pub memory: bool,
    pub locations: BlockLocations,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            update_blocks: 2,
            memory: true,
            locations: BlockLocations::All,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// 16×16 frames with 4×4 patches: 16 tokens per frame, width 8.
    pub fn tiny() -> Self {
        ModelConfig {
            height: 16,
            width: 16,
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            update_blocks: 2,
            memory: true,
            locations: BlockLocations::All,
            ln_eps: 1e-6,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn joint_flags(&self) -> Vec<bool> {
        self.locations.joint_flags(self.depth)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "frame {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("frame size must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("dim {} must be a multiple of 4", self.dim));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive".into());
        }
        if !(1..=3).contains(&self.update_blocks) {
            return bad(format!("update_blocks must be in 1..=3, got {}", self.update_blocks));
        }
        if self.ln_eps <= 0.0 {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn location_flags() {
        assert_eq!(BlockLocations::All.joint_flags(4), vec![true; 4]);
        assert_eq!(BlockLocations::First.joint_flags(4), vec![true, true, false, false]);
        assert_eq!(BlockLocations::Last.joint_flags(4), vec![false, false, true, true]);
        assert_eq!(BlockLocations::Alternate.joint_flags(4), vec![false, true, false, true]);
    }

    #[test]
    fn mode_round_trip() {
        for m in PropagationMode::ALL {
            assert_eq!(m.to_string().parse::<PropagationMode>().unwrap(), m);
        }
        assert!("e".parse::<PropagationMode>().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"dim": 32, "bogus": 1}"#);
        assert!(err.is_err());
        let ok: ModelConfig = serde_json::from_str(r#"{"dim": 32}"#).unwrap();
        assert_eq!(ok.dim, 32);
        assert_eq!(ok.patch, 8);
    }
}
