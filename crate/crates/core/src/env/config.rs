use serde::{Deserialize, Serialize};

use super::{EnvError, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchingMode {
    /// Distractor boxes share the lock colour of a solution-path key, so a
    /// held key can open more than one box.
    Forward,
    /// Every key opens exactly one box; distractor chains lead *into* the
    /// solution path and their root lock is never obtainable.
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Rgb,
    OneHot,
}

/// Inclusive integer range, serialized as `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        IntRange { lo, hi }
    }

    pub const fn exactly(v: usize) -> Self {
        IntRange { lo: v, hi: v }
    }

    pub fn contains(&self, v: usize) -> bool {
        self.lo <= v && v <= self.hi
    }
}

impl From<[usize; 2]> for IntRange {
    fn from(v: [usize; 2]) -> Self {
        IntRange { lo: v[0], hi: v[1] }
    }
}

impl From<IntRange> for [usize; 2] {
    fn from(r: IntRange) -> Self {
        [r.lo, r.hi]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelConfig {
    pub room_size: usize,
    pub solution_length: IntRange,
    pub num_distractors: IntRange,
    pub distractor_length: usize,
    pub branching: BranchingMode,
    pub num_colors: usize,
    pub max_steps: u32,
    pub encoding: Encoding,
}

impl Default for LevelConfig {
    /// The training distribution: solution lengths 1-4, 0-4 distractor
    /// branches of length 1, forward branching.
    fn default() -> Self {
        LevelConfig {
            room_size: 12,
            solution_length: IntRange::new(1, 4),
            num_distractors: IntRange::new(0, 4),
            distractor_length: 1,
            branching: BranchingMode::Forward,
            num_colors: 20,
            max_steps: 120,
            encoding: Encoding::Rgb,
        }
    }
}

impl LevelConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidConfig(msg));
        if self.room_size < 6 {
            return bad(format!("room_size {} < 6", self.room_size));
        }
        if self.room_size > 255 {
            return bad(format!("room_size {} > 255", self.room_size));
        }
        let sol = self.solution_length;
        if sol.lo < 1 || sol.lo > sol.hi {
            return bad(format!("solution_length range [{}, {}]", sol.lo, sol.hi));
        }
        let dis = self.num_distractors;
        if dis.lo > dis.hi {
            return bad(format!("num_distractors range [{}, {}]", dis.lo, dis.hi));
        }
        if dis.hi > 0 && self.distractor_length < 1 {
            return bad("distractor_length must be >= 1 when distractors are enabled".into());
        }
        if self.max_steps < 1 {
            return bad("max_steps must be >= 1".into());
        }
        let needed = self.max_colors_needed();
        if self.num_colors < needed {
            return bad(format!(
                "num_colors {} < {} (longest solution + all distractor boxes)",
                self.num_colors, needed
            ));
        }
        if self.num_colors > 250 {
            return bad(format!("num_colors {} > 250", self.num_colors));
        }
        if self.encoding == Encoding::Rgb && self.num_colors > PALETTE.len() {
            return bad(format!(
                "rgb encoding supports at most {} colours, got {}",
                PALETTE.len(),
                self.num_colors
            ));
        }
        let boxes = self.max_boxes();
        let capacity = self.box_capacity();
        if boxes + 1 > capacity {
            return bad(format!(
                "{boxes} boxes plus a key cannot be spaced out in a {0}x{0} room (capacity {capacity})",
                self.room_size
            ));
        }
        // The consumed-object set is a 64-bit mask.
        if 2 * boxes + 2 > 64 {
            return bad(format!("too many objects ({boxes} boxes)"));
        }
        Ok(())
    }

    pub fn max_boxes(&self) -> usize {
        self.solution_length.hi + self.num_distractors.hi * self.distractor_length
    }

    pub fn max_colors_needed(&self) -> usize {
        self.solution_length.hi + self.num_distractors.hi * self.distractor_length
    }

    /// Upper bound on the number of mutually separated 1x2 footprints in the
    /// room: boxes on every other row with one free column between them.
    fn box_capacity(&self) -> usize {
        let n = self.room_size;
        ((n + 1) / 3) * n.div_ceil(2) - 1
    }

    /// Channels per cell in a rendered observation.
    pub fn channels(&self) -> usize {
        match self.encoding {
            Encoding::Rgb => 3,
            Encoding::OneHot => self.num_colors + 3,
        }
    }
}
