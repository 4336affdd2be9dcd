//! The Box-World environment.
//!
//! A level is an `n x n` room holding one loose key, a set of boxes and the
//! agent. A box is two horizontally adjacent cells: the content on the left
//! and the lock on the right. Walking onto a lock while holding the key of
//! the same colour consumes the key and exposes the content, which is either
//! another key or the gem. Exactly one chain of boxes (the solution path)
//! leads to the gem; opening any other box ends the episode.
//!
//! Rewards: `+1` for opening a solution-path box (the gem box included),
//! `-1` for opening a distractor box (episode terminates), `+10` for the gem
//! (episode terminates). Cell `(0, 0)` is reserved for the inventory pixel
//! and is never walkable.

mod config;
mod game;
mod level;
mod oracle;
mod split;

pub use config::{BranchingMode, Encoding, IntRange, LevelConfig};
pub use game::{Action, EnvState, Observation, Outcome, StepResult, Transition};
pub use level::{
    generate_level, Branch, Cell, Color, ColorPair, Content, Level, LevelGraph, Object,
    Placement, ReplayFile, LEVEL_FORMAT_VERSION,
};
pub use oracle::{oracle_solve, solve_from};
pub use split::{make_split, LevelSampler, SplitSpec};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid level config: {0}")]
    InvalidConfig(String),
    #[error("could not place all objects after {attempts} attempts; config is too dense")]
    PlacementExhausted { attempts: u32 },
    #[error("step called on a finished episode")]
    SteppedAfterDone,
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("malformed level: {0}")]
    MalformedLevel(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Fixed RGB palette, indexed by colour id. Keys and their locks share a
/// triple. Greys, black and white are reserved for the agent, the empty
/// floor and the gem.
pub const PALETTE: [[u8; 3]; 20] = [
    [230, 25, 75],   // red
    [60, 180, 75],   // green
    [255, 225, 25],  // yellow
    [0, 130, 200],   // blue
    [245, 130, 48],  // orange
    [145, 30, 180],  // purple
    [70, 240, 240],  // cyan
    [240, 50, 230],  // magenta
    [210, 245, 60],  // lime
    [250, 190, 212], // pink
    [0, 128, 128],   // teal
    [220, 190, 255], // lavender
    [170, 110, 40],  // brown
    [255, 250, 200], // beige
    [128, 0, 0],     // maroon
    [170, 255, 195], // mint
    [128, 128, 0],   // olive
    [255, 215, 180], // apricot
    [0, 0, 128],     // navy
    [95, 70, 255],   // indigo
];

pub const AGENT_RGB: [u8; 3] = [90, 90, 90];
pub const GEM_RGB: [u8; 3] = [255, 255, 255];
pub const FLOOR_RGB: [u8; 3] = [0, 0, 0];
