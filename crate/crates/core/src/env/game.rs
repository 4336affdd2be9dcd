use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::Encoding;
use super::level::{Cell, Color, Content, Level, Object};
use super::{EnvError, AGENT_RGB, FLOOR_RGB, GEM_RGB, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    GemCollected,
    DistractorOpened,
    Timeout,
}

/// Everything about an episode that changes, in a form cheap enough to hash
/// for search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct Core {
    pub agent: Cell,
    pub inventory: Option<Color>,
    /// Bit `i` set once placement `i` has been consumed.
    pub removed: u64,
}

impl Core {
    pub fn is_removed(&self, placement: usize) -> bool {
        self.removed & (1u64 << placement) != 0
    }
}

/// Applies one move, ignoring the step budget.
pub(crate) fn transition(level: &Level, core: &Core, action: Action) -> (Core, f32, Outcome) {
    let n = level.room_size() as i32;
    let (dr, dc) = action.delta();
    let (r, c) = (core.agent.row as i32 + dr, core.agent.col as i32 + dc);
    let mut next = *core;
    if r < 0 || c < 0 || r >= n || c >= n || (r == 0 && c == 0) {
        return (next, 0.0, Outcome::Running);
    }
    let target = Cell::new(r as u8, c as u8);
    let live = level
        .object_index_at(target)
        .filter(|&i| !core.is_removed(i));
    let Some(idx) = live else {
        next.agent = target;
        return (next, 0.0, Outcome::Running);
    };
    let bit = 1u64 << idx;
    match level.placements()[idx].object {
        Object::LooseKey { color } => {
            next.agent = target;
            next.inventory = Some(color);
            next.removed |= bit;
            (next, 0.0, Outcome::Running)
        }
        Object::Lock { color, box_id } => {
            if core.inventory != Some(color) {
                return (next, 0.0, Outcome::Running);
            }
            next.agent = target;
            next.inventory = None;
            next.removed |= bit;
            if level.graph().is_solution_box(box_id) {
                (next, 1.0, Outcome::Running)
            } else {
                (next, -1.0, Outcome::DistractorOpened)
            }
        }
        Object::BoxContent { content, box_id } => {
            if !core.is_removed(level.lock_index(box_id)) {
                return (next, 0.0, Outcome::Running);
            }
            next.agent = target;
            next.removed |= bit;
            match content {
                Content::Key(color) => {
                    next.inventory = Some(color);
                    (next, 0.0, Outcome::Running)
                }
                Content::Gem => (next, 10.0, Outcome::GemCollected),
            }
        }
        Object::AgentStart => unreachable!("agent start is not indexed in the grid"),
    }
}

/// Reward and termination of one step, without an observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f32,
    pub done: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f32,
    pub done: bool,
    pub outcome: Outcome,
}

/// `room_size x room_size x channels` tensor, row-major (HWC).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Observation {
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.size + col) * self.channels + channel]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.size + col) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// Mutable episode state over a shared level.
#[derive(Debug, Clone)]
pub struct EnvState {
    level: Arc<Level>,
    core: Core,
    steps_taken: u32,
    outcome: Outcome,
}

impl EnvState {
    pub fn new(level: Arc<Level>) -> Self {
        let core = Core {
            agent: level.agent_start(),
            inventory: None,
            removed: 0,
        };
        EnvState {
            level,
            core,
            steps_taken: 0,
            outcome: Outcome::Running,
        }
    }

    pub fn level(&self) -> &Level {
        &self.level
    }

    pub fn shared_level(&self) -> &Arc<Level> {
        &self.level
    }

    pub fn agent_pos(&self) -> Cell {
        self.core.agent
    }

    pub fn inventory(&self) -> Option<Color> {
        self.core.inventory
    }

    pub fn steps_taken(&self) -> u32 {
        self.steps_taken
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn terminated(&self) -> bool {
        self.outcome != Outcome::Running
    }

    /// Whether placement `index` has been picked up or unlocked.
    pub fn is_removed(&self, index: usize) -> bool {
        self.core.is_removed(index)
    }

    pub(crate) fn core(&self) -> &Core {
        &self.core
    }

    /// Steps without rendering.
    pub fn advance(&mut self, action: Action) -> Result<Transition, EnvError> {
        if self.terminated() {
            return Err(EnvError::SteppedAfterDone);
        }
        let (core, reward, mut outcome) = transition(&self.level, &self.core, action);
        self.core = core;
        self.steps_taken += 1;
        if outcome == Outcome::Running && self.steps_taken >= self.level.config().max_steps {
            outcome = Outcome::Timeout;
        }
        self.outcome = outcome;
        Ok(Transition {
            reward,
            done: outcome != Outcome::Running,
            outcome,
        })
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        let t = self.advance(action)?;
        Ok(StepResult {
            observation: self.render(),
            reward: t.reward,
            done: t.done,
            outcome: t.outcome,
        })
    }

    pub fn render(&self) -> Observation {
        let cfg = self.level.config();
        let size = cfg.room_size;
        let channels = cfg.channels();
        let mut data = vec![0.0; size * size * channels];
        self.render_into(&mut data);
        Observation {
            size,
            channels,
            data,
        }
    }

    /// Writes the observation into `out` (length `size * size * channels`).
    pub fn render_into(&self, out: &mut [f32]) {
        let cfg = self.level.config();
        let n = cfg.room_size;
        let channels = cfg.channels();
        assert_eq!(out.len(), n * n * channels, "render buffer size");
        let mut cells = vec![Glyph::Floor; n * n];
        for (i, p) in self.level.placements().iter().enumerate() {
            if self.core.is_removed(i) {
                continue;
            }
            let glyph = match p.object {
                Object::LooseKey { color } | Object::Lock { color, .. } => Glyph::Color(color),
                Object::BoxContent {
                    content: Content::Key(color),
                    ..
                } => Glyph::Color(color),
                Object::BoxContent {
                    content: Content::Gem,
                    ..
                } => Glyph::Gem,
                Object::AgentStart => continue,
            };
            cells[p.cell.index(n)] = glyph;
        }
        if let Some(k) = self.core.inventory {
            cells[0] = Glyph::Color(k);
        }
        cells[self.core.agent.index(n)] = Glyph::Agent;

        match cfg.encoding {
            Encoding::Rgb => {
                for (i, g) in cells.iter().enumerate() {
                    let rgb = match g {
                        Glyph::Floor => FLOOR_RGB,
                        Glyph::Agent => AGENT_RGB,
                        Glyph::Gem => GEM_RGB,
                        Glyph::Color(c) => PALETTE[c.0 as usize],
                    };
                    for ch in 0..3 {
                        out[i * 3 + ch] = rgb[ch] as f32 / 255.0;
                    }
                }
            }
            Encoding::OneHot => {
                out.fill(0.0);
                let k = cfg.num_colors;
                for (i, g) in cells.iter().enumerate() {
                    let ch = match g {
                        Glyph::Color(c) => c.0 as usize,
                        Glyph::Agent => k,
                        Glyph::Gem => k + 1,
                        Glyph::Floor => k + 2,
                    };
                    out[i * channels + ch] = 1.0;
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Glyph {
    Floor,
    Agent,
    Gem,
    Color(Color),
}
