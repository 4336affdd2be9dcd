use serde::{Deserialize, Serialize};

use super::config::{BranchingMode, LevelConfig};
use super::game::Action;
use super::EnvError;
use crate::rng::Rng;

pub const LEVEL_FORMAT_VERSION: u32 = 1;

const MAX_PLACEMENT_ATTEMPTS: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Color(pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Content {
    Key(Color),
    Gem,
}

/// One box in the colour graph: the lock it carries and what it holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColorPair {
    pub lock: Color,
    pub content: Content,
}

impl ColorPair {
    /// `(lock, content key)` if the box holds a key.
    pub fn key_transition(&self) -> Option<(Color, Color)> {
        match self.content {
            Content::Key(k) => Some((self.lock, k)),
            Content::Gem => None,
        }
    }
}

/// A dead-end chain of boxes hanging off solution-path node `attach`.
///
/// `attach = i` refers to the key obtained after opening `i` solution boxes
/// (`i = 0` is the initial loose key). Boxes are listed in opening order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub attach: usize,
    pub boxes: Vec<ColorPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGraph {
    pub solution_path: Vec<ColorPair>,
    pub distractor_branches: Vec<Branch>,
}

impl LevelGraph {
    pub fn solution_length(&self) -> usize {
        self.solution_path.len()
    }

    /// The single key lying loose in the room at the start.
    pub fn loose_key(&self) -> Color {
        self.solution_path[0].lock
    }

    pub fn num_boxes(&self) -> usize {
        self.solution_path.len()
            + self
                .distractor_branches
                .iter()
                .map(|b| b.boxes.len())
                .sum::<usize>()
    }

    /// All boxes in id order: solution path first, then each branch.
    pub fn boxes(&self) -> impl Iterator<Item = &ColorPair> {
        self.solution_path
            .iter()
            .chain(self.distractor_branches.iter().flat_map(|b| b.boxes.iter()))
    }

    pub fn is_solution_box(&self, box_id: usize) -> bool {
        box_id < self.solution_path.len()
    }

    /// Key-to-key transitions required on the way to the gem.
    pub fn solution_transitions(&self) -> impl Iterator<Item = (Color, Color)> + '_ {
        self.solution_path.iter().filter_map(ColorPair::key_transition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u8; 2]", into = "[u8; 2]")]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub const fn new(row: u8, col: u8) -> Self {
        Cell { row, col }
    }

    pub fn index(&self, room_size: usize) -> usize {
        self.row as usize * room_size + self.col as usize
    }
}

impl From<[u8; 2]> for Cell {
    fn from(v: [u8; 2]) -> Self {
        Cell { row: v[0], col: v[1] }
    }
}

impl From<Cell> for [u8; 2] {
    fn from(c: Cell) -> Self {
        [c.row, c.col]
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Object {
    LooseKey { color: Color },
    Lock { color: Color, box_id: usize },
    BoxContent { content: Content, box_id: usize },
    AgentStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub cell: Cell,
    pub object: Object,
}

/// On-disk form of a level.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LevelFile {
    version: u32,
    config: LevelConfig,
    seed: u64,
    graph: LevelGraph,
    placements: Vec<Placement>,
}

/// A generated puzzle. Immutable; episode state lives in
/// [`EnvState`](super::EnvState).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LevelFile", try_from = "LevelFile")]
pub struct Level {
    config: LevelConfig,
    seed: u64,
    graph: LevelGraph,
    placements: Vec<Placement>,
    // Derived lookup tables, rebuilt on load.
    grid: Vec<i16>,
    agent_start: Cell,
    lock_of_box: Vec<usize>,
}

impl From<Level> for LevelFile {
    fn from(l: Level) -> Self {
        LevelFile {
            version: LEVEL_FORMAT_VERSION,
            config: l.config,
            seed: l.seed,
            graph: l.graph,
            placements: l.placements,
        }
    }
}

impl TryFrom<LevelFile> for Level {
    type Error = EnvError;

    fn try_from(f: LevelFile) -> Result<Self, EnvError> {
        if f.version != LEVEL_FORMAT_VERSION {
            return Err(EnvError::MalformedLevel(format!(
                "unsupported level version {}",
                f.version
            )));
        }
        Level::from_parts(f.config, f.seed, f.graph, f.placements)
    }
}

impl Level {
    /// Assembles a level and checks its structural invariants.
    pub fn from_parts(
        config: LevelConfig,
        seed: u64,
        graph: LevelGraph,
        placements: Vec<Placement>,
    ) -> Result<Self, EnvError> {
        let bad = |msg: String| Err(EnvError::MalformedLevel(msg));
        let n = config.room_size;
        if graph.solution_path.is_empty() {
            return bad("empty solution path".into());
        }
        if graph.solution_path.last().map(|p| p.content) != Some(Content::Gem) {
            return bad("last solution box must hold the gem".into());
        }
        if placements.len() > 64 {
            return bad(format!("{} placements exceed 64", placements.len()));
        }
        let num_boxes = graph.num_boxes();
        let box_pairs: Vec<ColorPair> = graph.boxes().copied().collect();
        let mut grid = vec![-1i16; n * n];
        let mut agent_start = None;
        let mut lock_of_box = vec![usize::MAX; num_boxes];
        let mut content_of_box = vec![usize::MAX; num_boxes];
        let mut loose_keys = 0;
        for (idx, p) in placements.iter().enumerate() {
            let Cell { row, col } = p.cell;
            if row as usize >= n || col as usize >= n {
                return bad(format!("placement {} out of bounds", p.cell));
            }
            if row == 0 && col == 0 {
                return bad("object placed on the inventory cell".into());
            }
            match p.object {
                Object::AgentStart => {
                    if agent_start.replace(p.cell).is_some() {
                        return bad("more than one agent start".into());
                    }
                    continue;
                }
                Object::LooseKey { .. } => loose_keys += 1,
                Object::Lock { color, box_id } => {
                    if box_id >= num_boxes || box_pairs[box_id].lock != color {
                        return bad(format!("lock at {} does not match the graph", p.cell));
                    }
                    lock_of_box[box_id] = idx;
                }
                Object::BoxContent { content, box_id } => {
                    if box_id >= num_boxes || box_pairs[box_id].content != content {
                        return bad(format!("content at {} does not match the graph", p.cell));
                    }
                    content_of_box[box_id] = idx;
                }
            }
            let cell = p.cell.index(n);
            if grid[cell] >= 0 {
                return bad(format!("two objects at {}", p.cell));
            }
            grid[cell] = idx as i16;
        }
        let Some(agent_start) = agent_start else {
            return bad("no agent start".into());
        };
        if grid[agent_start.index(n)] >= 0 {
            return bad("agent starts on an object".into());
        }
        if loose_keys != 1 {
            return bad(format!("expected exactly one loose key, found {loose_keys}"));
        }
        for b in 0..num_boxes {
            let (l, c) = (lock_of_box[b], content_of_box[b]);
            if l == usize::MAX || c == usize::MAX {
                return bad(format!("box {b} is not fully placed"));
            }
            let (lc, cc) = (placements[l].cell, placements[c].cell);
            if lc.row != cc.row || lc.col != cc.col + 1 {
                return bad(format!("box {b}: lock must sit directly right of its content"));
            }
        }
        Ok(Level {
            config,
            seed,
            graph,
            placements,
            grid,
            agent_start,
            lock_of_box,
        })
    }

    pub fn config(&self) -> &LevelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn graph(&self) -> &LevelGraph {
        &self.graph
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn room_size(&self) -> usize {
        self.config.room_size
    }

    pub fn agent_start(&self) -> Cell {
        self.agent_start
    }

    pub fn solution_length(&self) -> usize {
        self.graph.solution_length()
    }

    /// Index into [`placements`](Self::placements) of the object at `cell`,
    /// ignoring the agent start marker.
    pub fn object_index_at(&self, cell: Cell) -> Option<usize> {
        let v = self.grid[cell.index(self.config.room_size)];
        (v >= 0).then_some(v as usize)
    }

    pub(crate) fn lock_index(&self, box_id: usize) -> usize {
        self.lock_of_box[box_id]
    }

    pub fn to_json(&self) -> Result<String, EnvError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Every key colour that can be held at some point, with the number of
    /// locks of that colour. Used for branching-structure checks.
    pub fn lock_counts(&self) -> std::collections::BTreeMap<Color, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for b in self.graph.boxes() {
            *counts.entry(b.lock).or_insert(0) += 1;
        }
        counts
    }
}

/// Recorded episode for regression tests: replaying `actions` on `level`
/// must reproduce `rewards` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayFile {
    pub version: u32,
    pub level: Level,
    pub actions: Vec<Action>,
    pub rewards: Vec<f32>,
}

/// Generates a level; a pure function of `(config, seed)`.
pub fn generate_level(config: &LevelConfig, seed: u64) -> Result<Level, EnvError> {
    generate_constrained(config, seed, None)
}

/// As [`generate_level`], optionally forcing the key transition `required`
/// (lock colour, content key colour) onto the solution path.
pub(crate) fn generate_constrained(
    config: &LevelConfig,
    seed: u64,
    required: Option<(Color, Color)>,
) -> Result<Level, EnvError> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mut sol = config.solution_length;
    if required.is_some() {
        sol.lo = sol.lo.max(2);
        if sol.lo > sol.hi {
            return Err(EnvError::InfeasibleSplit(
                "a key-to-key transition needs solution length >= 2".into(),
            ));
        }
    }
    let length = rng.range_inclusive(sol.lo, sol.hi);
    let distractors = rng.range_inclusive(config.num_distractors.lo, config.num_distractors.hi);
    let graph = build_graph(config, length, distractors, required, &mut rng)?;
    let placements = place_objects(config.room_size, &graph, &mut rng)?;
    Level::from_parts(config.clone(), seed, graph, placements)
}

fn build_graph(
    config: &LevelConfig,
    length: usize,
    distractors: usize,
    required: Option<(Color, Color)>,
    rng: &mut Rng,
) -> Result<LevelGraph, EnvError> {
    let mut palette: Vec<Color> = (0..config.num_colors as u8).map(Color).collect();
    rng.shuffle(&mut palette);

    let keys: Vec<Color> = match required {
        None => palette.drain(..length).collect(),
        Some((a, b)) => {
            if a == b || a.0 as usize >= config.num_colors || b.0 as usize >= config.num_colors {
                return Err(EnvError::InfeasibleSplit(format!(
                    "invalid required pair ({}, {})",
                    a.0, b.0
                )));
            }
            palette.retain(|&c| c != a && c != b);
            let slot = rng.index(length - 1);
            let mut keys: Vec<Color> = palette.drain(..length - 2).collect();
            keys.insert(slot, a);
            keys.insert(slot + 1, b);
            keys
        }
    };
    let mut fresh = palette.into_iter();

    let solution_path: Vec<ColorPair> = (0..length)
        .map(|i| ColorPair {
            lock: keys[i],
            content: keys.get(i + 1).map_or(Content::Gem, |&k| Content::Key(k)),
        })
        .collect();

    let mut distractor_branches = Vec::with_capacity(distractors);
    for _ in 0..distractors {
        let attach = rng.index(length);
        let chain: Vec<Color> = fresh.by_ref().take(config.distractor_length).collect();
        let boxes = match config.branching {
            // held key c -> [lock c | e1] -> [lock e1 | e2] -> ...
            BranchingMode::Forward => {
                let mut lock = keys[attach];
                chain
                    .iter()
                    .map(|&e| {
                        let pair = ColorPair {
                            lock,
                            content: Content::Key(e),
                        };
                        lock = e;
                        pair
                    })
                    .collect()
            }
            // [lock em | em-1] -> ... -> [lock e1 | c]; em is never obtainable.
            BranchingMode::Backward => {
                let mut boxes: Vec<ColorPair> = Vec::with_capacity(chain.len());
                for (j, &lock) in chain.iter().enumerate().rev() {
                    let content = if j == 0 { keys[attach] } else { chain[j - 1] };
                    boxes.push(ColorPair {
                        lock,
                        content: Content::Key(content),
                    });
                }
                boxes
            }
        };
        distractor_branches.push(Branch { attach, boxes });
    }
    Ok(LevelGraph {
        solution_path,
        distractor_branches,
    })
}

/// Rejection-samples positions for every box, the loose key and the agent.
///
/// Distinct objects never touch (not even diagonally), nothing touches the
/// inventory cell, and the floor must form one connected region.
fn place_objects(n: usize, graph: &LevelGraph, rng: &mut Rng) -> Result<Vec<Placement>, EnvError> {
    let boxes: Vec<ColorPair> = graph.boxes().copied().collect();
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        if let Some(p) = try_place(n, &boxes, graph.loose_key(), rng) {
            return Ok(p);
        }
    }
    Err(EnvError::PlacementExhausted {
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

fn try_place(n: usize, boxes: &[ColorPair], loose_key: Color, rng: &mut Rng) -> Option<Vec<Placement>> {
    let mut blocked = vec![false; n * n];
    let mut occupied = vec![false; n * n];
    let reserve = |blocked: &mut [bool], r: usize, c: usize| {
        for rr in r.saturating_sub(1)..=(r + 1).min(n - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(n - 1) {
                blocked[rr * n + cc] = true;
            }
        }
    };
    reserve(&mut blocked, 0, 0);

    let cell = |r: usize, c: usize| Cell::new(r as u8, c as u8);
    let mut placements = Vec::with_capacity(2 * boxes.len() + 2);
    let mut candidates = Vec::with_capacity(n * n);
    for (box_id, pair) in boxes.iter().enumerate() {
        candidates.clear();
        for r in 0..n {
            for c in 0..n - 1 {
                if !blocked[r * n + c] && !blocked[r * n + c + 1] {
                    candidates.push((r, c));
                }
            }
        }
        if candidates.is_empty() {
            return None;
        }
        let (r, c) = candidates[rng.index(candidates.len())];
        placements.push(Placement {
            cell: cell(r, c),
            object: Object::BoxContent {
                content: pair.content,
                box_id,
            },
        });
        placements.push(Placement {
            cell: cell(r, c + 1),
            object: Object::Lock {
                color: pair.lock,
                box_id,
            },
        });
        reserve(&mut blocked, r, c);
        reserve(&mut blocked, r, c + 1);
        occupied[r * n + c] = true;
        occupied[r * n + c + 1] = true;
    }

    let free: Vec<usize> = (0..n * n).filter(|&i| !blocked[i]).collect();
    if free.is_empty() {
        return None;
    }
    let k = free[rng.index(free.len())];
    placements.push(Placement {
        cell: cell(k / n, k % n),
        object: Object::LooseKey { color: loose_key },
    });
    occupied[k] = true;

    let floor: Vec<usize> = (1..n * n).filter(|&i| !occupied[i]).collect();
    let a = floor[rng.index(floor.len())];
    placements.push(Placement {
        cell: cell(a / n, a % n),
        object: Object::AgentStart,
    });

    // Flood fill the walkable floor from the agent.
    let mut seen = vec![false; n * n];
    let mut stack = vec![a];
    seen[a] = true;
    let mut reached = 1;
    while let Some(i) = stack.pop() {
        let (r, c) = (i / n, i % n);
        let mut visit = |j: usize| {
            if j != 0 && !occupied[j] && !seen[j] {
                seen[j] = true;
                reached += 1;
                stack.push(j);
            }
        };
        if r > 0 {
            visit(i - n);
        }
        if r + 1 < n {
            visit(i + n);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < n {
            visit(i + 1);
        }
    }
    (reached == floor.len()).then_some(placements)
}
