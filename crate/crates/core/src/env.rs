//! Sokoban gridworld: states, push mechanics, text rendering, deadlock
//! detection, and solvable-instance generation via reverse play.
//!
//! States are immutable values; [`step`] returns a fresh state, so snapshots
//! are plain clones and rollouts can share read-only state across workers.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;

/// Reward for a non-terminal step.
pub const STEP_PENALTY: f64 = -0.1;
/// Terminal reward when every target is covered.
pub const SUCCESS_REWARD: f64 = 10.0;
/// Terminal reward when the step budget runs out.
pub const FAILURE_REWARD: f64 = 0.0;

/// Grid coordinate, row-major with (0, 0) at the top-left corner.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Neighbouring cell in `action`'s direction, or `None` at the grid edge.
    pub fn shifted(&self, action: ActionPrimitive) -> Option<Position> {
        let (dr, dc) = action.delta();
        let row = self.row.checked_add_signed(dr)?;
        let col = self.col.checked_add_signed(dc)?;
        Some(Position { row, col })
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// The four Sokoban moves. The declaration order defines the total order
/// used for deterministic tie-breaking everywhere in this crate.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ActionPrimitive {
    Up,
    Down,
    Left,
    Right,
}

impl ActionPrimitive {
    pub const ALL: [ActionPrimitive; 4] = [
        ActionPrimitive::Up,
        ActionPrimitive::Down,
        ActionPrimitive::Left,
        ActionPrimitive::Right,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActionPrimitive::Up => "up",
            ActionPrimitive::Down => "down",
            ActionPrimitive::Left => "left",
            ActionPrimitive::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "up" => Some(ActionPrimitive::Up),
            "down" => Some(ActionPrimitive::Down),
            "left" => Some(ActionPrimitive::Left),
            "right" => Some(ActionPrimitive::Right),
            _ => None,
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn delta(&self) -> (isize, isize) {
        match self {
            ActionPrimitive::Up => (-1, 0),
            ActionPrimitive::Down => (1, 0),
            ActionPrimitive::Left => (0, -1),
            ActionPrimitive::Right => (0, 1),
        }
    }

    /// Opposite direction; a pull during reverse-play generation is the
    /// inverse of a push in this direction.
    pub fn opposite(&self) -> Self {
        match self {
            ActionPrimitive::Up => ActionPrimitive::Down,
            ActionPrimitive::Down => ActionPrimitive::Up,
            ActionPrimitive::Left => ActionPrimitive::Right,
            ActionPrimitive::Right => ActionPrimitive::Left,
        }
    }
}

impl fmt::Display for ActionPrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Joins action names with ", " (the `<plan>` tag wire format).
pub fn format_plan(actions: &[ActionPrimitive]) -> String {
    actions
        .iter()
        .map(|a| a.name())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Full Sokoban configuration. Border cells are always walls; boxes and
/// targets have equal cardinality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SokobanState {
    pub width: usize,
    pub height: usize,
    pub walls: BTreeSet<Position>,
    pub player: Position,
    pub boxes: BTreeSet<Position>,
    pub targets: BTreeSet<Position>,
    pub step_count: usize,
}

impl SokobanState {
    pub fn in_bounds(&self, p: Position) -> bool {
        p.row < self.height && p.col < self.width
    }

    pub fn is_wall(&self, p: Position) -> bool {
        !self.in_bounds(p) || self.walls.contains(&p)
    }

    /// True when every target is covered by a box.
    pub fn is_solved(&self) -> bool {
        self.targets.iter().all(|t| self.boxes.contains(t))
    }

    /// Targets not currently covered by a box, in sorted order.
    pub fn unsolved_targets(&self) -> Vec<Position> {
        self.targets
            .iter()
            .filter(|t| !self.boxes.contains(t))
            .copied()
            .collect()
    }

    /// Value-semantics deep copy; restoring later replays identically.
    pub fn snapshot(&self) -> SokobanState {
        self.clone()
    }

    /// Inverse of [`SokobanState::snapshot`].
    pub fn restore(snapshot: &SokobanState) -> SokobanState {
        snapshot.clone()
    }

    fn glyph(&self, p: Position) -> char {
        let is_box = self.boxes.contains(&p);
        let is_target = self.targets.contains(&p);
        if self.walls.contains(&p) {
            '#'
        } else if p == self.player {
            if is_target {
                'S'
            } else {
                'P'
            }
        } else if is_box && is_target {
            '√'
        } else if is_box {
            'X'
        } else if is_target {
            'O'
        } else {
            '_'
        }
    }

    /// What sits at `p`, in the vocabulary of the observation text.
    pub fn cell_kind(&self, p: Position) -> &'static str {
        if self.is_wall(p) {
            "wall"
        } else if self.boxes.contains(&p) {
            if self.targets.contains(&p) {
                "box on target"
            } else {
                "box"
            }
        } else if self.targets.contains(&p) {
            "target"
        } else {
            "floor"
        }
    }
}

/// Result of applying one action.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: SokobanState,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// One deterministic Sokoban step. Blocked moves are legal no-ops that still
/// consume a step. The episode ends with `success` when all targets are
/// covered, or with failure when `step_count` reaches `t_max`.
pub fn step(state: &SokobanState, action: ActionPrimitive, t_max: usize) -> StepOutcome {
    let mut next = state.clone();
    next.step_count += 1;

    if let Some(dest) = state.player.shifted(action) {
        if state.in_bounds(dest) && !state.is_wall(dest) {
            if state.boxes.contains(&dest) {
                if let Some(box_dest) = dest.shifted(action) {
                    if state.in_bounds(box_dest)
                        && !state.is_wall(box_dest)
                        && !state.boxes.contains(&box_dest)
                    {
                        next.boxes.remove(&dest);
                        next.boxes.insert(box_dest);
                        next.player = dest;
                    }
                }
            } else {
                next.player = dest;
            }
        }
    }

    let success = next.is_solved();
    let done = success || next.step_count >= t_max;
    let reward = if success {
        SUCCESS_REWARD
    } else if done {
        FAILURE_REWARD
    } else {
        STEP_PENALTY
    };
    StepOutcome {
        next_state: next,
        reward,
        done,
        success,
    }
}

/// Sound but incomplete deadlock check: a box off its target wedged into a
/// corner (two orthogonally adjacent walls) can never be moved again.
pub fn is_deadlocked(state: &SokobanState) -> bool {
    state.boxes.iter().any(|&b| {
        if state.targets.contains(&b) {
            return false;
        }
        let blocked = |a: ActionPrimitive| match b.shifted(a) {
            Some(p) => state.is_wall(p),
            None => true,
        };
        let up = blocked(ActionPrimitive::Up);
        let down = blocked(ActionPrimitive::Down);
        let left = blocked(ActionPrimitive::Left);
        let right = blocked(ActionPrimitive::Right);
        (up || down) && (left || right)
    })
}

// ---------------------------------------------------------------------------
// Text rendering (grid + coordinate summary + adjacency sentence)
// ---------------------------------------------------------------------------

fn format_position_list(positions: &[Position]) -> String {
    positions
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Renders the grid with a `Col` header and `Row` labels, followed by the
/// coordinate-summary line and the adjacency line. The cell layout is fixed:
/// row label, four spaces, glyphs joined by five spaces, four trailing
/// spaces. Consumers treat this string as the canonical state key.
pub fn render_text(state: &SokobanState) -> String {
    let mut out = String::with_capacity(64 * (state.height + 4));

    out.push_str("    ");
    let header: Vec<String> = (0..state.width).map(|c| format!("Col {c}")).collect();
    out.push_str(&header.join("    "));
    out.push('\n');

    for row in 0..state.height {
        out.push_str(&format!("Row {row}    "));
        let glyphs: Vec<String> = (0..state.width)
            .map(|col| state.glyph(Position::new(row, col)).to_string())
            .collect();
        out.push_str(&glyphs.join("     "));
        out.push_str("    \n");
    }

    let boxes: Vec<Position> = state.boxes.iter().copied().collect();
    let unsolved = state.unsolved_targets();
    out.push('\n');
    out.push_str(&format!(
        "Currently, the player is at {}; boxes are at {}; ",
        state.player,
        format_position_list(&boxes)
    ));
    if unsolved.is_empty() {
        out.push_str("all targets are solved.");
    } else {
        out.push_str(&format!(
            "unsolved targets are at {}.",
            format_position_list(&unsolved)
        ));
    }
    out.push('\n');

    let dirs = [
        (ActionPrimitive::Up, "above the player"),
        (ActionPrimitive::Down, "below the player"),
        (ActionPrimitive::Left, "left of the player"),
        (ActionPrimitive::Right, "right of the player"),
    ];
    let parts: Vec<String> = dirs
        .iter()
        .map(|&(dir, phrase)| {
            // Border walls make shifted() always valid for legal states.
            let p = state.player.shifted(dir).unwrap_or(state.player);
            format!("a {} {} at {}", state.cell_kind(p), phrase, p)
        })
        .collect();
    out.push_str(&format!(
        "Next to the player, there is {}.",
        parts.join(", ")
    ));
    out
}

#[derive(Debug, Error, PartialEq)]
pub enum RenderParseError {
    #[error("no grid rows found in text")]
    NoGrid,
    #[error("row {0} is malformed")]
    BadRow(usize),
    #[error("unknown glyph '{0}'")]
    UnknownGlyph(char),
    #[error("no player cell in grid")]
    NoPlayer,
}

/// Parses the last rendered grid found in `text` back into a state
/// (`step_count` is not part of the rendering and resets to 0).
pub fn parse_render(text: &str) -> Result<SokobanState, RenderParseError> {
    // Take the last contiguous block of "Row i ..." lines so that prompts
    // embedding several renderings resolve to the current one.
    let lines: Vec<&str> = text.lines().collect();
    let mut block_end = None;
    let mut block_start = None;
    for (i, line) in lines.iter().enumerate().rev() {
        let is_row = line.starts_with("Row ");
        match (is_row, block_end) {
            (true, None) => block_end = Some(i),
            (true, Some(_)) => block_start = Some(i),
            (false, Some(_)) => break,
            (false, None) => {}
        }
        if is_row {
            block_start = Some(i);
        }
    }
    let (start, end) = match (block_start, block_end) {
        (Some(s), Some(e)) => (s, e),
        _ => return Err(RenderParseError::NoGrid),
    };

    let mut walls = BTreeSet::new();
    let mut boxes = BTreeSet::new();
    let mut targets = BTreeSet::new();
    let mut player = None;
    let mut width = 0usize;
    let height = end - start + 1;

    for (row, line) in lines[start..=end].iter().enumerate() {
        let mut tokens = line.split_whitespace();
        let (Some("Row"), Some(idx)) = (tokens.next(), tokens.next()) else {
            return Err(RenderParseError::BadRow(row));
        };
        if idx.parse::<usize>() != Ok(row) {
            return Err(RenderParseError::BadRow(row));
        }
        let mut col = 0usize;
        for tok in tokens {
            let mut chars = tok.chars();
            let (Some(glyph), None) = (chars.next(), chars.next()) else {
                return Err(RenderParseError::BadRow(row));
            };
            let p = Position::new(row, col);
            match glyph {
                '#' => {
                    walls.insert(p);
                }
                '_' => {}
                'P' => player = Some(p),
                'S' => {
                    player = Some(p);
                    targets.insert(p);
                }
                'X' => {
                    boxes.insert(p);
                }
                'O' => {
                    targets.insert(p);
                }
                '√' => {
                    boxes.insert(p);
                    targets.insert(p);
                }
                other => return Err(RenderParseError::UnknownGlyph(other)),
            }
            col += 1;
        }
        width = width.max(col);
    }

    Ok(SokobanState {
        width,
        height,
        walls,
        player: player.ok_or(RenderParseError::NoPlayer)?,
        boxes,
        targets,
        step_count: 0,
    })
}

// ---------------------------------------------------------------------------
// Task instances and reverse-play generation
// ---------------------------------------------------------------------------

/// Dataset split a task belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdTest,
    OodTest,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::IdTest => "id_test",
            Split::OodTest => "ood_test",
        })
    }
}

/// A solvable, not-yet-solved episode start with its step budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub initial_state: SokobanState,
    pub t_max: usize,
    pub split: Split,
}

#[derive(Debug, Error, PartialEq)]
pub enum GenerateError {
    #[error("grid {width}x{height} too small: need at least 4x4 with room for {n_boxes} boxes")]
    GeometryInfeasible {
        width: usize,
        height: usize,
        n_boxes: usize,
    },
    #[error("could not generate a non-trivial instance for seed {seed} within {attempts} attempts")]
    Exhausted { seed: u64, attempts: usize },
}

/// Step budget used when a config does not override it: generous relative to
/// optimal plan lengths at these sizes.
pub fn default_t_max(width: usize, height: usize) -> usize {
    if width.max(height) <= 6 {
        20
    } else {
        30
    }
}

const GENERATION_ATTEMPTS: usize = 64;

/// Generates a solvable instance by reverse play: boxes start on targets and
/// are pulled backward by `2 * width` random pulls, so a forward solution
/// exists by construction. Deterministic per seed.
pub fn generate_instance(
    seed: u64,
    width: usize,
    height: usize,
    n_boxes: usize,
) -> Result<TaskInstance, GenerateError> {
    if width < 4 || height < 4 || n_boxes == 0 {
        return Err(GenerateError::GeometryInfeasible {
            width,
            height,
            n_boxes,
        });
    }
    let interior = (width - 2) * (height - 2);
    if interior < 2 * n_boxes + 2 {
        return Err(GenerateError::GeometryInfeasible {
            width,
            height,
            n_boxes,
        });
    }

    for attempt in 0..GENERATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt as u64));
        if let Some(state) = try_generate(&mut rng, width, height, n_boxes) {
            return Ok(TaskInstance {
                task_id: format!("sokoban-{width}x{height}-b{n_boxes}-s{seed}"),
                initial_state: state,
                t_max: default_t_max(width, height),
                split: Split::Train,
            });
        }
    }
    Err(GenerateError::Exhausted {
        seed,
        attempts: GENERATION_ATTEMPTS,
    })
}

fn try_generate(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    n_boxes: usize,
) -> Option<SokobanState> {
    let mut walls = BTreeSet::new();
    for row in 0..height {
        for col in 0..width {
            if row == 0 || col == 0 || row == height - 1 || col == width - 1 {
                walls.insert(Position::new(row, col));
            }
        }
    }

    let mut interior: Vec<Position> = (1..height - 1)
        .flat_map(|r| (1..width - 1).map(move |c| Position::new(r, c)))
        .collect();

    // Sprinkle interior walls; the pull loop below rejects layouts that
    // leave no room to work with.
    let max_extra_walls = interior.len().saturating_sub(2 * n_boxes + 2) / 5;
    let n_walls = if max_extra_walls > 0 {
        rng.random_range(0..=max_extra_walls)
    } else {
        0
    };
    for _ in 0..n_walls {
        let i = rng.random_range(0..interior.len());
        walls.insert(interior.swap_remove(i));
    }

    // Solved configuration: boxes on targets.
    let mut targets = BTreeSet::new();
    for _ in 0..n_boxes {
        let i = rng.random_range(0..interior.len());
        targets.insert(interior.swap_remove(i));
    }
    let mut boxes = targets.clone();

    let player_idx = rng.random_range(0..interior.len());
    let mut player = interior[player_idx];

    let is_free = |walls: &BTreeSet<Position>, boxes: &BTreeSet<Position>, p: Position| {
        p.row < height && p.col < width && !walls.contains(&p) && !boxes.contains(&p)
    };

    let pulls_wanted = 2 * width;
    let mut pulls_done = 0;
    for _ in 0..pulls_wanted {
        let reachable = reachable_cells(&walls, &boxes, player, width, height);
        // A pull moves a box from b to b+d while the player backs from
        // b+d to b+2d; it is the exact inverse of a forward push.
        let mut options: Vec<(Position, ActionPrimitive)> = Vec::new();
        for &b in &boxes {
            for dir in ActionPrimitive::ALL {
                let Some(stand) = b.shifted(dir) else { continue };
                let Some(back) = stand.shifted(dir) else { continue };
                if is_free(&walls, &boxes, stand)
                    && is_free(&walls, &boxes, back)
                    && reachable.contains(&stand)
                {
                    options.push((b, dir));
                }
            }
        }
        if options.is_empty() {
            break;
        }
        let (b, dir) = options[rng.random_range(0..options.len())];
        let stand = b.shifted(dir).unwrap();
        let back = stand.shifted(dir).unwrap();
        boxes.remove(&b);
        boxes.insert(stand);
        player = back;
        pulls_done += 1;
    }

    if pulls_done == 0 {
        return None;
    }

    // Walking is free in reverse play too, so scattering the player across
    // the reachable region keeps the instance solvable.
    let reachable: Vec<Position> = reachable_cells(&walls, &boxes, player, width, height)
        .into_iter()
        .collect();
    player = reachable[rng.random_range(0..reachable.len())];

    let state = SokobanState {
        width,
        height,
        walls,
        player,
        boxes,
        targets,
        step_count: 0,
    };
    if state.is_solved() {
        return None;
    }
    Some(state)
}

fn reachable_cells(
    walls: &BTreeSet<Position>,
    boxes: &BTreeSet<Position>,
    from: Position,
    width: usize,
    height: usize,
) -> BTreeSet<Position> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from];
    seen.insert(from);
    while let Some(p) = stack.pop() {
        for dir in ActionPrimitive::ALL {
            if let Some(q) = p.shifted(dir) {
                if q.row < height
                    && q.col < width
                    && !walls.contains(&q)
                    && !boxes.contains(&q)
                    && seen.insert(q)
                {
                    stack.push(q);
                }
            }
        }
    }
    seen
}

/// The worked 6x6 example state: player (2, 2), box (3, 2), target (4, 3),
/// with the wall layout used throughout the docs and tests.
pub fn example_state() -> SokobanState {
    let rows = [
        "######", "#__###", "#_P###", "#_X__#", "#__O_#", "######",
    ];
    let mut walls = BTreeSet::new();
    let mut boxes = BTreeSet::new();
    let mut targets = BTreeSet::new();
    let mut player = Position::new(0, 0);
    for (r, row) in rows.iter().enumerate() {
        for (c, ch) in row.chars().enumerate() {
            let p = Position::new(r, c);
            match ch {
                '#' => {
                    walls.insert(p);
                }
                'P' => player = p,
                'X' => {
                    boxes.insert(p);
                }
                'O' => {
                    targets.insert(p);
                }
                _ => {}
            }
        }
    }
    SokobanState {
        width: 6,
        height: 6,
        walls,
        player,
        boxes,
        targets,
        step_count: 0,
    }
}
