//! Grid maze with per-room obstacle layouts.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mdp::{Encoder, SimRng, State, StepOutcome};

use super::Environment;

pub const WALL_PENALTY: f64 = -0.02;
pub const STEP_PENALTY: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;
pub const MAZE_MAX_STEPS: usize = 300;

pub const DEFAULT_LAYOUT: &str = include_str!("layouts/maze30.txt");
pub const TWO_ROOM_LAYOUT: &str = include_str!("layouts/two_room10.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left = 0,
    Up = 1,
    Right = 2,
    Down = 3,
}

impl Direction {
    pub fn from_index(a: usize) -> Result<Self> {
        match a {
            0 => Ok(Direction::Left),
            1 => Ok(Direction::Up),
            2 => Ok(Direction::Right),
            3 => Ok(Direction::Down),
            _ => Err(Error::BadAction {
                action: a,
                num_actions: 4,
            }),
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Direction::Left => (0, -1),
            Direction::Up => (-1, 0),
            Direction::Right => (0, 1),
            Direction::Down => (1, 0),
        }
    }
}

/// A rectangular maze. Cells are indexed row-major: `cell = row * width + col`.
/// Rooms tile the grid as `room_rows x room_cols` equal blocks, numbered
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<bool>,
    pub start: usize,
    pub goal: usize,
    pub room_rows: usize,
    pub room_cols: usize,
}

impl MazeSpec {
    /// Parses a layout: `#` wall, `.` free, `S` start, `G` goal; one line per row.
    pub fn parse(text: &str, room_rows: usize, room_cols: usize) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let height = lines.len();
        if height == 0 {
            return Err(Error::BadLayout("empty layout".into()));
        }
        let width = lines[0].chars().count();
        let mut walls = Vec::with_capacity(width * height);
        let (mut start, mut goal) = (None, None);
        for (row, line) in lines.iter().enumerate() {
            if line.chars().count() != width {
                return Err(Error::BadLayout(format!(
                    "row {row} has {} cells, expected {width}",
                    line.chars().count()
                )));
            }
            for (col, ch) in line.chars().enumerate() {
                let cell = row * width + col;
                match ch {
                    '#' => walls.push(true),
                    '.' => walls.push(false),
                    'S' if start.is_none() => {
                        start = Some(cell);
                        walls.push(false);
                    }
                    'G' if goal.is_none() => {
                        goal = Some(cell);
                        walls.push(false);
                    }
                    'S' | 'G' => {
                        return Err(Error::BadLayout(format!("duplicate `{ch}` at row {row}")))
                    }
                    other => {
                        return Err(Error::BadLayout(format!(
                            "unexpected `{other}` at row {row}, col {col}"
                        )))
                    }
                }
            }
        }
        let start = start.ok_or_else(|| Error::BadLayout("missing start `S`".into()))?;
        let goal = goal.ok_or_else(|| Error::BadLayout("missing goal `G`".into()))?;
        if room_rows == 0 || room_cols == 0 || !height.is_multiple_of(room_rows) || !width.is_multiple_of(room_cols) {
            return Err(Error::BadLayout(format!(
                "{room_rows}x{room_cols} rooms do not tile a {width}x{height} grid"
            )));
        }
        let spec = MazeSpec {
            width,
            height,
            walls,
            start,
            goal,
            room_rows,
            room_cols,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_30() -> Self {
        MazeSpec::parse(DEFAULT_LAYOUT, 2, 2).expect("bundled layout is valid")
    }

    pub fn two_room_10() -> Self {
        MazeSpec::parse(TWO_ROOM_LAYOUT, 1, 2).expect("bundled layout is valid")
    }

    fn validate(&self) -> Result<()> {
        for row in 0..self.height {
            for col in 0..self.width {
                let boundary =
                    row == 0 || col == 0 || row + 1 == self.height || col + 1 == self.width;
                if boundary && !self.walls[row * self.width + col] {
                    return Err(Error::BadLayout(format!(
                        "boundary cell ({row}, {col}) is not a wall"
                    )));
                }
            }
        }
        if !self.reachable(self.start, self.goal) {
            return Err(Error::BadLayout("goal unreachable from start".into()));
        }
        Ok(())
    }

    fn reachable(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.walls.len()];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(c) = stack.pop() {
            if c == to {
                return true;
            }
            for a in 0..4 {
                let (n, _) = self.move_from(c, Direction::from_index(a).unwrap());
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        false
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.width, cell % self.width)
    }

    pub fn is_wall(&self, cell: usize) -> bool {
        self.walls[cell]
    }

    pub fn num_rooms(&self) -> usize {
        self.room_rows * self.room_cols
    }

    pub fn room_of(&self, cell: usize) -> usize {
        let (row, col) = self.row_col(cell);
        let rh = self.height / self.room_rows;
        let rw = self.width / self.room_cols;
        (row / rh) * self.room_cols + col / rw
    }

    pub fn is_boundary(&self, cell: usize) -> bool {
        let (row, col) = self.row_col(cell);
        row == 0 || col == 0 || row + 1 == self.height || col + 1 == self.width
    }

    pub fn free_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_cells()).filter(|&c| !self.walls[c])
    }

    /// Destination of a move and whether it was blocked.
    fn move_from(&self, cell: usize, dir: Direction) -> (usize, bool) {
        let (row, col) = self.row_col(cell);
        let (dr, dc) = dir.delta();
        let (nr, nc) = (row as isize + dr, col as isize + dc);
        if nr < 0 || nc < 0 || nr >= self.height as isize || nc >= self.width as isize {
            return (cell, true);
        }
        let next = nr as usize * self.width + nc as usize;
        if self.walls[next] {
            (cell, true)
        } else {
            (next, false)
        }
    }

    /// The source-task variant that keeps the outer boundary and the obstacles
    /// of `room` and clears every other room.
    pub fn room_source(&self, room: usize) -> MazeSpec {
        let walls = (0..self.num_cells())
            .map(|c| self.walls[c] && (self.is_boundary(c) || self.room_of(c) == room))
            .collect();
        MazeSpec {
            walls,
            ..self.clone()
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.num_cells() + self.height);
        for row in 0..self.height {
            for col in 0..self.width {
                let c = row * self.width + col;
                out.push(if c == self.start {
                    'S'
                } else if c == self.goal {
                    'G'
                } else if self.walls[c] {
                    '#'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }
}

/// One maze transition: `(next cell, reward, reached goal)`.
pub fn maze_step(spec: &MazeSpec, cell: usize, action: usize) -> Result<(usize, f64, bool)> {
    let dir = Direction::from_index(action)?;
    let (next, blocked) = spec.move_from(cell, dir);
    if next == spec.goal {
        return Ok((next, GOAL_REWARD, true));
    }
    let r = if blocked { WALL_PENALTY } else { STEP_PENALTY };
    Ok((next, r, false))
}

#[derive(Debug, Clone)]
pub struct MazeEnv {
    spec: Arc<MazeSpec>,
    pos: usize,
    steps: usize,
    max_steps: usize,
}

impl MazeEnv {
    pub fn new(spec: Arc<MazeSpec>) -> Self {
        let pos = spec.start;
        MazeEnv {
            spec,
            pos,
            steps: 0,
            max_steps: MAZE_MAX_STEPS,
        }
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn spec(&self) -> &MazeSpec {
        &self.spec
    }

    /// Places the agent on an arbitrary free cell (used for exploring starts).
    pub fn reset_to(&mut self, cell: usize) -> State {
        assert!(!self.spec.is_wall(cell), "cannot start inside a wall");
        self.pos = cell;
        self.steps = 0;
        State::Discrete(cell)
    }
}

impl Environment for MazeEnv {
    fn num_actions(&self) -> usize {
        4
    }

    fn encoder(&self) -> Encoder {
        Encoder::Grid {
            width: self.spec.width,
            height: self.spec.height,
        }
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self, _rng: &mut SimRng) -> State {
        self.reset_to(self.spec.start)
    }

    fn state(&self) -> State {
        State::Discrete(self.pos)
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        let (next, r, terminal) = maze_step(&self.spec, self.pos, action)?;
        self.pos = next;
        self.steps += 1;
        Ok(StepOutcome {
            s_next: State::Discrete(next),
            r,
            terminal,
            truncated: !terminal && self.steps >= self.max_steps,
        })
    }

    fn snapshot_states(&self) -> Vec<(String, State)> {
        self.spec
            .free_cells()
            .map(|c| {
                let (row, col) = self.spec.row_col(c);
                (format!("{row}:{col}"), State::Discrete(c))
            })
            .collect()
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}
