//! Transfer-Maze and Transfer-CartPole target and source environments.

pub mod cartpole;
pub mod maze;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Encoder, SimRng, State, StepOutcome};

pub use cartpole::{cartpole_force, CartPoleEnv, CartPoleSpec, ForceProfile};
pub use maze::{maze_step, Direction, MazeEnv, MazeSpec};

pub trait Environment: Send {
    fn num_actions(&self) -> usize;
    fn encoder(&self) -> Encoder;
    /// Roll-out length cap.
    fn max_steps(&self) -> usize;
    fn reset(&mut self, rng: &mut SimRng) -> State;
    fn state(&self) -> State;
    fn step(&mut self, action: usize) -> Result<StepOutcome>;
    /// Labelled states at which gating snapshots are taken.
    fn snapshot_states(&self) -> Vec<(String, State)>;
    fn boxed_clone(&self) -> Box<dyn Environment>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    /// 30x30 four-room maze.
    Maze,
    /// 10x10 two-room maze for quick experiments.
    TwoRoom,
    Cartpole,
}

impl EnvId {
    pub fn is_maze(self) -> bool {
        matches!(self, EnvId::Maze | EnvId::TwoRoom)
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvId::Maze => "maze",
            EnvId::TwoRoom => "two-room",
            EnvId::Cartpole => "cartpole",
        })
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maze" => Ok(EnvId::Maze),
            "two-room" => Ok(EnvId::TwoRoom),
            "cartpole" => Ok(EnvId::Cartpole),
            other => Err(Error::BadConfig(format!("unknown env `{other}`"))),
        }
    }
}

/// A target task together with the recipe for its source tasks.
#[derive(Debug, Clone)]
pub enum EnvFamily {
    Maze(Arc<MazeSpec>),
    CartPole(CartPoleSpec),
}

impl EnvFamily {
    /// Builds the family for `id`; `layout` optionally replaces the bundled maze grid.
    pub fn new(id: EnvId, layout: Option<&str>) -> Result<Self> {
        match (id, layout) {
            (EnvId::Cartpole, Some(_)) => Err(Error::BadConfig(
                "a maze layout was given for cartpole".into(),
            )),
            (EnvId::Cartpole, None) => Ok(EnvFamily::CartPole(CartPoleSpec::target())),
            (EnvId::Maze, None) => Ok(EnvFamily::Maze(Arc::new(MazeSpec::default_30()))),
            (EnvId::TwoRoom, None) => Ok(EnvFamily::Maze(Arc::new(MazeSpec::two_room_10()))),
            (EnvId::Maze, Some(text)) => Ok(EnvFamily::Maze(Arc::new(MazeSpec::parse(text, 2, 2)?))),
            (EnvId::TwoRoom, Some(text)) => {
                Ok(EnvFamily::Maze(Arc::new(MazeSpec::parse(text, 1, 2)?)))
            }
        }
    }

    pub fn target(&self) -> Box<dyn Environment> {
        match self {
            EnvFamily::Maze(spec) => Box::new(MazeEnv::new(spec.clone())),
            EnvFamily::CartPole(spec) => Box::new(CartPoleEnv::new(*spec)),
        }
    }

    /// One maze per room (that room's obstacles only), or the three cart-pole
    /// variants.
    pub fn sources(&self) -> Vec<Box<dyn Environment>> {
        match self {
            EnvFamily::Maze(spec) => (0..spec.num_rooms())
                .map(|room| {
                    Box::new(MazeEnv::new(Arc::new(spec.room_source(room)))) as Box<dyn Environment>
                })
                .collect(),
            EnvFamily::CartPole(_) => CartPoleSpec::sources()
                .into_iter()
                .map(|s| Box::new(CartPoleEnv::new(s)) as Box<dyn Environment>)
                .collect(),
        }
    }

    pub fn maze(&self) -> Option<&MazeSpec> {
        match self {
            EnvFamily::Maze(spec) => Some(spec),
            EnvFamily::CartPole(_) => None,
        }
    }
}
