//! The three temporal graph network families and their implicit variants.

mod batch;
mod checkpoint;
mod model;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{CellKind, DEFAULT_HIDDEN, DEFAULT_LAYERS};
use crate::spatial::{PoolMode, DEFAULT_K};

pub use batch::GraphBatch;
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use model::{bce_loss, ForwardOptions, ForwardTrace, Model, ModelOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    GraphThenTime,
    TimeAndGraph,
    TimeThenGraph,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::GraphThenTime, Family::TimeAndGraph, Family::TimeThenGraph];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::GraphThenTime => "graph-then-time",
            Family::TimeAndGraph => "time-and-graph",
            Family::TimeThenGraph => "time-then-graph",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph-then-time" | "gtt" => Ok(Family::GraphThenTime),
            "time-and-graph" | "tag" => Ok(Family::TimeAndGraph),
            "time-then-graph" | "ttg" => Ok(Family::TimeThenGraph),
            other => Err(Error::Config(format!("unknown architecture family {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputMode {
    /// One temporally averaged adjacency shared by all snapshots.
    Implicit,
    /// One adjacency per snapshot.
    Explicit,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Implicit => "implicit",
            InputMode::Explicit => "explicit",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for InputMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "implicit" | "static" => Ok(InputMode::Implicit),
            "explicit" | "dynamic" => Ok(InputMode::Explicit),
            other => Err(Error::Config(format!("unknown input mode {other:?}"))),
        }
    }
}

/// Path applied to the previous hidden state in time-and-graph models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecurrentGraph {
    #[default]
    Gcn,
    /// Passes `H_{t-1}` through unchanged, which reduces the family to graph-then-time.
    Identity,
}

impl RecurrentGraph {
    pub fn as_str(self) -> &'static str {
        match self {
            RecurrentGraph::Gcn => "gcn",
            RecurrentGraph::Identity => "identity",
        }
    }
}

impl FromStr for RecurrentGraph {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(RecurrentGraph::Gcn),
            "identity" => Ok(RecurrentGraph::Identity),
            other => Err(Error::Config(format!("unknown recurrent graph path {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchKind {
    pub family: Family,
    pub mode: InputMode,
    pub cell: CellKind,
    pub pe: bool,
}

impl ArchKind {
    pub fn evobrain() -> Self {
        ArchKind { family: Family::TimeThenGraph, mode: InputMode::Explicit, cell: CellKind::Ssm, pe: true }
    }

    pub fn new(family: Family, mode: InputMode) -> Self {
        ArchKind { family, mode, ..Self::evobrain() }
    }

    pub fn is_evobrain(&self) -> bool {
        *self == Self::evobrain()
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.family, self.mode, self.cell.as_str())?;
        if self.family == Family::TimeThenGraph && !self.pe {
            f.write_str("/no-pe")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Channels per graph.
    pub nodes: usize,
    /// Feature width per snapshot.
    pub d_in: usize,
    pub hidden: usize,
    pub seq_layers: usize,
    pub gcn_layers: usize,
    /// Laplacian eigenvectors appended to node embeddings (time-then-graph only).
    pub k: usize,
    pub pool: PoolMode,
    pub recurrent: RecurrentGraph,
}

impl ModelConfig {
    pub fn new(arch: ArchKind, nodes: usize, d_in: usize) -> Self {
        ModelConfig {
            arch,
            nodes,
            d_in,
            hidden: DEFAULT_HIDDEN,
            seq_layers: DEFAULT_LAYERS,
            gcn_layers: 2,
            k: DEFAULT_K.min(nodes),
            pool: PoolMode::Max,
            recurrent: RecurrentGraph::Gcn,
        }
    }

    /// Positional width actually appended to node embeddings.
    pub fn pe_width(&self) -> usize {
        if self.arch.family == Family::TimeThenGraph && self.arch.pe {
            self.k
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.d_in == 0 || self.hidden == 0 {
            return Err(Error::Config("nodes, d_in and hidden must be positive".into()));
        }
        if self.seq_layers == 0 || self.gcn_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.pe_width() > self.nodes {
            return Err(Error::Config(format!("K={} exceeds N={}", self.k, self.nodes)));
        }
        Ok(())
    }
}
