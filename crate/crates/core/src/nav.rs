//! Grid map of the room around the rig, A* routing between capture poses
//! and the operator instruction script.
//!
//! Cells are `(row, col)` with row 0 at the top. Steps are 4-connected
//! with unit cost.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dqn::CollectionPlan;
use crate::envsim::{Location, Modality};

pub type Cell = (usize, usize);

/// Scan cells needed before the operator is localized.
pub const DEFAULT_SCAN_THRESHOLD: usize = 3;

/// Seconds an audio capture records for.
pub const SOUND_CAPTURE_SECONDS: u32 = 5;

const DEFAULT_MAP: &str = include_str!("../fixtures/default_map.json");

#[derive(Debug, Error)]
pub enum NavError {
    #[error("invalid map: {0}")]
    Map(String),
    #[error("cell ({0}, {1}) is outside the map")]
    OutOfBounds(usize, usize),
    #[error("cell ({0}, {1}) is blocked")]
    Blocked(usize, usize),
    #[error("no path from {start:?} to {goal:?}")]
    NoPath { start: Cell, goal: Cell },
    #[error("plan entry {index} ({location}) has no reachable anchor")]
    Unreachable { index: usize, location: String },
    #[error("plan entry {index} ({location}) has no anchor on this map")]
    MissingAnchor { index: usize, location: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NavError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Facing {
    N,
    E,
    S,
    W,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    #[serde(with = "cell_array")]
    pub cell: Cell,
    pub facing: Facing,
}

pub mod cell_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(cell: &super::Cell, s: S) -> Result<S::Ok, S::Error> {
        [cell.0, cell.1].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<super::Cell, D::Error> {
        let [r, c] = <[usize; 2]>::deserialize(d)?;
        Ok((r, c))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    width: usize,
    height: usize,
    blocked: Vec<[usize; 2]>,
    anchors: BTreeMap<String, Anchor>,
    start: [usize; 2],
}

/// Room layout: blocked cells, one anchor per physical pose and the cell
/// the operator starts from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMap {
    width: usize,
    height: usize,
    blocked: BTreeSet<Cell>,
    anchors: BTreeMap<Location, Anchor>,
    start: Cell,
}

impl GridMap {
    pub fn new(
        width: usize,
        height: usize,
        blocked: impl IntoIterator<Item = Cell>,
        anchors: BTreeMap<Location, Anchor>,
        start: Cell,
    ) -> Result<Self> {
        let map = Self {
            width,
            height,
            blocked: blocked.into_iter().collect(),
            anchors,
            start,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(NavError::Map("empty grid".into()));
        }
        if let Some(&(r, c)) = self.blocked.iter().find(|&&cell| !self.in_bounds(cell)) {
            return Err(NavError::Map(format!("blocked cell ({r}, {c}) is outside the map")));
        }
        self.check_open(self.start).map_err(|e| NavError::Map(format!("start: {e}")))?;
        let mut seen = BTreeSet::new();
        for (loc, anchor) in &self.anchors {
            self.check_open(anchor.cell)
                .map_err(|e| NavError::Map(format!("anchor {}: {e}", loc.id())))?;
            if !seen.insert(anchor.cell) {
                return Err(NavError::Map(format!("anchor {} shares its cell", loc.id())));
            }
        }
        Ok(())
    }

    /// Map shipped with the crate: the rig in the middle of a 13×13 room,
    /// near poses one cell from it and far poses five.
    pub fn default_map() -> Self {
        Self::from_json(DEFAULT_MAP).expect("bundled map is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MapFile = serde_json::from_str(text).map_err(|e| NavError::Map(e.to_string()))?;
        let mut anchors = BTreeMap::new();
        for (id, anchor) in file.anchors {
            let loc: Location = id.parse().map_err(|_| NavError::Map(format!("unknown anchor {id:?}")))?;
            anchors.insert(loc, anchor);
        }
        Self::new(
            file.width,
            file.height,
            file.blocked.into_iter().map(|[r, c]| (r, c)),
            anchors,
            (file.start[0], file.start[1]),
        )
    }

    pub fn to_json(&self) -> String {
        let file = MapFile {
            width: self.width,
            height: self.height,
            blocked: self.blocked.iter().map(|&(r, c)| [r, c]).collect(),
            anchors: self.anchors.iter().map(|(l, a)| (l.id(), *a)).collect(),
            start: [self.start.0, self.start.1],
        };
        serde_json::to_string_pretty(&file).expect("map serializes")
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            NavError::Map(m) => NavError::Map(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn anchor(&self, location: Location) -> Option<&Anchor> {
        self.anchors.get(&location)
    }

    pub fn anchors(&self) -> &BTreeMap<Location, Anchor> {
        &self.anchors
    }

    pub fn blocked(&self) -> &BTreeSet<Cell> {
        &self.blocked
    }

    pub fn in_bounds(&self, (r, c): Cell) -> bool {
        r < self.height && c < self.width
    }

    pub fn is_open(&self, cell: Cell) -> bool {
        self.in_bounds(cell) && !self.blocked.contains(&cell)
    }

    fn check_open(&self, cell: Cell) -> Result<()> {
        if !self.in_bounds(cell) {
            Err(NavError::OutOfBounds(cell.0, cell.1))
        } else if self.blocked.contains(&cell) {
            Err(NavError::Blocked(cell.0, cell.1))
        } else {
            Ok(())
        }
    }

    /// Open 4-neighbours in N, W, E, S order.
    pub fn neighbours(&self, (r, c): Cell) -> impl Iterator<Item = Cell> + '_ {
        let up = r.checked_sub(1).map(|r| (r, c));
        let left = c.checked_sub(1).map(|c| (r, c));
        [up, left, Some((r, c + 1)), Some((r + 1, c))]
            .into_iter()
            .flatten()
            .filter(move |&n| self.is_open(n))
    }

    /// Open cells within one step (including diagonals) of any anchor. These
    /// carry the local features a scan can lock onto.
    pub fn anchor_visible_cells(&self) -> BTreeSet<Cell> {
        let mut out = BTreeSet::new();
        for anchor in self.anchors.values() {
            let (r, c) = anchor.cell;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr >= 0 && nc >= 0 && self.is_open((nr as usize, nc as usize)) {
                        out.insert((nr as usize, nc as usize));
                    }
                }
            }
        }
        out
    }

    /// Distinct anchor-visible cells among `scan`.
    pub fn scan_coverage(&self, scan: &[Cell]) -> usize {
        let visible = self.anchor_visible_cells();
        scan.iter().filter(|c| visible.contains(c)).collect::<BTreeSet<_>>().len()
    }
}

pub fn manhattan(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

/// A route through open cells, first = start, last = goal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    #[serde(with = "cell_list")]
    pub cells: Vec<Cell>,
    /// Nodes taken off the open list while searching.
    #[serde(skip)]
    pub expanded: usize,
}

pub mod cell_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(cells: &[super::Cell], s: S) -> Result<S::Ok, S::Error> {
        cells.iter().map(|&(r, c)| [r, c]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<super::Cell>, D::Error> {
        Ok(Vec::<[usize; 2]>::deserialize(d)?.into_iter().map(|[r, c]| (r, c)).collect())
    }
}

impl Path {
    /// Number of steps.
    pub fn cost(&self) -> usize {
        self.cells.len() - 1
    }
}

/// Shortest 4-connected path under the Manhattan heuristic. Ties on `f`
/// go to the smaller `h`, then to the earlier cell in row-major order.
pub fn astar(map: &GridMap, start: Cell, goal: Cell) -> Result<Path> {
    map.check_open(start)?;
    map.check_open(goal)?;
    let idx = |(r, c): Cell| r * map.width + c;
    let mut g = vec![usize::MAX; map.width * map.height];
    let mut parent = vec![usize::MAX; map.width * map.height];
    let mut closed = vec![false; map.width * map.height];
    let mut open = BinaryHeap::new();
    g[idx(start)] = 0;
    let h0 = manhattan(start, goal);
    open.push(Reverse((h0, h0, start.0, start.1)));
    let mut expanded = 0;
    while let Some(Reverse((_, _, r, c))) = open.pop() {
        let cell = (r, c);
        if closed[idx(cell)] {
            continue;
        }
        closed[idx(cell)] = true;
        expanded += 1;
        if cell == goal {
            let mut cells = vec![goal];
            let mut at = idx(goal);
            while at != idx(start) {
                at = parent[at];
                cells.push((at / map.width, at % map.width));
            }
            cells.reverse();
            return Ok(Path { cells, expanded });
        }
        let next_g = g[idx(cell)] + 1;
        for n in map.neighbours(cell) {
            if !closed[idx(n)] && next_g < g[idx(n)] {
                g[idx(n)] = next_g;
                parent[idx(n)] = idx(cell);
                let h = manhattan(n, goal);
                open.push(Reverse((next_g + h, h, n.0, n.1)));
            }
        }
    }
    Err(NavError::NoPath { start, goal })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Icon {
    Camera,
    Microphone,
}

impl From<Modality> for Icon {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Image => Icon::Camera,
            Modality::Sound => Icon::Microphone,
        }
    }
}

/// Seconds a capture takes: audio counts down, a photo is instant.
pub fn capture_seconds(modality: Modality) -> u32 {
    match modality {
        Modality::Image => 0,
        Modality::Sound => SOUND_CAPTURE_SECONDS,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Instruction {
    Initialize {
        prompt: String,
        threshold: usize,
    },
    Navigate {
        #[serde(with = "cell_list")]
        waypoints: Vec<Cell>,
        destination: String,
        facing: Facing,
        icon: Icon,
    },
    Capture {
        modality: Modality,
        duration_seconds: u32,
    },
    Diagnose,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionScript {
    pub steps: Vec<Instruction>,
}

/// Operator script for `plan`: scan, then walk to and capture each entry in
/// order, then diagnose.
pub fn build_script(plan: &CollectionPlan, map: &GridMap, threshold: usize) -> Result<InstructionScript> {
    let mut steps = vec![Instruction::Initialize {
        prompt: format!("Scan the area around the rig until {threshold} reference points are found"),
        threshold,
    }];
    let mut at = map.start();
    for (index, entry) in plan.plan.iter().enumerate() {
        let location = entry.state().location();
        let anchor = map.anchor(location).ok_or_else(|| NavError::MissingAnchor {
            index,
            location: location.id(),
        })?;
        let path = astar(map, at, anchor.cell).map_err(|e| match e {
            NavError::NoPath { .. } => NavError::Unreachable {
                index,
                location: location.id(),
            },
            other => other,
        })?;
        steps.push(Instruction::Navigate {
            waypoints: path.cells,
            destination: location.id(),
            facing: anchor.facing,
            icon: entry.modality.into(),
        });
        steps.push(Instruction::Capture {
            modality: entry.modality,
            duration_seconds: capture_seconds(entry.modality),
        });
        at = anchor.cell;
    }
    steps.push(Instruction::Diagnose);
    Ok(InstructionScript { steps })
}
