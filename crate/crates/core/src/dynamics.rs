//! Target dynamics.
//!
//! The target moves by one of three symbols per period: `s` (stay), `d`
//! (diagonal) and `r` (up/right). Symbols follow a three-state Markov chain
//! with a single free parameter `p`:
//!
//! ```text
//!   s --1--> d --1--> r --(1-p)--> s
//!                     r ----p----> r
//! ```
//!
//! `p = 0` gives the periodic string `(sdr)*`, `p = 1` gives `r*`.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Integer lattice vector used for offsets, move deltas and controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: i32,
    pub y: i32,
}

impl Coord {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn norm_sq(self) -> i64 {
        let (x, y) = (i64::from(self.x), i64::from(self.y));
        x * x + y * y
    }
}

impl std::ops::Add for Coord {
    type Output = Coord;
    fn add(self, rhs: Coord) -> Coord {
        Coord::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Coord {
    type Output = Coord;
    fn sub(self, rhs: Coord) -> Coord {
        Coord::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Move {
    S,
    D,
    R,
}

impl Move {
    pub const ALL: [Move; 3] = [Move::S, Move::D, Move::R];

    pub fn index(self) -> usize {
        match self {
            Move::S => 0,
            Move::D => 1,
            Move::R => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Move> {
        Move::ALL.get(i).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            Move::S => 's',
            Move::D => 'd',
            Move::R => 'r',
        }
    }

    pub fn from_symbol(c: char) -> Option<Move> {
        match c.to_ascii_lowercase() {
            's' => Some(Move::S),
            'd' => Some(Move::D),
            'r' => Some(Move::R),
            _ => None,
        }
    }

    /// Delta under the simplified deterministic map.
    pub fn delta(self) -> Coord {
        match self {
            Move::S => Coord::new(0, 0),
            Move::D => Coord::new(1, 1),
            Move::R => Coord::new(0, 1),
        }
    }
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

/// Parses a string such as `"sdrr"` into moves. Whitespace is ignored.
pub fn parse_moves(s: &str) -> Result<Vec<Move>> {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| Move::from_symbol(c).ok_or_else(|| Error::Config(format!("unknown move symbol {c:?}"))))
        .collect()
}

pub fn format_moves(moves: &[Move]) -> String {
    moves.iter().map(|m| m.symbol()).collect()
}

/// Chain parameter `p`, the probability that an `r` is followed by another `r`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ChainParam(f64);

impl ChainParam {
    pub fn new(p: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&p) {
            Ok(Self(p))
        } else {
            Err(Error::InvalidProbability(p))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ChainParam {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        ChainParam::new(p)
    }
}

impl From<ChainParam> for f64 {
    fn from(p: ChainParam) -> f64 {
        p.0
    }
}

/// Successor distribution of the chain. Only nonzero entries are returned.
pub fn next_move_dist(prev: Move, param: ChainParam) -> Vec<(Move, f64)> {
    let p = param.value();
    let raw: &[(Move, f64)] = match prev {
        Move::S => &[(Move::D, 1.0)],
        Move::D => &[(Move::R, 1.0)],
        Move::R => &[(Move::R, p), (Move::S, 1.0 - p)],
    };
    raw.iter().copied().filter(|&(_, w)| w > 0.0).collect()
}

/// Long-run symbol frequencies `(s, d, r)` for `0 < p < 1`; also the limit
/// frequencies of the periodic chains at `p = 0` and `p = 1`.
pub fn stationary_distribution(param: ChainParam) -> [f64; 3] {
    let p = param.value();
    let z = 3.0 - 2.0 * p;
    [(1.0 - p) / z, (1.0 - p) / z, 1.0 / z]
}

/// Draws `length` moves starting with `init`. The first element is `init`
/// itself; each later element is drawn from [`next_move_dist`] of its
/// predecessor.
pub fn sample_trajectory(init: Move, param: ChainParam, length: usize, seed: u64) -> Vec<Move> {
    let mut rng = rng::seeded(seed);
    let mut out = Vec::with_capacity(length);
    let mut cur = init;
    for i in 0..length {
        if i > 0 {
            cur = sample_next(cur, param, &mut rng);
        }
        out.push(cur);
    }
    out
}

pub(crate) fn sample_next(prev: Move, param: ChainParam, rng: &mut rng::Rng) -> Move {
    match prev {
        Move::S => Move::D,
        Move::D => Move::R,
        Move::R => {
            let u: f64 = rng.random();
            if u < param.value() {
                Move::R
            } else {
                Move::S
            }
        }
    }
}

fn edge_allowed(a: Move, b: Move) -> bool {
    matches!(
        (a, b),
        (Move::S, Move::D) | (Move::D, Move::R) | (Move::R, Move::R) | (Move::R, Move::S)
    )
}

/// True iff every adjacent pair of `seq` is an edge of the chain for some
/// `p`. Truncated trajectories may start and stop mid-cycle, so any
/// contiguous piece of a chain realisation is accepted.
pub fn validate_string(seq: &[Move]) -> bool {
    seq.windows(2).all(|w| edge_allowed(w[0], w[1]))
}

/// Like [`validate_string`] but restricted to the edges that have positive
/// probability for this particular `p`.
pub fn validate_string_for(seq: &[Move], param: ChainParam) -> bool {
    seq.windows(2)
        .all(|w| next_move_dist(w[0], param).iter().any(|&(m, _)| m == w[1]))
}

/// Per-symbol displacement alternatives with their weights.
///
/// The default is the simplified deterministic map `s=(0,0)`, `d=(1,1)`,
/// `r=(0,1)`. Alternatives for `d` and `r` can be supplied to model the
/// stochastic "or" variants of each symbol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveMap {
    variants: [Vec<(Coord, f64)>; 3],
}

impl Default for MoveMap {
    fn default() -> Self {
        Self::simplified()
    }
}

impl MoveMap {
    pub fn simplified() -> Self {
        Self {
            variants: Move::ALL.map(|m| vec![(m.delta(), 1.0)]),
        }
    }

    /// `d -> (1,1) | (-1,1)`, `r -> (0,1) | (-1,0) | (1,0)` with uniform weights.
    pub fn uniform_alternatives() -> Self {
        let third = 1.0 / 3.0;
        Self {
            variants: [
                vec![(Coord::new(0, 0), 1.0)],
                vec![(Coord::new(1, 1), 0.5), (Coord::new(-1, 1), 0.5)],
                vec![
                    (Coord::new(0, 1), third),
                    (Coord::new(-1, 0), third),
                    (Coord::new(1, 0), third),
                ],
            ],
        }
    }

    /// Builds a map from per-symbol `(delta, weight)` lists indexed by
    /// [`Move::index`]. Weights must be nonnegative and sum to one.
    pub fn new(variants: [Vec<(Coord, f64)>; 3]) -> Result<Self> {
        for (m, v) in Move::ALL.iter().zip(&variants) {
            if v.is_empty() {
                return Err(Error::InvalidMoveMap(format!("symbol {m} has no delta")));
            }
            if v.iter().any(|&(_, w)| w < 0.0 || !w.is_finite()) {
                return Err(Error::InvalidMoveMap(format!("symbol {m} has a negative weight")));
            }
            let total: f64 = v.iter().map(|&(_, w)| w).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidMoveMap(format!("weights of {m} sum to {total}")));
            }
        }
        Ok(Self { variants })
    }

    pub fn variants(&self, m: Move) -> &[(Coord, f64)] {
        &self.variants[m.index()]
    }

    pub fn is_simplified(&self) -> bool {
        *self == Self::simplified()
    }

    /// Largest per-coordinate displacement any symbol can produce.
    pub fn max_step(&self) -> i32 {
        self.variants
            .iter()
            .flatten()
            .filter(|&&(_, w)| w > 0.0)
            .map(|&(c, _)| c.x.abs().max(c.y.abs()))
            .max()
            .unwrap_or(0)
    }
}
