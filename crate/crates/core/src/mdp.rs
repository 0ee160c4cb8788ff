//! The target-tracking benchmark as a controllable Markov chain.
//!
//! A state is `(a, b)` where `a = c - t` is the tracker-minus-target offset
//! and `b` is the target's previous move. Under control `u` the successor is
//! `(a + u - delta(b'), b')` with probability `p(b' | b)` and the stage cost
//! is `|a|^2`, charged at periods `0..N` with no terminal cost.
//!
//! The benchmark's state set `D x T` covers offsets in `[-R, R]^2`. What
//! happens to successors that leave `D` is governed by [`BoundaryRule`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ChainParam, Coord, Move, MoveMap};
use crate::error::{Error, Result};

pub const DEFAULT_CONTROLS: [Coord; 3] = [Coord::new(0, 0), Coord::new(1, 0), Coord::new(0, 1)];

/// Treatment of successor offsets outside `[-R, R]^2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryRule {
    /// Offsets live on the unbounded lattice; `D` only fixes the initial
    /// states. Exact solvers size their working lattice so that nothing
    /// reachable within the horizon is ever truncated.
    #[default]
    Unbounded,
    /// Successor offsets are clamped componentwise into `[-R, R]`, giving a
    /// finite chain on `D x T`.
    Clamp,
}

impl fmt::Display for BoundaryRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryRule::Unbounded => "unbounded",
            BoundaryRule::Clamp => "clamp",
        })
    }
}

impl std::str::FromStr for BoundaryRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbounded" => Ok(BoundaryRule::Unbounded),
            "clamp" => Ok(BoundaryRule::Clamp),
            other => Err(Error::Config(format!("unknown boundary rule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub radius: u32,
    pub p: ChainParam,
    pub horizon: usize,
    pub controls: Vec<Coord>,
    pub boundary: BoundaryRule,
    #[serde(default)]
    pub move_map: MoveMap,
}

impl BenchmarkSpec {
    pub fn new(radius: u32, p: f64, horizon: usize) -> Result<Self> {
        Ok(Self {
            radius,
            p: ChainParam::new(p)?,
            horizon,
            controls: DEFAULT_CONTROLS.to_vec(),
            boundary: BoundaryRule::default(),
            move_map: MoveMap::default(),
        })
    }

    pub fn with_boundary(mut self, boundary: BoundaryRule) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn num_states(&self) -> usize {
        Lattice::new(self.radius).len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.controls.is_empty() {
            return Err(Error::InvalidSpec("control set is empty".into()));
        }
        if self.controls.len() > usize::from(u8::MAX) {
            return Err(Error::InvalidSpec("more than 255 controls".into()));
        }
        let distinct: HashSet<_> = self.controls.iter().collect();
        if distinct.len() != self.controls.len() {
            return Err(Error::InvalidSpec("duplicate controls".into()));
        }
        if self.radius > 1 << 14 {
            return Err(Error::InvalidSpec(format!("radius {} is too large", self.radius)));
        }
        Ok(())
    }
}

/// Radius giving exactly `n = 3 (2R+1)^2` states, if one exists.
pub fn radius_for_states(n: usize) -> Option<u32> {
    (0..=1u32 << 14).find(|&r| Lattice::new(r).len() >= n).filter(|&r| Lattice::new(r).len() == n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct State {
    pub offset: Coord,
    pub prev: Move,
}

impl State {
    pub const fn new(x: i32, y: i32, prev: Move) -> Self {
        Self {
            offset: Coord::new(x, y),
            prev,
        }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.offset, self.prev)
    }
}

/// Dense indexing of `[-r, r]^2 x {s, d, r}` in lexicographic
/// `(a_x, a_y, b)` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    radius: u32,
}

impl Lattice {
    pub fn new(radius: u32) -> Self {
        Self { radius }
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius as usize + 1
    }

    pub fn len(&self) -> usize {
        3 * self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, offset: Coord) -> bool {
        let r = self.radius as i32;
        offset.x.abs() <= r && offset.y.abs() <= r
    }

    pub fn index(&self, s: State) -> Option<usize> {
        self.contains(s.offset).then(|| self.index_unchecked(s))
    }

    #[inline]
    pub(crate) fn index_unchecked(&self, s: State) -> usize {
        let r = self.radius as i32;
        let side = self.side();
        ((s.offset.x + r) as usize * side + (s.offset.y + r) as usize) * 3 + s.prev.index()
    }

    pub fn state(&self, i: usize) -> State {
        let side = self.side();
        let r = self.radius as i32;
        let b = i % 3;
        let cell = i / 3;
        State {
            offset: Coord::new((cell / side) as i32 - r, (cell % side) as i32 - r),
            prev: Move::ALL[b],
        }
    }

    pub fn states(&self) -> impl Iterator<Item = State> + '_ {
        (0..self.len()).map(move |i| self.state(i))
    }

    pub fn clamp(&self, c: Coord) -> Coord {
        let r = self.radius as i32;
        Coord::new(c.x.clamp(-r, r), c.y.clamp(-r, r))
    }
}

/// Lexicographic list of `D x T`.
pub fn enumerate_states(spec: &BenchmarkSpec) -> Vec<State> {
    Lattice::new(spec.radius).states().collect()
}

pub fn stage_cost(s: &State) -> f64 {
    s.offset.norm_sq() as f64
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Branch {
    pub next: Move,
    pub prob: f64,
    pub delta: Coord,
}

/// A validated benchmark with its transition kernel precomputed.
#[derive(Clone, Debug)]
pub struct Benchmark {
    spec: BenchmarkSpec,
    branches: [Vec<Branch>; 3],
    reach: u32,
}

impl Benchmark {
    pub fn new(spec: BenchmarkSpec) -> Result<Self> {
        spec.validate()?;
        let branches = Move::ALL.map(|prev| {
            crate::dynamics::next_move_dist(prev, spec.p)
                .into_iter()
                .flat_map(|(next, pm)| {
                    spec.move_map
                        .variants(next)
                        .iter()
                        .filter(|&&(_, w)| w > 0.0)
                        .map(move |&(delta, w)| Branch {
                            next,
                            prob: pm * w,
                            delta,
                        })
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        });
        let reach = spec
            .controls
            .iter()
            .flat_map(|&u| {
                Move::ALL
                    .iter()
                    .flat_map(|&m| spec.move_map.variants(m).iter().map(move |&(d, _)| u - d))
                    .collect::<Vec<_>>()
            })
            .map(|c| c.x.unsigned_abs().max(c.y.unsigned_abs()))
            .max()
            .unwrap_or(0);
        Ok(Self { spec, branches, reach })
    }

    pub fn spec(&self) -> &BenchmarkSpec {
        &self.spec
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn controls(&self) -> &[Coord] {
        &self.spec.controls
    }

    pub fn boundary(&self) -> BoundaryRule {
        self.spec.boundary
    }

    /// The benchmark's own states `D x T`.
    pub fn state_space(&self) -> Lattice {
        Lattice::new(self.spec.radius)
    }

    pub fn states(&self) -> Vec<State> {
        enumerate_states(&self.spec)
    }

    /// Largest per-coordinate change of the offset in one period.
    pub fn reach(&self) -> u32 {
        self.reach
    }

    /// Lattice holding every state reachable at period `k` from `D`.
    pub fn lattice(&self, k: usize) -> Lattice {
        match self.spec.boundary {
            BoundaryRule::Clamp => Lattice::new(self.spec.radius),
            BoundaryRule::Unbounded => Lattice::new(self.spec.radius + (k as u32) * self.reach),
        }
    }

    pub fn control_index(&self, u: Coord) -> Result<usize> {
        self.spec
            .controls
            .iter()
            .position(|&c| c == u)
            .ok_or(Error::InvalidControl(u))
    }

    fn check_state(&self, s: &State) -> Result<()> {
        if self.spec.boundary == BoundaryRule::Clamp && !self.state_space().contains(s.offset) {
            return Err(Error::InvalidState(s.to_string()));
        }
        Ok(())
    }

    /// Successor distribution of `state` under `control`. Entries with equal
    /// successors are merged; order follows the chain's branch order.
    pub fn transition(&self, state: &State, control: Coord) -> Result<Vec<(State, f64)>> {
        self.check_state(state)?;
        self.control_index(control)?;
        let mut out: Vec<(State, f64)> = Vec::with_capacity(2);
        self.for_each_successor(*state, control, |next, prob| {
            match out.iter_mut().find(|(s, _)| *s == next) {
                Some(e) => e.1 += prob,
                None => out.push((next, prob)),
            }
        });
        Ok(out)
    }

    #[inline]
    pub(crate) fn for_each_successor(&self, s: State, u: Coord, mut f: impl FnMut(State, f64)) {
        let clamp = self.spec.boundary == BoundaryRule::Clamp;
        let space = self.state_space();
        for br in &self.branches[s.prev.index()] {
            let mut a = s.offset + u - br.delta;
            if clamp {
                a = space.clamp(a);
            }
            f(State { offset: a, prev: br.next }, br.prob);
        }
    }

    pub(crate) fn branches(&self, prev: Move) -> &[Branch] {
        &self.branches[prev.index()]
    }

    pub fn stage_cost(&self, s: &State) -> f64 {
        stage_cost(s)
    }
}

/// One patch per benchmark state, drawn from a patch library.
#[derive(Clone, Debug)]
pub struct PatchAssignment {
    dim: usize,
    patch_index: Vec<usize>,
    patches: Vec<f64>,
}

/// Order in which library patches are offered to states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchOrder {
    Raster,
    Permuted { seed: u64 },
}

impl PatchAssignment {
    /// Assigns the first `n_states` pairwise-distinct library patches (in
    /// `order`) to states `0..n_states`. Exact duplicates are skipped.
    pub fn new(library: &[f64], dim: usize, n_states: usize, order: PatchOrder) -> Result<Self> {
        if dim == 0 || !library.len().is_multiple_of(dim) {
            return Err(Error::Shape {
                expected: dim,
                got: library.len(),
            });
        }
        let available = library.len() / dim;
        let mut order_idx: Vec<usize> = (0..available).collect();
        if let PatchOrder::Permuted { seed } = order {
            use rand::seq::SliceRandom;
            order_idx.shuffle(&mut crate::rng::seeded(seed));
        }
        let mut seen = HashSet::with_capacity(n_states);
        let mut patch_index = Vec::with_capacity(n_states);
        for idx in order_idx {
            if patch_index.len() == n_states {
                break;
            }
            let p = &library[idx * dim..(idx + 1) * dim];
            let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                patch_index.push(idx);
            }
        }
        if patch_index.len() < n_states {
            return Err(Error::NotEnoughPatches {
                needed: n_states,
                available: patch_index.len(),
            });
        }
        let mut patches = Vec::with_capacity(n_states * dim);
        for &i in &patch_index {
            patches.extend_from_slice(&library[i * dim..(i + 1) * dim]);
        }
        Ok(Self {
            dim,
            patch_index,
            patches,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.patch_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_index.is_empty()
    }

    /// Library index of the patch shown for state `i`.
    pub fn library_index(&self, state: usize) -> usize {
        self.patch_index[state]
    }

    pub fn patch(&self, state: usize) -> &[f64] {
        &self.patches[state * self.dim..(state + 1) * self.dim]
    }

    /// All assigned patches, row-major in state order.
    pub fn patches(&self) -> &[f64] {
        &self.patches
    }
}

/// Recovers the state whose patch is closest to `patch` in squared
/// Euclidean distance. Ties go to the lowest state index.
pub fn nearest_patch_state(patch: &[f64], assignment: &PatchAssignment) -> Result<usize> {
    if patch.len() != assignment.dim {
        return Err(Error::Shape {
            expected: assignment.dim,
            got: patch.len(),
        });
    }
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..assignment.len() {
        let d: f64 = assignment
            .patch(i)
            .iter()
            .zip(patch)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}
