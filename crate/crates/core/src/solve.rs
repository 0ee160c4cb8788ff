//! Exact solvers for the tracking benchmark.
//!
//! Tables are stored per period on the lattice returned by
//! [`Benchmark::lattice`]: the state set `D` itself under
//! [`BoundaryRule::Clamp`], or `D` grown by the one-period reach for every
//! elapsed period under [`BoundaryRule::Unbounded`]. In both cases every
//! successor of a period-`k` state is a valid index into the period `k+1`
//! lattice, so no lookup is ever truncated.
//!
//! Minimisations break ties by control order: a later control only wins if
//! it is smaller by more than a relative `1e-12`.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{Coord, Move};
use crate::error::{Error, Result};
use crate::mdp::{stage_cost, Benchmark, BoundaryRule, Lattice, State};
use crate::rng;

pub(crate) const TIE_RTOL: f64 = 1e-12;

/// Index of the smallest value, preferring earlier entries on near-ties.
#[inline]
pub(crate) fn argmin_ordered(values: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut it = values.into_iter();
    let mut best = it.next().expect("at least one control");
    let mut idx = 0;
    for (i, v) in it.enumerate() {
        if v < best - TIE_RTOL * best.abs().max(1.0) {
            best = v;
            idx = i + 1;
        }
    }
    (idx, best)
}

/// Which value layers a backward pass keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retain {
    All,
    Initial,
}

#[derive(Clone, Debug)]
pub struct ValueLayer {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl ValueLayer {
    pub fn get(&self, s: &State) -> Option<f64> {
        self.lattice.index(*s).map(|i| self.values[i])
    }
}

/// Cost-to-go `J_k(i)` for `k = 0..=N`.
#[derive(Clone, Debug)]
pub struct ValueTable {
    horizon: usize,
    layers: Vec<Option<ValueLayer>>,
}

impl ValueTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn layer(&self, k: usize) -> Option<&ValueLayer> {
        self.layers.get(k).and_then(Option::as_ref)
    }

    pub fn get(&self, k: usize, s: &State) -> Option<f64> {
        self.layer(k)?.get(s)
    }

    /// Period-0 values over `D x T` in lexicographic state order.
    pub fn initial(&self) -> &[f64] {
        &self.layers[0].as_ref().expect("period 0 is always retained").values
    }
}

#[derive(Clone, Debug)]
pub struct PolicyLayer {
    pub lattice: Lattice,
    pub choice: Vec<u8>,
}

/// Control choices per period and state, stored as indices into the
/// control set. A stationary policy keeps one layer for every period.
#[derive(Clone, Debug)]
pub struct Policy {
    controls: Vec<Coord>,
    layers: Vec<PolicyLayer>,
    stationary: bool,
}

impl Policy {
    pub fn new(controls: Vec<Coord>, layers: Vec<PolicyLayer>, stationary: bool) -> Self {
        assert!(!stationary || layers.len() == 1, "stationary policies have one layer");
        Self {
            controls,
            layers,
            stationary,
        }
    }

    /// Tabulates `choose(k, state)` (a control index) on the benchmark's
    /// per-period lattices. With `stationary`, `choose` is called with
    /// `k = 0` on the largest lattice needed over the horizon.
    pub fn tabulate(bench: &Benchmark, stationary: bool, choose: impl Fn(usize, State) -> usize + Sync) -> Self {
        let n = bench.horizon();
        let layers = if stationary {
            let lattice = bench.lattice(n.saturating_sub(1));
            vec![tabulate_layer(lattice, |s| choose(0, s))]
        } else {
            (0..n).map(|k| tabulate_layer(bench.lattice(k), |s| choose(k, s))).collect()
        };
        Self::new(bench.controls().to_vec(), layers, stationary)
    }

    pub fn controls(&self) -> &[Coord] {
        &self.controls
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn layer(&self, k: usize) -> Option<&PolicyLayer> {
        if self.stationary {
            self.layers.first()
        } else {
            self.layers.get(k)
        }
    }

    pub fn control_index(&self, k: usize, s: &State) -> Option<usize> {
        let layer = self.layer(k)?;
        layer.lattice.index(*s).map(|i| usize::from(layer.choice[i]))
    }

    pub fn control(&self, k: usize, s: &State) -> Option<Coord> {
        self.control_index(k, s).map(|i| self.controls[i])
    }

    fn require(&self, k: usize, s: &State) -> Result<usize> {
        self.control_index(k, s)
            .ok_or_else(|| Error::InvalidState(format!("policy has no control for {s} at period {k}")))
    }

    fn check_compatible(&self, bench: &Benchmark) -> Result<()> {
        if self.controls != bench.controls() {
            return Err(Error::InvalidSpec("policy and benchmark control sets differ".into()));
        }
        if !self.stationary && self.layers.len() < bench.horizon() {
            return Err(Error::InvalidSpec(format!(
                "policy covers {} periods, horizon is {}",
                self.layers.len(),
                bench.horizon()
            )));
        }
        Ok(())
    }
}

fn tabulate_layer(lattice: Lattice, choose: impl Fn(State) -> usize + Sync) -> PolicyLayer {
    let choice = (0..lattice.len())
        .into_par_iter()
        .map(|i| choose(lattice.state(i)) as u8)
        .collect();
    PolicyLayer { lattice, choice }
}

/// `sum_j p_ij(u) * next(j)`, summed in branch order.
#[inline]
pub(crate) fn expected_next(bench: &Benchmark, next_lat: Lattice, next: &[f64], s: State, u: Coord) -> f64 {
    let mut acc = 0.0;
    bench.for_each_successor(s, u, |j, p| {
        debug_assert!(next_lat.contains(j.offset));
        acc += p * next[next_lat.index_unchecked(j)];
    });
    acc
}

/// Generic backward pass: `J_k(i) = g(i) + pick(k, i, next)` where `pick`
/// returns `(control index, expected next value)`.
fn backward<F>(bench: &Benchmark, retain: Retain, record_policy: bool, pick: F) -> Result<(ValueTable, Vec<PolicyLayer>)>
where
    F: Fn(usize, State, Lattice, &[f64]) -> Result<(usize, f64)> + Sync,
{
    let n = bench.horizon();
    let mut layers: Vec<Option<ValueLayer>> = vec![None; n + 1];
    let mut policy_layers: Vec<PolicyLayer> = Vec::with_capacity(if record_policy { n } else { 0 });
    let terminal_lat = bench.lattice(n);
    let mut next = ValueLayer {
        lattice: terminal_lat,
        values: vec![0.0; terminal_lat.len()],
    };
    for k in (0..n).rev() {
        let lat = bench.lattice(k);
        let results: Vec<(usize, f64)> = (0..lat.len())
            .into_par_iter()
            .map(|i| {
                let s = lat.state(i);
                let (u, ev) = pick(k, s, next.lattice, &next.values)?;
                Ok((u, stage_cost(&s) + ev))
            })
            .collect::<Result<_>>()?;
        let values: Vec<f64> = results.iter().map(|&(_, v)| v).collect();
        if record_policy {
            policy_layers.push(PolicyLayer {
                lattice: lat,
                choice: results.iter().map(|&(u, _)| u as u8).collect(),
            });
        }
        let done = std::mem::replace(&mut next, ValueLayer { lattice: lat, values });
        if retain == Retain::All || k + 1 == 0 {
            layers[k + 1] = Some(done);
        }
    }
    layers[0] = Some(next);
    if retain == Retain::All && n == 0 {
        layers[0] = Some(ValueLayer {
            lattice: bench.lattice(0),
            values: vec![0.0; bench.lattice(0).len()],
        });
    }
    policy_layers.reverse();
    Ok((ValueTable { horizon: n, layers }, policy_layers))
}

/// Finite-horizon dynamic programming. Returns `J*` and the minimising
/// control at every `(k, state)` of the working lattice.
pub fn dp_solve(bench: &Benchmark, retain: Retain) -> (ValueTable, Policy) {
    let controls = bench.controls();
    let (table, layers) = backward(bench, retain, true, |_, s, lat, next| {
        Ok(argmin_ordered(controls.iter().map(|&u| expected_next(bench, lat, next, s, u))))
    })
    .expect("dp recursion is total");
    (table, Policy::new(controls.to_vec(), layers, false))
}

/// Control minimising the expected next-period cost `E |a'|^2`.
pub fn greedy_control(bench: &Benchmark, s: State) -> usize {
    let space = bench.state_space();
    let clamp = bench.boundary() == BoundaryRule::Clamp;
    argmin_ordered(bench.controls().iter().map(|&u| {
        bench
            .branches(s.prev)
            .iter()
            .map(|br| {
                let a = s.offset + u - br.delta;
                let a = if clamp { space.clamp(a) } else { a };
                br.prob * a.norm_sq() as f64
            })
            .sum::<f64>()
    }))
    .0
}

/// Stationary one-step-lookahead policy.
pub fn greedy_policy(bench: &Benchmark) -> Policy {
    Policy::tabulate(bench, true, |_, s| greedy_control(bench, s))
}

/// Backward evaluation of a fixed policy: `J_k(i) = g(i) + E J_{k+1}`.
pub fn policy_evaluation(bench: &Benchmark, policy: &Policy, retain: Retain) -> Result<ValueTable> {
    policy.check_compatible(bench)?;
    let controls = bench.controls();
    let (table, _) = backward(bench, retain, false, |k, s, lat, next| {
        let u = policy.require(k, &s)?;
        Ok((u, expected_next(bench, lat, next, s, controls[u])))
    })?;
    Ok(table)
}

/// Expected stage cost and occupancy mass per period from the forward
/// recurrence `f_{k+1}(j) = sum_i f_k(i) p_ij(mu_k(i))`.
#[derive(Clone, Debug, Serialize)]
pub struct ForwardTrace {
    pub total: f64,
    pub per_period: Vec<f64>,
    pub mass: Vec<f64>,
}

/// Expected total cost from a distribution over initial states, in
/// `O(N |S|)` work.
pub fn expected_cost_forward_dist(bench: &Benchmark, policy: &Policy, init: &[(State, f64)]) -> Result<ForwardTrace> {
    policy.check_compatible(bench)?;
    let n = bench.horizon();
    let mut lat = bench.lattice(0);
    let mut occ = vec![0.0; lat.len()];
    for &(s, w) in init {
        let i = lat
            .index(s)
            .ok_or_else(|| Error::InvalidState(format!("{s} is not an initial state")))?;
        occ[i] += w;
    }
    let controls = bench.controls();
    let mut per_period = Vec::with_capacity(n);
    let mut mass = Vec::with_capacity(n + 1);
    for k in 0..n {
        let next_lat = bench.lattice(k + 1);
        let mut next = vec![0.0; next_lat.len()];
        let mut cost = 0.0;
        let mut m = 0.0;
        for (i, &f) in occ.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let s = lat.state(i);
            m += f;
            cost += f * stage_cost(&s);
            let u = controls[policy.require(k, &s)?];
            bench.for_each_successor(s, u, |j, p| next[next_lat.index_unchecked(j)] += f * p);
        }
        per_period.push(cost);
        mass.push(m);
        occ = next;
        lat = next_lat;
    }
    mass.push(occ.iter().sum());
    Ok(ForwardTrace {
        total: per_period.iter().sum(),
        per_period,
        mass,
    })
}

pub fn expected_cost_forward(bench: &Benchmark, policy: &Policy, init: State) -> Result<f64> {
    Ok(expected_cost_forward_dist(bench, policy, &[(init, 1.0)])?.total)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Standard error of the mean; NaN for a single trial.
    pub stderr: f64,
    pub trials: usize,
}

/// Sample mean of the total cost over seeded rollouts. Trial `t` draws from
/// stream `t` of `seed`.
pub fn monte_carlo_cost(bench: &Benchmark, policy: &Policy, init: State, trials: usize, seed: u64) -> Result<McEstimate> {
    if trials == 0 {
        return Err(Error::Config("monte carlo needs at least one trial".into()));
    }
    policy.check_compatible(bench)?;
    let controls = bench.controls();
    let totals: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, t as u64);
            let mut s = init;
            let mut total = 0.0;
            for k in 0..bench.horizon() {
                total += stage_cost(&s);
                let u = controls[policy.require(k, &s)?];
                let draw: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = None;
                let mut last = None;
                bench.for_each_successor(s, u, |j, p| {
                    acc += p;
                    last = Some(j);
                    if chosen.is_none() && draw < acc {
                        chosen = Some(j);
                    }
                });
                s = chosen.or(last).expect("every state has a successor");
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    let n = trials as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let stderr = if trials > 1 {
        let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::NAN
    };
    Ok(McEstimate { mean, stderr, trials })
}

/// Stationary values of the discounted problem on the finite chain.
#[derive(Clone, Debug)]
pub struct DiscountedSolution {
    /// Values over `D x T` in lexicographic order.
    pub values: Vec<f64>,
    pub policy: Policy,
    pub iterations: usize,
}

impl DiscountedSolution {
    pub fn value(&self, s: &State) -> Option<f64> {
        self.policy.layers[0].lattice.index(*s).map(|i| self.values[i])
    }
}

fn check_discount(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Discount(alpha))
    }
}

fn require_finite(bench: &Benchmark) -> Result<Lattice> {
    if bench.boundary() != BoundaryRule::Clamp {
        return Err(Error::Unsupported(
            "infinite-horizon iteration needs the finite clamp chain".into(),
        ));
    }
    Ok(bench.state_space())
}

/// Discounted value iteration `J <- g + alpha min_u E J` until the sup-norm
/// change drops below `tol`.
pub fn discounted_value_iteration(bench: &Benchmark, alpha: f64, tol: f64, max_iter: usize) -> Result<DiscountedSolution> {
    check_discount(alpha)?;
    let lat = require_finite(bench)?;
    let controls = bench.controls();
    let mut values = vec![0.0; lat.len()];
    let mut choice = vec![0u8; lat.len()];
    for it in 1..=max_iter {
        let updated: Vec<(usize, f64)> = (0..lat.len())
            .into_par_iter()
            .map(|i| {
                let s = lat.state(i);
                let (u, ev) = argmin_ordered(controls.iter().map(|&u| expected_next(bench, lat, &values, s, u)));
                (u, stage_cost(&s) + alpha * ev)
            })
            .collect();
        let mut change = 0.0f64;
        for (i, &(u, v)) in updated.iter().enumerate() {
            change = change.max((v - values[i]).abs());
            values[i] = v;
            choice[i] = u as u8;
        }
        if change < tol {
            let policy = Policy::new(controls.to_vec(), vec![PolicyLayer { lattice: lat, choice }], true);
            return Ok(DiscountedSolution {
                values,
                policy,
                iterations: it,
            });
        }
    }
    Err(Error::IterationLimit {
        iterations: max_iter,
        residual: f64::NAN,
        best: values,
    })
}

/// Discounted evaluation of a stationary policy by fixed-point iteration.
pub fn discounted_policy_evaluation(bench: &Benchmark, policy: &Policy, alpha: f64, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    check_discount(alpha)?;
    let lat = require_finite(bench)?;
    policy.check_compatible(bench)?;
    let controls = bench.controls();
    let chosen: Vec<Coord> = lat
        .states()
        .map(|s| policy.require(0, &s).map(|u| controls[u]))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; lat.len()];
    for _ in 0..max_iter {
        let updated: Vec<f64> = (0..lat.len())
            .into_par_iter()
            .map(|i| {
                let s = lat.state(i);
                stage_cost(&s) + alpha * expected_next(bench, lat, &values, s, chosen[i])
            })
            .collect();
        let change = updated
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = updated;
        if change < tol {
            return Ok(values);
        }
    }
    Err(Error::IterationLimit {
        iterations: max_iter,
        residual: f64::NAN,
        best: values,
    })
}

/// The three states visited by the stationary optimal policy when the chain
/// starts in `s`.
pub const OPTIMAL_CYCLE: [State; 3] = [
    State::new(0, 1, Move::S),
    State::new(0, 0, Move::D),
    State::new(0, 0, Move::R),
];

/// The three states visited by the stationary greedy policy.
pub const GREEDY_CYCLE: [State; 3] = [
    State::new(0, 0, Move::S),
    State::new(0, -1, Move::D),
    State::new(0, -1, Move::R),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CycleValues {
    /// Discounted values on [`OPTIMAL_CYCLE`].
    pub optimal: [f64; 3],
    /// Discounted values on [`GREEDY_CYCLE`].
    pub greedy: [f64; 3],
    /// `J_G(first greedy state) / J*(first optimal state) = alpha + alpha^2 / (1 - alpha p)`.
    pub ratio: f64,
}

/// Analytic discounted values of both stationary cycles. Each cycle solves
/// the 3x3 system with `det = 1 - alpha p - alpha^3 (1 - p)`.
pub fn closed_form_cycle_values(p: f64, alpha: f64) -> Result<CycleValues> {
    let q = 1.0 - p;
    let det = 1.0 - alpha * p - alpha.powi(3) * q;
    if det.abs() < 1e-15 {
        return Err(Error::Singular(det));
    }
    let lead = 1.0 - alpha * p;
    if lead.abs() < 1e-15 {
        return Err(Error::Singular(lead));
    }
    let optimal = [lead / det, alpha * alpha * q / det, alpha * q / det];
    let greedy = [
        (alpha + alpha * alpha * q) / det,
        (1.0 + alpha * q) / det,
        (1.0 + alpha * alpha * q) / det,
    ];
    Ok(CycleValues {
        optimal,
        greedy,
        ratio: alpha + alpha * alpha / lead,
    })
}

/// Per-initial-state comparison of optimal and greedy expected totals.
#[derive(Clone, Debug)]
pub struct Census {
    pub states: Vec<State>,
    pub optimal: Vec<f64>,
    pub greedy: Vec<f64>,
    pub greedy_suboptimal: Vec<bool>,
}

impl Census {
    pub fn suboptimal_count(&self) -> usize {
        self.greedy_suboptimal.iter().filter(|&&b| b).count()
    }

    pub fn cost_differences(&self) -> Vec<f64> {
        (0..self.states.len())
            .filter(|&i| self.greedy_suboptimal[i])
            .map(|i| self.greedy[i] - self.optimal[i])
            .collect()
    }
}

/// Relative slack used when deciding whether greedy is strictly worse.
pub const CENSUS_RTOL: f64 = 1e-9;

/// Classifies every state of `D x T` as greedy-suboptimal or greedy-optimal.
/// Both columns come from one batched backward pass each, which gives the
/// same numbers as the forward recurrence started at every state.
pub fn classify_initial_states(bench: &Benchmark) -> Result<Census> {
    let (opt, _) = dp_solve(bench, Retain::Initial);
    let greedy = policy_evaluation(bench, &greedy_policy(bench), Retain::Initial)?;
    let optimal = opt.initial().to_vec();
    let greedy = greedy.initial().to_vec();
    let greedy_suboptimal = optimal
        .iter()
        .zip(&greedy)
        .map(|(&o, &g)| g > o + CENSUS_RTOL * o.abs().max(1.0))
        .collect();
    Ok(Census {
        states: bench.states(),
        optimal,
        greedy,
        greedy_suboptimal,
    })
}

/// Writes `period,ax,ay,move,value,control_x,control_y` rows for every
/// state of `D x T` and every period present in both tables. A missing
/// value or control is written as an empty field.
pub fn write_snapshot<W: Write>(out: W, bench: &Benchmark, values: &ValueTable, policy: Option<&Policy>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["period", "ax", "ay", "move", "value", "control_x", "control_y"])?;
    for k in 0..=values.horizon() {
        if values.layer(k).is_none() {
            continue;
        }
        for s in bench.states() {
            let v = values.get(k, &s).map(|v| v.to_string()).unwrap_or_default();
            let (cx, cy) = match policy.and_then(|p| (k < bench.horizon()).then(|| p.control(k, &s)).flatten()) {
                Some(c) => (c.x.to_string(), c.y.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                k.to_string(),
                s.offset.x.to_string(),
                s.offset.y.to_string(),
                s.prev.symbol().to_string(),
                v,
                cx,
                cy,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
