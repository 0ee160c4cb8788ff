//! Reference implementations written from scratch with plain tuples, used
//! as oracles for the library's solvers.
#![allow(dead_code)]

use std::collections::HashMap;

pub type Offset = (i32, i32);
pub const CONTROLS: [Offset; 3] = [(0, 0), (1, 0), (0, 1)];

/// Successor move symbols and probabilities after `prev`.
pub fn next_moves(prev: char, p: f64) -> Vec<(char, f64)> {
    match prev {
        's' => vec![('d', 1.0)],
        'd' => vec![('r', 1.0)],
        'r' => vec![('r', p), ('s', 1.0 - p)],
        _ => unreachable!(),
    }
}

pub fn step_of(m: char) -> Offset {
    match m {
        's' => (0, 0),
        'd' => (1, 1),
        'r' => (0, 1),
        _ => unreachable!(),
    }
}

/// `(offset, move, probability)` after applying `u`; `clamp` bounds the
/// offset to `[-R, R]^2`.
pub fn successors(a: Offset, b: char, u: Offset, p: f64, clamp: Option<i32>) -> Vec<(Offset, char, f64)> {
    next_moves(b, p)
        .into_iter()
        .filter(|&(_, q)| q > 0.0)
        .map(|(m, q)| {
            let d = step_of(m);
            let mut n = (a.0 + u.0 - d.0, a.1 + u.1 - d.1);
            if let Some(r) = clamp {
                n = (n.0.clamp(-r, r), n.1.clamp(-r, r));
            }
            (n, m, q)
        })
        .collect()
}

pub fn cost(a: Offset) -> f64 {
    f64::from(a.0 * a.0 + a.1 * a.1)
}

pub fn initial_states(r: i32) -> Vec<(Offset, char)> {
    let mut v = Vec::new();
    for x in -r..=r {
        for y in -r..=r {
            for b in ['s', 'd', 'r'] {
                v.push(((x, y), b));
            }
        }
    }
    v
}

/// Memoised optimal cost-to-go by direct recursion over the decision tree.
pub struct Oracle {
    pub p: f64,
    pub horizon: usize,
    pub clamp: Option<i32>,
    memo: HashMap<(usize, Offset, char), f64>,
}

impl Oracle {
    pub fn new(p: f64, horizon: usize, clamp: Option<i32>) -> Self {
        Self {
            p,
            horizon,
            clamp,
            memo: HashMap::new(),
        }
    }

    pub fn q(&mut self, k: usize, a: Offset, b: char, u: Offset) -> f64 {
        successors(a, b, u, self.p, self.clamp)
            .into_iter()
            .map(|(n, m, q)| q * self.value(k + 1, n, m))
            .sum()
    }

    pub fn value(&mut self, k: usize, a: Offset, b: char) -> f64 {
        if k >= self.horizon {
            return 0.0;
        }
        if let Some(&v) = self.memo.get(&(k, a, b)) {
            return v;
        }
        let best = CONTROLS
            .iter()
            .map(|&u| self.q(k, a, b, u))
            .fold(f64::INFINITY, f64::min);
        let v = cost(a) + best;
        self.memo.insert((k, a, b), v);
        v
    }
}

/// Exact expected cost of a Markov policy given as a closure.
pub fn policy_cost(
    p: f64,
    horizon: usize,
    clamp: Option<i32>,
    init: (Offset, char),
    policy: &dyn Fn(usize, Offset, char) -> Offset,
) -> f64 {
    fn go(
        p: f64,
        horizon: usize,
        clamp: Option<i32>,
        k: usize,
        a: Offset,
        b: char,
        policy: &dyn Fn(usize, Offset, char) -> Offset,
    ) -> f64 {
        if k >= horizon {
            return 0.0;
        }
        let u = policy(k, a, b);
        cost(a)
            + successors(a, b, u, p, clamp)
                .into_iter()
                .map(|(n, m, q)| q * go(p, horizon, clamp, k + 1, n, m, policy))
                .sum::<f64>()
    }
    go(p, horizon, clamp, 0, init.0, init.1, policy)
}

pub fn to_state(s: (Offset, char)) -> trackbench::mdp::State {
    trackbench::mdp::State::new(s.0 .0, s.0 .1, trackbench::dynamics::Move::from_symbol(s.1).unwrap())
}

/// Two-sample-free Kolmogorov-Smirnov statistic of `sample` against `cdf`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at significance 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}
