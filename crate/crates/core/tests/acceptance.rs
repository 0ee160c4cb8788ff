//! Acceptance criteria, one line each. Criterion 9 runs only when
//! `TRACKBENCH_IMAGE_DIR` names a directory of full-size grayscale images.
//! `TRACKBENCH_ACCEPTANCE=1,4` restricts the run to the listed criteria.

mod common;

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use trackbench::approx::{capacity_experiment, fit_values, fitted_value_iteration, FittedViOptions, LsqrOptions};
use trackbench::codec::{
    choose_patch_side, extract_all, load_image, load_or_synthesize_images, represent, ImageSource, PatchSet,
    Representation, RepresentationOptions,
};
use trackbench::dynamics::Move;
use trackbench::mdp::{stage_cost, Benchmark, BenchmarkSpec, BoundaryRule, PatchAssignment, PatchOrder, State};
use trackbench::rng;
use trackbench::solve::{
    classify_initial_states, closed_form_cycle_values, discounted_policy_evaluation, discounted_value_iteration,
    dp_solve, expected_cost_forward, greedy_policy, monte_carlo_cost, policy_evaluation, Census, Policy, Retain,
    ValueTable, GREEDY_CYCLE, OPTIMAL_CYCLE,
};

use common::{Oracle, CONTROLS};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn bench(radius: u32, p: f64, n: usize, rule: BoundaryRule) -> Benchmark {
    Benchmark::new(BenchmarkSpec::new(radius, p, n).unwrap().with_boundary(rule)).unwrap()
}

fn rel_close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0)
}

fn c1_horizon_law() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (p, want_opt, want_greedy) in [(0.0, 10.0, 20.0), (1.0, 1.0, 29.0)] {
        let b = bench(2, p, 30, BoundaryRule::Unbounded);
        let (_, opt) = dp_solve(&b, Retain::Initial);
        let o = expected_cost_forward(&b, &opt, OPTIMAL_CYCLE[0]).unwrap();
        let g = expected_cost_forward(&b, &greedy_policy(&b), GREEDY_CYCLE[0]).unwrap();
        ok &= o == want_opt && g == want_greedy;
        parts.push(format!("p={p}: optimal {o} greedy {g}"));
    }
    check(ok, parts.join("; "))
}

fn c2_stationary_tables() -> Outcome {
    let optimal_table = [(OPTIMAL_CYCLE[0], (1, 0), 1.0), (OPTIMAL_CYCLE[1], (0, 1), 0.0), (OPTIMAL_CYCLE[2], (0, 1), 0.0)];
    let greedy_table = [(GREEDY_CYCLE[0], (1, 0), 0.0), (GREEDY_CYCLE[1], (0, 1), 1.0), (GREEDY_CYCLE[2], (0, 1), 1.0)];
    let n = 30;
    let mut ok = true;
    let mut notes = Vec::new();
    for p in [0.0, 0.4, 1.0] {
        let b = bench(2, p, n, BoundaryRule::Unbounded);
        let (_, opt) = dp_solve(&b, Retain::Initial);
        let greedy = greedy_policy(&b);
        let mut oracle = Oracle::new(p, n, None);
        for (s, want, c) in optimal_table {
            let got = opt.control(0, &s).unwrap();
            let (a, m) = ((s.offset.x, s.offset.y), s.prev.symbol());
            ok &= stage_cost(&s) == c;
            if (got.x, got.y) != want {
                let q_got = oracle.q(0, a, m, (got.x, got.y));
                let q_want = oracle.q(0, a, m, want);
                let tie = q_got == q_want;
                ok &= tie;
                notes.push(format!("p={p} {s}: dp {got} vs table ({},{}) ({})", want.0, want.1, if tie { "exact tie" } else { "differs" }));
            }
        }
        for (s, want, c) in greedy_table {
            let got = greedy.control(0, &s).unwrap();
            ok &= stage_cost(&s) == c && (got.x, got.y) == want;
            if (got.x, got.y) != want {
                notes.push(format!("p={p} greedy {s}: {got} vs table ({},{})", want.0, want.1));
            }
        }
    }
    // per-period costs along the deterministic cycles
    for (p, start_opt, pat_opt, start_g, pat_g) in [
        (0.0, OPTIMAL_CYCLE[0], vec![1.0, 0.0, 0.0], GREEDY_CYCLE[0], vec![0.0, 1.0, 1.0]),
        (1.0, OPTIMAL_CYCLE[2], vec![0.0], GREEDY_CYCLE[2], vec![1.0]),
    ] {
        let b = bench(2, p, n, BoundaryRule::Unbounded);
        let (_, opt) = dp_solve(&b, Retain::Initial);
        let to = trackbench::solve::expected_cost_forward_dist(&b, &opt, &[(start_opt, 1.0)]).unwrap();
        let tg = trackbench::solve::expected_cost_forward_dist(&b, &greedy_policy(&b), &[(start_g, 1.0)]).unwrap();
        for k in 0..n {
            ok &= to.per_period[k] == pat_opt[k % pat_opt.len()] && tg.per_period[k] == pat_g[k % pat_g.len()];
        }
    }
    let detail = if notes.is_empty() {
        "controls and per-period costs match both tables for p in {0, 0.4, 1}".to_string()
    } else {
        format!("costs match; {}", notes.join("; "))
    };
    check(ok, detail)
}

fn c3_closed_forms() -> Outcome {
    let mut worst = 0.0f64;
    for p in [0.0, 0.4, 0.75] {
        let b = bench(2, p, 1, BoundaryRule::Clamp);
        let lat = b.state_space();
        for alpha in [0.9, 0.99, 0.999] {
            let tol = 1e-7 * (1.0 - alpha);
            let vi = discounted_value_iteration(&b, alpha, tol, 10_000_000).unwrap();
            let gv = discounted_policy_evaluation(&b, &greedy_policy(&b), alpha, tol, 10_000_000).unwrap();
            let cf = closed_form_cycle_values(p, alpha).unwrap();
            for (s, v) in OPTIMAL_CYCLE.iter().zip(cf.optimal) {
                worst = worst.max((vi.value(s).unwrap() - v).abs());
            }
            for (s, v) in GREEDY_CYCLE.iter().zip(cf.greedy) {
                worst = worst.max((gv[lat.index(*s).unwrap()] - v).abs());
            }
        }
    }
    let alpha = 1.0 - 1e-6;
    let r0 = closed_form_cycle_values(0.0, alpha).unwrap().ratio;
    let r75 = closed_form_cycle_values(0.75, alpha).unwrap().ratio;
    let ok = worst <= 1e-6 && (r0 - 2.0).abs() <= 1e-3 && (r75 - 5.0).abs() <= 1e-3;
    check(ok, format!("sup |VI - closed form| = {worst:.2e}; ratio(p=0) = {r0:.6}, ratio(p=0.75) = {r75:.6}"))
}

struct Large {
    bench: Benchmark,
    optimal: Policy,
    greedy: Policy,
    census: OnceLock<Census>,
}

fn large() -> &'static Large {
    static CELL: OnceLock<Large> = OnceLock::new();
    CELL.get_or_init(|| {
        let bench = bench(42, 0.4, 200, BoundaryRule::Unbounded);
        let (_, optimal) = dp_solve(&bench, Retain::Initial);
        let greedy = greedy_policy(&bench);
        Large {
            bench,
            optimal,
            greedy,
            census: OnceLock::new(),
        }
    })
}

fn c4_absolute_costs() -> Outcome {
    let l = large();
    let f = |pol: &Policy, x, y, m| expected_cost_forward(&l.bench, pol, State::new(x, y, m)).unwrap();
    let checks = [
        ("opt((0,0),d)", f(&l.optimal, 0, 0, Move::D), 54.0, 1.0, false),
        ("greedy((0,0),d)", f(&l.greedy, 0, 0, Move::D), 144.0, 1.0, false),
        ("greedy((0,0),s)", f(&l.greedy, 0, 0, Move::S), 145.0, 1.0, false),
        ("opt((-42,-42),d)", f(&l.optimal, -42, -42, Move::D), 701100.0, 1e-3, true),
        ("opt((42,-42),d)", f(&l.optimal, 42, -42, Move::D), 185870.0, 1e-3, true),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, got, want, tol, relative) in checks {
        let err = if relative { (got - want).abs() / want } else { (got - want).abs() };
        ok &= err <= tol;
        parts.push(format!("{name}={got:.3}"));
    }
    check(ok, parts.join(" "))
}

fn c5_census() -> Outcome {
    let l = large();
    let c = l.census.get_or_init(|| classify_initial_states(&l.bench).unwrap());
    let n = c.suboptimal_count();
    let ok = (n as f64 - 10880.0).abs() <= 0.01 * 10880.0 && c.states.len() == 21675;
    check(ok, format!("{n} of {} initial states have a suboptimal greedy policy", c.states.len()))
}

fn tabulated_random_policy(b: &Benchmark, salt: u64) -> Policy {
    Policy::tabulate(b, false, move |k, s| {
        let mut h = salt ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= (s.offset.x as i64 as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= (s.offset.y as i64 as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= s.prev.index() as u64;
        h = (h ^ (h >> 31)).wrapping_mul(0xd6e8_feb8_6659_fd93);
        ((h >> 29) % 3) as usize
    })
}

fn c6_oracle_triangle() -> Outcome {
    let mut r = rng::seeded(6);
    let mut worst_rel = 0.0f64;
    let mut worst_z = 0.0f64;
    let mut ok = true;
    for t in 0..20u64 {
        let p: f64 = r.random();
        let n = r.random_range(1..=50usize);
        let radius = r.random_range(1..=6u32);
        let b = bench(radius, p, n, BoundaryRule::Unbounded);
        let states = b.states();
        let init = states[r.random_range(0..states.len())];
        let policy = match t % 3 {
            0 => dp_solve(&b, Retain::Initial).1,
            1 => greedy_policy(&b),
            _ => tabulated_random_policy(&b, t),
        };
        let fwd = expected_cost_forward(&b, &policy, init).unwrap();
        let pe = policy_evaluation(&b, &policy, Retain::Initial).unwrap();
        let back = pe.initial()[b.state_space().index(init).unwrap()];
        let rel = (fwd - back).abs() / fwd.abs().max(1.0);
        worst_rel = worst_rel.max(rel);
        let mc = monte_carlo_cost(&b, &policy, init, 10_000, 600 + t).unwrap();
        let z = if mc.stderr > 0.0 {
            (mc.mean - fwd).abs() / mc.stderr
        } else if (mc.mean - fwd).abs() <= 1e-9 * fwd.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        };
        worst_z = worst_z.max(z);
        ok &= rel <= 1e-9 && z <= 3.0;
    }
    check(ok, format!("20 tuples: max forward/backward rel gap {worst_rel:.1e}, max |MC - exact| = {worst_z:.2} SE"))
}

fn c7_exhaustive() -> Outcome {
    let (p, n) = (0.5, 3);
    let b = bench(1, p, n, BoundaryRule::Unbounded);
    let (values, _) = dp_solve(&b, Retain::Initial);
    let mut ok = true;
    let mut enumerated = 0usize;
    for (idx, init) in common::initial_states(1).into_iter().enumerate() {
        let dp = values.initial()[idx];
        // period-1 states reachable under any first control
        let mut reach: Vec<((i32, i32), char)> = Vec::new();
        for u in CONTROLS {
            for (a, m, _) in common::successors(init.0, init.1, u, p, None) {
                if !reach.contains(&(a, m)) {
                    reach.push((a, m));
                }
            }
        }
        // controls at the last period only affect the uncosted terminal state
        let decisions = 1 + reach.len();
        let total = 3usize.pow(decisions as u32);
        let mut best = f64::INFINITY;
        for code in 0..total {
            let digit = |i: usize| CONTROLS[(code / 3usize.pow(i as u32)) % 3];
            let policy = |k: usize, a: (i32, i32), m: char| match k {
                0 => digit(0),
                1 => digit(1 + reach.iter().position(|&s| s == (a, m)).unwrap()),
                _ => CONTROLS[0],
            };
            let c = common::policy_cost(p, n, None, init, &policy);
            best = best.min(c);
            ok &= dp <= c + 1e-12;
            enumerated += 1;
        }
        ok &= (dp - best).abs() <= 1e-12;
    }
    check(ok, format!("{enumerated} Markov policies over 27 initial states; dp never worse"))
}

fn synthetic_library(seed: u64, count: usize, side: usize, a: usize) -> PatchSet {
    let imgs = load_or_synthesize_images(&ImageSource::Synthetic { seed }, count, side).unwrap();
    extract_all(&imgs, a).unwrap()
}

fn c8_capacity() -> Outcome {
    let a = 8;
    let target_bench = bench(7, 0.4, 30, BoundaryRule::Clamp);
    let targets = dp_solve(&target_bench, Retain::Initial).0.initial().to_vec();
    let clauses: [(&str, Representation, usize, bool); 5] = [
        ("whitened n=60", Representation::Whitened, 60, true),
        ("whitened n=70", Representation::Whitened, 70, false),
        ("sparse:4 n=230", Representation::Sparse(4), 230, true),
        ("sparse:4 n=300", Representation::Sparse(4), 300, false),
        ("upscaled:4 n=100", Representation::Upscaled(4), 100, false),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, kind, count, expect_success) in clauses {
        let mut wins = 0;
        for seed in 0..5u64 {
            let library = synthetic_library(80 + seed, 1, 256, a);
            let assignment = PatchAssignment::new(library.data(), a * a, targets.len(), PatchOrder::Permuted { seed }).unwrap();
            let opts = RepresentationOptions {
                dictionary_seed: seed,
                ..Default::default()
            };
            let features = represent(kind, &library, assignment.patches(), &opts).unwrap();
            let lsqr = LsqrOptions::for_columns(features.dim());
            let rows =
                capacity_experiment(|_| Ok((features.clone(), targets.clone())), &[count], 1, 800 + seed, &lsqr).unwrap();
            wins += usize::from(rows[0].success_rate == 1.0);
        }
        let success = wins >= 3;
        ok &= success == expect_success;
        parts.push(format!(
            "{name}: {}/5 interpolated ({} expected {})",
            wins,
            if success { "success" } else { "failure" },
            if expect_success { "success" } else { "failure" }
        ));
    }
    check(ok, parts.join("; "))
}

fn c9_full_scale() -> Outcome {
    let Some(dir) = std::env::var_os("TRACKBENCH_IMAGE_DIR").map(PathBuf::from) else {
        return Outcome::Skip("set TRACKBENCH_IMAGE_DIR to a directory of 2844x2844-croppable images".into());
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm" || e == "png" || e == "f64"))
        .collect();
    paths.sort();
    let Some(first) = paths.first() else {
        return Outcome::Fail(format!("no images in {}", dir.display()));
    };
    let a = choose_patch_side(2844, 64).unwrap();
    let image = load_image(first, Some(2844)).unwrap();
    let library = extract_all(std::slice::from_ref(&image), a).unwrap();
    let b = bench(40, 0.4, 30, BoundaryRule::Clamp);
    let targets = dp_solve(&b, Retain::Initial).0.initial().to_vec();
    let assignment = PatchAssignment::new(library.data(), a * a, targets.len(), PatchOrder::Raster).unwrap();
    let features = represent(Representation::Sparse(64), &library, assignment.patches(), &RepresentationOptions::default()).unwrap();
    let (_, report) = fit_values(&features, &targets, &LsqrOptions::for_columns(features.dim())).unwrap();
    check(
        report.converged,
        format!("{} values, {} iterations, relative residual {:.2e}", targets.len(), report.iterations, report.residual),
    )
}

/// True when `u_fit` is a DP-optimal control at `(k, s)`.
fn is_dp_optimal(b: &Benchmark, values: &ValueTable, k: usize, s: &State, u_fit: usize) -> bool {
    let q: Vec<f64> = b
        .controls()
        .iter()
        .map(|&u| {
            b.transition(s, u)
                .unwrap()
                .iter()
                .map(|(j, pr)| pr * values.get(k + 1, j).unwrap())
                .sum()
        })
        .collect();
    let best = q.iter().copied().fold(f64::INFINITY, f64::min);
    q[u_fit] <= best + 1e-9 * best.abs().max(1.0)
}

fn c10_fitted_fidelity() -> Outcome {
    let (p, n) = (0.75, 30);
    let b = bench(4, p, n, BoundaryRule::Clamp);
    let (values, dp_policy) = dp_solve(&b, Retain::All);
    let library = synthetic_library(10, 2, 304, 19);
    let states = b.states();
    let assignment = PatchAssignment::new(library.data(), 361, states.len(), PatchOrder::Permuted { seed: 10 }).unwrap();
    let features = represent(Representation::Whitened, &library, assignment.patches(), &RepresentationOptions::default()).unwrap();
    let fit = match fitted_value_iteration(&b, &features, &FittedViOptions::new(LsqrOptions::for_columns(features.dim()))) {
        Ok(f) => f,
        Err(e) => return Outcome::Fail(format!("whitened fitted VI failed: {e}")),
    };
    let mut same = 0;
    let mut tied = 0;
    let mut wrong = 0;
    for k in 0..n {
        for s in &states {
            let uf = fit.policy.control_index(k, s).unwrap();
            if Some(uf) == dp_policy.control_index(k, s) {
                same += 1;
            } else if is_dp_optimal(&b, &values, k, s, uf) {
                tied += 1;
            } else {
                wrong += 1;
            }
        }
    }
    let onehot = fitted_value_iteration(
        &b,
        &trackbench::approx::FeatureMatrix::identity(states.len()),
        &FittedViOptions::new(LsqrOptions::new(1e-12, 1000)),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for k in 0..n {
        for (i, s) in states.iter().enumerate() {
            let v = onehot.net.weights(k)[i];
            worst = worst.max((v - values.get(k, s).unwrap()).abs());
        }
    }
    check(
        wrong == 0 && worst <= 1e-8,
        format!(
            "whitened: {same} identical, {tied} exact DP ties, {wrong} suboptimal over {} (period, state) pairs; one-hot max value error {worst:.1e}",
            n * states.len()
        ),
    )
}

fn c11_partition() -> Outcome {
    let (p, n, radius, a) = (0.4, 100, 10, 19);
    let b = bench(radius, p, n, BoundaryRule::Clamp);
    let states = b.states();
    let library = synthetic_library(11, 1, 703, a);
    let assignment = PatchAssignment::new(library.data(), a * a, states.len(), PatchOrder::Permuted { seed: 11 }).unwrap();
    let opts = RepresentationOptions {
        dictionary_seed: 11,
        ..Default::default()
    };
    let features = represent(Representation::Sparse(4), &library, assignment.patches(), &opts).unwrap();
    let mask: Vec<bool> = states.iter().map(|s| s.offset.x >= 0 || s.offset.y >= 0).collect();
    let trained = mask.iter().filter(|&&m| m).count();
    let mut fv = FittedViOptions::new(LsqrOptions::for_columns(features.dim()));
    fv.train_mask = Some(mask);
    fv.strict = false;
    let fit = fitted_value_iteration(&b, &features, &fv).unwrap();
    let census = classify_initial_states(&b).unwrap();
    let mut matched = 0;
    let mut total = 0;
    for (i, s) in census.states.iter().enumerate() {
        if !census.greedy_suboptimal[i] {
            continue;
        }
        total += 1;
        let c = expected_cost_forward(&b, &fit.policy, *s).unwrap();
        matched += usize::from(rel_close(c, census.optimal[i], 1e-9));
    }
    let converged = fit.reports.iter().filter(|r| r.converged).count();
    check(
        matched == total,
        format!(
            "trained on {trained}/{} states ({:.3}); {converged}/{n} period fits converged; fitted VI optimal on {matched}/{total} greedy-suboptimal states",
            states.len(),
            trained as f64 / states.len() as f64
        ),
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "deterministic horizon law", Duration::from_secs(1), c1_horizon_law),
        (2, "stationary policy tables", Duration::from_secs(1), c2_stationary_tables),
        (3, "discounted closed forms", Duration::from_secs(10), c3_closed_forms),
        (4, "absolute costs at R=42", Duration::from_secs(300), c4_absolute_costs),
        (5, "greedy-suboptimal census", Duration::from_secs(600), c5_census),
        (6, "oracle triangle", Duration::from_secs(120), c6_oracle_triangle),
        (7, "exhaustive optimality", Duration::from_secs(60), c7_exhaustive),
        (8, "capacity law (desk scale)", Duration::from_secs(300), c8_capacity),
        (9, "full-scale capacity", Duration::from_secs(86_400), c9_full_scale),
        (10, "fitted-VI fidelity", Duration::from_secs(60), c10_fitted_fidelity),
        (11, "partition training", Duration::from_secs(600), c11_partition),
    ];
    let only: Option<Vec<u32>> = std::env::var("TRACKBENCH_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, limit, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let over = start.elapsed() > limit;
        let (tag, detail) = match outcome {
            Outcome::Pass(d) if over => ("FAIL", format!("{d}; exceeded {}s budget", limit.as_secs())),
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => ("FAIL", d),
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {id:>2} {tag} {name} [{secs:.1}s]: {detail}");
        if tag == "FAIL" {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
