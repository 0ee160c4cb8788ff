//! Experiment runners. Each writes its tables into an [`Experiment`]
//! directory and returns the JSON summary.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use trackbench::approx::{capacity_experiment, fitted_value_iteration, FeatureMatrix, FittedViOptions};
use trackbench::codec::{
    decode, encode, extract_all, load_image, load_or_synthesize_images, represent, write_pgm16, write_raw_image,
    GaborDictionary, Image, ImageSource, Representation,
};
use trackbench::container;
use trackbench::mdp::{radius_for_states, Benchmark, BoundaryRule, PatchAssignment, PatchOrder, State};
use trackbench::solve::{
    classify_initial_states, dp_solve, expected_cost_forward, greedy_policy, policy_evaluation, write_snapshot,
    Retain, CENSUS_RTOL,
};
use trackbench::stats::gaussian_kde;

use crate::config::{parse_state, BenchmarkDefaults, Config};
use crate::output::Experiment;

fn defaults(radius: u32, p: f64, horizon: usize, boundary: BoundaryRule) -> BenchmarkDefaults {
    BenchmarkDefaults {
        radius,
        p,
        horizon,
        boundary,
    }
}

fn benchmark(cfg: &mut Config, d: BenchmarkDefaults) -> Result<Benchmark> {
    cfg.benchmark.resolve(d);
    Ok(Benchmark::new(cfg.benchmark.spec()?)?)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn optimal_within(cost: f64, optimal: f64) -> bool {
    cost <= optimal + CENSUS_RTOL * optimal.abs().max(1.0)
}

/// Patch library of the configured images.
fn library(cfg: &Config) -> Result<trackbench::codec::PatchSet> {
    let images = load_or_synthesize_images(&cfg.images.source, cfg.images.count, cfg.images.side)?;
    Ok(extract_all(&images, cfg.representation.patch_side)?)
}

/// Row `i` represents state `i` of the benchmark.
fn state_features(cfg: &Config, n_states: usize, order: PatchOrder) -> Result<FeatureMatrix> {
    let r = &cfg.representation;
    if r.kind == Representation::OneHot {
        return Ok(FeatureMatrix::identity(n_states));
    }
    let library = library(cfg)?;
    let a = r.patch_side;
    let assignment = PatchAssignment::new(library.data(), a * a, n_states, order)?;
    Ok(represent(r.kind, &library, assignment.patches(), &r.options(cfg.seed))?)
}

fn fitted_options(cfg: &Config, columns: usize, mask: Option<Vec<bool>>) -> FittedViOptions {
    let mut o = FittedViOptions::new(cfg.fit.lsqr(columns));
    o.warm_start = cfg.fit.warm_start;
    o.train_mask = mask;
    o.strict = false;
    o
}

fn move_symbol(s: &State) -> String {
    s.prev.symbol().to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyKind {
    Optimal,
    Greedy,
}

pub fn solve(cfg: &mut Config, policy: PolicyKind, all_periods: bool, starts: &[String]) -> Result<Value> {
    let b = benchmark(cfg, defaults(2, 0.4, 30, BoundaryRule::Unbounded))?;
    let exp = Experiment::create(cfg, "solve")?;
    let retain = if all_periods { Retain::All } else { Retain::Initial };
    let (values, pol) = match policy {
        PolicyKind::Optimal => dp_solve(&b, retain),
        PolicyKind::Greedy => {
            let g = greedy_policy(&b);
            (policy_evaluation(&b, &g, retain)?, g)
        }
    };
    let file = fs::File::create(exp.path("values.csv"))?;
    write_snapshot(BufWriter::new(file), &b, &values, Some(&pol))?;
    let mut at = Vec::new();
    for s in starts {
        let s = parse_state(s)?;
        at.push(json!({ "state": s.to_string(), "cost": expected_cost_forward(&b, &pol, s)? }));
    }
    let init = values.initial();
    exp.finish(json!({
        "policy": format!("{policy:?}").to_lowercase(),
        "states": init.len(),
        "mean_initial_cost": mean(init),
        "max_initial_cost": init.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "starts": at,
    }))
}

#[derive(Serialize)]
struct HorizonRow {
    p: f64,
    horizon: usize,
    optimal: f64,
    greedy: f64,
}

pub fn horizon(cfg: &mut Config) -> Result<Value> {
    let max = cfg.horizon.max;
    ensure!(max >= 1, "horizon sweep needs max >= 1");
    cfg.benchmark.resolve(defaults(1, 0.0, max, BoundaryRule::Unbounded));
    cfg.benchmark.horizon = Some(max);
    let opt_start = parse_state(&cfg.horizon.optimal_start)?;
    let greedy_start = parse_state(&cfg.horizon.greedy_start)?;
    let exp = Experiment::create(cfg, "horizon")?;
    let mut rows = Vec::new();
    let mut finals = Vec::new();
    for &p in &cfg.horizon.p {
        let mut spec = cfg.benchmark.spec()?;
        spec.p = p.try_into()?;
        let b = Benchmark::new(spec)?;
        // with no terminal cost the horizon-N value is the period max-N value
        let (opt, _) = dp_solve(&b, Retain::All);
        let greedy = policy_evaluation(&b, &greedy_policy(&b), Retain::All)?;
        for n in 1..=max {
            let k = max - n;
            rows.push(HorizonRow {
                p,
                horizon: n,
                optimal: opt.get(k, &opt_start).context("optimal start is outside the state set")?,
                greedy: greedy.get(k, &greedy_start).context("greedy start is outside the state set")?,
            });
        }
        let last = rows.last().expect("max >= 1");
        finals.push(json!({ "p": p, "optimal": last.optimal, "greedy": last.greedy, "ratio": last.greedy / last.optimal }));
    }
    exp.write_rows("horizon.csv", &rows)?;
    exp.finish(json!({
        "max_horizon": max,
        "optimal_start": opt_start.to_string(),
        "greedy_start": greedy_start.to_string(),
        "final": finals,
    }))
}

#[derive(Serialize)]
struct CensusRow {
    ax: i32,
    ay: i32,
    #[serde(rename = "move")]
    prev: String,
    optimal: f64,
    greedy: f64,
    difference: f64,
    greedy_suboptimal: bool,
    fitted: Option<f64>,
}

pub fn census(cfg: &mut Config) -> Result<Value> {
    let b = benchmark(cfg, defaults(42, 0.4, 200, BoundaryRule::Unbounded))?;
    let exp = Experiment::create(cfg, "census")?;
    let census = classify_initial_states(&b)?;
    let fitted = if cfg.census.fitted {
        let f = state_features(cfg, census.states.len(), cfg.representation.order())?;
        let fit = fitted_value_iteration(&b, &f, &fitted_options(cfg, f.dim(), None))?;
        Some(policy_evaluation(&b, &fit.policy, Retain::Initial)?.initial().to_vec())
    } else {
        None
    };
    let rows: Vec<CensusRow> = census
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| CensusRow {
            ax: s.offset.x,
            ay: s.offset.y,
            prev: move_symbol(s),
            optimal: census.optimal[i],
            greedy: census.greedy[i],
            difference: census.greedy[i] - census.optimal[i],
            greedy_suboptimal: census.greedy_suboptimal[i],
            fitted: fitted.as_ref().map(|f| f[i]),
        })
        .collect();
    exp.write_rows("census.csv", &rows)?;
    let diffs = census.cost_differences();
    let kde = gaussian_kde(&diffs, cfg.census.bandwidth, cfg.census.grid);
    exp.write_rows("kde.csv", &kde)?;
    let fitted_optimal = fitted
        .as_ref()
        .map(|f| f.iter().zip(&census.optimal).filter(|&(&c, &o)| optimal_within(c, o)).count());
    exp.finish(json!({
        "states": census.states.len(),
        "greedy_suboptimal": census.suboptimal_count(),
        "greedy_suboptimal_fraction": census.suboptimal_count() as f64 / census.states.len() as f64,
        "mean_difference": mean(&diffs),
        "max_difference": diffs.iter().copied().fold(0.0, f64::max),
        "bandwidth": cfg.census.bandwidth,
        "fitted_optimal": fitted_optimal,
    }))
}

#[derive(Serialize)]
struct CapacityCsvRow {
    representation: String,
    count: usize,
    trials: usize,
    mean_iterations: f64,
    success_rate: f64,
    mean_residual: f64,
}

pub fn capacity(cfg: &mut Config) -> Result<Value> {
    let b = benchmark(cfg, defaults(7, 0.4, 30, BoundaryRule::Clamp))?;
    let exp = Experiment::create(cfg, "capacity")?;
    let targets = dp_solve(&b, Retain::Initial).0.initial().to_vec();
    let base = cfg.representation.permutation_seed.unwrap_or(cfg.seed);
    let mut rows = Vec::new();
    let mut limits = Vec::new();
    for &kind in &cfg.capacity.representations {
        let mut local = cfg.clone();
        local.representation.kind = kind;
        let pools: Vec<FeatureMatrix> = (0..cfg.capacity.trials)
            .map(|t| state_features(&local, targets.len(), PatchOrder::Permuted { seed: base + t as u64 }))
            .collect::<Result<_>>()?;
        let lsqr = cfg.fit.lsqr(pools.first().map_or(0, FeatureMatrix::dim));
        let table = capacity_experiment(
            |t| Ok((pools[t].clone(), targets.clone())),
            &cfg.capacity.counts,
            cfg.capacity.trials,
            cfg.seed,
            &lsqr,
        )?;
        let solved = table.iter().filter(|r| r.success_rate == 1.0).map(|r| r.count).max();
        let failed = table.iter().filter(|r| r.success_rate < 1.0).map(|r| r.count).min();
        limits.push(json!({
            "representation": kind.to_string(),
            "features": pools.first().map_or(0, FeatureMatrix::dim),
            "largest_solved": solved,
            "smallest_failed": failed,
        }));
        rows.extend(table.into_iter().map(|r| CapacityCsvRow {
            representation: kind.to_string(),
            count: r.count,
            trials: r.trials,
            mean_iterations: r.mean_iterations,
            success_rate: r.success_rate,
            mean_residual: r.mean_residual,
        }));
    }
    exp.write_rows("capacity.csv", &rows)?;
    exp.finish(json!({ "pool": targets.len(), "representations": limits }))
}

#[derive(Serialize)]
struct SweepRow {
    states: usize,
    radius: u32,
    optimal: f64,
    greedy: f64,
    fitted: f64,
    converged_periods: usize,
    fitted_optimal_states: usize,
}

pub fn state_sweep(cfg: &mut Config) -> Result<Value> {
    cfg.benchmark.resolve(defaults(1, 0.4, 30, BoundaryRule::Clamp));
    let exp = Experiment::create(cfg, "state-sweep")?;
    let mut rows = Vec::new();
    for &n in &cfg.state_sweep.states {
        let radius = radius_for_states(n).with_context(|| format!("{n} is not 3 (2R + 1)^2 for any radius"))?;
        let mut spec = cfg.benchmark.spec()?;
        spec.radius = radius;
        let b = Benchmark::new(spec)?;
        let (opt, _) = dp_solve(&b, Retain::Initial);
        let greedy = policy_evaluation(&b, &greedy_policy(&b), Retain::Initial)?;
        let f = state_features(cfg, n, cfg.representation.order())?;
        let fit = fitted_value_iteration(&b, &f, &fitted_options(cfg, f.dim(), None))?;
        let fitted = policy_evaluation(&b, &fit.policy, Retain::Initial)?;
        let hits = fitted
            .initial()
            .iter()
            .zip(opt.initial())
            .filter(|&(&c, &o)| optimal_within(c, o))
            .count();
        eprintln!("state-sweep: {n} states, fitted VI optimal on {hits}");
        rows.push(SweepRow {
            states: n,
            radius,
            optimal: mean(opt.initial()),
            greedy: mean(greedy.initial()),
            fitted: mean(fitted.initial()),
            converged_periods: fit.reports.iter().filter(|r| r.converged).count(),
            fitted_optimal_states: hits,
        });
    }
    exp.write_rows("state_sweep.csv", &rows)?;
    let all_optimal: Vec<usize> = rows.iter().filter(|r| r.fitted_optimal_states == r.states).map(|r| r.states).collect();
    exp.finish(json!({
        "representation": cfg.representation.kind.to_string(),
        "counts": cfg.state_sweep.states,
        "fitted_optimal_everywhere": all_optimal,
    }))
}

#[derive(Serialize)]
struct PartitionRow {
    ax: i32,
    ay: i32,
    #[serde(rename = "move")]
    prev: String,
    optimal: f64,
    greedy: f64,
    full: f64,
    partition: f64,
}

pub fn partition(cfg: &mut Config) -> Result<Value> {
    let b = benchmark(cfg, defaults(10, 0.4, 400, BoundaryRule::Clamp))?;
    let exp = Experiment::create(cfg, "partition")?;
    let states = b.states();
    let f = state_features(cfg, states.len(), cfg.representation.order())?;
    let rule = cfg.partition.rule;
    let mask: Vec<bool> = states.iter().map(|s| rule.admits(s)).collect();
    let trained = mask.iter().filter(|&&m| m).count();
    let full = fitted_value_iteration(&b, &f, &fitted_options(cfg, f.dim(), None))?;
    let part = fitted_value_iteration(&b, &f, &fitted_options(cfg, f.dim(), Some(mask)))?;
    let full_cost = policy_evaluation(&b, &full.policy, Retain::Initial)?;
    let part_cost = policy_evaluation(&b, &part.policy, Retain::Initial)?;
    let census = classify_initial_states(&b)?;
    let rows: Vec<PartitionRow> = (0..states.len())
        .filter(|&i| census.greedy_suboptimal[i])
        .map(|i| PartitionRow {
            ax: states[i].offset.x,
            ay: states[i].offset.y,
            prev: move_symbol(&states[i]),
            optimal: census.optimal[i],
            greedy: census.greedy[i],
            full: full_cost.initial()[i],
            partition: part_cost.initial()[i],
        })
        .collect();
    exp.write_rows("partition.csv", &rows)?;
    let full_ok = rows.iter().filter(|r| optimal_within(r.full, r.optimal)).count();
    let part_ok = rows.iter().filter(|r| optimal_within(r.partition, r.optimal)).count();
    exp.finish(json!({
        "states": states.len(),
        "training_states": trained,
        "training_fraction": trained as f64 / states.len() as f64,
        "greedy_suboptimal": rows.len(),
        "full_optimal": full_ok,
        "partition_optimal": part_ok,
        "full_converged_periods": full.reports.iter().filter(|r| r.converged).count(),
        "partition_converged_periods": part.reports.iter().filter(|r| r.converged).count(),
    }))
}

pub fn codec_dict(cfg: &mut Config, factor: Option<usize>) -> Result<Value> {
    let factor = match (factor, cfg.representation.kind) {
        (Some(k), _) | (None, Representation::Sparse(k)) => k,
        (None, other) => bail!("representation {other} has no dictionary; pass --factor"),
    };
    cfg.representation.kind = Representation::Sparse(factor);
    let exp = Experiment::create(cfg, "codec-dict")?;
    let r = &cfg.representation;
    let seed = r.dictionary_seed.unwrap_or(cfg.seed);
    let dict = GaborDictionary::sample(seed, r.patch_side, factor, &r.copula)?;
    dict.save(&exp.path("dictionary.bin"))?;
    dict.write_params_csv(BufWriter::new(fs::File::create(exp.path("atoms.csv"))?))?;
    exp.finish(json!({
        "patch_side": dict.side(),
        "dim": dict.dim(),
        "atoms": dict.atoms(),
        "overcompleteness": dict.overcompleteness(),
        "dictionary_seed": seed,
    }))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

/// Row-major `f64le` matrix with a `.hdr` sidecar.
fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    fs::write(sidecar(path), format!("format = f64le\nrows = {rows}\ncols = {cols}\n"))?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    container::write_f64s(&mut w, data)?;
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let header = fs::read_to_string(sidecar(path)).with_context(|| format!("reading sidecar of {}", path.display()))?;
    let field = |name: &str| -> Result<usize> {
        header
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == name)
            .with_context(|| format!("sidecar has no {name}"))?
            .1
            .trim()
            .parse()
            .with_context(|| format!("bad {name} in sidecar"))
    };
    let (rows, cols) = (field("rows")?, field("cols")?);
    let data = container::read_f64s(&mut BufReader::new(fs::File::open(path)?), rows * cols)?;
    Ok((rows, cols, data))
}

#[derive(Serialize)]
struct EncodeRow {
    patch: usize,
    image: usize,
    row: usize,
    col: usize,
    iterations: usize,
    relative_residual: f64,
}

pub fn codec_encode(cfg: &mut Config, dictionary: &Path) -> Result<Value> {
    let dict = GaborDictionary::load(dictionary)?;
    cfg.representation.patch_side = dict.side();
    let exp = Experiment::create(cfg, "codec-encode")?;
    let patches = library(cfg)?;
    let tol = cfg.representation.encode_tol;
    let cap = cfg.representation.encode_max_iter.unwrap_or(50 * dict.atoms());
    let codes = (0..patches.len())
        .into_par_iter()
        .map(|i| encode(&dict, patches.patch(i), tol, cap))
        .collect::<trackbench::Result<Vec<_>>>()?;
    let mut flat = Vec::with_capacity(codes.len() * dict.atoms());
    let mut rows = Vec::with_capacity(codes.len());
    for (i, (c, o)) in codes.iter().zip(patches.origins()).enumerate() {
        flat.extend_from_slice(&c.coefficients);
        let norm = patches.patch(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        rows.push(EncodeRow {
            patch: i,
            image: o.image,
            row: o.row,
            col: o.col,
            iterations: c.report.iterations,
            relative_residual: if norm > 0.0 { c.residual_norm / norm } else { c.residual_norm },
        });
    }
    write_matrix(&exp.path("codes.f64"), codes.len(), dict.atoms(), &flat)?;
    exp.write_rows("encode.csv", &rows)?;
    let worst = rows.iter().map(|r| r.relative_residual).fold(0.0, f64::max);
    exp.finish(json!({
        "patches": rows.len(),
        "atoms": dict.atoms(),
        "max_relative_residual": worst,
        "mean_iterations": mean(&rows.iter().map(|r| r.iterations as f64).collect::<Vec<_>>()),
    }))
}

pub fn codec_decode(cfg: &mut Config, dictionary: &Path, codes: &Path) -> Result<Value> {
    let dict = GaborDictionary::load(dictionary)?;
    let (rows, cols, data) = read_matrix(codes)?;
    ensure!(cols == dict.atoms(), "codes have {cols} columns, dictionary has {} atoms", dict.atoms());
    let exp = Experiment::create(cfg, "codec-decode")?;
    let patches = data
        .par_chunks(cols.max(1))
        .map(|c| decode(&dict, c))
        .collect::<trackbench::Result<Vec<_>>>()?;
    let a = dict.side();
    write_matrix(&exp.path("patches.f64"), rows, a * a, &patches.concat())?;
    // a square number of patches is tiled back in raster order
    let per_side = (rows as f64).sqrt().round() as usize;
    let tiled = per_side * per_side == rows && rows > 0;
    if tiled {
        let side = per_side * a;
        let mut pixels = vec![0.0; side * side];
        for (i, p) in patches.iter().enumerate() {
            let (r0, c0) = ((i / per_side) * a, (i % per_side) * a);
            for r in 0..a {
                pixels[(r0 + r) * side + c0..(r0 + r) * side + c0 + a].copy_from_slice(&p[r * a..(r + 1) * a]);
            }
        }
        let img = Image::new("decoded", side, pixels)?;
        write_raw_image(&img, &exp.path("decoded.f64"))?;
        write_pgm16(&img, &exp.path("decoded.pgm"))?;
    }
    exp.finish(json!({ "patches": rows, "patch_side": a, "tiled": tiled }))
}

pub fn images_synth(cfg: &mut Config) -> Result<Value> {
    let ImageSource::Synthetic { seed } = cfg.images.source else {
        bail!("images synth needs a synthetic image source");
    };
    let exp = Experiment::create(cfg, "images")?;
    let images = load_or_synthesize_images(&cfg.images.source, cfg.images.count, cfg.images.side)?;
    let mut files = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let stem = format!("image_{i:03}");
        write_pgm16(img, &exp.path(&format!("{stem}.pgm")))?;
        write_raw_image(img, &exp.path(&format!("{stem}.f64")))?;
        files.push(format!("{stem}.f64"));
    }
    exp.finish(json!({ "seed": seed, "side": cfg.images.side, "files": files }))
}

/// Source and side of a single square image file.
pub fn image_source(path: &Path) -> Result<(ImageSource, usize)> {
    let img = load_image(path, None).with_context(|| format!("reading {}", path.display()))?;
    let source = ImageSource::Files {
        paths: vec![path.to_path_buf()],
    };
    Ok((source, img.side))
}
