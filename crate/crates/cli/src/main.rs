//! `trackbench` experiment driver.

mod config;
mod output;
mod run;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use trackbench::codec::{ImageSource, Representation};
use trackbench::mdp::BoundaryRule;

use config::{Config, PartitionRule};
use run::PolicyKind;

#[derive(Parser)]
#[command(name = "trackbench", version, about = "Target-tracking MDP benchmark experiments")]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for experiment outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Experiment directory name under `--out`.
    #[arg(long, global = true)]
    name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct BenchArgs {
    #[arg(long)]
    radius: Option<u32>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// `unbounded` or `clamp`.
    #[arg(long)]
    boundary: Option<BoundaryRule>,
}

#[derive(Args, Default)]
struct ReprArgs {
    /// raw, upscaled:K, whitened, sparse:K or onehot.
    #[arg(long)]
    representation: Option<Representation>,
    #[arg(long)]
    patch_side: Option<usize>,
    #[arg(long)]
    permutation_seed: Option<u64>,
    #[arg(long)]
    dictionary_seed: Option<u64>,
    #[arg(long)]
    image_count: Option<usize>,
    #[arg(long)]
    image_side: Option<usize>,
    /// Image files to use instead of synthetic images.
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Relative residual for value fits.
    #[arg(long)]
    fit_tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact dynamic programming or greedy evaluation; writes a value/policy snapshot.
    Solve {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long, value_enum, default_value = "optimal")]
        policy: PolicyKind,
        /// Keep every period in the snapshot, not just the first.
        #[arg(long)]
        all_periods: bool,
        /// Initial states `x,y,M` whose expected cost goes into the summary.
        #[arg(long)]
        start: Vec<String>,
    },
    /// Optimal and greedy cost from the standard starts for horizons 1..=max.
    Horizon {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long)]
        max: Option<usize>,
        /// Comma-separated chain parameters.
        #[arg(long, value_delimiter = ',')]
        probs: Option<Vec<f64>>,
        #[arg(long)]
        optimal_start: Option<String>,
        #[arg(long)]
        greedy_start: Option<String>,
    },
    /// Per-initial-state optimal and greedy costs plus the cost-difference density.
    Census {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        repr: ReprArgs,
        #[arg(long)]
        bandwidth: Option<f64>,
        #[arg(long)]
        grid: Option<usize>,
        /// Also evaluate the fitted value iteration policy.
        #[arg(long)]
        fitted: bool,
    },
    /// Interpolation success versus number of fitted values, per representation.
    Capacity {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        repr: ReprArgs,
        #[arg(long, value_delimiter = ',')]
        representations: Option<Vec<Representation>>,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Fitted value iteration cost against exact references over benchmark sizes.
    StateSweep {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        repr: ReprArgs,
        #[arg(long, value_delimiter = ',')]
        states: Option<Vec<usize>>,
    },
    /// Fitted value iteration trained on a subset of states.
    Partition {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        repr: ReprArgs,
        #[arg(long, value_enum)]
        rule: Option<PartitionRule>,
    },
    /// Gabor dictionaries and sparse codes.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Test images.
    #[command(subcommand)]
    Images(ImagesCommand),
}

#[derive(Subcommand)]
enum CodecCommand {
    /// Samples a dictionary.
    Dict {
        #[command(flatten)]
        repr: ReprArgs,
        /// Overcompleteness; atoms = factor x patch_side^2.
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Encodes every patch of the configured images, or of `--image`.
    Encode {
        #[command(flatten)]
        repr: ReprArgs,
        #[arg(long)]
        dictionary: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Reconstructs patches from codes.
    Decode {
        #[arg(long)]
        dictionary: PathBuf,
        #[arg(long)]
        codes: PathBuf,
    },
}

#[derive(Subcommand)]
enum ImagesCommand {
    /// Writes synthetic 1/f images as 16-bit PGM and raw f64.
    Synth {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
    },
}

impl BenchArgs {
    fn apply(&self, cfg: &mut Config) {
        let b = &mut cfg.benchmark;
        b.radius = self.radius.or(b.radius);
        b.p = self.p.or(b.p);
        b.horizon = self.horizon.or(b.horizon);
        b.boundary = self.boundary.or(b.boundary);
    }
}

impl ReprArgs {
    fn apply(&self, cfg: &mut Config) {
        let r = &mut cfg.representation;
        if let Some(k) = self.representation {
            r.kind = k;
        }
        if let Some(a) = self.patch_side {
            r.patch_side = a;
        }
        r.permutation_seed = self.permutation_seed.or(r.permutation_seed);
        r.dictionary_seed = self.dictionary_seed.or(r.dictionary_seed);
        let i = &mut cfg.images;
        if let Some(n) = self.image_count {
            i.count = n;
        }
        if let Some(s) = self.image_side {
            i.side = s;
        }
        if !self.images.is_empty() {
            i.source = ImageSource::Files {
                paths: self.images.clone(),
            };
            if self.image_count.is_none() {
                i.count = self.images.len();
            }
        }
        if let Some(t) = self.fit_tol {
            cfg.fit.tol = t;
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.name = cli.name.clone().or(cfg.name);
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }

    let summary = match &cli.command {
        Command::Solve {
            bench,
            policy,
            all_periods,
            start,
        } => {
            bench.apply(&mut cfg);
            run::solve(&mut cfg, *policy, *all_periods, start)?
        }
        Command::Horizon {
            bench,
            max,
            probs,
            optimal_start,
            greedy_start,
        } => {
            bench.apply(&mut cfg);
            let h = &mut cfg.horizon;
            if let Some(m) = max.or(bench.horizon) {
                h.max = m;
            }
            if let Some(p) = probs.clone().or(bench.p.map(|p| vec![p])) {
                h.p = p;
            }
            if let Some(s) = optimal_start {
                h.optimal_start = s.clone();
            }
            if let Some(s) = greedy_start {
                h.greedy_start = s.clone();
            }
            run::horizon(&mut cfg)?
        }
        Command::Census {
            bench,
            repr,
            bandwidth,
            grid,
            fitted,
        } => {
            bench.apply(&mut cfg);
            repr.apply(&mut cfg);
            let c = &mut cfg.census;
            c.bandwidth = bandwidth.unwrap_or(c.bandwidth);
            c.grid = grid.unwrap_or(c.grid);
            c.fitted |= *fitted;
            run::census(&mut cfg)?
        }
        Command::Capacity {
            bench,
            repr,
            representations,
            counts,
            trials,
        } => {
            bench.apply(&mut cfg);
            repr.apply(&mut cfg);
            let c = &mut cfg.capacity;
            if let Some(r) = representations {
                c.representations = r.clone();
            }
            if let Some(n) = counts {
                c.counts = n.clone();
            }
            c.trials = trials.unwrap_or(c.trials);
            run::capacity(&mut cfg)?
        }
        Command::StateSweep { bench, repr, states } => {
            bench.apply(&mut cfg);
            repr.apply(&mut cfg);
            if let Some(s) = states {
                cfg.state_sweep.states = s.clone();
            }
            run::state_sweep(&mut cfg)?
        }
        Command::Partition { bench, repr, rule } => {
            bench.apply(&mut cfg);
            repr.apply(&mut cfg);
            cfg.partition.rule = rule.unwrap_or(cfg.partition.rule);
            run::partition(&mut cfg)?
        }
        Command::Codec(CodecCommand::Dict { repr, factor }) => {
            repr.apply(&mut cfg);
            run::codec_dict(&mut cfg, *factor)?
        }
        Command::Codec(CodecCommand::Encode {
            repr,
            dictionary,
            image,
            tol,
        }) => {
            repr.apply(&mut cfg);
            if let Some(path) = image {
                let (source, side) = run::image_source(path)?;
                cfg.images.source = source;
                cfg.images.count = 1;
                cfg.images.side = side;
            }
            if let Some(t) = tol {
                cfg.representation.encode_tol = *t;
            }
            run::codec_encode(&mut cfg, dictionary)?
        }
        Command::Codec(CodecCommand::Decode { dictionary, codes }) => run::codec_decode(&mut cfg, dictionary, codes)?,
        Command::Images(ImagesCommand::Synth { count, side }) => {
            let i = &mut cfg.images;
            i.count = count.unwrap_or(i.count);
            i.side = side.unwrap_or(i.side);
            if let Some(seed) = cli.seed {
                i.source = ImageSource::Synthetic { seed };
            }
            run::images_synth(&mut cfg)?
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
