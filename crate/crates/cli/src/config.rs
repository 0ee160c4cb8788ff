//! Versioned TOML experiment configuration.
//!
//! Every field has a default, so an empty file (or no file) is valid.
//! Benchmark fields left unset take the defaults of the experiment being
//! run; the resolved values are what ends up in `config.snapshot`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use trackbench::codec::{CopulaConfig, ImageSource, Representation, RepresentationOptions, WhitenOptions};
use trackbench::dynamics::{Coord, Move};
use trackbench::mdp::{BenchmarkSpec, BoundaryRule, PatchOrder, State, DEFAULT_CONTROLS};
use trackbench::stats::{DEFAULT_BANDWIDTH, DEFAULT_GRID};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub name: Option<String>,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub benchmark: BenchmarkConfig,
    pub images: ImagesConfig,
    pub representation: RepresentationConfig,
    pub fit: FitConfig,
    pub horizon: HorizonConfig,
    pub census: CensusConfig,
    pub capacity: CapacityConfig,
    pub state_sweep: StateSweepConfig,
    pub partition: PartitionConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            name: None,
            seed: 0,
            out: PathBuf::from("runs"),
            threads: 0,
            benchmark: BenchmarkConfig::default(),
            images: ImagesConfig::default(),
            representation: RepresentationConfig::default(),
            fit: FitConfig::default(),
            horizon: HorizonConfig::default(),
            census: CensusConfig::default(),
            capacity: CapacityConfig::default(),
            state_sweep: StateSweepConfig::default(),
            partition: PartitionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub radius: Option<u32>,
    pub p: Option<f64>,
    pub horizon: Option<usize>,
    pub boundary: Option<BoundaryRule>,
    pub controls: Option<Vec<Coord>>,
}

/// Per-experiment fallbacks for unset benchmark fields.
#[derive(Clone, Copy, Debug)]
pub struct BenchmarkDefaults {
    pub radius: u32,
    pub p: f64,
    pub horizon: usize,
    pub boundary: BoundaryRule,
}

impl BenchmarkConfig {
    /// Fills unset fields from `d`.
    pub fn resolve(&mut self, d: BenchmarkDefaults) {
        self.radius.get_or_insert(d.radius);
        self.p.get_or_insert(d.p);
        self.horizon.get_or_insert(d.horizon);
        self.boundary.get_or_insert(d.boundary);
        self.controls.get_or_insert_with(|| DEFAULT_CONTROLS.to_vec());
    }

    /// The spec described by the resolved fields.
    pub fn spec(&self) -> Result<BenchmarkSpec> {
        let (Some(radius), Some(p), Some(horizon)) = (self.radius, self.p, self.horizon) else {
            bail!("benchmark config is not resolved");
        };
        let mut spec = BenchmarkSpec::new(radius, p, horizon)?.with_boundary(self.boundary.unwrap_or_default());
        if let Some(c) = &self.controls {
            spec.controls = c.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagesConfig {
    #[serde(flatten)]
    pub source: ImageSource,
    pub count: usize,
    pub side: usize,
}

impl Default for ImagesConfig {
    fn default() -> Self {
        Self {
            source: ImageSource::Synthetic { seed: 0 },
            count: 1,
            side: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentationConfig {
    pub kind: Representation,
    pub patch_side: usize,
    /// Patch-to-state assignment: raster order unless a permutation seed is
    /// given.
    pub permutation_seed: Option<u64>,
    /// Defaults to the global seed.
    pub dictionary_seed: Option<u64>,
    pub copula: CopulaConfig,
    pub whiten: WhitenOptions,
    pub encode_tol: f64,
    pub encode_max_iter: Option<usize>,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        let o = RepresentationOptions::default();
        Self {
            kind: Representation::Sparse(4),
            patch_side: 8,
            permutation_seed: None,
            dictionary_seed: None,
            copula: o.copula,
            whiten: o.whiten,
            encode_tol: o.encode_tol,
            encode_max_iter: o.encode_max_iter,
        }
    }
}

impl RepresentationConfig {
    pub fn options(&self, seed: u64) -> RepresentationOptions {
        RepresentationOptions {
            dictionary_seed: self.dictionary_seed.unwrap_or(seed),
            copula: self.copula,
            whiten: self.whiten,
            encode_tol: self.encode_tol,
            encode_max_iter: self.encode_max_iter,
        }
    }

    pub fn order(&self) -> PatchOrder {
        match self.permutation_seed {
            Some(seed) => PatchOrder::Permuted { seed },
            None => PatchOrder::Raster,
        }
    }
}

/// LSQR settings for value fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub tol: f64,
    /// `50 x columns` when unset.
    pub max_iter: Option<usize>,
    pub warm_start: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: None,
            warm_start: false,
        }
    }
}

impl FitConfig {
    pub fn lsqr(&self, columns: usize) -> trackbench::approx::LsqrOptions {
        trackbench::approx::LsqrOptions::new(self.tol, self.max_iter.unwrap_or(50 * columns))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonConfig {
    pub max: usize,
    pub p: Vec<f64>,
    pub optimal_start: String,
    pub greedy_start: String,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            max: 30,
            p: vec![0.0, 0.4, 1.0],
            optimal_start: "0,1,S".into(),
            greedy_start: "0,0,S".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CensusConfig {
    pub bandwidth: f64,
    pub grid: usize,
    /// Adds a fitted-VI cost column (clamp boundary only).
    pub fitted: bool,
}

impl Default for CensusConfig {
    fn default() -> Self {
        Self {
            bandwidth: DEFAULT_BANDWIDTH,
            grid: DEFAULT_GRID,
            fitted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacityConfig {
    pub representations: Vec<Representation>,
    pub counts: Vec<usize>,
    pub trials: usize,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            representations: vec![Representation::Raw, Representation::Whitened, Representation::Sparse(4)],
            counts: vec![25, 50, 60, 70, 100, 150, 200, 250, 300],
            trials: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateSweepConfig {
    /// State counts; each must equal `3 (2R + 1)^2` for some radius.
    pub states: Vec<usize>,
}

impl Default for StateSweepConfig {
    fn default() -> Self {
        Self {
            states: vec![27, 75, 147, 243, 363, 675, 1083],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionRule {
    /// Train on states with at least one non-negative offset coordinate.
    #[default]
    NonNegative,
    All,
}

impl PartitionRule {
    pub fn admits(self, s: &State) -> bool {
        match self {
            PartitionRule::NonNegative => s.offset.x >= 0 || s.offset.y >= 0,
            PartitionRule::All => true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub rule: PartitionRule,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            bail!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Parses `x,y,M` with `M` one of `S`, `D`, `R`.
pub fn parse_state(s: &str) -> Result<State> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [x, y, m] = parts[..] else {
        bail!("state {s:?} is not of the form x,y,M");
    };
    let mut chars = m.chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        bail!("move {m:?} is not a single symbol");
    };
    let prev = Move::from_symbol(c).with_context(|| format!("unknown move {m:?}"))?;
    Ok(State::new(x.parse()?, y.parse()?, prev))
}
