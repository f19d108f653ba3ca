//! Command line front end. Every subcommand resolves to a [`RunConfig`],
//! runs it, writes its artifacts under `--out-dir` and records a
//! [`RunManifest`] from which the run can be replayed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bathtub::{self, FlockingOptions, Theorem2Options};
use crate::coulomb::{self, MinimizeOptions, SubsetStrategy};
use crate::ed::{self, GapOptions};
use crate::error::{LabError, Result};
use crate::model::{
    CorrelationFactor, PlasmaParams, Point, PointConfiguration, PotentialSpec, QuasiHoleSet, RadialPair,
    ScalarField, scaled_potentials,
};
use crate::sampler::{self, ChainConfig};
use crate::screening::{self, ScreeningOptions};

/// Environment variable overriding the seed of a configuration.
pub const SEED_ENV: &str = "LAUGHLIN_LAB_SEED";

#[derive(Parser, Debug)]
#[command(name = "laughlin-lab", version, about = "Laughlin-state plasma, screening, bathtub and pseudo-potential toolkit")]
pub struct Cli {
    /// Directory receiving every output file and the manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed; overrides both the configuration and the environment.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// One-body density of the plasma by Metropolis sampling.
    SampleDensity(SampleArgs),
    /// Coarse-grained maximum density against the cap, for several hole sets.
    Incompressibility(IncompressibilityArgs),
    /// Charge deficit around quasi-holes, relative to a hole-free run.
    Quasihole(SampleArgs),
    /// Minimizes the cleaned Coulomb energy.
    Minimize(MinimizeArgs),
    /// Exclusion-rule audit and disk counts of a configuration.
    Audit(AuditArgs),
    /// Screening region and potential of a point set.
    Screening(ScreeningArgs),
    /// Bathtub fill (or the flocking problem when lambda is nonzero).
    Bathtub(BathtubArgs),
    /// Flocking problem by Frank-Wolfe.
    Flocking(BathtubArgs),
    /// Trial-state energy against the flocking energy.
    Theorem2(Theorem2Args),
    /// Spectral gap of the pseudo-potential Hamiltonian.
    Gap(GapArgs),
    /// Midpoint-substitution action against the m = 0 matrix.
    DeltaCheck(DeltaArgs),
    /// Re-runs a manifest and compares output hashes.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// JSON configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Primary output file name (inside --out-dir).
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct PlasmaArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub ell: Option<u32>,
    #[arg(long)]
    pub b: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub plasma: PlasmaArgs,
    /// Quasi-holes as "x,y,m;x,y,m".
    #[arg(long)]
    pub qh: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
}

#[derive(Args, Debug)]
pub struct IncompressibilityArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    /// Additional hole set, "x,y,m;...", repeatable.
    #[arg(long = "hole-set")]
    pub hole_sets: Vec<String>,
}

#[derive(Args, Debug)]
pub struct MinimizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub qh: Option<String>,
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Configuration JSON (list of [x, y]); otherwise one is minimized.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Grid spacing for the screening regions.
    #[arg(long)]
    pub h: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ScreeningArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Source points JSON (list of [x, y]).
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub h: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BathtubArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub plasma: PlasmaArgs,
    /// External potential: constant, quadratic, mexican-hat or double-well.
    #[arg(long)]
    pub v: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub spacing: Option<f64>,
}

#[derive(Args, Debug)]
pub struct Theorem2Args {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub plasma: PlasmaArgs,
    #[arg(long)]
    pub v: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GapArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub ell: Option<u32>,
    /// Eigenvalues per sector.
    #[arg(long)]
    pub k: Option<usize>,
    /// Highest momentum scanned (default: the Laughlin momentum).
    #[arg(long)]
    pub l_max: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DeltaArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Particle numbers, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub vectors: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest: PathBuf,
}

fn default_plasma() -> PlasmaParams {
    PlasmaParams { b: 1.0, ell: 3, n: 64 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub params: PlasmaParams,
    pub quasiholes: QuasiHoleSet,
    pub chain: ChainConfig,
    /// Grid half width in droplet radii.
    pub extent: f64,
    /// Histogram cell size; default a quarter of the mean spacing.
    pub spacing: Option<f64>,
    /// Coarse-graining radius; default three mean spacings.
    pub coarse_radius: Option<f64>,
    /// Radius of the disk around each hole over which the deficit is
    /// integrated; default half the droplet radius.
    pub probe_radius: Option<f64>,
    pub out: String,
    pub report: String,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            params: default_plasma(),
            quasiholes: QuasiHoleSet::default(),
            chain: ChainConfig::new(20_000, 2_000, 0),
            extent: 1.5,
            spacing: None,
            coarse_radius: None,
            probe_radius: None,
            out: "density.csv".into(),
            report: "density_report.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IncompressibilityConfig {
    pub sample: SampleConfig,
    /// Runs in addition to `sample.quasiholes`.
    pub hole_sets: Vec<QuasiHoleSet>,
    pub report: String,
}

impl Default for IncompressibilityConfig {
    fn default() -> Self {
        IncompressibilityConfig { sample: SampleConfig::default(), hole_sets: Vec::new(), report: "incompressibility.json".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimizeConfig {
    pub n: usize,
    /// Quasi-holes in the unit-density frame.
    pub quasiholes: QuasiHoleSet,
    pub options: MinimizeOptions,
    pub out: String,
    pub report: String,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        MinimizeConfig {
            n: 50,
            quasiholes: QuasiHoleSet::default(),
            options: MinimizeOptions::for_n(50, 0),
            out: "config.json".into(),
            report: "minimize_report.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub anchor: usize,
    pub cluster_size: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig { anchor: 0, cluster_size: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    /// Configuration to audit; when absent one is minimized from `minimize`.
    pub points: Option<Vec<Point>>,
    pub minimize: MinimizeConfig,
    pub strategy: SubsetStrategy,
    pub screening: ScreeningOptions,
    /// Plants a violation before auditing.
    pub plant: Option<PlantConfig>,
    /// Disk radii for the counts `N(a, R)`.
    pub count_radii: Vec<f64>,
    pub report: String,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            points: None,
            minimize: MinimizeConfig::default(),
            strategy: SubsetStrategy::default(),
            screening: ScreeningOptions::default(),
            plant: None,
            count_radii: vec![2.0, 3.0, 4.0],
            report: "audit.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportCheckConfig {
    pub center: Point,
    pub radius: f64,
    #[serde(default = "default_support_constant")]
    pub constant: f64,
}

fn default_support_constant() -> f64 {
    screening::DEFAULT_SUPPORT_CONSTANT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningConfig {
    pub points: Vec<Point>,
    pub options: ScreeningOptions,
    /// Whether to compute and write the potential field.
    pub potential: bool,
    pub support: Option<SupportCheckConfig>,
    pub out: String,
    pub phi: String,
    pub report: String,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        ScreeningConfig {
            points: Vec::new(),
            options: ScreeningOptions::default(),
            potential: true,
            support: None,
            out: "region.json".into(),
            phi: "phi.csv".into(),
            report: "screening_report.json".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BathtubConfig {
    pub params: PlasmaParams,
    pub potential: PotentialSpec,
    /// Cell size; default an eighth of the mean spacing.
    pub spacing: Option<f64>,
    /// Grid half width in units of the radius of the full disk of mass N.
    pub extent: f64,
    pub flocking: FlockingOptions,
    pub out: String,
    pub report: String,
}

fn default_potential() -> PotentialSpec {
    PotentialSpec { v: ScalarField::Quadratic { coefficient: 1.0 }, w: RadialPair::Gaussian { amplitude: 1.0, width: 1.0 }, lambda: 0.0 }
}

impl Default for BathtubConfig {
    fn default() -> Self {
        BathtubConfig {
            params: PlasmaParams { b: 1.0, ell: 2, n: 64 },
            potential: default_potential(),
            spacing: None,
            extent: 1.3,
            flocking: FlockingOptions::default(),
            out: "profile.csv".into(),
            report: "flocking.json".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem2Config {
    pub params: PlasmaParams,
    pub potential: PotentialSpec,
    pub seed: u64,
    /// Full harness options; default the desk budget for `params` and `seed`.
    pub options: Option<Theorem2Options>,
    pub report: String,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Theorem2Config {
            params: PlasmaParams { b: 1.0, ell: 2, n: 64 },
            potential: default_potential(),
            seed: 0,
            options: None,
            report: "theorem2.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub n: usize,
    pub ell: u32,
    pub k: usize,
    pub l_max: Option<usize>,
    pub seed: u64,
    pub out: String,
    pub report: String,
}

impl Default for GapConfig {
    fn default() -> Self {
        GapConfig { n: 6, ell: 2, k: 1, l_max: None, seed: 0x1a2c_2005, out: "gaps.csv".into(), report: "gap_summary.json".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaConfig {
    pub n: Vec<usize>,
    /// Random vectors per particle number.
    pub vectors: usize,
    /// Total degree of the random polynomials.
    pub degree: usize,
    pub seed: u64,
    /// Agreement required after calibration.
    pub tol: f64,
    pub report: String,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        DeltaConfig { n: vec![2, 3, 4], vectors: 20, degree: 6, seed: 0, tol: 1e-10, report: "delta_check.json".into() }
    }
}

/// A fully resolved run, as stored in manifests.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "config", rename_all = "kebab-case")]
pub enum RunConfig {
    SampleDensity(SampleConfig),
    Incompressibility(IncompressibilityConfig),
    Quasihole(SampleConfig),
    Minimize(MinimizeConfig),
    Audit(AuditConfig),
    Screening(ScreeningConfig),
    Bathtub(BathtubConfig),
    Flocking(BathtubConfig),
    Theorem2(Theorem2Config),
    Gap(GapConfig),
    DeltaCheck(DeltaConfig),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::SampleDensity(_) => "sample-density",
            RunConfig::Incompressibility(_) => "incompressibility",
            RunConfig::Quasihole(_) => "quasihole",
            RunConfig::Minimize(_) => "minimize",
            RunConfig::Audit(_) => "audit",
            RunConfig::Screening(_) => "screening",
            RunConfig::Bathtub(_) => "bathtub",
            RunConfig::Flocking(_) => "flocking",
            RunConfig::Theorem2(_) => "theorem2",
            RunConfig::Gap(_) => "gap",
            RunConfig::DeltaCheck(_) => "delta-check",
        }
    }

    /// The seed driving the run, if it has one.
    pub fn seed(&self) -> Option<u64> {
        match self {
            RunConfig::SampleDensity(c) | RunConfig::Quasihole(c) => Some(c.chain.seed),
            RunConfig::Incompressibility(c) => Some(c.sample.chain.seed),
            RunConfig::Minimize(c) => Some(c.options.seed),
            RunConfig::Audit(c) => Some(c.strategy.seed),
            RunConfig::Theorem2(c) => Some(c.seed),
            RunConfig::Gap(c) => Some(c.seed),
            RunConfig::DeltaCheck(c) => Some(c.seed),
            RunConfig::Screening(_) | RunConfig::Bathtub(_) | RunConfig::Flocking(_) => None,
        }
    }

    fn set_seed(&mut self, seed: u64) {
        match self {
            RunConfig::SampleDensity(c) | RunConfig::Quasihole(c) => c.chain.seed = seed,
            RunConfig::Incompressibility(c) => c.sample.chain.seed = seed,
            RunConfig::Minimize(c) => c.options.seed = seed,
            RunConfig::Audit(c) => {
                c.strategy.seed = seed;
                c.minimize.options.seed = seed;
            }
            RunConfig::Theorem2(c) => c.seed = seed,
            RunConfig::Gap(c) => c.seed = seed,
            RunConfig::DeltaCheck(c) => c.seed = seed,
            RunConfig::Screening(_) | RunConfig::Bathtub(_) | RunConfig::Flocking(_) => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the canonical JSON of `run`.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    pub threads: usize,
    pub wall_time_s: f64,
    pub outputs: Vec<OutputFile>,
    pub run: RunConfig,
}

impl RunManifest {
    pub fn file_name(subcommand: &str) -> String {
        format!("{subcommand}.manifest.json")
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical (key-sorted, compact) JSON form of a run.
pub fn config_hash(run: &RunConfig) -> Result<String> {
    let value = serde_json::to_value(run)?;
    Ok(sha256_hex(&serde_json::to_vec(&value)?))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| LabError::invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LabError::invalid(format!("{}: {e}", path.display())))
}

fn load<T: Default + for<'de> Deserialize<'de>>(common: &CommonArgs) -> Result<T> {
    match &common.config {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

fn apply_plasma(p: &mut PlasmaParams, a: &PlasmaArgs) {
    if let Some(n) = a.n {
        p.n = n;
    }
    if let Some(ell) = a.ell {
        p.ell = ell;
    }
    if let Some(b) = a.b {
        p.b = b;
    }
}

fn scalar_field(name: &str) -> Result<ScalarField> {
    Ok(match name {
        "constant" => ScalarField::Constant { value: 0.0 },
        "quadratic" => ScalarField::Quadratic { coefficient: 1.0 },
        "mexican-hat" => ScalarField::MexicanHat { coefficient: 1.0, a: 2.125 },
        "double-well" => ScalarField::DoubleWell { coefficient: 1.0, d: 1.5 },
        other => return Err(LabError::invalid(format!("unknown potential '{other}'"))),
    })
}

fn sample_config(a: &SampleArgs) -> Result<SampleConfig> {
    let mut c: SampleConfig = load(&a.common)?;
    apply_plasma(&mut c.params, &a.plasma);
    if let Some(q) = &a.qh {
        c.quasiholes = QuasiHoleSet::parse_triples(q)?;
    }
    if let Some(s) = a.steps {
        c.chain.steps = s;
    }
    if let Some(s) = a.burn_in {
        c.chain.burn_in = s;
    }
    if let Some(s) = a.chains {
        c.chain.chains = s;
    }
    if let Some(o) = &a.common.out {
        c.out = o.clone();
    }
    Ok(c)
}

fn bathtub_config(a: &BathtubArgs) -> Result<BathtubConfig> {
    let mut c: BathtubConfig = load(&a.common)?;
    apply_plasma(&mut c.params, &a.plasma);
    if let Some(v) = &a.v {
        c.potential.v = scalar_field(v)?;
    }
    if let Some(l) = a.lambda {
        c.potential.lambda = l;
    }
    if a.spacing.is_some() {
        c.spacing = a.spacing;
    }
    if let Some(o) = &a.common.out {
        c.report = o.clone();
    }
    Ok(c)
}

/// Builds the resolved configuration of a parsed command (not `replay`).
pub fn resolve(command: &Command) -> Result<RunConfig> {
    Ok(match command {
        Command::SampleDensity(a) => RunConfig::SampleDensity(sample_config(a)?),
        Command::Quasihole(a) => {
            let mut c = sample_config(a)?;
            if a.common.config.is_none() {
                c.report = "quasihole.json".into();
            }
            RunConfig::Quasihole(c)
        }
        Command::Incompressibility(a) => {
            let mut c: IncompressibilityConfig = load(&a.sample.common)?;
            // flags act on the nested sample configuration
            let nested = SampleArgs {
                common: CommonArgs { config: None, out: a.sample.common.out.clone() },
                plasma: PlasmaArgs { n: a.sample.plasma.n, ell: a.sample.plasma.ell, b: a.sample.plasma.b },
                qh: a.sample.qh.clone(),
                steps: a.sample.steps,
                burn_in: a.sample.burn_in,
                chains: a.sample.chains,
            };
            let base = std::mem::take(&mut c.sample);
            c.sample = overlay_sample(base, &nested)?;
            for s in &a.hole_sets {
                c.hole_sets.push(QuasiHoleSet::parse_triples(s)?);
            }
            RunConfig::Incompressibility(c)
        }
        Command::Minimize(a) => {
            let mut c: MinimizeConfig = load(&a.common)?;
            if let Some(n) = a.n {
                c.n = n;
                if a.common.config.is_none() {
                    c.options = MinimizeOptions::for_n(n, c.options.seed);
                }
            }
            if let Some(q) = &a.qh {
                c.quasiholes = QuasiHoleSet::parse_triples(q)?;
            }
            if let Some(r) = a.restarts {
                c.options.restarts = r;
            }
            if let Some(o) = &a.common.out {
                c.out = o.clone();
            }
            RunConfig::Minimize(c)
        }
        Command::Audit(a) => {
            let mut c: AuditConfig = load(&a.common)?;
            if let Some(p) = &a.points {
                c.points = Some(read_json(p)?);
            }
            if let Some(n) = a.n {
                c.minimize.n = n;
                c.minimize.options = MinimizeOptions::for_n(n, c.minimize.options.seed);
            }
            if let Some(h) = a.h {
                c.screening.spacing = h;
            }
            if let Some(o) = &a.common.out {
                c.report = o.clone();
            }
            RunConfig::Audit(c)
        }
        Command::Screening(a) => {
            let mut c: ScreeningConfig = load(&a.common)?;
            if let Some(p) = &a.points {
                c.points = read_json(p)?;
            }
            if let Some(h) = a.h {
                c.options.spacing = h;
            }
            if let Some(o) = &a.common.out {
                c.out = o.clone();
            }
            RunConfig::Screening(c)
        }
        Command::Bathtub(a) => RunConfig::Bathtub(bathtub_config(a)?),
        Command::Flocking(a) => RunConfig::Flocking(bathtub_config(a)?),
        Command::Theorem2(a) => {
            let mut c: Theorem2Config = load(&a.common)?;
            apply_plasma(&mut c.params, &a.plasma);
            if let Some(v) = &a.v {
                c.potential.v = scalar_field(v)?;
            }
            if let Some(l) = a.lambda {
                c.potential.lambda = l;
            }
            if let Some(o) = &a.common.out {
                c.report = o.clone();
            }
            RunConfig::Theorem2(c)
        }
        Command::Gap(a) => {
            let mut c: GapConfig = load(&a.common)?;
            if let Some(n) = a.n {
                c.n = n;
            }
            if let Some(ell) = a.ell {
                c.ell = ell;
            }
            if let Some(k) = a.k {
                c.k = k;
            }
            if a.l_max.is_some() {
                c.l_max = a.l_max;
            }
            if let Some(o) = &a.common.out {
                c.out = o.clone();
            }
            RunConfig::Gap(c)
        }
        Command::DeltaCheck(a) => {
            let mut c: DeltaConfig = load(&a.common)?;
            if let Some(n) = &a.n {
                c.n = n.clone();
            }
            if let Some(v) = a.vectors {
                c.vectors = v;
            }
            if let Some(o) = &a.common.out {
                c.report = o.clone();
            }
            RunConfig::DeltaCheck(c)
        }
        Command::Replay(_) => return Err(LabError::invalid("replay has no configuration of its own")),
    })
}

fn overlay_sample(mut c: SampleConfig, a: &SampleArgs) -> Result<SampleConfig> {
    apply_plasma(&mut c.params, &a.plasma);
    if let Some(q) = &a.qh {
        c.quasiholes = QuasiHoleSet::parse_triples(q)?;
    }
    if let Some(s) = a.steps {
        c.chain.steps = s;
    }
    if let Some(s) = a.burn_in {
        c.chain.burn_in = s;
    }
    if let Some(s) = a.chains {
        c.chain.chains = s;
    }
    if let Some(o) = &a.common.out {
        c.out = o.clone();
    }
    Ok(c)
}

/// Writes artifacts under the output directory and remembers them.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> Result<PathBuf> {
        if Path::new(name).is_absolute() || name.contains("..") {
            return Err(LabError::invalid(format!("output name '{name}' must be relative to --out-dir")));
        }
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(p)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name)?)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name)?)?);
        write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn validated_params(p: &PlasmaParams) -> Result<PlasmaParams> {
    p.validate()?;
    Ok(*p)
}

fn density_grid(c: &SampleConfig, p: &PlasmaParams) -> Result<crate::grid::Grid> {
    sampler::droplet_grid(p, c.extent, c.spacing.unwrap_or(0.25 * p.mean_spacing()))
}

#[derive(Serialize)]
struct DensitySummary {
    quasiholes: QuasiHoleSet,
    cap: f64,
    max_coarse_density: f64,
    excess_ratio: f64,
    coarse_radius: f64,
    /// Mean density over `D(0, R/2)` divided by the cap.
    plateau_ratio: f64,
    /// Largest coarse density beyond `1.3 R` divided by the cap.
    outside_ratio: f64,
    acceptance_rates: Vec<f64>,
    seed: u64,
    chains: usize,
    kept_sweeps: usize,
}

fn summarize(c: &SampleConfig, holes: &QuasiHoleSet, run: &sampler::DensityRun) -> Result<DensitySummary> {
    let p = c.params;
    let coarse_radius = c.coarse_radius.unwrap_or_else(|| sampler::default_coarse_radius(&p));
    let inc = sampler::incompressibility_check(&run.density, &p, coarse_radius)?;
    let r = p.droplet_radius();
    let cap = p.cap_density();
    let coarse = sampler::coarse_grain(&run.density, coarse_radius);
    let g = run.density.grid;
    let outside = (0..g.len()).filter(|&i| g.center_of(i).norm() > 1.3 * r).map(|i| coarse[i]).fold(0.0, f64::max);
    Ok(DensitySummary {
        quasiholes: holes.clone(),
        cap,
        max_coarse_density: inc.max_coarse_density,
        excess_ratio: inc.excess_ratio,
        coarse_radius,
        plateau_ratio: run.density.disk_mean(Point::ORIGIN, 0.5 * r) / cap,
        outside_ratio: outside / cap,
        acceptance_rates: run.acceptance.iter().map(|a| a.rate()).collect(),
        seed: c.chain.seed,
        chains: c.chain.chains,
        kept_sweeps: c.chain.kept_sweeps(),
    })
}

fn run_density(c: &SampleConfig, holes: &QuasiHoleSet) -> Result<sampler::DensityRun> {
    let p = validated_params(&c.params)?;
    let grid = density_grid(c, &p)?;
    sampler::sample_density(&p, &CorrelationFactor::quasi_holes(holes.clone()), &c.chain, &grid)
}

#[derive(Serialize)]
struct HoleDeficit {
    position: Point,
    multiplicity: u32,
    deficit: f64,
    /// `m / ell`
    expected: f64,
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

/// Runs a resolved configuration, writing its outputs into `out`.
fn execute_into(run: &RunConfig, out: &mut Outputs) -> Result<()> {
    match run {
        RunConfig::SampleDensity(c) => {
            let d = run_density(c, &c.quasiholes)?;
            out.csv(&c.out, |w| d.density.write_csv(w))?;
            let s = summarize(c, &c.quasiholes, &d)?;
            out.json(&c.report, &s)?;
        }
        RunConfig::Incompressibility(c) => {
            let mut sets = vec![c.sample.quasiholes.clone()];
            sets.extend(c.hole_sets.iter().cloned());
            let mut summaries = Vec::new();
            for (k, holes) in sets.iter().enumerate() {
                let d = run_density(&c.sample, holes)?;
                out.csv(&format!("{}_{k}.csv", stem(&c.sample.out)), |w| d.density.write_csv(w))?;
                summaries.push(summarize(&c.sample, holes, &d)?);
            }
            let worst = summaries.iter().map(|s| s.excess_ratio).fold(0.0, f64::max);
            out.json(&c.report, &serde_json::json!({ "runs": summaries, "max_excess_ratio": worst }))?;
        }
        RunConfig::Quasihole(c) => {
            if c.quasiholes.holes.is_empty() {
                return Err(LabError::invalid("quasihole needs at least one hole (--qh x,y,m)"));
            }
            let base = run_density(c, &QuasiHoleSet::default())?;
            let with = run_density(c, &c.quasiholes)?;
            let p = c.params;
            let probe = c.probe_radius.unwrap_or(0.5 * p.droplet_radius());
            let mut deficits = Vec::new();
            for h in &c.quasiholes.holes {
                deficits.push(HoleDeficit {
                    position: h.position,
                    multiplicity: h.multiplicity,
                    deficit: sampler::quasihole_deficit(&with.density, &base.density, h.position, probe)?,
                    expected: h.multiplicity as f64 / p.ell as f64,
                });
            }
            out.csv(&format!("{}_baseline.csv", stem(&c.out)), |w| base.density.write_csv(w))?;
            out.csv(&c.out, |w| with.density.write_csv(w))?;
            out.json(
                &c.report,
                &serde_json::json!({
                    "probe_radius": probe,
                    "deficits": deficits,
                    "baseline": summarize(c, &QuasiHoleSet::default(), &base)?,
                    "with_holes": summarize(c, &c.quasiholes, &with)?,
                }),
            )?;
        }
        RunConfig::Minimize(c) => {
            let r = coulomb::minimize(c.n, &CorrelationFactor::quasi_holes(c.quasiholes.clone()), &c.options)?;
            out.json(&c.out, &r.config.points)?;
            out.json(
                &c.report,
                &serde_json::json!({
                    "n": c.n,
                    "energy": r.energy,
                    "initial_energy": r.initial_energy,
                    "gradient_norm": r.gradient_norm,
                    "converged": r.converged,
                    "iterations": r.iterations,
                }),
            )?;
            if !r.converged {
                return Err(LabError::NonConvergence {
                    what: "minimize",
                    detail: format!("gradient sup-norm {:e} after {} iterations", r.gradient_norm, r.iterations),
                });
            }
        }
        RunConfig::Audit(c) => {
            let mut config = match &c.points {
                Some(p) => PointConfiguration::new(p.clone())?,
                None => {
                    let m = &c.minimize;
                    coulomb::minimize(m.n, &CorrelationFactor::quasi_holes(m.quasiholes.clone()), &m.options)?.config
                }
            };
            let planted = match &c.plant {
                Some(pl) => Some(coulomb::plant_violation(&mut config, pl.anchor, pl.cluster_size)?),
                None => None,
            };
            let audit = coulomb::audit_exclusion(&config, &c.strategy, &c.screening)?;
            // disk counts centered at the points well inside the droplet
            let bulk = (config.len() as f64 / std::f64::consts::PI).sqrt();
            let rmax = c.count_radii.iter().copied().fold(0.0, f64::max);
            let centers: Vec<Point> = config.points.iter().copied().filter(|p| p.norm() + rmax <= bulk).collect();
            let counts = coulomb::count_in_disks(&config, &centers, &c.count_radii);
            let g2 = counts.max_excess.first().map(|x| x.1);
            let bound_holds = g2.map(|g| counts.entries.iter().all(|e| e.count as f64 <= e.bound * (1.0 + g) + 1e-9));
            out.json(
                &c.report,
                &serde_json::json!({
                    "points": config.points,
                    "planted": planted,
                    "subsets": audit.subsets.len(),
                    "point_tests": audit.point_tests,
                    "violations": audit.violations,
                    "inconclusive": audit.inconclusive,
                    "count_centers": centers.len(),
                    "g_meas": counts.max_excess,
                    "count_bound_holds": bound_holds,
                }),
            )?;
        }
        RunConfig::Screening(c) => {
            if c.points.is_empty() {
                return Err(LabError::invalid("screening needs source points (--points pts.json)"));
            }
            let region = screening::screening_region(&c.points, &c.options)?;
            out.json(&c.out, &region.record())?;
            let mut report = serde_json::json!({
                "sources": c.points.len(),
                "area": region.area,
                "sweeps": region.sweeps,
                "components": region.components().len(),
                "spacing": c.options.spacing,
            });
            if c.potential {
                let field = screening::potential_field(&region);
                out.csv(&c.phi, |w| field.write_csv(w))?;
                let tol = screening::potential_tolerance(c.options.spacing, c.points.len());
                report["dichotomy"] = serde_json::to_value(screening::sign_dichotomy(&region, &field, tol))?;
            }
            if let Some(s) = &c.support {
                report["support"] = serde_json::to_value(screening::support_bound_check(&region, s.center, s.radius, s.constant)?)?;
            }
            out.json(&c.report, &report)?;
        }
        RunConfig::Bathtub(c) | RunConfig::Flocking(c) => {
            let p = validated_params(&c.params)?;
            let cap = p.cap_density();
            let mass = p.n as f64;
            let grid = bathtub::flocking_grid(mass, cap, c.extent, c.spacing.unwrap_or(0.125 * p.mean_spacing()))?;
            let pot = scaled_potentials(&c.potential, p.n)?;
            let plain = matches!(run, RunConfig::Bathtub(_)) && c.potential.lambda == 0.0;
            if plain {
                let v: Vec<f64> = (0..grid.len()).map(|i| pot.external(grid.center_of(i))).collect();
                let fill = bathtub::bathtub_fill(&grid, &v, cap, mass)?;
                out.csv(&c.out, |w| fill.profile.write_csv(w))?;
                out.json(
                    &c.report,
                    &serde_json::json!({ "method": "bathtub", "energy": fill.energy, "level": fill.level, "cap": cap, "mass": mass }),
                )?;
            } else {
                let r = bathtub::flocking_solve(&grid, &pot, cap, mass, &c.flocking)?;
                out.csv(&c.out, |w| r.density.write_csv(w))?;
                out.json(
                    &c.report,
                    &serde_json::json!({
                        "method": "flocking",
                        "energy": r.energy,
                        "multiplier": r.multiplier,
                        "iterations": r.iterations,
                        "converged": r.converged,
                        "gap": r.gap,
                        "monotone": r.monotone,
                        "lambda": c.potential.lambda,
                        "cap": cap,
                        "mass": mass,
                    }),
                )?;
                if !r.converged {
                    return Err(LabError::NonConvergence { what: "flocking", detail: format!("duality gap {:e}", r.gap) });
                }
            }
        }
        RunConfig::Theorem2(c) => {
            let p = validated_params(&c.params)?;
            let opts = c.options.clone().unwrap_or_else(|| Theorem2Options::desk(&p, c.seed));
            let r = bathtub::theorem2_harness(&p, &c.potential, &opts)?;
            out.csv(&format!("{}_profile.csv", stem(&c.report)), |w| r.flocking.density.write_csv(w))?;
            let mut v = serde_json::to_value(&r)?;
            // the profile is in the CSV; keep the report readable
            if let Some(f) = v.get_mut("flocking") {
                f["density"] = serde_json::Value::Null;
            }
            v["hole_overlap"] = serde_json::to_value(r.hole_overlap())?;
            v["window"] = serde_json::json!({ "low": 1.0 - 2.0 * r.ratio_se, "high": 1.3 });
            v["options"] = serde_json::to_value(&opts)?;
            out.json(&c.report, &v)?;
        }
        RunConfig::Gap(c) => {
            let mut o = GapOptions::new(c.n, c.k);
            o.l_max = c.l_max;
            o.solver.seed = c.seed;
            let g = ed::spectral_gap(c.n, c.ell, &o)?;
            out.csv(&c.out, |w| g.write_csv(w))?;
            out.json(
                &c.report,
                &serde_json::json!({
                    "n": g.n,
                    "ell": g.ell,
                    "statistics": g.statistics,
                    "pseudo_potential": g.m,
                    "laughlin_momentum": g.laughlin_momentum,
                    "zero_tol": g.zero_tol,
                    "sigma": g.sigma,
                    "sigma_sector": g.sigma_sector,
                    "zero_modes_at_laughlin": g.sector(g.laughlin_momentum).map(|s| s.zero_modes),
                }),
            )?;
        }
        RunConfig::DeltaCheck(c) => {
            let r = delta_check(c)?;
            out.json(&c.report, &r)?;
            if !r.passed {
                return Err(LabError::Diagnostics(format!(
                    "delta action and H(0,N) differ by {:e} after calibration (tolerance {:e})",
                    r.max_deviation, c.tol
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaCheckReport {
    /// `<v, delta v> / <v, H v>` from the first vector.
    pub factor: f64,
    pub expected_factor: f64,
    /// Largest `|delta v - factor H v|_inf` over all vectors.
    pub max_deviation: f64,
    pub vectors: usize,
    pub passed: bool,
}

/// Compares the midpoint-substitution action with the `m = 0` matrix on
/// random bosonic vectors, after fixing the ratio from the first vector.
pub fn delta_check(c: &DeltaConfig) -> Result<DeltaCheckReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c.seed);
    let mut factor: Option<f64> = None;
    let mut dev = 0.0f64;
    let mut count = 0;
    for &n in &c.n {
        let sector = ed::MomentumSector::new(n, c.degree, crate::model::Statistics::Bosonic)?;
        let basis = ed::enumerate_basis(&sector)?;
        let op = ed::factored_hamiltonian(&basis, 0)?;
        for _ in 0..c.vectors {
            let v: Vec<f64> = (0..basis.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let f = match factor {
                Some(f) => f,
                None => *factor.insert(ed::calibrate_delta_factor(&basis, &v)?),
            };
            let dv = ed::delta_action(&ed::SymmetricPolynomial::from_fock(&basis, &v)?)?.to_fock(&basis)?;
            let mut hv = vec![0.0; v.len()];
            ed::LinearOperator::apply(&op, &v, &mut hv);
            for (a, b) in dv.iter().zip(&hv) {
                dev = dev.max((a - f * b).abs());
            }
            count += 1;
        }
    }
    let factor = factor.ok_or_else(|| LabError::invalid("delta-check needs at least one vector"))?;
    Ok(DeltaCheckReport {
        factor,
        expected_factor: ed::DELTA_CONVENTION_FACTOR,
        max_deviation: dev,
        vectors: count,
        passed: dev <= c.tol,
    })
}

fn versions() -> BTreeMap<String, String> {
    let mut v = BTreeMap::new();
    v.insert("laughlin-lab".into(), env!("CARGO_PKG_VERSION").into());
    v.insert("manifest".into(), "1".into());
    v
}

/// Runs `run` into `out_dir` and writes its manifest. On failure the
/// manifest is still written, listing whatever outputs exist.
pub fn execute(run: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let mut out = Outputs { dir: out_dir.to_path_buf(), files: Vec::new() };
    let result = execute_into(run, &mut out);
    let mut outputs = Vec::new();
    for f in &out.files {
        let bytes = fs::read(out_dir.join(f))?;
        outputs.push(OutputFile { path: f.clone(), sha256: sha256_hex(&bytes) });
    }
    let manifest = RunManifest {
        subcommand: run.name().into(),
        config_hash: config_hash(run)?,
        seed: run.seed(),
        versions: versions(),
        threads: rayon::current_num_threads(),
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs,
        run: run.clone(),
    };
    let mut w = BufWriter::new(File::create(out_dir.join(RunManifest::file_name(run.name())))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    result.map(|_| manifest)
}

/// Re-runs a manifest into `out_dir` and lists outputs whose hashes differ.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let old: RunManifest = read_json(manifest_path)?;
    if config_hash(&old.run)? != old.config_hash {
        return Err(LabError::invalid("manifest configuration does not match its hash"));
    }
    let new = execute(&old.run, out_dir)?;
    let mut differ = Vec::new();
    for o in &old.outputs {
        match new.outputs.iter().find(|n| n.path == o.path) {
            Some(n) if n.sha256 == o.sha256 => {}
            _ => differ.push(o.path.clone()),
        }
    }
    Ok(differ)
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| LabError::invalid(format!("{SEED_ENV}='{s}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(LabError::invalid("--threads must be >= 1"));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    if let Command::Replay(a) = &cli.command {
        let differ = replay(&a.manifest, &cli.out_dir)?;
        if differ.is_empty() {
            println!("replay reproduced every output");
            return Ok(());
        }
        return Err(LabError::Diagnostics(format!("replay changed {}", differ.join(", "))));
    }
    let mut run = resolve(&cli.command)?;
    // precedence: --seed, then the environment, then the configuration
    if let Some(s) = cli.seed.or(seed_from_env()?) {
        run.set_seed(s);
    }
    let m = execute(&run, &cli.out_dir)?;
    for o in &m.outputs {
        println!("{}", cli.out_dir.join(&o.path).display());
    }
    Ok(())
}

/// Parses `args` (program name first) and runs; returns the exit code:
/// 0 on success, 2 for input errors, 3 for numerical failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("laughlin-lab").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn potential_presets() {
        assert!(matches!(scalar_field("mexican-hat").unwrap(), ScalarField::MexicanHat { a, .. } if a == 2.125));
        assert!(scalar_field("sombrero").is_err());
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&["gap", "--n", "5", "--ell", "3", "--k", "2"]);
        let RunConfig::Gap(g) = resolve(&cli.command).unwrap() else { panic!("wrong subcommand") };
        assert_eq!((g.n, g.ell, g.k), (5, 3, 2));
        assert_eq!(g.out, GapConfig::default().out);
    }

    #[test]
    fn quasihole_flags_parse_triples() {
        let cli = parse(&["quasihole", "--qh", "0,0,3;1.5,-1,1", "--n", "16"]);
        let RunConfig::Quasihole(c) = resolve(&cli.command).unwrap() else { panic!("wrong subcommand") };
        assert_eq!(c.quasiholes.holes.len(), 2);
        assert_eq!(c.params.n, 16);
        assert_eq!(c.report, "quasihole.json");
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let cli = parse(&["bathtub", "--v", "double-well", "--lambda", "0.1"]);
        let run = resolve(&cli.command).unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&run).unwrap()).unwrap();
        assert_eq!(config_hash(&run).unwrap(), config_hash(&back).unwrap());
        assert_eq!(run.name(), "bathtub");
    }
}
