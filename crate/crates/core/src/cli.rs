//! The `gmi-lab` command-line driver.
//!
//! Every subcommand reads a JSON [`RunConfig`], runs one experiment and
//! writes a run directory:
//!
//! ```text
//! <out>/config.json      effective configuration, defaults filled in
//! <out>/results/*.json   reports (each embeds the configuration)
//! <out>/results/*.csv    the same rows in tabular form
//! <out>/plots/*.csv      plot data
//! <out>/run.log          timestamps and progress
//! ```
//!
//! Only `run.log` carries timestamps; everything else is a deterministic
//! function of the configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context as _};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{self, EmbeddingSet, LawTag, LayerTag, PairedLaws, CONTEXT, TARGET};
use crate::decoder::{self, DecoderConfig, LipschitzEstimate, RetuneConfig, ToyDecoder};
use crate::gmi::{self, AsymmetryReport, GapReport, GmiEstimate, MiSource};
use crate::modes::{self, AblationCondition, AblationReport, ModeClass, ModeSpectrum};
use crate::probe::{self, ProbeResult};
use crate::rng;
use crate::stats;
use crate::synth::{self, fixtures, GroundTruth, SynthConfig};
use crate::transport::{self, W1Method};

/// Environment variable that overrides the master seed.
pub const SEED_ENV: &str = "GMI_LAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "gmi-lab", version, about = "Decoder-side accessibility diagnostics on representation data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Linear probes per (layer, attribute) and the retention table.
    Probe(RunArgs),
    /// Mode alignment spectrum of the modal covariance.
    Modes(RunArgs),
    /// Mode ablation: MS, TA-matched and random conditions.
    Ablate(RunArgs),
    /// Both sides of the GMI-Wasserstein bound for one law pair.
    Bound(RunArgs),
    /// Randomized bound sweep, shift ladder and probe-decoder asymmetry arm.
    Sweep(RunArgs),
    /// Low-rank retune toward one attribute.
    Retune(RunArgs),
    /// Accessibility gap `I(Z; A) − GMI(A)` per attribute.
    Gap(RunArgs),
    /// Write a synthetic dataset in the on-disk format.
    Synth(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration (`{}` selects every default).
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Run directory; defaults to `runs/<subcommand>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set modes.k=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Probe(_) => "probe",
            Command::Modes(_) => "modes",
            Command::Ablate(_) => "ablate",
            Command::Bound(_) => "bound",
            Command::Sweep(_) => "sweep",
            Command::Retune(_) => "retune",
            Command::Gap(_) => "gap",
            Command::Synth(_) => "synth",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Probe(a)
            | Command::Modes(a)
            | Command::Ablate(a)
            | Command::Bound(a)
            | Command::Sweep(a)
            | Command::Retune(a)
            | Command::Gap(a)
            | Command::Synth(a) => a,
        }
    }
}

/// Named synthetic data sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fixture {
    /// `synthetic.config` as given.
    Custom,
    /// The text law of `synthetic.config` used for both laws.
    Identity,
    NonAligned,
    /// [`Fixture::NonAligned`] after the aligned-encoder transform.
    AlignedVariant,
    OrthogonalCarrier,
    /// Four layers; `tone` grows with depth, `speaker` fades.
    DecayingLayers,
    /// Four layers where every attribute is separable.
    SeparableLayers,
}

impl Fixture {
    fn default_for(command: &str) -> Self {
        match command {
            "probe" => Fixture::DecayingLayers,
            "modes" | "ablate" => Fixture::NonAligned,
            "retune" | "gap" => Fixture::OrthogonalCarrier,
            _ => Fixture::Custom,
        }
    }

    fn is_layered(self) -> bool {
        matches!(self, Fixture::DecayingLayers | Fixture::SeparableLayers)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Manifest of the modal law.
    pub modal: Option<PathBuf>,
    /// Manifest of the text law.
    pub text: Option<PathBuf>,
    /// One manifest per layer, for `probe`.
    pub layers: Vec<PathBuf>,
}

impl DataPaths {
    fn is_empty(&self) -> bool {
        self.modal.is_none() && self.text.is_none() && self.layers.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    /// Filled in per subcommand when absent.
    pub fixture: Option<Fixture>,
    pub config: SynthConfig,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self { fixture: None, config: SynthConfig { shift: 1.0, ..SynthConfig::default() } }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
    pub reg_c: f64,
    /// Empty probes every attribute except the context.
    pub attributes: Vec<String>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            seeds: probe::PROTOCOL_SEEDS.to_vec(),
            train_fraction: probe::TRAIN_FRACTION,
            reg_c: probe::DEFAULT_REG_C,
            attributes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeSettings {
    /// Leading modes; clamped to the dimension.
    pub k: usize,
    pub threshold: f64,
}

impl Default for ModeSettings {
    fn default() -> Self {
        Self { k: modes::DEFAULT_MODES, threshold: modes::DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub budget: usize,
    pub random_seeds: usize,
    /// Modes of the ablation spectrum; `modes.k` when absent (16 for the
    /// non-aligned fixture).
    pub k: Option<usize>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { budget: modes::DEFAULT_BUDGET, random_seeds: modes::RANDOM_SEEDS, k: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetuneSettings {
    /// Attribute the objective targets.
    pub attribute: String,
    /// Attribute that should stay put.
    pub control: String,
    pub rank: usize,
    pub optimizer: RetuneConfig,
}

impl Default for RetuneSettings {
    fn default() -> Self {
        Self {
            attribute: fixtures::CARRIED.to_string(),
            control: TARGET.to_string(),
            rank: 4,
            optimizer: RetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapSettings {
    /// Empty scores every attribute except the context and the target.
    pub attributes: Vec<String>,
    /// Known `I(Z; A)` in nats, for data without densities.
    pub mi: BTreeMap<String, f64>,
    pub mi_samples: usize,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self { attributes: Vec::new(), mi: BTreeMap::new(), mi_samples: synth::MI_SAMPLES }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub configs: usize,
    pub ladder: Vec<f64>,
    pub asymmetry_configs: usize,
    pub asymmetry_probe_c: f64,
    pub asymmetry_decoder: DecoderConfig,
    /// Sensitivity ratio `L_log / L_h` above which a configuration enters
    /// the asymmetry statistic.
    pub asymmetry_min_ratio: f64,
    pub asymmetry_min_w1: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            configs: fixtures::SWEEP_CONFIGS,
            ladder: fixtures::SHIFT_LADDER.to_vec(),
            asymmetry_configs: fixtures::ASYMMETRY_CONFIGS,
            asymmetry_probe_c: fixtures::ASYMMETRY_PROBE_C,
            asymmetry_decoder: fixtures::asymmetry_decoder(),
            asymmetry_min_ratio: 10.0,
            asymmetry_min_w1: 1.0,
        }
    }
}

/// Everything a run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataPaths,
    pub synthetic: SyntheticSource,
    pub probe: ProbeSettings,
    pub modes: ModeSettings,
    pub ablation: AblationSettings,
    pub w1_method: W1Method,
    pub decoder: DecoderConfig,
    /// Saved decoder to use instead of training one.
    pub decoder_checkpoint: Option<PathBuf>,
    /// Gradient norms (LipschitzEstimate JSON) measured on an external model.
    pub gradient_norms: Option<PathBuf>,
    pub retune: RetuneSettings,
    pub gap: GapSettings,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataPaths::default(),
            synthetic: SyntheticSource::default(),
            probe: ProbeSettings::default(),
            modes: ModeSettings::default(),
            ablation: AblationSettings::default(),
            w1_method: W1Method::Auto,
            decoder: DecoderConfig::default(),
            decoder_checkpoint: None,
            gradient_norms: None,
            retune: RetuneSettings::default(),
            gap: GapSettings::default(),
            sweep: SweepSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parse `text`, apply `KEY=VALUE` overrides (dotted paths, JSON or bare
    /// string values) and the seed override.
    pub fn from_json(text: &str, overrides: &[String], seed_env: Option<&str>) -> anyhow::Result<Self> {
        let mut value: Value = serde_json::from_str(text).context("configuration is not valid JSON")?;
        if !value.is_object() {
            bail!("configuration must be a JSON object");
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{item}` is not of the form KEY=VALUE"))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
        if let Some(seed) = seed_env {
            cfg.seed = seed
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}=`{seed}` is not an unsigned integer"))?;
        }
        Ok(cfg)
    }

    /// Fill per-command defaults and make data paths relative to `base`.
    pub fn resolve(mut self, command: &str, base: &Path) -> Self {
        let fixture = *self.synthetic.fixture.get_or_insert(Fixture::default_for(command));
        self.synthetic.config.seed = self.seed;
        if self.ablation.k.is_none() {
            self.ablation.k = Some(if fixture == Fixture::NonAligned && self.data.is_empty() {
                fixtures::ABLATION_MODES
            } else {
                self.modes.k
            });
        }
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.modal.iter_mut().for_each(join);
        self.data.text.iter_mut().for_each(join);
        self.data.layers.iter_mut().for_each(join);
        self.decoder_checkpoint.iter_mut().for_each(join);
        self.gradient_norms.iter_mut().for_each(join);
        self
    }

    fn fixture(&self) -> Fixture {
        self.synthetic.fixture.unwrap_or(Fixture::Custom)
    }

    fn synth_config(&self) -> SynthConfig {
        match self.fixture() {
            Fixture::NonAligned => fixtures::non_aligned(self.seed),
            Fixture::AlignedVariant => synth::aligned_encoder_variant(&fixtures::non_aligned(self.seed)),
            Fixture::OrthogonalCarrier => fixtures::orthogonal_carrier(self.seed),
            _ => self.synthetic.config.clone(),
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            bail!("override key `{key}` has an empty segment");
        }
        let map = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override key `{key}`: `{part}` is inside a non-object value"))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields one part")
}

/// A unit of work that did not complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub unit: String,
    pub error: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.unit, self.error)
    }
}

/// Outcome of a run whose report files were written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub out: PathBuf,
    pub failures: Vec<Failure>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

/// The run directory.
pub struct RunDir {
    root: PathBuf,
    log: Mutex<fs::File>,
}

impl RunDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        for sub in ["results", "plots"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        let path = root.join("run.log");
        let log = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(Self { root: root.to_path_buf(), log: Mutex::new(log) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&self, message: impl AsRef<str>) {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let line = format!("{}.{:03} {}\n", now.as_secs(), now.subsec_millis(), message.as_ref());
        if let Ok(mut f) = self.log.lock() {
            // A failed log write must not fail the run.
            let _ = f.write_all(line.as_bytes());
        }
    }

    pub fn json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> anyhow::Result<()> {
        let path = self.root.join(rel);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        self.log(format!("wrote {rel}"));
        Ok(())
    }

    pub fn csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> anyhow::Result<()> {
        let path = self.root.join(rel);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        self.log(format!("wrote {rel}"));
        Ok(())
    }
}

/// A results JSON document.
#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    failures: &'a [Failure],
    result: T,
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 64 } else { 0 };
        }
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    match run(&cli.command, seed_env.as_deref()) {
        Ok(outcome) => {
            for f in &outcome.failures {
                eprintln!("failed: {f}");
            }
            if !outcome.failures.is_empty() {
                eprintln!(
                    "{} unit(s) failed; partial results in {}",
                    outcome.failures.len(),
                    outcome.out.display()
                );
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Run one subcommand. `seed_env` is the value of [`SEED_ENV`], if set.
pub fn run(command: &Command, seed_env: Option<&str>) -> anyhow::Result<Outcome> {
    let args = command.args();
    let name = command.name();
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read configuration {}", args.config.display()))?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let cfg = RunConfig::from_json(&text, &args.set, seed_env)
        .with_context(|| format!("in {}", args.config.display()))?
        .resolve(name, base);
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let dir = RunDir::create(&out)?;
    dir.log(format!("gmi-lab {name} seed={} config={}", cfg.seed, args.config.display()));
    dir.json("config.json", &cfg)?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().context("cannot start the worker pool")?;
    let failures = pool.install(|| match command {
        Command::Probe(_) => cmd_probe(&cfg, &dir),
        Command::Modes(_) => cmd_modes(&cfg, &dir),
        Command::Ablate(_) => cmd_ablate(&cfg, &dir),
        Command::Bound(_) => cmd_bound(&cfg, &dir),
        Command::Sweep(_) => cmd_sweep(&cfg, &dir),
        Command::Retune(_) => cmd_retune(&cfg, &dir),
        Command::Gap(_) => cmd_gap(&cfg, &dir),
        Command::Synth(_) => cmd_synth(&cfg, &dir),
    })?;
    dir.log(format!("done, {} failure(s)", failures.len()));
    Ok(Outcome { out, failures })
}

fn load(path: &Path) -> anyhow::Result<EmbeddingSet> {
    dataset::load_embedding_set(path).with_context(|| format!("cannot load manifest {}", path.display()))
}

/// Modal and text laws, with the generating densities when synthetic.
fn paired_source(cfg: &RunConfig) -> anyhow::Result<(PairedLaws, Option<GroundTruth>)> {
    match (&cfg.data.modal, &cfg.data.text) {
        (Some(m), Some(t)) => {
            let laws = PairedLaws::new(load(m)?, load(t)?)
                .with_context(|| format!("{} and {} are not a valid law pair", m.display(), t.display()))?;
            Ok((laws, None))
        }
        (None, None) => {
            let fixture = cfg.fixture();
            if fixture.is_layered() {
                bail!("fixture {fixture:?} has no law pair; choose a paired fixture or give data.modal and data.text");
            }
            let synth_cfg = cfg.synth_config();
            let (mut laws, truth) = synth::generate_pair(&synth_cfg)?;
            if fixture == Fixture::Identity {
                let mut modal = laws.text.clone();
                modal.law_tag = LawTag::Modal;
                laws = PairedLaws::new(modal, laws.text)?;
                return Ok((laws, Some(truth.for_law(LawTag::Text))));
            }
            Ok((laws, Some(truth)))
        }
        _ => bail!("data.modal and data.text must be given together"),
    }
}

fn source_decoder(cfg: &RunConfig, laws: &PairedLaws) -> anyhow::Result<ToyDecoder> {
    if let Some(path) = &cfg.decoder_checkpoint {
        return ToyDecoder::load(path).with_context(|| format!("cannot load decoder {}", path.display()));
    }
    let synthetic = cfg.data.modal.is_none();
    let dec = match cfg.fixture() {
        Fixture::NonAligned | Fixture::AlignedVariant if synthetic => {
            fixtures::ablation_decoder(&cfg.synth_config(), laws, cfg.seed)?
        }
        Fixture::OrthogonalCarrier if synthetic => fixtures::orthogonal_decoder(&cfg.synth_config(), laws, cfg.seed)?,
        _ => decoder::train_decoder(&laws.text, cfg.seed, &cfg.decoder)?,
    };
    Ok(dec)
}

fn attributes_of(set: &EmbeddingSet, wanted: &[String]) -> Vec<String> {
    if wanted.is_empty() {
        set.attributes().filter(|a| *a != CONTEXT).map(str::to_string).collect()
    } else {
        wanted.to_vec()
    }
}

fn failure(unit: impl Into<String>, error: impl fmt::Display) -> Failure {
    Failure { unit: unit.into(), error: error.to_string() }
}

/// Keep the successes in order and move the failures into `failures`.
fn partition<T>(results: Vec<Result<T, Failure>>, failures: &mut Vec<Failure>) -> Vec<T> {
    let mut ok = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(f) => failures.push(f),
        }
    }
    ok
}

#[derive(Debug, Clone, Serialize)]
struct ProbeRow {
    source: String,
    layer: LayerTag,
    attribute: String,
    mean: f64,
    std: f64,
    chance: f64,
    converged: bool,
    per_seed: String,
}

#[derive(Debug, Clone, Serialize)]
struct RetentionRow {
    attribute: String,
    adapter: f64,
    llm_final: f64,
    retention_pct: f64,
}

fn layer_name(tag: LayerTag) -> String {
    serde_json::to_value(tag).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn cmd_probe(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<Vec<Failure>> {
    let sets: Vec<(String, EmbeddingSet)> = if !cfg.data.layers.is_empty() {
        cfg.data
            .layers
            .iter()
            .map(|p| Ok((p.display().to_string(), load(p)?)))
            .collect::<anyhow::Result<_>>()?
    } else if cfg.data.modal.is_some() || cfg.data.text.is_some() {
        let mut out = Vec::new();
        for p in cfg.data.modal.iter().chain(&cfg.data.text) {
            out.push((p.display().to_string(), load(p)?));
        }
        out
    } else {
        let fixture = cfg.fixture();
        let sets = match fixture {
            Fixture::DecayingLayers => fixtures::decaying_layers(cfg.seed)?,
            Fixture::SeparableLayers => fixtures::separable_layers(cfg.seed)?,
            _ => vec![paired_source(cfg)?.0.modal],
        };
        sets.into_iter()
            .map(|s| (format!("synthetic:{}", layer_name(s.layer_tag)), s))
            .collect()
    };

    let units: Vec<(usize, String)> = sets
        .iter()
        .enumerate()
        .flat_map(|(i, (_, set))| attributes_of(set, &cfg.probe.attributes).into_iter().map(move |a| (i, a)))
        .collect();
    dir.log(format!("probing {} (layer, attribute) pairs", units.len()));
    let p = &cfg.probe;
    let results: Vec<Result<ProbeResult, Failure>> = units
        .par_iter()
        .map(|(i, attr)| {
            let (source, set) = &sets[*i];
            probe::run_probe(set, attr, &p.seeds, p.reg_c, p.train_fraction)
                .map_err(|e| failure(format!("{source} [{attr}]"), e))
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut by_layer: BTreeMap<(String, LayerTag), f64> = BTreeMap::new();
    for ((i, _), r) in units.iter().zip(results) {
        match r {
            Ok(r) => {
                by_layer.insert((r.attribute.clone(), r.layer_tag), r.mean);
                rows.push(ProbeRow {
                    source: sets[*i].0.clone(),
                    layer: r.layer_tag,
                    attribute: r.attribute.clone(),
                    mean: r.mean,
                    std: r.std,
                    chance: r.chance,
                    converged: r.converged,
                    per_seed: r.per_seed.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
                });
            }
            Err(f) => failures.push(f),
        }
    }
    let mut attributes: Vec<&String> = rows.iter().map(|r| &r.attribute).collect();
    attributes.sort();
    attributes.dedup();
    let retention: Vec<RetentionRow> = attributes
        .iter()
        .filter_map(|a| {
            let adapter = *by_layer.get(&((*a).clone(), LayerTag::Adapter))?;
            let llm_final = *by_layer.get(&((*a).clone(), LayerTag::LlmFinal))?;
            Some(RetentionRow {
                attribute: (*a).clone(),
                adapter,
                llm_final,
                retention_pct: 100.0 * llm_final / adapter,
            })
        })
        .collect();

    #[derive(Serialize)]
    struct Out<'a> {
        rows: &'a [ProbeRow],
        retention: &'a [RetentionRow],
    }
    dir.json(
        "results/probe.json",
        &Report { command: "probe", config: cfg, failures: &failures, result: Out { rows: &rows, retention: &retention } },
    )?;
    dir.csv("results/probe.csv", &rows)?;
    dir.csv("results/retention.csv", &retention)?;
    #[derive(Serialize)]
    struct PlotRow<'a> {
        layer: LayerTag,
        attribute: &'a str,
        mean: f64,
        std: f64,
        chance: f64,
    }
    let plot: Vec<PlotRow> = rows
        .iter()
        .map(|r| PlotRow { layer: r.layer, attribute: &r.attribute, mean: r.mean, std: r.std, chance: r.chance })
        .collect();
    dir.csv("plots/probe_by_layer.csv", &plot)?;
    Ok(failures)
}

fn spectrum_for(laws: &PairedLaws, k: usize, threshold: f64) -> anyhow::Result<ModeSpectrum> {
    let k = k.min(laws.modal.dim());
    Ok(modes::mode_alignment(&laws.modal, &laws.text, k, threshold)?)
}

#[derive(Debug, Clone, Serialize)]
struct SpectrumRow {
    mode: usize,
    eigenvalue: f64,
    variance_pct: f64,
    alignment: f64,
    class: ModeClass,
}

fn spectrum_rows(spectrum: &ModeSpectrum) -> Vec<SpectrumRow> {
    (0..spectrum.len())
        .map(|i| SpectrumRow {
            mode: i,
            eigenvalue: spectrum.basis.eigenvalues[i],
            variance_pct: spectrum.variance_pct(&[i]),
            alignment: spectrum.alignment[i],
            class: spectrum.classification[i],
        })
        .collect()
}

fn cmd_modes(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<Vec<Failure>> {
    let (laws, _) = paired_source(cfg)?;
    let spectrum = spectrum_for(&laws, cfg.modes.k, cfg.modes.threshold)?;
    dir.log(format!("{} modes, {} MS", spectrum.len(), spectrum.ms_indices().len()));
    let mut failures = Vec::new();
    let isotropy = if spectrum.ms_indices().is_empty() || spectrum.ta_indices().is_empty() {
        None
    } else {
        let dec = source_decoder(cfg, &laws)?;
        match decoder::gradient_isotropy(&dec, &laws.pooled(), &spectrum) {
            Ok(r) => Some(r),
            Err(e) => {
                failures.push(failure("gradient isotropy", e));
                None
            }
        }
    };
    let rows = spectrum_rows(&spectrum);

    #[derive(Serialize)]
    struct Out<'a> {
        k: usize,
        d: usize,
        ms_modes: usize,
        ta_modes: usize,
        ms_variance_share: f64,
        mode0_alignment: Option<f64>,
        dropped: usize,
        spectrum: &'a [SpectrumRow],
        isotropy: Option<decoder::IsotropyReport>,
    }
    let out = Out {
        k: spectrum.len(),
        d: laws.modal.dim(),
        ms_modes: spectrum.ms_indices().len(),
        ta_modes: spectrum.ta_indices().len(),
        ms_variance_share: spectrum.ms_variance_share,
        mode0_alignment: spectrum.alignment.first().copied(),
        dropped: spectrum.dropped,
        spectrum: &rows,
        isotropy,
    };
    dir.json("results/modes.json", &Report { command: "modes", config: cfg, failures: &failures, result: out })?;
    dir.csv("plots/spectrum.csv", &rows)?;
    Ok(failures)
}

#[derive(Debug, Clone, Serialize)]
struct AblationRow {
    condition: AblationCondition,
    modes_removed: usize,
    variance_removed_pct: f64,
    baseline_loss: f64,
    ablated_loss: f64,
    delta_loss_pct: f64,
    t: f64,
    p: f64,
    samples: usize,
    degenerate: bool,
}

impl From<&AblationReport> for AblationRow {
    fn from(r: &AblationReport) -> Self {
        Self {
            condition: r.condition,
            modes_removed: r.modes_removed,
            variance_removed_pct: r.variance_removed_pct,
            baseline_loss: r.baseline_loss,
            ablated_loss: r.ablated_loss,
            delta_loss_pct: r.delta_loss_pct,
            t: r.t,
            p: r.p,
            samples: r.samples,
            degenerate: r.degenerate,
        }
    }
}

fn cmd_ablate(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<Vec<Failure>> {
    let (laws, _) = paired_source(cfg)?;
    let k = cfg.ablation.k.unwrap_or(cfg.modes.k);
    let spectrum = spectrum_for(&laws, k, cfg.modes.threshold)?;
    let dec = source_decoder(cfg, &laws)?;
    let budget = cfg.ablation.budget;
    let random_seeds: Vec<u64> = (0..cfg.ablation.random_seeds as u64).map(|i| rng::child_seed(cfg.seed, i)).collect();
    dir.log(format!("ablating {} MS modes of {}", spectrum.ms_indices().len(), spectrum.len()));

    let conditions = [AblationCondition::None, AblationCondition::MsAll, AblationCondition::TaMatched, AblationCondition::Random];
    let results: Vec<Result<AblationReport, Failure>> = conditions
        .par_iter()
        .map(|&c| {
            let r = if c == AblationCondition::Random {
                if random_seeds.is_empty() {
                    return Err(failure("random", "ablation.random_seeds is 0"));
                }
                modes::run_random_ablation(&dec, &laws.modal, &spectrum, &random_seeds, budget)
            } else {
                modes::run_ablation(&dec, &laws.modal, &spectrum, c, cfg.seed, budget)
            };
            r.map_err(|e| failure(format!("{c:?}"), e))
        })
        .collect();
    let mut failures = Vec::new();
    let reports = partition(results, &mut failures);
    let rows: Vec<AblationRow> = reports.iter().map(AblationRow::from).collect();

    #[derive(Serialize)]
    struct Out<'a> {
        spectrum_modes: usize,
        ms_modes: usize,
        random_seeds: &'a [u64],
        conditions: &'a [AblationReport],
    }
    let out = Out {
        spectrum_modes: spectrum.len(),
        ms_modes: spectrum.ms_indices().len(),
        random_seeds: &random_seeds,
        conditions: &reports,
    };
    dir.json("results/ablation.json", &Report { command: "ablate", config: cfg, failures: &failures, result: out })?;
    dir.csv("results/ablation.csv", &rows)?;
    dir.csv("plots/ablation.csv", &rows)?;
    Ok(failures)
}

#[derive(Debug, Clone, Serialize)]
struct StratumRow {
    stratum: usize,
    weight: f64,
    w1: f64,
    n_modal: usize,
    n_text: usize,
}

fn cmd_bound(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<Vec<Failure>> {
    let (laws, _) = paired_source(cfg)?;
    let dec = source_decoder(cfg, &laws)?;
    let external = match &cfg.gradient_norms {
        Some(p) => Some(LipschitzEstimate::load(p).with_context(|| format!("cannot load gradient norms {}", p.display()))?),
        None => None,
    };
    let report = gmi::evaluate_bound_with(&dec, &laws, cfg.w1_method, external.as_ref())?;
    dir.log(format!("lhs {:.4} bound {:.4}", report.lhs, report.bound_support));
    let rows: Vec<StratumRow> = report
        .w1
        .per_stratum
        .iter()
        .map(|s| StratumRow {
            stratum: s.stratum,
            weight: s.weight,
            w1: s.estimate.value,
            n_modal: s.estimate.n_modal,
            n_text: s.estimate.n_text,
        })
        .collect();
    dir.json("results/bound.json", &Report { command: "bound", config: cfg, failures: &[], result: &report })?;
    dir.csv("plots/stratum_w1.csv", &rows)?;
    Ok(Vec::new())
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    index: usize,
    seed: u64,
    shift: f64,
    rotation_angle: f64,
    gmi_text: f64,
    gmi_modal: f64,
    abs_delta_gmi: f64,
    delta_direct: f64,
    delta_competition: f64,
    l_log: f64,
    l_analytic: f64,
    d: f64,
    d_eff: f64,
    w1: f64,
    l_w1: f64,
    bound_support: f64,
    bound_ambient: f64,
    holds_support: bool,
    holds_ambient: bool,
    probe_drop: f64,
    probe_bound: f64,
    probe_holds: bool,
}

fn sweep_unit(cfg: &RunConfig, index: usize) -> crate::Result<SweepRow> {
    let synth_cfg = fixtures::sweep_config(cfg.seed, index as u64);
    let (laws, _) = synth::generate_pair(&synth_cfg)?;
    let dec = decoder::train_decoder(&laws.text, synth_cfg.seed, &cfg.decoder)?;
    let b = gmi::evaluate_bound(&dec, &laws, cfg.w1_method)?;
    let probe_model = probe::train_probe_full(&laws.text, TARGET, cfg.probe.reg_c)?;
    let penalty = probe::probe_penalty_check(&probe_model, &laws, TARGET)?;
    Ok(SweepRow {
        index,
        seed: synth_cfg.seed,
        shift: synth_cfg.shift,
        rotation_angle: synth_cfg.rotation_angle,
        gmi_text: b.gmi_text.value,
        gmi_modal: b.gmi_modal.value,
        abs_delta_gmi: b.lhs,
        delta_direct: b.delta_direct,
        delta_competition: b.delta_competition,
        l_log: b.l_log.p95,
        l_analytic: b.analytic.lipschitz,
        d: b.d,
        d_eff: b.d_eff,
        w1: b.w1.value,
        l_w1: b.l_log.p95 * b.w1.value,
        bound_support: b.bound_support,
        bound_ambient: b.bound_ambient,
        holds_support: b.holds_support,
        holds_ambient: b.holds_ambient,
        probe_drop: penalty.lhs,
        probe_bound: penalty.rhs,
        probe_holds: penalty.holds,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderRow {
    pub delta: f64,
    pub gmi_text: f64,
    pub gmi_modal: f64,
    pub abs_delta_gmi: f64,
    /// `sqrt(se_T² + se_M²)`.
    pub std_error: f64,
    pub w1: f64,
}

fn ladder_unit(cfg: &RunConfig, delta: f64) -> crate::Result<LadderRow> {
    let synth_cfg = fixtures::shift_ladder(cfg.seed, delta);
    let laws = synth::draw(&synth_cfg, 0)?;
    let dec = decoder::train_decoder(&laws.text, cfg.seed, &cfg.decoder)?;
    let t: GmiEstimate = gmi::estimate_gmi(&dec, &laws.text)?;
    let m = gmi::estimate_gmi(&dec, &laws.modal)?;
    let w1 = transport::stratified_w1(&laws, cfg.w1_method)?;
    Ok(LadderRow {
        delta,
        gmi_text: t.value,
        gmi_modal: m.value,
        abs_delta_gmi: (t.value - m.value).abs(),
        std_error: t.std_error.hypot(m.std_error),
        w1: w1.value,
    })
}

/// Whether `|ΔGMI|` is nondecreasing along the ladder, allowing each step
/// to fall by three combined standard errors.
pub fn ladder_monotone(rows: &[LadderRow]) -> bool {
    rows.windows(2).all(|w| {
        let tol = 3.0 * w[0].std_error.hypot(w[1].std_error);
        w[1].abs_delta_gmi >= w[0].abs_delta_gmi - tol
    })
}

#[derive(Debug, Clone, Serialize)]
struct AsymmetryRow {
    index: usize,
    seed: u64,
    shift: f64,
    w1: f64,
    l_log: f64,
    l_h: f64,
    sensitivity_ratio: f64,
    gmi_drop: f64,
    decoder_relative_drop: f64,
    decoder_holds: bool,
    probe_drop: f64,
    probe_relative_drop: f64,
    probe_holds: bool,
    eligible: bool,
    decoder_degrades_more: bool,
}

fn asymmetry_unit(cfg: &RunConfig, index: usize) -> crate::Result<AsymmetryRow> {
    let s = &cfg.sweep;
    let synth_cfg = fixtures::asymmetry_config(cfg.seed, index as u64);
    let laws = synth::draw(&synth_cfg, 0)?;
    let dec = decoder::train_decoder(&laws.text, synth_cfg.seed, &s.asymmetry_decoder)?;
    let probe_model = probe::train_probe_full(&laws.text, TARGET, s.asymmetry_probe_c)?;
    let r: AsymmetryReport = gmi::asymmetry_experiment(&dec, &probe_model, &laws, TARGET, cfg.w1_method)?;
    Ok(AsymmetryRow {
        index,
        seed: synth_cfg.seed,
        shift: synth_cfg.shift,
        w1: r.w1,
        l_log: r.l_log,
        l_h: r.l_h,
        sensitivity_ratio: r.sensitivity_ratio,
        gmi_drop: r.gmi_drop,
        decoder_relative_drop: r.decoder_relative_drop,
        decoder_holds: r.decoder_holds,
        probe_drop: r.probe_drop,
        probe_relative_drop: r.probe_relative_drop,
        probe_holds: r.probe_holds,
        eligible: r.sensitivity_ratio >= s.asymmetry_min_ratio && r.w1 >= s.asymmetry_min_w1,
        decoder_degrades_more: r.decoder_relative_drop > r.probe_relative_drop,
    })
}

fn rate(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Sweep summary, as written to `results/sweep.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub configs: usize,
    pub completed: usize,
    pub hold_rate_support: Option<f64>,
    pub hold_rate_ambient: Option<f64>,
    pub probe_hold_rate: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub spearman_p: Option<f64>,
    /// Configurations with `L_log · D_eff ≥ 1`.
    pub competition_eligible: usize,
    /// Share of those where the competition term moved at least as much as
    /// the direct term.
    pub competition_dominance_rate: Option<f64>,
    pub ladder: Vec<LadderRow>,
    pub ladder_monotone: Option<bool>,
    pub asymmetry_configs: usize,
    pub asymmetry_completed: usize,
    pub asymmetry_probe_hold_rate: Option<f64>,
    pub asymmetry_eligible: usize,
    pub asymmetry_rate: Option<f64>,
}

fn cmd_sweep(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<Vec<Failure>> {
    let s = &cfg.sweep;
    dir.log(format!("sweep: {} configs, {} ladder rungs, {} asymmetry configs", s.configs, s.ladder.len(), s.asymmetry_configs));
    let sweep: Vec<Result<SweepRow, Failure>> = (0..s.configs)
        .into_par_iter()
        .map(|i| sweep_unit(cfg, i).map_err(|e| failure(format!("sweep config {i}"), e)))
        .collect();
    dir.log("sweep configs done");
    let ladder: Vec<Result<LadderRow, Failure>> = s
        .ladder
        .par_iter()
        .map(|&d| ladder_unit(cfg, d).map_err(|e| failure(format!("ladder delta {d}"), e)))
        .collect();
    let asym: Vec<Result<AsymmetryRow, Failure>> = (0..s.asymmetry_configs)
        .into_par_iter()
        .map(|i| asymmetry_unit(cfg, i).map_err(|e| failure(format!("asymmetry config {i}"), e)))
        .collect();
    dir.log("asymmetry arm done");

    let mut failures = Vec::new();
    let rows = partition(sweep, &mut failures);
    let ladder_rows = partition(ladder, &mut failures);
    let asym_rows = partition(asym, &mut failures);

    let count = |f: &dyn Fn(&SweepRow) -> bool| rows.iter().filter(|r| f(r)).count();
    let (spearman_rho, spearman_p) = if rows.len() >= 3 {
        let x: Vec<f64> = rows.iter().map(|r| r.l_w1).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.abs_delta_gmi).collect();
        match stats::spearman(&x, &y) {
            Ok((rho, p)) => (Some(rho), Some(p)),
            Err(e) => {
                failures.push(failure("spearman", e));
                (None, None)
            }
        }
    } else {
        (None, None)
    };
    let eligible: Vec<&SweepRow> = rows.iter().filter(|r| r.l_log * r.d_eff >= 1.0).collect();
    let dominant = eligible.iter().filter(|r| r.delta_competition >= r.delta_direct).count();
    let asym_eligible: Vec<&AsymmetryRow> = asym_rows.iter().filter(|r| r.eligible).collect();
    let summary = SweepSummary {
        configs: s.configs,
        completed: rows.len(),
        hold_rate_support: rate(count(&|r| r.holds_support), rows.len()),
        hold_rate_ambient: rate(count(&|r| r.holds_ambient), rows.len()),
        probe_hold_rate: rate(count(&|r| r.probe_holds), rows.len()),
        spearman_rho,
        spearman_p,
        competition_eligible: eligible.len(),
        competition_dominance_rate: rate(dominant, eligible.len()),
        ladder_monotone: (ladder_rows.len() == s.ladder.len() && !ladder_rows.is_empty()).then(|| ladder_monotone(&ladder_rows)),
        ladder: ladder_rows.clone(),
        asymmetry_configs: s.asymmetry_configs,
        asymmetry_completed: asym_rows.len(),
        asymmetry_probe_hold_rate: rate(asym_rows.iter().filter(|r| r.probe_holds).count(), asym_rows.len()),
        asymmetry_eligible: asym_eligible.len(),
        asymmetry_rate: rate(asym_eligible.iter().filter(|r| r.decoder_degrades_more).count(), asym_eligible.len()),
    };
    dir.json("results/sweep.json", &Report { command: "sweep", config: cfg, failures: &failures, result: &summary })?;
    dir.csv("results/sweep.csv", &rows)?;
    dir.csv("results/ladder.csv", &ladder_rows)?;
    dir.csv("results/asymmetry.csv", &asym_rows)?;

    #[derive(Serialize)]
    struct ScalingRow {
        index: usize,
        l_w1: f64,
        abs_delta_gmi: f64,
        bound_support: f64,
    }
    let scaling: Vec<ScalingRow> = rows
        .iter()
        .map(|r| ScalingRow { index: r.index, l_w1: r.l_w1, abs_delta_gmi: r.abs_delta_gmi, bound_support: r.bound_support })
        .collect();
    dir.csv("plots/scaling.csv", &scaling)?;
    dir.csv("plots/ladder.csv", &ladder_rows)?;
    Ok(failures)
}

#[derive(Debug, Clone, Serialize)]
struct AccuracyShift {
    attribute: String,
    before: f64,
    after: f64,
    change_points: f64,
}

fn cmd_retune(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<Vec<Failure>> {
    let r = &cfg.retune;
    let (laws, _) = paired_source(cfg)?;
    let dec = source_decoder(cfg, &laws)?;
    // Synthetic sources are scored on a fresh draw; data on a held-out split.
    let (fit, held, evaluation) = if cfg.data.modal.is_none() {
        let held = synth::draw(&cfg.synth_config(), 1)?.modal;
        (laws.modal.clone(), held, "fresh_draw")
    } else {
        let plan = dataset::stratified_split(&laws.modal, &r.attribute, cfg.seed, cfg.probe.train_fraction)?;
        (laws.modal.subset(&plan.train_idx), laws.modal.subset(&plan.test_idx), "held_out_split")
    };
    dir.log(format!("retuning toward `{}` at rank {}", r.attribute, r.rank));
    let tuned = decoder::low_rank_retune(&dec, &fit, &r.attribute, r.rank, cfg.seed, &r.optimizer)?;
    let rank0 = decoder::low_rank_retune(&dec, &fit, &r.attribute, 0, cfg.seed, &r.optimizer)?;
    let rank0_identical = rank0.w == dec.w && rank0.b == dec.b;

    let shift = |attribute: &str| -> anyhow::Result<AccuracyShift> {
        let before = decoder::accuracy(&dec, &held, attribute)?;
        let after = decoder::accuracy(&tuned, &held, attribute)?;
        Ok(AccuracyShift { attribute: attribute.to_string(), before, after, change_points: 100.0 * (after - before) })
    };
    let rows = vec![shift(&r.attribute)?, shift(&r.control)?];
    let objective_before = decoder::forced_choice_cross_entropy(&dec, &held, &r.attribute)?;
    let objective_after = decoder::forced_choice_cross_entropy(&tuned, &held, &r.attribute)?;

    #[derive(Serialize)]
    struct Out<'a> {
        evaluation: &'a str,
        rank: usize,
        converged: bool,
        iterations: usize,
        objective_before: f64,
        objective_after: f64,
        rank0_identical: bool,
        accuracy: &'a [AccuracyShift],
    }
    let out = Out {
        evaluation,
        rank: r.rank,
        converged: tuned.converged,
        iterations: tuned.iterations,
        objective_before,
        objective_after,
        rank0_identical,
        accuracy: &rows,
    };
    dir.json("results/retune.json", &Report { command: "retune", config: cfg, failures: &[], result: out })?;
    dir.csv("results/retune.csv", &rows)?;
    dir.csv("plots/retune.csv", &rows)?;
    Ok(Vec::new())
}

#[derive(Debug, Clone, Serialize)]
struct GapRow {
    attribute: String,
    mi: f64,
    mi_std: f64,
    gmi: f64,
    gmi_std_error: f64,
    gap: f64,
    violated: bool,
}

fn cmd_gap(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<Vec<Failure>> {
    let (laws, truth) = paired_source(cfg)?;
    let main = source_decoder(cfg, &laws)?;
    let truth = truth.map(|t| OracleSamples { truth: t, samples: cfg.gap.mi_samples, seed: cfg.seed });
    let attributes: Vec<String> = if cfg.gap.attributes.is_empty() {
        laws.modal.attributes().filter(|a| *a != CONTEXT && *a != TARGET).map(str::to_string).collect()
    } else {
        cfg.gap.attributes.clone()
    };
    dir.log(format!("gap over {} attribute(s)", attributes.len()));

    let results: Vec<Result<GapReport, Failure>> = attributes
        .par_iter()
        .map(|a| {
            let unit = |e: &dyn fmt::Display| failure(format!("attribute {a}"), e);
            let trained;
            // A checkpoint or an explicit readout is the decoder under test;
            // otherwise the attribute gets its own text-trained decoder.
            let dec = if cfg.decoder_checkpoint.is_some() || a == TARGET || main.readouts.contains_key(a.as_str()) {
                &main
            } else {
                trained = fixtures::attribute_decoder(&laws.text, a, cfg.seed).map_err(|e| unit(&e))?;
                &trained
            };
            let source = match (&truth, cfg.gap.mi.get(a)) {
                (_, Some(&v)) => MiSource::Supplied(v),
                (Some(t), None) => MiSource::Oracle(t),
                (None, None) => MiSource::Unknown,
            };
            gmi::accessibility_gap(dec, &laws.modal, a, source).map_err(|e| unit(&e))
        })
        .collect();
    let mut failures = Vec::new();
    let reports = partition(results, &mut failures);
    let rows: Vec<GapRow> = reports
        .iter()
        .map(|r| GapRow {
            attribute: r.attribute.clone(),
            mi: r.mi,
            mi_std: r.mi_std,
            gmi: r.gmi.value,
            gmi_std_error: r.gmi.std_error,
            gap: r.gap,
            violated: r.violated,
        })
        .collect();
    dir.json("results/gap.json", &Report { command: "gap", config: cfg, failures: &failures, result: &reports })?;
    dir.csv("results/gap.csv", &rows)?;
    dir.csv("plots/gap.csv", &rows)?;
    Ok(failures)
}

/// Ground truth with the run's Monte-Carlo budget.
struct OracleSamples {
    truth: GroundTruth,
    samples: usize,
    seed: u64,
}

impl gmi::MiOracle for OracleSamples {
    fn mutual_information(&self, attribute: &str) -> crate::Result<(f64, f64)> {
        self.truth.mutual_information_mc(attribute, self.samples, self.seed)
    }
}

fn cmd_synth(cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<Vec<Failure>> {
    let data = dir.root().join("data");
    #[derive(Serialize)]
    struct Written {
        name: String,
        manifest: String,
        n: usize,
        d: usize,
        layer: LayerTag,
        law: LawTag,
    }
    let mut written = Vec::new();
    let mut record = |name: String, set: &EmbeddingSet| -> anyhow::Result<()> {
        let path = dataset::write_embedding_set(set, &data.join(&name))?;
        let rel = path.strip_prefix(dir.root()).unwrap_or(&path).display().to_string();
        written.push(Written { manifest: rel, n: set.len(), d: set.dim(), layer: set.layer_tag, law: set.law_tag, name });
        Ok(())
    };
    let mut w1 = None;
    match cfg.fixture() {
        Fixture::DecayingLayers | Fixture::SeparableLayers => {
            let sets = match cfg.fixture() {
                Fixture::DecayingLayers => fixtures::decaying_layers(cfg.seed)?,
                _ => fixtures::separable_layers(cfg.seed)?,
            };
            for s in &sets {
                record(format!("layer_{}", layer_name(s.layer_tag)), s)?;
            }
        }
        _ => {
            let (laws, _) = paired_source(cfg)?;
            record("modal".into(), &laws.modal)?;
            record("text".into(), &laws.text)?;
            w1 = Some(transport::stratified_w1(&laws, cfg.w1_method)?.value);
        }
    }
    dir.log(format!("wrote {} dataset(s)", written.len()));

    #[derive(Serialize)]
    struct Out<'a> {
        synth: SynthConfig,
        datasets: &'a [Written],
        stratified_w1: Option<f64>,
    }
    let out = Out { synth: cfg.synth_config(), datasets: &written, stratified_w1: w1 };
    dir.json("results/synth.json", &Report { command: "synth", config: cfg, failures: &[], result: out })?;
    Ok(Vec::new())
}
