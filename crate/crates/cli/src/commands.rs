use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use pcno_core::container::write_atomic;
use pcno_core::dataset::{field_csv, generate_one, manifest_for, simulate_with_retry, Generated, SolverConfig};
use pcno_core::trainer::{StepLog, TrainIo};
use pcno_core::{
    encode_inputs, evaluate, predict, read_dataset, train, write_dataset, Checkpoint, EvalReport, GenerationConfig,
    LossWeights, PcnoConfig, Sample, TrainConfig, Variant,
};
use pcno_gas::{BoundarySchedule, Field2, GridSpec, NetworkTopology, SquareWaveSpec, StateField};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{labelled, load_network, read_json, resolve};
use crate::plot;
use crate::NumericalFailure;

fn is_false(b: &bool) -> bool {
    !*b
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

/// The resolved config as echoed into manifests. The output location is left
/// out so that identical runs written to different places compare equal.
fn echo(command: &str, cfg: &impl Serialize) -> Value {
    let mut v = serde_json::to_value(cfg).unwrap_or(Value::Null);
    if let Some(m) = v.as_object_mut() {
        m.remove("out");
    }
    json!({ "command": command, "config": v })
}

fn require_out(out: &Option<PathBuf>) -> Result<&PathBuf> {
    out.as_ref().context("no output path: pass --out or set `out` in the config file")
}

// ---------------------------------------------------------------- simulate

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    /// JSON config file; flags override its entries.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Network document (pipes, nodes, optional schedule); defaults to the built-in network.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
    /// Boundary schedule JSON; defaults to the schedule carried by the network document.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PathBuf>,
    #[arg(long)]
    #[serde(rename = "grid.dt", skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[arg(long)]
    #[serde(rename = "grid.dx", skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub network: Option<PathBuf>,
    pub schedule: Option<PathBuf>,
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub out: Option<PathBuf>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            network: None,
            schedule: None,
            grid: GridSpec::new(640.0, 400.0),
            solver: SolverConfig::default(),
            out: None,
        }
    }
}

fn load_schedule(path: &Path) -> Result<BoundarySchedule> {
    let v = read_json(path)?;
    let inner = v.get("schedule").cloned().unwrap_or(v);
    serde_json::from_value(inner).with_context(|| format!("{} is not a boundary schedule", path.display()))
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg: SimulateConfig = resolve(&SimulateConfig::default(), args.config.as_deref(), &args)?;
    let out = require_out(&cfg.out)?;
    let (net, carried) = load_network(cfg.network.as_ref())?;
    let schedule = match &cfg.schedule {
        Some(p) => load_schedule(p)?,
        None => carried.context("the network document carries no schedule; pass --schedule")?,
    };
    schedule.validate(&net)?;
    cfg.grid.check()?;
    let field = simulate_with_retry(&net, &schedule, &cfg.grid, &cfg.solver.options())?;
    let encoding = encode_inputs(&net, &schedule, &cfg.grid)?;
    let sample = Sample { seed: 0, schedule, grid: cfg.grid, encoding, target: Some(field) };

    std::fs::create_dir_all(out)?;
    let resolved = echo("simulate", &cfg);
    let manifest = manifest_for(&net, std::slice::from_ref(&sample), Vec::new(), resolved.clone());
    write_dataset(&out.join("simulation.pcno"), &manifest, std::slice::from_ref(&sample))?;
    let field = sample.target.as_ref().expect("simulated");
    let mut shapes = Vec::new();
    for (e, pipe) in net.regions().iter().enumerate() {
        write_atomic(&out.join(format!("pipe{}.csv", pipe.id)), field_csv(field, e).as_bytes())?;
        shapes.push(json!({ "pipe": pipe.id, "nt": field.flow[e].nt, "nx": field.flow[e].nx }));
    }
    write_json(&out.join("manifest.json"), &json!({ "resolved": resolved, "shapes": shapes }))?;
    eprintln!("simulated {} pipes on {}s x {}m into {}", shapes.len(), cfg.grid.dt, cfg.grid.dx, out.display());
    Ok(())
}

// ---------------------------------------------------------------- gen-data

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Number of scenarios.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Seed of scenario 0; scenario i uses seed + i.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(rename = "grid.dt", skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[arg(long)]
    #[serde(rename = "grid.dx", skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
    /// Store encodings only, without simulated targets.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub physics_only: bool,
    /// Output dataset file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores). Does not affect the output.
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub n: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub network: Option<PathBuf>,
    pub physics_only: bool,
    pub wave: SquareWaveSpec,
    pub ramp: f64,
    pub snap: f64,
    pub solver: SolverConfig,
    /// Largest tolerated fraction of skipped (non-converging) scenarios.
    pub max_skip_fraction: f64,
    pub out: Option<PathBuf>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let g = GenerationConfig::new(0, 0, GridSpec::new(640.0, 400.0));
        Self {
            n: 0,
            seed: 0,
            grid: g.grid,
            network: None,
            physics_only: false,
            wave: g.wave,
            ramp: g.ramp,
            snap: g.snap,
            solver: g.solver,
            max_skip_fraction: 0.05,
            out: None,
        }
    }
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let cfg: GenDataConfig = resolve(&GenDataConfig::default(), args.config.as_deref(), &args)?;
    if cfg.n == 0 {
        bail!("--n must be >= 1: an empty dataset is not written");
    }
    let out = require_out(&cfg.out)?;
    cfg.grid.check()?;
    let (net, _) = load_network(cfg.network.as_ref())?;
    let gen = GenerationConfig {
        count: cfg.n,
        seed: cfg.seed,
        grid: cfg.grid,
        wave: cfg.wave,
        ramp: cfg.ramp,
        snap: cfg.snap,
        physics_only: cfg.physics_only,
        solver: cfg.solver,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.workers).build()?;
    let results: Vec<_> = pool.install(|| (0..cfg.n).into_par_iter().map(|i| generate_one(&net, &gen, i)).collect());
    let mut samples = Vec::with_capacity(cfg.n);
    let mut skipped = Vec::new();
    for r in results {
        match r? {
            Generated::Ok(s) => samples.push(s),
            Generated::Skipped { seed, error } => {
                eprintln!("scenario seed {seed} skipped: {error}");
                skipped.push(seed);
            }
        }
    }
    let frac = skipped.len() as f64 / cfg.n as f64;
    if frac > cfg.max_skip_fraction {
        return Err(NumericalFailure(format!(
            "{} of {} scenarios failed to converge ({:.1}% > {:.1}%)",
            skipped.len(),
            cfg.n,
            100.0 * frac,
            100.0 * cfg.max_skip_fraction
        ))
        .into());
    }
    let manifest = manifest_for(&net, &samples, skipped, echo("gen-data", &cfg));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_dataset(out, &manifest, &samples)?;
    eprintln!("wrote {} scenarios ({} skipped) to {}", samples.len(), manifest.skipped_seeds.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset with simulated targets.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Dataset of PDE instances (targets, if present, are ignored).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pde: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// PCNO, PCNO-C, PCNO-3D, FNO-2D or FNO-3D.
    #[arg(long)]
    #[serde(rename = "train.model.variant", skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[arg(long)]
    #[serde(rename = "train.model.width", skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(rename = "train.model.layers", skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(rename = "train.epochs", skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(rename = "train.batch_size", skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(rename = "train.lr", skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(rename = "train.seed", skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(rename = "train.n_data", skip_serializing_if = "Option::is_none")]
    pub n_data: Option<usize>,
    #[arg(long)]
    #[serde(rename = "train.n_pde", skip_serializing_if = "Option::is_none")]
    pub n_pde: Option<usize>,
    #[arg(long)]
    #[serde(rename = "train.checkpoint_every", skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    /// Print one line per epoch to stderr.
    #[arg(long)]
    #[serde(skip)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCmdConfig {
    pub data: Option<PathBuf>,
    pub pde: Option<PathBuf>,
    pub network: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

pub fn default_train_config(net: &NetworkTopology) -> TrainConfig {
    let model = PcnoConfig {
        regions: net.pipes.len(),
        in_channels: pcno_core::ChannelLayout::for_network(net).len(),
        ..PcnoConfig::paper(Variant::Pcno)
    };
    TrainConfig::desk(model, LossWeights::for_network(net))
}

fn load_samples(path: Option<&PathBuf>, need: usize, what: &str) -> Result<(Option<NetworkTopology>, Vec<Sample>)> {
    match path {
        Some(p) => {
            let (m, s) = read_dataset(p).with_context(|| format!("reading {what} dataset {}", p.display()))?;
            Ok((Some(m.network), s))
        }
        None if need > 0 => bail!("{need} {what} samples requested but no --{what} dataset given"),
        None => Ok((None, Vec::new())),
    }
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    // Defaults depend on the network, which may itself come from the config.
    let pre: Value = match args.config.as_deref() {
        Some(p) => read_json(p)?,
        None => Value::Object(Map::new()),
    };
    let net_path = args.network.clone().or_else(|| pre.get("network").and_then(|v| v.as_str()).map(PathBuf::from));
    let (mut net, _) = load_network(net_path.as_ref())?;
    let defaults =
        TrainCmdConfig { data: None, pde: None, network: None, out: None, train: default_train_config(&net) };
    let cfg: TrainCmdConfig = resolve(&defaults, args.config.as_deref(), &args)?;
    cfg.train.validate()?;
    let out = require_out(&cfg.out)?.clone();
    let (dn, data) = load_samples(cfg.data.as_ref(), cfg.train.n_data, "data")?;
    let (pn, pde) = load_samples(cfg.pde.as_ref(), cfg.train.n_pde, "pde")?;
    for n in [dn, pn].into_iter().flatten() {
        if cfg.network.is_none() && net_path.is_none() {
            net = n.clone();
        } else if n != net {
            bail!("dataset network differs from the configured network");
        }
    }

    std::fs::create_dir_all(&out)?;
    let io = TrainIo { checkpoint_dir: Some(out.clone()), verbose: args.verbose };
    let mut timing = String::from("step,wall_s\n");
    let outcome = train(&cfg.train, &net, &data, &pde, &io, |l: &StepLog| {
        timing.push_str(&format!("{},{:.3}\n", l.step, l.wall_s));
    })?;
    let mut log = format!("{}\n", StepLog::CSV_HEADER);
    for l in &outcome.log {
        log.push_str(&l.csv_row());
        log.push('\n');
    }
    write_atomic(&out.join("train_log.csv"), log.as_bytes())?;
    write_atomic(&out.join("timing.csv"), timing.as_bytes())?;
    write_json(
        &out.join("manifest.json"),
        &json!({
            "resolved": echo("train", &cfg),
            "best_epoch": outcome.best_epoch,
            "validation_data_loss": outcome.validation,
            "checkpoint": "final.pcno",
        }),
    )?;
    eprintln!("trained {} for {} steps; selected epoch {}", cfg.train.model.variant.name(), outcome.log.len(), outcome.best_epoch);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `label=path`, repeatable: one table row per checkpoint.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<String>,
    /// `label=path`, repeatable: one table column per test dataset.
    #[arg(long = "test")]
    pub tests: Vec<String>,
    /// JSON report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Labelled {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    pub checkpoints: Vec<Labelled>,
    pub tests: Vec<Labelled>,
    pub out: Option<PathBuf>,
}

fn labelled_list(v: &[String]) -> Value {
    json!(v
        .iter()
        .map(|a| {
            let (label, path) = labelled(a);
            Labelled { label, path }
        })
        .collect::<Vec<_>>())
}

fn cell(r: &EvalReport, label: &str) -> String {
    match r.entry(label) {
        Some(e) => format!("{:.4}±{:.4} / {:.5}±{:.5}", e.flow.mean, e.flow.std, e.pressure.mean, e.pressure.std),
        None => "-".into(),
    }
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut flags = Map::new();
    if !args.checkpoints.is_empty() {
        flags.insert("checkpoints".into(), labelled_list(&args.checkpoints));
    }
    if !args.tests.is_empty() {
        flags.insert("tests".into(), labelled_list(&args.tests));
    }
    if let Some(o) = &args.out {
        flags.insert("out".into(), json!(o));
    }
    let cfg: EvalConfig = resolve(&EvalConfig::default(), args.config.as_deref(), flags)?;
    if cfg.checkpoints.is_empty() || cfg.tests.is_empty() {
        bail!("eval needs at least one --checkpoint and one --test");
    }
    let ckpts = cfg
        .checkpoints
        .iter()
        .map(|c| Checkpoint::load(&c.path).with_context(|| format!("reading checkpoint {}", c.path.display())))
        .collect::<Result<Vec<_>>>()?;
    let mut sets = Vec::new();
    for t in &cfg.tests {
        let (_, s) = read_dataset(&t.path).with_context(|| format!("reading test set {}", t.path.display()))?;
        sets.push((t.label.clone(), s));
    }
    let views: Vec<(String, &[Sample])> = sets.iter().map(|(l, s)| (l.clone(), s.as_slice())).collect();
    let reports = ckpts.iter().map(|c| evaluate(c, &views)).collect::<pcno_core::Result<Vec<_>>>()?;

    let mut header = vec!["model".to_string()];
    for (l, s) in &sets {
        let g = s.first().map(|s| s.grid).unwrap_or(GridSpec::new(f64::NAN, f64::NAN));
        header.push(format!("{l} ({}s×{}m) flow / pressure", g.dt, g.dx));
    }
    println!("{}", header.join(" | "));
    for (c, r) in cfg.checkpoints.iter().zip(&reports) {
        let mut row = vec![format!("{} [{}]", c.label, r.variant)];
        row.extend(sets.iter().map(|(l, _)| cell(r, l)));
        println!("{}", row.join(" | "));
    }
    if let Some(o) = &cfg.out {
        let rows: Vec<Value> =
            cfg.checkpoints.iter().zip(&reports).map(|(c, r)| json!({ "label": c.label, "report": r })).collect();
        write_json(o, &json!({ "resolved": echo("eval", &cfg), "rows": rows }))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- export-plots

#[derive(Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset holding the true fields.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Checkpoint producing the predictions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Alternatively, a dataset whose targets are taken as the predictions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PathBuf>,
    /// Sample indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub prediction: Option<PathBuf>,
    pub samples: Vec<usize>,
    pub out: Option<PathBuf>,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { data: None, checkpoint: None, prediction: None, samples: vec![0], out: None }
    }
}

fn abs_error(a: &Field2, b: &Field2) -> Field2 {
    Field2 { nt: a.nt, nx: a.nx, data: a.data.iter().zip(&b.data).map(|(p, t)| (p - t).abs()).collect() }
}

pub fn export_plots(args: ExportArgs) -> Result<()> {
    let cfg: ExportConfig = resolve(&ExportConfig::default(), args.config.as_deref(), &args)?;
    let out = require_out(&cfg.out)?;
    let data_path = cfg.data.as_ref().context("export-plots needs --data")?;
    let (manifest, truth) = read_dataset(data_path)?;
    let pred_source: Box<dyn Fn(usize) -> Result<StateField>> = match (&cfg.checkpoint, &cfg.prediction) {
        (Some(c), None) => {
            let ckpt = Checkpoint::load(c).with_context(|| format!("reading checkpoint {}", c.display()))?;
            let truth = truth.clone();
            Box::new(move |i| Ok(predict(&ckpt, &truth[i])?))
        }
        (None, Some(p)) => {
            let (_, preds) = read_dataset(p)?;
            Box::new(move |i| preds.get(i).and_then(|s| s.target.clone()).context("prediction dataset lacks that sample"))
        }
        _ => bail!("export-plots needs exactly one of --checkpoint and --prediction"),
    };
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let pipes: Vec<u32> = manifest.network.regions().iter().map(|p| p.id).collect();
    for &i in &cfg.samples {
        let s = truth.get(i).with_context(|| format!("sample index {i} out of range ({})", truth.len()))?;
        let t = s.target.as_ref().context("sample has no true field")?;
        let p = pred_source(i)?;
        if !p.same_shape(t) {
            bail!("prediction and truth shapes differ for sample {i}");
        }
        for (e, id) in pipes.iter().enumerate() {
            for (q, pf, tf) in [("M", &p.flow[e], &t.flow[e]), ("P", &p.pressure[e], &t.pressure[e])] {
                let err = abs_error(pf, tf);
                let (lo, hi) = plot::range_of([pf, tf]);
                let (_, emax) = plot::range_of([&err]);
                for (kind, f, lo, hi) in [("pred", pf, lo, hi), ("true", tf, lo, hi), ("error", &err, 0.0, emax)] {
                    let stem = format!("sample{}_pipe{id}_{q}_{kind}", s.seed);
                    write_atomic(&out.join(format!("{stem}.csv")), plot::matrix_csv(f).as_bytes())?;
                    plot::write_png(&out.join(format!("{stem}.png")), f, lo, hi)?;
                    files.push(json!({ "stem": stem, "min": lo, "max": hi, "nt": f.nt, "nx": f.nx }));
                }
            }
        }
    }
    write_json(&out.join("manifest.json"), &json!({ "resolved": echo("export-plots", &cfg), "files": files }))?;
    eprintln!("wrote {} heatmaps to {}", files.len(), out.display());
    Ok(())
}
