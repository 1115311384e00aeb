//! Training loop, checkpoints and evaluation metrics.

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use pcno_autodiff::{adam_step, AdamConfig, AdamState, ParamGrads, ParamSet, Tape, Tensor};
use pcno_gas::{Field2, GridSpec, NetworkTopology, StateField};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, Record};
use crate::dataset::Sample;
use crate::encoding::{ChannelLayout, InputEncoding, NormStats};
use crate::error::{CoreError, Result};
use crate::losses::{data_loss_var, pde_loss_var, LossContext, LossReport, LossWeights};
use crate::model::{forward, init_params, OutputAffine, PcnoConfig};

pub const CHECKPOINT_FORMAT: &str = "pcno-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: PcnoConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Number of data samples and PDE instances to draw from the datasets.
    pub n_data: usize,
    pub n_pde: usize,
    pub data_grid: Option<GridSpec>,
    pub pde_grid: Option<GridSpec>,
    /// Add the physics loss on data batches; `None` enables it when `n_pde > 0`.
    #[serde(default)]
    pub pde_on_data: Option<bool>,
    pub val_fraction: f64,
    /// Write a checkpoint every this many epochs (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: width 32, 4 layers, 300 epochs, lr 1e-3 halved every 100 epochs.
    pub fn desk(model: PcnoConfig, weights: LossWeights) -> Self {
        Self {
            model: PcnoConfig { width: 32, ..model },
            epochs: 300,
            batch_size: 4,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 100,
            seed: 0,
            weights,
            n_data: 200,
            n_pde: 200,
            data_grid: Some(GridSpec::new(640.0, 400.0)),
            pde_grid: Some(GridSpec::new(320.0, 200.0)),
            pde_on_data: None,
            val_fraction: 0.1,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let bad = |m: String| Err(CoreError::Contract(format!("train config: {m}")));
        if self.n_data + self.n_pde == 0 {
            return bad("n_data + n_pde must be >= 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad(format!("learning rate {} / decay {} must be > 0", self.lr, self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        for g in [self.data_grid, self.pde_grid].into_iter().flatten() {
            g.check()?;
        }
        Ok(())
    }

    pub fn pde_on_data(&self) -> bool {
        self.pde_on_data.unwrap_or(self.n_pde > 0)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = if self.lr_decay_every == 0 { 0 } else { epoch / self.lr_decay_every };
        self.lr * self.lr_decay.powi(k as i32)
    }
}

/// Trained parameters with everything needed to evaluate them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PcnoConfig,
    pub norm: NormStats,
    pub channels: ChannelLayout,
    pub params: ParamSet,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: PcnoConfig,
    norm: NormStats,
    channels: ChannelLayout,
    names: Vec<String>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let names = self.params.iter().map(|(n, _)| n.to_string()).collect();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config,
            norm: self.norm.clone(),
            channels: self.channels.clone(),
            names,
            meta: self.meta.clone(),
        };
        let mut rec = Record::default();
        for (n, t) in self.params.iter() {
            rec.push(n, t.clone());
        }
        write_container(path, &serde_json::to_value(&manifest)?, &[rec])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, mut records) = read_container(path)?;
        let m: CheckpointManifest = serde_json::from_value(m)?;
        if m.format != CHECKPOINT_FORMAT || records.len() != 1 {
            return Err(CoreError::Contract(format!("{} is not a checkpoint", path.display())));
        }
        let template = init_params(&m.config, 0)?;
        let mut rec = records.remove(0);
        let mut params = ParamSet::new();
        for (name, t) in template.iter() {
            let v = rec.take(name)?;
            if v.shape() != t.shape() || v.dtype() != t.dtype() {
                return Err(CoreError::Contract(format!("checkpoint tensor {name:?} has shape {:?}", v.shape())));
            }
            params.insert(name, v);
        }
        Ok(Self { config: m.config, norm: m.norm, channels: m.channels, params, meta: m.meta })
    }

    pub fn affine(&self) -> OutputAffine {
        let (scale, shift) = self.norm.output_affine();
        OutputAffine { scale, shift }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Data,
    Pde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub kind: BatchKind,
    pub lr: f64,
    pub report: LossReport,
    pub wall_s: f64,
}

impl StepLog {
    /// Columns of [`StepLog::csv_row`]; wall time is left out so logs of
    /// identical runs compare equal.
    pub const CSV_HEADER: &'static str =
        "step,epoch,kind,lr,data,equation,initial,boundary_flow,boundary_pressure,pde,total";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.epoch,
            match self.kind {
                BatchKind::Data => "data",
                BatchKind::Pde => "pde",
            },
            self.lr,
            r.data,
            r.equation,
            r.initial,
            r.boundary_flow,
            r.boundary_pressure,
            r.pde,
            r.total
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    /// Mean validation data loss per epoch (empty without a validation split).
    pub validation: Vec<f64>,
    pub best_epoch: usize,
}

/// Optional side outputs of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    pub checkpoint_dir: Option<PathBuf>,
    pub verbose: bool,
}

/// A training item with its cached physics context and normalized target.
struct Item<'a> {
    sample: &'a Sample,
    ctx: Rc<LossContext>,
    target: Option<Rc<Vec<Tensor>>>,
}

fn check_grid(samples: &[Sample], grid: Option<GridSpec>, what: &str) -> Result<()> {
    if let Some(g) = grid {
        if let Some(s) = samples.iter().find(|s| (s.grid.dt, s.grid.dx) != (g.dt, g.dx)) {
            return Err(CoreError::Contract(format!(
                "{what} sample {} is on {}s x {}m, config expects {}s x {}m",
                s.seed, s.grid.dt, s.grid.dx, g.dt, g.dx
            )));
        }
    }
    Ok(())
}

/// One sample's loss and parameter gradients.
fn sample_step(
    params: &ParamSet,
    cfg: &PcnoConfig,
    norm: &NormStats,
    item: &Item,
    weights: &LossWeights,
    use_data: bool,
    use_pde: bool,
    grads: bool,
) -> Result<(LossReport, Option<ParamGrads>)> {
    let inputs = norm.normalize_inputs(&item.sample.encoding)?;
    let (scale, shift) = norm.output_affine();
    let affine = OutputAffine { scale, shift };
    let mut tape = if grads { Tape::new() } else { Tape::inference() };
    let pred = forward(&mut tape, params, cfg, &inputs.regions, &affine)?;
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    if use_data {
        let target = item.target.clone().ok_or_else(|| CoreError::Contract("data step without target".into()))?;
        let (v, per) = data_loss_var(&mut tape, &pred.normalized, target, weights.gamma)?;
        report.data = tape.value(v).re()[0];
        report.region_data = per;
        terms.push(v);
    }
    if use_pde {
        let (v, r) = pde_loss_var(&mut tape, &pred.physical, item.ctx.clone(), *weights)?;
        report = LossReport { data: report.data, region_data: std::mem::take(&mut report.region_data), ..r };
        terms.push(v);
    }
    report.total = report.data + report.pde;
    let loss = match terms.as_slice() {
        [a] => *a,
        [a, b] => tape.add(*a, *b)?,
        _ => return Err(CoreError::Contract("step without any loss term".into())),
    };
    let g = if grads { Some(tape.backward(loss, params)?) } else { None };
    Ok((report, g))
}

fn items<'a>(samples: &'a [Sample], network: &NetworkTopology, norm: &NormStats, with_target: bool) -> Result<Vec<Item<'a>>> {
    samples
        .iter()
        .map(|s| {
            let ctx = Rc::new(LossContext::new(network, &s.schedule, &s.grid)?);
            let target = if with_target {
                let t = s.target.as_ref().ok_or_else(|| {
                    CoreError::Contract(format!("data sample {} has no simulated target", s.seed))
                })?;
                Some(Rc::new(norm.normalize_targets(t)?))
            } else {
                None
            };
            Ok(Item { sample: s, ctx, target })
        })
        .collect()
}

/// Fit normalization on the training inputs and (if any) data targets.
pub fn fit_norm(network: &NetworkTopology, data: &[Sample], pde: &[Sample]) -> Result<NormStats> {
    let layout = ChannelLayout::for_network(network);
    let inputs: Vec<&InputEncoding> = data.iter().chain(pde).map(|s| &s.encoding).collect();
    let targets: Vec<&StateField> = data.iter().filter_map(|s| s.target.as_ref()).collect();
    if targets.is_empty() {
        NormStats::physics_prior(&layout, &inputs)
    } else {
        NormStats::fit(&layout, &inputs, &targets)
    }
}

/// Train on the first `n_data` samples of `data` and `n_pde` of `pde`.
pub fn train(
    config: &TrainConfig,
    network: &NetworkTopology,
    data: &[Sample],
    pde: &[Sample],
    io: &TrainIo,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.len() < config.n_data || pde.len() < config.n_pde {
        return Err(CoreError::Contract(format!(
            "config wants {} data / {} PDE samples, datasets hold {} / {}",
            config.n_data,
            config.n_pde,
            data.len(),
            pde.len()
        )));
    }
    let (data, pde) = (&data[..config.n_data], &pde[..config.n_pde]);
    check_grid(data, config.data_grid, "data")?;
    check_grid(pde, config.pde_grid, "PDE")?;
    let layout = ChannelLayout::for_network(network);
    if layout.len() != config.model.in_channels || network.pipes.len() != config.model.regions {
        return Err(CoreError::Contract(format!(
            "model expects {} channels / {} regions, network gives {} / {}",
            config.model.in_channels,
            config.model.regions,
            layout.len(),
            network.pipes.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 { ((data.len() as f64) * config.val_fraction).round() as usize } else { 0 };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let train_data: Vec<Sample> = train_idx.iter().map(|&i| data[i].clone()).collect();
    let val_data: Vec<Sample> = val_idx.iter().map(|&i| data[i].clone()).collect();

    let norm = fit_norm(network, &train_data, pde)?;
    let data_items = items(&train_data, network, &norm, true)?;
    let val_items = items(&val_data, network, &norm, true)?;
    let pde_items = items(pde, network, &norm, false)?;

    let mut params = init_params(&config.model, config.seed)?;
    let mut adam = AdamState::new(&params);
    let use_pde_on_data = config.pde_on_data();
    let started = Instant::now();
    let mut log = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut step = 0usize;
    let snapshot = |p: &ParamSet, epoch: usize, val: Option<f64>| Checkpoint {
        config: config.model,
        norm: norm.clone(),
        channels: layout.clone(),
        params: p.clone(),
        meta: serde_json::json!({ "epoch": epoch, "validation_data_loss": val, "train_config": config }),
    };

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let adam_cfg = AdamConfig { lr, ..AdamConfig::default() };
        let mut d: Vec<usize> = (0..data_items.len()).collect();
        let mut p: Vec<usize> = (0..pde_items.len()).collect();
        d.shuffle(&mut rng);
        p.shuffle(&mut rng);
        let mut batches: Vec<(BatchKind, Vec<usize>)> = d
            .chunks(config.batch_size)
            .map(|c| (BatchKind::Data, c.to_vec()))
            .chain(p.chunks(config.batch_size).map(|c| (BatchKind::Pde, c.to_vec())))
            .collect();
        batches.shuffle(&mut rng);
        for (kind, members) in batches {
            let mut total = ParamGrads::zeros(&params);
            let mut reports = Vec::with_capacity(members.len());
            for &i in &members {
                let (item, use_data, use_pde) = match kind {
                    BatchKind::Data => (&data_items[i], true, use_pde_on_data),
                    BatchKind::Pde => (&pde_items[i], false, true),
                };
                let (report, g) =
                    sample_step(&params, &config.model, &norm, item, &config.weights, use_data, use_pde, true)?;
                let g = g.expect("gradient tape");
                if !report.is_finite() || !g.all_finite() {
                    return Err(CoreError::NonFinite {
                        step,
                        detail: format!(
                            "{kind:?} batch, sample seed {}, grid {}s x {}m, losses {}",
                            item.sample.seed,
                            item.sample.grid.dt,
                            item.sample.grid.dx,
                            serde_json::to_string(&report).unwrap_or_default()
                        ),
                    });
                }
                total.accumulate(&g);
                reports.push(report);
            }
            total.scale(1.0 / members.len() as f64);
            adam_step(&mut params, &total, &mut adam, &adam_cfg);
            let entry = StepLog {
                step,
                epoch,
                kind,
                lr,
                report: LossReport::mean(&reports),
                wall_s: started.elapsed().as_secs_f64(),
            };
            on_step(&entry);
            log.push(entry);
            step += 1;
        }

        let val = if val_items.is_empty() {
            None
        } else {
            let mut acc = 0.0;
            for item in &val_items {
                acc += sample_step(&params, &config.model, &norm, item, &config.weights, true, false, false)?.0.data;
            }
            Some(acc / val_items.len() as f64)
        };
        if io.verbose {
            let last = log.last().map(|l| l.report.total).unwrap_or(f64::NAN);
            eprintln!("epoch {epoch}: lr {lr:.2e}, last batch loss {last:.4e}, validation {val:?}");
        }
        if let Some(v) = val {
            validation.push(v);
            if best.as_ref().map_or(true, |b| v < b.0) {
                best = Some((v, epoch, params.clone()));
                if let Some(dir) = &io.checkpoint_dir {
                    snapshot(&params, epoch, Some(v)).save(&dir.join("best.pcno"))?;
                }
            }
        }
        if let Some(dir) = &io.checkpoint_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                snapshot(&params, epoch, val).save(&dir.join(format!("epoch_{:04}.pcno", epoch + 1)))?;
            }
        }
    }

    let (best_epoch, chosen, val) = match best {
        Some((v, e, p)) => (e, p, Some(v)),
        None => (config.epochs - 1, params, None),
    };
    let checkpoint = snapshot(&chosen, best_epoch, val);
    if let Some(dir) = &io.checkpoint_dir {
        checkpoint.save(&dir.join("final.pcno"))?;
    }
    Ok(TrainOutcome { checkpoint, log, validation, best_epoch })
}

/// Physical-unit prediction of one sample, evaluated without gradients.
pub fn predict(ckpt: &Checkpoint, sample: &Sample) -> Result<StateField> {
    if sample.encoding.channels() != ckpt.config.in_channels || sample.encoding.regions.len() != ckpt.config.regions {
        return Err(CoreError::Contract("checkpoint is incompatible with the sample's channel layout".into()));
    }
    let inputs = ckpt.norm.normalize_inputs(&sample.encoding)?;
    let mut tape = Tape::inference();
    let pred = forward(&mut tape, &ckpt.params, &ckpt.config, &inputs.regions, &ckpt.affine())?;
    let mut flow = Vec::with_capacity(pred.physical.len());
    let mut pressure = Vec::with_capacity(pred.physical.len());
    for &v in &pred.physical {
        let t = tape.value(v);
        let (nt, nx) = (t.shape()[1], t.shape()[2]);
        let (m, p) = t.re().split_at(nt * nx);
        flow.push(Field2::from_vec(nt, nx, m.to_vec())?);
        pressure.push(Field2::from_vec(nt, nx, p.to_vec())?);
    }
    Ok(StateField { flow, pressure, grid: sample.grid })
}

/// Pointwise `|pred − true| / RMS(true)` for flow and pressure, where the RMS
/// runs over every region's grid of the sample.
pub fn relative_l2(pred: &StateField, truth: &StateField) -> Result<(Vec<f64>, Vec<f64>)> {
    if !pred.same_shape(truth) {
        return Err(CoreError::Contract("prediction and truth grids differ".into()));
    }
    let one = |a: &[Field2], b: &[Field2], what: &str| -> Result<Vec<f64>> {
        let n: usize = b.iter().map(|f| f.data.len()).sum();
        let rms = (b.iter().flat_map(|f| &f.data).map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if !(rms > 0.0) {
            return Err(CoreError::DegenerateNorm(format!("true {what} field is identically zero")));
        }
        Ok(a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(move |(p, t)| (p - t).abs() / rms))
            .collect())
    };
    Ok((one(&pred.flow, &truth.flow, "flow")?, one(&pred.pressure, &truth.pressure, "pressure")?))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std: f64,
}

impl ErrorStats {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub label: String,
    pub dt: f64,
    pub dx: f64,
    pub samples: usize,
    pub flow: ErrorStats,
    pub pressure: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn entry(&self, label: &str) -> Option<&EvalEntry> {
        self.entries.iter().find(|e| e.label == label)
    }
}

/// Evaluate on labelled test sets; every sample needs a target.
pub fn evaluate(ckpt: &Checkpoint, sets: &[(String, &[Sample])]) -> Result<EvalReport> {
    let mut entries = Vec::with_capacity(sets.len());
    for (label, samples) in sets {
        let (mut fe, mut pe) = (Vec::new(), Vec::new());
        let mut grid = None;
        for s in samples.iter() {
            let truth = s
                .target
                .as_ref()
                .ok_or_else(|| CoreError::Contract(format!("test sample {} has no target", s.seed)))?;
            let pred = predict(ckpt, s)?;
            let (f, p) = relative_l2(&pred, truth)?;
            fe.extend(f);
            pe.extend(p);
            grid.get_or_insert(s.grid);
        }
        let g = grid.unwrap_or(GridSpec::new(f64::NAN, f64::NAN));
        entries.push(EvalEntry {
            label: label.clone(),
            dt: g.dt,
            dx: g.dx,
            samples: samples.len(),
            flow: ErrorStats::of(&fe),
            pressure: ErrorStats::of(&pe),
        });
    }
    Ok(EvalReport { variant: ckpt.config.variant.name().into(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_constant() {
        let s = ErrorStats::of(&[0.25; 9]);
        assert_eq!(s.mean, 0.25);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn lr_schedule() {
        let model = PcnoConfig::paper(crate::model::Variant::Pcno);
        let c = TrainConfig::desk(model, LossWeights::zero());
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(100), 5e-4);
        assert_eq!(c.lr_at(250), 2.5e-4);
    }

    #[test]
    fn empty_mix_rejected() {
        let model = PcnoConfig::paper(crate::model::Variant::Pcno);
        let c = TrainConfig { n_data: 0, n_pde: 0, ..TrainConfig::desk(model, LossWeights::zero()) };
        assert!(c.validate().is_err());
    }
}
