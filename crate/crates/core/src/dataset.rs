//! Scenario datasets: generation from the simulator and container I/O.

use std::path::Path;

use pcno_autodiff::{DType, Tensor};
use pcno_gas::{
    random_scenario, restrict_field, simulate, BoundarySchedule, Field2, GasError, GridSpec, NetworkTopology,
    SolverOptions, SquareWaveSpec, StateField,
};
use serde::{Deserialize, Serialize};

use crate::container::{read_container, require_dtype, write_container, Record};
use crate::encoding::{encode_inputs, ChannelLayout, InputEncoding};
use crate::error::{CoreError, Result};

pub const DATASET_FORMAT: &str = "pcno-dataset";

/// One scenario: raw (unnormalized) encoding plus an optional simulated target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub schedule: BoundarySchedule,
    pub grid: GridSpec,
    pub encoding: InputEncoding,
    pub target: Option<StateField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub schedule: BoundarySchedule,
    pub grid: GridSpec,
    pub has_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub network: NetworkTopology,
    pub channels: ChannelLayout,
    pub samples: Vec<SampleMeta>,
    #[serde(default)]
    pub skipped_seeds: Vec<u64>,
    /// Free-form echo of the generating configuration.
    #[serde(default)]
    pub generation: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub count: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub wave: SquareWaveSpec,
    pub ramp: f64,
    pub snap: f64,
    /// Store encodings only (PDE-only instances).
    pub physics_only: bool,
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self { newton_tol: o.newton_tol, max_iters: o.max_iters }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions { newton_tol: self.newton_tol, max_iters: self.max_iters, ..SolverOptions::default() }
    }
}

impl GenerationConfig {
    pub fn new(count: usize, seed: u64, grid: GridSpec) -> Self {
        Self {
            count,
            seed,
            grid,
            wave: SquareWaveSpec::paper(),
            ramp: pcno_gas::network::PAPER_RAMP,
            snap: pcno_gas::network::PAPER_RAMP,
            physics_only: false,
            solver: SolverConfig::default(),
        }
    }
}

/// Outcome of simulating one scenario.
pub enum Generated {
    Ok(Sample),
    Skipped { seed: u64, error: GasError },
}

/// Simulate with a single retry at half the time step, restricted back onto
/// the requested grid.
pub fn simulate_with_retry(
    network: &NetworkTopology,
    schedule: &BoundarySchedule,
    grid: &GridSpec,
    opts: &SolverOptions,
) -> std::result::Result<StateField, GasError> {
    match simulate(network, schedule, grid, opts) {
        Ok(f) => Ok(f),
        Err(GasError::SolverFailure { .. }) => {
            let fine = GridSpec { dt: grid.dt / 2.0, ..*grid };
            let f = simulate(network, schedule, &fine, opts)?;
            restrict_field(&f, 2, 1)
        }
        Err(e) => Err(e),
    }
}

pub fn generate_one(network: &NetworkTopology, cfg: &GenerationConfig, index: usize) -> Result<Generated> {
    let seed = cfg.seed + index as u64;
    let schedule = random_scenario(network, &cfg.wave, cfg.ramp, cfg.snap, seed)?;
    let encoding = encode_inputs(network, &schedule, &cfg.grid)?;
    let target = if cfg.physics_only {
        None
    } else {
        match simulate_with_retry(network, &schedule, &cfg.grid, &cfg.solver.options()) {
            Ok(f) => Some(f),
            Err(error @ GasError::SolverFailure { .. }) => return Ok(Generated::Skipped { seed, error }),
            Err(e) => return Err(e.into()),
        }
    };
    Ok(Generated::Ok(Sample { seed, schedule, grid: cfg.grid, encoding, target }))
}

/// Sequentially generate `cfg.count` scenarios in index order.
pub fn generate(network: &NetworkTopology, cfg: &GenerationConfig) -> Result<(Vec<Sample>, Vec<u64>)> {
    let mut samples = Vec::with_capacity(cfg.count);
    let mut skipped = Vec::new();
    for i in 0..cfg.count {
        match generate_one(network, cfg, i)? {
            Generated::Ok(s) => samples.push(s),
            Generated::Skipped { seed, .. } => skipped.push(seed),
        }
    }
    Ok((samples, skipped))
}

fn field_tensor(f: &Field2) -> Tensor {
    Tensor::real(&[f.nt, f.nx], f.data.clone()).expect("field shape")
}

fn tensor_field(t: Tensor) -> Result<Field2> {
    require_dtype(&t, DType::F64, "field")?;
    if t.shape().len() != 2 {
        return Err(CoreError::Contract(format!("field tensor of shape {:?}", t.shape())));
    }
    let (nt, nx) = (t.shape()[0], t.shape()[1]);
    Ok(Field2::from_vec(nt, nx, t.into_re())?)
}

pub fn sample_record(s: &Sample) -> Record {
    let mut r = Record::default();
    for (e, t) in s.encoding.regions.iter().enumerate() {
        r.push(format!("a/{e}"), t.clone());
    }
    if let Some(f) = &s.target {
        for (e, (m, p)) in f.flow.iter().zip(&f.pressure).enumerate() {
            r.push(format!("M/{e}"), field_tensor(m));
            r.push(format!("P/{e}"), field_tensor(p));
        }
    }
    r
}

pub fn write_dataset(path: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<()> {
    if manifest.samples.len() != samples.len() {
        return Err(CoreError::Contract("manifest sample list does not match samples".into()));
    }
    let records: Vec<Record> = samples.iter().map(sample_record).collect();
    write_container(path, &serde_json::to_value(manifest)?, &records)
}

pub fn manifest_for(network: &NetworkTopology, samples: &[Sample], skipped: Vec<u64>, generation: serde_json::Value) -> DatasetManifest {
    DatasetManifest {
        format: DATASET_FORMAT.into(),
        network: network.clone(),
        channels: ChannelLayout::for_network(network),
        samples: samples
            .iter()
            .map(|s| SampleMeta { seed: s.seed, schedule: s.schedule.clone(), grid: s.grid, has_target: s.target.is_some() })
            .collect(),
        skipped_seeds: skipped,
        generation,
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let (m, records) = read_container(path)?;
    let manifest: DatasetManifest = serde_json::from_value(m)?;
    if manifest.format != DATASET_FORMAT {
        return Err(CoreError::Contract(format!("container holds {:?}, not a dataset", manifest.format)));
    }
    if records.len() != manifest.samples.len() {
        return Err(CoreError::Contract("record count differs from manifest".into()));
    }
    let e = manifest.network.pipes.len();
    let samples = records
        .into_iter()
        .zip(&manifest.samples)
        .map(|(mut r, meta)| {
            let regions = (0..e).map(|i| r.take(&format!("a/{i}"))).collect::<Result<Vec<_>>>()?;
            let target = if meta.has_target {
                let mut flow = Vec::with_capacity(e);
                let mut pressure = Vec::with_capacity(e);
                for i in 0..e {
                    flow.push(tensor_field(r.take(&format!("M/{i}"))?)?);
                    pressure.push(tensor_field(r.take(&format!("P/{i}"))?)?);
                }
                Some(StateField { flow, pressure, grid: meta.grid })
            } else {
                None
            };
            Ok(Sample {
                seed: meta.seed,
                schedule: meta.schedule.clone(),
                grid: meta.grid,
                encoding: InputEncoding { regions },
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Per-pipe CSV of `t_s,x_m,M,P` rows.
pub fn field_csv(field: &StateField, region: usize) -> String {
    let (m, p) = (&field.flow[region], &field.pressure[region]);
    let mut s = String::from("t_s,x_m,M_kg_s,P_Pa\n");
    for t in 0..m.nt {
        for x in 0..m.nx {
            s.push_str(&format!(
                "{},{},{:.17e},{:.17e}\n",
                t as f64 * field.grid.dt,
                x as f64 * field.grid.dx,
                m.get(t, x),
                p.get(t, x)
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcno_gas::build_paper_network;

    #[test]
    fn dataset_round_trip() {
        let (net, _) = build_paper_network();
        let mut cfg = GenerationConfig::new(2, 5, GridSpec::new(3200.0, 2000.0));
        let (mut samples, skipped) = generate(&net, &cfg).unwrap();
        assert!(skipped.is_empty());
        cfg.physics_only = true;
        cfg.seed = 100;
        samples.extend(generate(&net, &cfg).unwrap().0);
        let manifest = manifest_for(&net, &samples, skipped, serde_json::json!({"k": 1}));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pcno");
        write_dataset(&p, &manifest, &samples).unwrap();
        let (m2, s2) = read_dataset(&p).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(s2, samples);
        assert!(s2[2].target.is_none());
    }
}
