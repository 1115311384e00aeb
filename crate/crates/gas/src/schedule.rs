//! Time-varying boundary conditions and the randomized square-wave generator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GasError, Result};
use crate::network::{NetworkTopology, NodeKind, PAPER_HORIZON, PAPER_SOURCE_PRESSURE};

/// Levels `levels[0]` before the first switch, `levels[i + 1]` after `switch_times[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSeries {
    pub levels: Vec<f64>,
    pub switch_times: Vec<f64>,
}

impl PiecewiseSeries {
    pub fn constant(level: f64) -> Self {
        Self { levels: vec![level], switch_times: Vec::new() }
    }

    pub fn steps(levels: Vec<f64>, switch_times: Vec<f64>) -> Result<Self> {
        let s = Self { levels, switch_times };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        if self.levels.len() != self.switch_times.len() + 1 {
            return Err(GasError::Contract(format!(
                "{} levels for {} switches",
                self.levels.len(),
                self.switch_times.len()
            )));
        }
        if self.switch_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(GasError::Contract("switch times must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Raw piecewise-constant value, right-continuous at switches.
    pub fn raw_at(&self, t: f64) -> f64 {
        let k = self.switch_times.partition_point(|&s| s <= t);
        self.levels[k]
    }

    /// Value with a linear ramp of width `ramp` centered on every switch.
    ///
    /// Overlapping ramps superpose, so the expression stays continuous for
    /// arbitrarily close switches.
    pub fn ramped_at(&self, t: f64, ramp: f64) -> f64 {
        let weight = |s: f64| {
            if ramp > 0.0 {
                ((t - s) / ramp + 0.5).clamp(0.0, 1.0)
            } else if t > s {
                1.0
            } else if t == s {
                0.5
            } else {
                0.0
            }
        };
        // Weights fall with the switch index, so completed switches form a
        // prefix and the plateau level is taken verbatim.
        let done = self.switch_times.iter().take_while(|&&s| weight(s) >= 1.0).count();
        let mut v = self.levels[done];
        for i in done..self.switch_times.len() {
            let w = weight(self.switch_times[i]);
            if w <= 0.0 {
                break;
            }
            v += (self.levels[i + 1] - self.levels[i]) * w;
        }
        v
    }

    pub fn min_level(&self) -> f64 {
        self.levels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_level(&self) -> f64 {
        self.levels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Round switch times to the nearest multiple of `interval` inside
    /// `(0, horizon)`. Switches that land on the same instant collapse into
    /// one, keeping the last level.
    pub fn snapped(&self, interval: f64, horizon: f64) -> Self {
        let mut levels = vec![self.levels[0]];
        let mut times: Vec<f64> = Vec::new();
        for (i, &s) in self.switch_times.iter().enumerate() {
            let mut q = (s / interval).round() * interval;
            if q <= 0.0 {
                q = interval;
            }
            if q >= horizon {
                q = horizon - interval;
            }
            if q <= 0.0 {
                continue;
            }
            let level = self.levels[i + 1];
            match times.last() {
                Some(&last) if q <= last => {
                    *levels.last_mut().unwrap() = level;
                }
                _ => {
                    times.push(q);
                    levels.push(level);
                }
            }
        }
        // Drop switches that no longer change the level.
        let mut out_levels = vec![levels[0]];
        let mut out_times = Vec::new();
        for (i, &t) in times.iter().enumerate() {
            if levels[i + 1] != *out_levels.last().unwrap() {
                out_times.push(t);
                out_levels.push(levels[i + 1]);
            }
        }
        Self { levels: out_levels, switch_times: out_times }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySchedule {
    #[serde(rename = "horizon_s")]
    pub horizon: f64,
    #[serde(rename = "ramp_s")]
    pub ramp: f64,
    /// Source node id -> pressure series (Pa).
    pub source_pressure: BTreeMap<u32, PiecewiseSeries>,
    /// Demand node id -> withdrawal series (kg/s).
    pub demand_flow: BTreeMap<u32, PiecewiseSeries>,
}

/// Boundary values at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryValues {
    pub pressures: BTreeMap<u32, f64>,
    pub flows: BTreeMap<u32, f64>,
}

impl BoundarySchedule {
    pub fn new(horizon: f64, ramp: f64) -> Self {
        Self { horizon, ramp, source_pressure: BTreeMap::new(), demand_flow: BTreeMap::new() }
    }

    pub fn validate(&self, network: &NetworkTopology) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.horizon > 0.0) {
            bad.push("horizon must be > 0".to_string());
        }
        if !(self.ramp >= 0.0) {
            bad.push("ramp must be >= 0".to_string());
        }
        let sources = network.node_ids(NodeKind::Source);
        let demands = network.node_ids(NodeKind::Demand);
        if self.source_pressure.keys().copied().collect::<Vec<_>>() != sources {
            bad.push(format!("pressure series must cover exactly the source nodes {sources:?}"));
        }
        if self.demand_flow.keys().copied().collect::<Vec<_>>() != demands {
            bad.push(format!("flow series must cover exactly the demand nodes {demands:?}"));
        }
        for (id, s) in &self.source_pressure {
            if let Err(e) = s.check() {
                bad.push(format!("source {id}: {e}"));
            } else if !(s.min_level() > 0.0) {
                bad.push(format!("source {id}: pressures must be > 0"));
            }
        }
        for (id, s) in &self.demand_flow {
            if let Err(e) = s.check() {
                bad.push(format!("demand {id}: {e}"));
            } else if !(s.min_level() >= 0.0) {
                bad.push(format!("demand {id}: flows must be >= 0"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(GasError::InvalidNetwork(bad))
        }
    }

    /// Apply [`PiecewiseSeries::snapped`] to every series.
    pub fn snapped(&self, interval: f64) -> Self {
        let snap = |m: &BTreeMap<u32, PiecewiseSeries>| {
            m.iter().map(|(k, s)| (*k, s.snapped(interval, self.horizon))).collect()
        };
        Self {
            horizon: self.horizon,
            ramp: self.ramp,
            source_pressure: snap(&self.source_pressure),
            demand_flow: snap(&self.demand_flow),
        }
    }
}

/// Boundary values at time `t`, ramped across switches.
pub fn boundary_at(schedule: &BoundarySchedule, t: f64) -> Result<BoundaryValues> {
    let slack = 1e-9 * schedule.horizon.max(1.0);
    if !(t >= -slack && t <= schedule.horizon + slack) {
        return Err(GasError::Range { t, horizon: schedule.horizon });
    }
    let eval = |m: &BTreeMap<u32, PiecewiseSeries>| {
        m.iter().map(|(k, s)| (*k, s.ramped_at(t, schedule.ramp))).collect()
    };
    Ok(BoundaryValues { pressures: eval(&schedule.source_pressure), flows: eval(&schedule.demand_flow) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquareWaveSpec {
    pub level_min: f64,
    pub level_max: f64,
    pub switch_count_min: u32,
    pub switch_count_max: u32,
    pub horizon: f64,
}

impl SquareWaveSpec {
    /// 0.5..2 kg/s, 0..=24 switches, over 24 h.
    pub fn paper() -> Self {
        Self {
            level_min: 0.5,
            level_max: 2.0,
            switch_count_min: 0,
            switch_count_max: 24,
            horizon: PAPER_HORIZON,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.level_min <= self.level_max) || !(self.switch_count_min <= self.switch_count_max) {
            return Err(GasError::Contract(format!("invalid square-wave spec {self:?}")));
        }
        if !(self.horizon > 0.0) {
            return Err(GasError::Contract("square-wave horizon must be > 0".into()));
        }
        Ok(())
    }
}

/// Random square wave: switch count, switch instants and levels are all
/// uniform draws from a generator seeded by `seed`.
pub fn sample_square_wave(spec: &SquareWaveSpec, seed: u64) -> Result<PiecewiseSeries> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(spec.switch_count_min..=spec.switch_count_max) as usize;
    let mut times: Vec<f64> = Vec::with_capacity(k);
    while times.len() < k {
        let s: f64 = rng.gen::<f64>() * spec.horizon;
        if s > 0.0 && s < spec.horizon && !times.contains(&s) {
            times.push(s);
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let levels = (0..=k)
        .map(|_| {
            if spec.level_max > spec.level_min {
                rng.gen_range(spec.level_min..=spec.level_max)
            } else {
                spec.level_min
            }
        })
        .collect();
    Ok(PiecewiseSeries { levels, switch_times: times })
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random operating scenario: fixed source pressures, one independent square
/// wave per demand node, switch times snapped to multiples of `snap`.
pub fn random_scenario(
    network: &NetworkTopology,
    wave: &SquareWaveSpec,
    ramp: f64,
    snap: f64,
    seed: u64,
) -> Result<BoundarySchedule> {
    let mut schedule = BoundarySchedule::new(wave.horizon, ramp);
    for id in network.node_ids(NodeKind::Source) {
        schedule.source_pressure.insert(id, PiecewiseSeries::constant(PAPER_SOURCE_PRESSURE));
    }
    for id in network.node_ids(NodeKind::Demand) {
        let series = sample_square_wave(wave, mix_seed(seed, id as u64 + 1))?;
        let series = if snap > 0.0 { series.snapped(snap, wave.horizon) } else { series };
        schedule.demand_flow.insert(id, series);
    }
    Ok(schedule)
}
