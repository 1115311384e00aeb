//! Space-time grids and the per-pipe state fields stored on them.

use serde::{Deserialize, Serialize};

use crate::error::{GasError, Result};
use crate::network::NetworkTopology;

/// Default time weighting of the box scheme.
pub const DEFAULT_SIGMA: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dt: f64,
    pub dx: f64,
    pub sigma: f64,
}

fn steps(extent: f64, step: f64, what: &str) -> Result<usize> {
    let n = extent / step;
    let r = n.round();
    if !(step > 0.0) || (n - r).abs() > 1e-9 * n.max(1.0) || r < 1.0 {
        return Err(GasError::Contract(format!("{what} {extent} is not a positive multiple of {step}")));
    }
    Ok(r as usize)
}

impl GridSpec {
    pub fn new(dt: f64, dx: f64) -> Self {
        Self { dt, dx, sigma: DEFAULT_SIGMA }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dx > 0.0) {
            return Err(GasError::Contract("dt and dx must be > 0".into()));
        }
        if !(self.sigma > 0.5 && self.sigma <= 1.0) {
            return Err(GasError::Contract(format!("sigma {} outside (0.5, 1]", self.sigma)));
        }
        Ok(())
    }

    /// Number of time levels `horizon / dt + 1`.
    pub fn time_points(&self, horizon: f64) -> Result<usize> {
        Ok(steps(horizon, self.dt, "horizon")? + 1)
    }

    /// Number of grid points `length / dx + 1`.
    pub fn space_points(&self, length: f64) -> Result<usize> {
        Ok(steps(length, self.dx, "pipe length")? + 1)
    }

    pub fn space_points_all(&self, network: &NetworkTopology) -> Result<Vec<usize>> {
        network.regions().iter().map(|p| self.space_points(p.length)).collect()
    }
}

/// Dense row-major `nt x nx` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Field2 {
    pub nt: usize,
    pub nx: usize,
    pub data: Vec<f64>,
}

impl Field2 {
    pub fn zeros(nt: usize, nx: usize) -> Self {
        Self { nt, nx, data: vec![0.0; nt * nx] }
    }

    pub fn from_vec(nt: usize, nx: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nt * nx {
            return Err(GasError::Contract(format!("{} values for a {nt}x{nx} field", data.len())));
        }
        Ok(Self { nt, nx, data })
    }

    #[inline]
    pub fn get(&self, t: usize, x: usize) -> f64 {
        self.data[t * self.nx + x]
    }

    #[inline]
    pub fn set(&mut self, t: usize, x: usize, v: f64) {
        self.data[t * self.nx + x] = v;
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.nx..(t + 1) * self.nx]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.nx..(t + 1) * self.nx]
    }

    pub fn column(&self, x: usize) -> Vec<f64> {
        (0..self.nt).map(|t| self.get(t, x)).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nt, self.nx)
    }

    fn subsample(&self, tf: usize, sf: usize) -> Self {
        let nt = (self.nt - 1) / tf + 1;
        let nx = (self.nx - 1) / sf + 1;
        let mut out = Field2::zeros(nt, nx);
        for t in 0..nt {
            for x in 0..nx {
                out.set(t, x, self.get(t * tf, x * sf));
            }
        }
        out
    }
}

/// One time level of every pipe: `(M, P)` profiles in region order.
#[derive(Debug, Clone, PartialEq)]
pub struct StateRow {
    pub flow: Vec<Vec<f64>>,
    pub pressure: Vec<Vec<f64>>,
}

impl StateRow {
    pub fn regions(&self) -> usize {
        self.flow.len()
    }

    pub fn max_rel_diff(&self, other: &StateRow) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.flow.iter().flatten().zip(other.flow.iter().flatten()) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
        for (a, b) in self.pressure.iter().flatten().zip(other.pressure.iter().flatten()) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
        worst
    }
}

/// Mass flow (kg/s) and pressure (Pa) per pipe on a uniform space-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub flow: Vec<Field2>,
    pub pressure: Vec<Field2>,
    pub grid: GridSpec,
}

impl StateField {
    pub fn from_rows(rows: &[StateRow], grid: GridSpec) -> Self {
        let e = rows[0].regions();
        let nt = rows.len();
        let mut flow = Vec::with_capacity(e);
        let mut pressure = Vec::with_capacity(e);
        for r in 0..e {
            let nx = rows[0].flow[r].len();
            let mut m = Field2::zeros(nt, nx);
            let mut p = Field2::zeros(nt, nx);
            for (t, row) in rows.iter().enumerate() {
                m.row_mut(t).copy_from_slice(&row.flow[r]);
                p.row_mut(t).copy_from_slice(&row.pressure[r]);
            }
            flow.push(m);
            pressure.push(p);
        }
        Self { flow, pressure, grid }
    }

    pub fn regions(&self) -> usize {
        self.flow.len()
    }

    pub fn time_points(&self) -> usize {
        self.flow[0].nt
    }

    pub fn row(&self, t: usize) -> StateRow {
        StateRow {
            flow: self.flow.iter().map(|f| f.row(t).to_vec()).collect(),
            pressure: self.pressure.iter().map(|f| f.row(t).to_vec()).collect(),
        }
    }

    pub fn same_shape(&self, other: &StateField) -> bool {
        self.regions() == other.regions()
            && self.flow.iter().zip(&other.flow).all(|(a, b)| a.shape() == b.shape())
            && self.pressure.iter().zip(&other.pressure).all(|(a, b)| a.shape() == b.shape())
    }
}

/// Pointwise subsampling onto the coarse grid that shares every
/// `time_factor`-th time level and `space_factor`-th grid point.
pub fn restrict_field(field: &StateField, time_factor: usize, space_factor: usize) -> Result<StateField> {
    if time_factor == 0 || space_factor == 0 {
        return Err(GasError::Contract("restriction factors must be >= 1".into()));
    }
    for f in field.flow.iter().chain(&field.pressure) {
        if (f.nt - 1) % time_factor != 0 || (f.nx - 1) % space_factor != 0 {
            return Err(GasError::Contract(format!(
                "factors ({time_factor}, {space_factor}) do not divide a {}x{} grid",
                f.nt - 1,
                f.nx - 1
            )));
        }
    }
    Ok(StateField {
        flow: field.flow.iter().map(|f| f.subsample(time_factor, space_factor)).collect(),
        pressure: field.pressure.iter().map(|f| f.subsample(time_factor, space_factor)).collect(),
        grid: GridSpec {
            dt: field.grid.dt * time_factor as f64,
            dx: field.grid.dx * space_factor as f64,
            sigma: field.grid.sigma,
        },
    })
}
