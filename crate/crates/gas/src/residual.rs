//! Four-point box-scheme residuals of the isothermal gas equations.
//!
//! Continuity `dP/dt + ZRT d(rho v)/dx = 0` and momentum
//! `d(rho v)/dt + dP/dx + lambda/(2D) rho v |v| = 0`, with `rho v = M / A`
//! and `rho = P / ZRT`. Both the Newton solver and the physics losses call
//! [`box_residuals`] / [`steady_residuals`], so a converged solver field has
//! vanishing loss residuals by construction.
//!
//! Residuals are kept in the scaled forms (both in Pa):
//!
//! ```text
//! f1 = sum_dt(P) + (2 ZRT dt/dx) [s dq(t+1) + (1-s) dq(t)]
//! f2 = (dx / 2dt) sum_dt(q) + [s dP(t+1) + (1-s) dP(t)] + (lambda dx / 2D) ZRT qm|qm| / Pm
//! ```
//!
//! where `sum_dt` adds the time increments at both stencil columns, `d` is
//! the spatial difference across the cell and `qm`, `Pm` are the
//! sigma-weighted four-point averages.

use crate::field::{Field2, GridSpec};
use crate::network::PipeSpec;

/// Per-pipe constants of the discrete equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipeCoefficients {
    pub zrt: f64,
    pub area: f64,
    pub sigma: f64,
    /// `2 ZRT dt / dx`, flux factor of the continuity residual.
    pub k_flux: f64,
    /// `dx / (2 dt)`, mass-flux factor of the momentum residual.
    pub k_mass: f64,
    /// `lambda dx / (2 D)`, friction factor of the momentum residual.
    pub k_fric: f64,
    /// `ZRT dt / dx`, flux factor of the steady continuity residual.
    pub k_steady: f64,
}

impl PipeCoefficients {
    pub fn new(pipe: &PipeSpec, grid: &GridSpec) -> Self {
        let zrt = pipe.zrt();
        Self {
            zrt,
            area: pipe.area(),
            sigma: grid.sigma,
            k_flux: 2.0 * zrt * grid.dt / grid.dx,
            k_mass: grid.dx / (2.0 * grid.dt),
            k_fric: pipe.friction * grid.dx / (2.0 * pipe.diameter),
            k_steady: zrt * grid.dt / grid.dx,
        }
    }

    /// `ZRT q|q| / P` and its partials in `q` and `P`.
    #[inline]
    fn friction(&self, q: f64, p: f64) -> (f64, f64, f64) {
        let f = self.zrt * q * q.abs() / p;
        (f, 2.0 * self.zrt * q.abs() / p, -f / p)
    }
}

/// Stencil corner order shared by values and partials: `[M_x, P_x, M_x+1, P_x+1]`.
pub type Corners = [f64; 4];

/// Residuals of one transient cell and their partials.
///
/// `partials[i]` holds `d f_i / d (old[0..4], new[0..4])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellResidual {
    pub values: [f64; 2],
    pub partials: [[f64; 8]; 2],
}

#[inline]
pub fn box_residuals(c: &PipeCoefficients, old: &Corners, new: &Corners) -> CellResidual {
    let s = c.sigma;
    let r = 1.0 - s;
    let inv_a = 1.0 / c.area;
    let qo = [old[0] * inv_a, old[2] * inv_a];
    let qn = [new[0] * inv_a, new[2] * inv_a];

    let f1 = (new[1] - old[1]) + (new[3] - old[3])
        + c.k_flux * (s * (qn[1] - qn[0]) + r * (qo[1] - qo[0]));

    let q_mean = 0.5 * s * (qn[0] + qn[1]) + 0.5 * r * (qo[0] + qo[1]);
    let p_mean = 0.5 * s * (new[1] + new[3]) + 0.5 * r * (old[1] + old[3]);
    let (fr, dfr_dq, dfr_dp) = c.friction(q_mean, p_mean);
    let f2 = c.k_mass * ((qn[0] - qo[0]) + (qn[1] - qo[1]))
        + s * (new[3] - new[1])
        + r * (old[3] - old[1])
        + c.k_fric * fr;

    let kf = c.k_flux * inv_a;
    let d1 = [-kf * r, -1.0, kf * r, -1.0, -kf * s, 1.0, kf * s, 1.0];

    let gq = c.k_fric * dfr_dq * 0.5 * inv_a;
    let gp = c.k_fric * dfr_dp * 0.5;
    let km = c.k_mass * inv_a;
    let d2 = [
        -km + gq * r,
        -r + gp * r,
        -km + gq * r,
        r + gp * r,
        km + gq * s,
        -s + gp * s,
        km + gq * s,
        s + gp * s,
    ];
    CellResidual { values: [f1, f2], partials: [d1, d2] }
}

/// Residuals of one steady cell and their partials in `[M_x, P_x, M_x+1, P_x+1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyResidual {
    pub values: [f64; 2],
    pub partials: [[f64; 4]; 2],
}

#[inline]
pub fn steady_residuals(c: &PipeCoefficients, row: &Corners) -> SteadyResidual {
    let inv_a = 1.0 / c.area;
    let f1 = c.k_steady * (row[2] - row[0]) * inv_a;
    let q_mean = 0.5 * (row[0] + row[2]) * inv_a;
    let p_mean = 0.5 * (row[1] + row[3]);
    let (fr, dq, dp) = c.friction(q_mean, p_mean);
    let f2 = (row[3] - row[1]) + c.k_fric * fr;
    let gq = c.k_fric * dq * 0.5 * inv_a;
    let gp = c.k_fric * dp * 0.5;
    SteadyResidual {
        values: [f1, f2],
        partials: [
            [-c.k_steady * inv_a, 0.0, c.k_steady * inv_a, 0.0],
            [gq, -1.0 + gp, gq, 1.0 + gp],
        ],
    }
}

#[inline]
pub fn corners(m: &[f64], p: &[f64], x: usize) -> Corners {
    [m[x], p[x], m[x + 1], p[x + 1]]
}

/// Continuity / momentum residuals on every interior box of a pipe field,
/// each returned as an `(nt-1) x (nx-1)` array.
pub fn transient_residual_field(c: &PipeCoefficients, flow: &Field2, pressure: &Field2) -> (Field2, Field2) {
    let (nt, nx) = flow.shape();
    let mut f1 = Field2::zeros(nt.saturating_sub(1), nx.saturating_sub(1));
    let mut f2 = f1.clone();
    for t in 0..nt.saturating_sub(1) {
        let (mo, po) = (flow.row(t), pressure.row(t));
        let (mn, pn) = (flow.row(t + 1), pressure.row(t + 1));
        for x in 0..nx - 1 {
            let cell = box_residuals(c, &corners(mo, po, x), &corners(mn, pn, x));
            f1.set(t, x, cell.values[0]);
            f2.set(t, x, cell.values[1]);
        }
    }
    (f1, f2)
}

/// Steady residuals along one time row.
pub fn steady_residual_row(c: &PipeCoefficients, flow: &[f64], pressure: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (0..flow.len().saturating_sub(1))
        .map(|x| {
            let v = steady_residuals(c, &corners(flow, pressure, x)).values;
            (v[0], v[1])
        })
        .unzip()
}
