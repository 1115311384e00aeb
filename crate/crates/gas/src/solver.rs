//! Steady-state initialization and implicit transient Newton solver.
//!
//! Unknowns are ordered per pipe as interleaved `(M_0, P_0, M_1, P_1, ...)`,
//! pipes concatenated in region order. Rows are two box residuals per cell
//! followed by the node constraints, which gives a banded block per pipe with
//! a thin border that couples pipe ends. The linear solve eliminates each
//! pipe block around its two end pressures and then solves the small dense
//! border system.

use crate::band::{dense_solve, BandMatrix};
use crate::error::{GasError, Result};
use crate::field::{GridSpec, StateField, StateRow};
use crate::network::{End, NetworkTopology, NodeKind};
use crate::residual::{box_residuals, PipeCoefficients};
use crate::schedule::{boundary_at, BoundarySchedule, BoundaryValues};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Tolerance on the infinity norm of the scaled residual.
    pub newton_tol: f64,
    pub max_iters: usize,
    pub line_search: bool,
    /// Divides pressure-valued residuals (Pa).
    pub pressure_scale: f64,
    /// Divides flow-valued residuals (kg/s).
    pub flow_scale: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { newton_tol: 1e-8, max_iters: 30, line_search: true, pressure_scale: 3.0e5, flow_scale: 1.0 }
    }
}

impl SolverOptions {
    fn check(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) || self.max_iters == 0 {
            return Err(GasError::Contract("newton_tol must be > 0 and max_iters >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Port {
    region: usize,
    end: End,
}

#[derive(Debug, Clone, PartialEq)]
enum NodeEquation {
    SourcePressure { node: u32, port: Port },
    Balance { node: u32, ports: Vec<Port>, demand: bool },
    Equal { a: Port, b: Port },
}

/// Row-wise sparse Jacobian, one `(column, value)` list per residual row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseJacobian {
    pub n: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseJacobian {
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.n * self.n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                a[i * self.n + j] += v;
            }
        }
        a
    }
}

/// Residuals (physical units), their per-row scales and the Jacobian with
/// respect to the new time level.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    pub residual: Vec<f64>,
    pub scale: Vec<f64>,
    pub jacobian: SparseJacobian,
}

impl Assembly {
    pub fn scaled_norm(&self) -> f64 {
        self.residual.iter().zip(&self.scale).map(|(r, s)| (r / s).abs()).fold(0.0, f64::max)
    }
}

struct Layout {
    coeffs: Vec<PipeCoefficients>,
    nx: Vec<usize>,
    col_off: Vec<usize>,
    row_off: Vec<usize>,
    n: usize,
    cell_rows: usize,
    node_eqs: Vec<NodeEquation>,
}

impl Layout {
    fn new(network: &NetworkTopology, grid: &GridSpec) -> Result<Self> {
        network.ensure_valid()?;
        grid.check()?;
        let regions = network.regions();
        let coeffs: Vec<_> = regions.iter().map(|p| PipeCoefficients::new(p, grid)).collect();
        let nx = grid.space_points_all(network)?;
        let mut col_off = Vec::with_capacity(nx.len());
        let mut row_off = Vec::with_capacity(nx.len());
        let (mut c, mut r) = (0, 0);
        for &k in &nx {
            col_off.push(c);
            row_off.push(r);
            c += 2 * k;
            r += 2 * (k - 1);
        }
        let mut node_eqs = Vec::new();
        let mut nodes: Vec<_> = network.nodes.iter().collect();
        nodes.sort_by_key(|n| n.id);
        for node in nodes {
            let ports: Vec<Port> = network
                .resolved_ports(node)
                .into_iter()
                .map(|(region, end)| Port { region, end })
                .collect();
            match node.kind {
                NodeKind::Source => {
                    for &port in &ports {
                        node_eqs.push(NodeEquation::SourcePressure { node: node.id, port });
                    }
                }
                kind => {
                    node_eqs.push(NodeEquation::Balance {
                        node: node.id,
                        ports: ports.clone(),
                        demand: kind == NodeKind::Demand,
                    });
                    for &b in &ports[1..] {
                        node_eqs.push(NodeEquation::Equal { a: ports[0], b });
                    }
                }
            }
        }
        let layout = Self { coeffs, nx, col_off, row_off, n: c, cell_rows: r, node_eqs };
        if layout.cell_rows + layout.node_eqs.len() != layout.n {
            return Err(GasError::Contract(format!(
                "{} residuals for {} unknowns",
                layout.cell_rows + layout.node_eqs.len(),
                layout.n
            )));
        }
        Ok(layout)
    }

    fn regions(&self) -> usize {
        self.nx.len()
    }

    fn col_m(&self, p: Port) -> usize {
        let i = if p.end == End::Left { 0 } else { self.nx[p.region] - 1 };
        self.col_off[p.region] + 2 * i
    }

    fn col_p(&self, p: Port) -> usize {
        self.col_m(p) + 1
    }

    fn flatten(&self, row: &StateRow) -> Result<Vec<f64>> {
        if row.regions() != self.regions() {
            return Err(GasError::Contract(format!("{} regions, expected {}", row.regions(), self.regions())));
        }
        let mut x = vec![0.0; self.n];
        for r in 0..self.regions() {
            if row.flow[r].len() != self.nx[r] || row.pressure[r].len() != self.nx[r] {
                return Err(GasError::Contract(format!("region {r}: profile length mismatch")));
            }
            for i in 0..self.nx[r] {
                x[self.col_off[r] + 2 * i] = row.flow[r][i];
                x[self.col_off[r] + 2 * i + 1] = row.pressure[r][i];
            }
        }
        Ok(x)
    }

    fn unflatten(&self, x: &[f64]) -> StateRow {
        let mut flow = Vec::with_capacity(self.regions());
        let mut pressure = Vec::with_capacity(self.regions());
        for r in 0..self.regions() {
            let o = self.col_off[r];
            flow.push((0..self.nx[r]).map(|i| x[o + 2 * i]).collect());
            pressure.push((0..self.nx[r]).map(|i| x[o + 2 * i + 1]).collect());
        }
        StateRow { flow, pressure }
    }

    fn assemble(&self, old: &[f64], new: &[f64], bc: &BoundaryValues, opts: &SolverOptions) -> Result<Assembly> {
        let mut residual = vec![0.0; self.n];
        let mut scale = vec![opts.pressure_scale; self.n];
        let mut rows = Vec::with_capacity(self.n);
        for r in 0..self.regions() {
            let o = self.col_off[r];
            let c = &self.coeffs[r];
            for i in 0..self.nx[r] - 1 {
                let base = o + 2 * i;
                let oc = [old[base], old[base + 1], old[base + 2], old[base + 3]];
                let nc = [new[base], new[base + 1], new[base + 2], new[base + 3]];
                let cell = box_residuals(c, &oc, &nc);
                let row = self.row_off[r] + 2 * i;
                for k in 0..2 {
                    residual[row + k] = cell.values[k];
                    rows.push((0..4).map(|j| (base + j, cell.partials[k][4 + j])).collect());
                }
            }
        }
        for (k, eq) in self.node_eqs.iter().enumerate() {
            let row = self.cell_rows + k;
            match eq {
                NodeEquation::SourcePressure { node, port } => {
                    let target = *bc.pressures.get(node).ok_or_else(|| {
                        GasError::Contract(format!("no pressure boundary for source {node}"))
                    })?;
                    let col = self.col_p(*port);
                    residual[row] = new[col] - target;
                    rows.push(vec![(col, 1.0)]);
                }
                NodeEquation::Balance { node, ports, demand } => {
                    let withdrawal = if *demand {
                        *bc.flows.get(node).ok_or_else(|| {
                            GasError::Contract(format!("no flow boundary for demand {node}"))
                        })?
                    } else {
                        0.0
                    };
                    let mut net = -withdrawal;
                    let mut entries = Vec::with_capacity(ports.len());
                    for &p in ports {
                        let col = self.col_m(p);
                        let sign = if p.end == End::Right { 1.0 } else { -1.0 };
                        net += sign * new[col];
                        entries.push((col, sign));
                    }
                    residual[row] = net;
                    scale[row] = opts.flow_scale;
                    rows.push(entries);
                }
                NodeEquation::Equal { a, b } => {
                    let (ca, cb) = (self.col_p(*a), self.col_p(*b));
                    residual[row] = new[ca] - new[cb];
                    rows.push(vec![(ca, 1.0), (cb, -1.0)]);
                }
            }
        }
        Ok(Assembly { residual, scale, jacobian: SparseJacobian { n: self.n, rows } })
    }

    fn region_of_col(&self, col: usize) -> usize {
        self.col_off.partition_point(|&o| o <= col) - 1
    }

    /// Solve `J dx = rhs` exploiting the banded-plus-border structure.
    fn solve(&self, jac: &SparseJacobian, rhs: &[f64]) -> Result<Vec<f64>> {
        let e = self.regions();
        // y = y0 + ya * P_first + yb * P_last for every pipe.
        let mut blocks: Vec<[Vec<f64>; 3]> = Vec::with_capacity(e);
        let yidx = |c: usize| if c == 0 { 0 } else { c - 1 };
        for r in 0..e {
            let n = self.nx[r];
            let m = 2 * n - 2;
            let last = 2 * n - 1;
            let mut band = BandMatrix::zeros(m, 2, 2);
            let mut b0 = vec![0.0; m];
            let mut ba = vec![0.0; m];
            let mut bb = vec![0.0; m];
            for lr in 0..m {
                let gr = self.row_off[r] + lr;
                b0[lr] = rhs[gr];
                for &(col, v) in &jac.rows[gr] {
                    let c = col - self.col_off[r];
                    if c == 1 {
                        ba[lr] -= v;
                    } else if c == last {
                        bb[lr] -= v;
                    } else {
                        band.add(lr, yidx(c), v);
                    }
                }
            }
            band.factor()?;
            band.solve(&mut b0);
            band.solve(&mut ba);
            band.solve(&mut bb);
            blocks.push([b0, ba, bb]);
        }
        let ns = 2 * e;
        let mut s = vec![0.0; ns * ns];
        let mut g = vec![0.0; ns];
        for k in 0..self.node_eqs.len() {
            let gr = self.cell_rows + k;
            g[k] = rhs[gr];
            for &(col, v) in &jac.rows[gr] {
                let r = self.region_of_col(col);
                let c = col - self.col_off[r];
                if c == 1 {
                    s[k * ns + 2 * r] += v;
                } else if c == 2 * self.nx[r] - 1 {
                    s[k * ns + 2 * r + 1] += v;
                } else {
                    let j = yidx(c);
                    g[k] -= v * blocks[r][0][j];
                    s[k * ns + 2 * r] += v * blocks[r][1][j];
                    s[k * ns + 2 * r + 1] += v * blocks[r][2][j];
                }
            }
        }
        dense_solve(&mut s, &mut g, ns)?;
        let mut dx = vec![0.0; self.n];
        for r in 0..e {
            let n = self.nx[r];
            let (sa, sb) = (g[2 * r], g[2 * r + 1]);
            let o = self.col_off[r];
            dx[o + 1] = sa;
            dx[o + 2 * n - 1] = sb;
            for c in (0..2 * n - 1).filter(|&c| c != 1) {
                let j = yidx(c);
                dx[o + c] = blocks[r][0][j] + blocks[r][1][j] * sa + blocks[r][2][j] * sb;
            }
        }
        Ok(dx)
    }

    fn newton(&self, old: &[f64], guess: Vec<f64>, bc: &BoundaryValues, opts: &SolverOptions) -> Result<Vec<f64>> {
        let mut x = guess;
        let mut asm = self.assemble(old, &x, bc, opts)?;
        let mut norm = asm.scaled_norm();
        let mut clamped_streak = 0;
        let floor = 1e-3 * opts.pressure_scale;
        for _ in 0..opts.max_iters {
            if norm <= opts.newton_tol {
                return Ok(x);
            }
            let rhs: Vec<f64> = asm.residual.iter().map(|v| -v).collect();
            let dx = self.solve(&asm.jacobian, &rhs)?;
            let mut alpha = 1.0;
            let mut clamped;
            loop {
                let mut trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a + alpha * d).collect();
                clamped = false;
                for v in trial.iter_mut().skip(1).step_by(2) {
                    if !(*v > 0.0) {
                        *v = floor;
                        clamped = true;
                    }
                }
                let trial_asm = self.assemble(old, &trial, bc, opts)?;
                let trial_norm = trial_asm.scaled_norm();
                let accept = !opts.line_search || trial_norm < norm || alpha < 1e-3;
                if accept || !trial_norm.is_finite() && alpha < 1e-3 {
                    x = trial;
                    asm = trial_asm;
                    norm = trial_norm;
                    break;
                }
                alpha *= 0.5;
            }
            clamped_streak = if clamped { clamped_streak + 1 } else { 0 };
            if clamped_streak >= 3 {
                return Err(GasError::SolverFailure {
                    time_index: 0,
                    reason: "pressure iterate stayed non-positive".into(),
                    residual: norm,
                });
            }
            if !norm.is_finite() {
                break;
            }
        }
        if norm <= opts.newton_tol {
            return Ok(x);
        }
        Err(GasError::SolverFailure {
            time_index: 0,
            reason: format!("Newton did not converge in {} iterations", opts.max_iters),
            residual: norm,
        })
    }
}

/// Residuals and Jacobian of one implicit step from `state_t` to the guess
/// `state_guess_t1` under the boundary values at `t + dt`.
pub fn assemble_residuals(
    state_t: &StateRow,
    state_guess_t1: &StateRow,
    boundary_t1: &BoundaryValues,
    network: &NetworkTopology,
    grid: &GridSpec,
) -> Result<Assembly> {
    let layout = Layout::new(network, grid)?;
    let old = layout.flatten(state_t)?;
    let new = layout.flatten(state_guess_t1)?;
    layout.assemble(&old, &new, boundary_t1, &SolverOptions::default())
}

/// One implicit step, Newton-iterated from the previous row.
pub fn step_transient(
    state_t: &StateRow,
    boundary_t1: &BoundaryValues,
    network: &NetworkTopology,
    grid: &GridSpec,
    opts: &SolverOptions,
) -> Result<StateRow> {
    opts.check()?;
    let layout = Layout::new(network, grid)?;
    let old = layout.flatten(state_t)?;
    let x = layout.newton(&old, old.clone(), boundary_t1, opts)?;
    Ok(layout.unflatten(&x))
}

/// Steady profiles for the boundary values at `t = 0`, with default options.
pub fn solve_steady_state(network: &NetworkTopology, boundary_t0: &BoundaryValues, grid: &GridSpec) -> Result<StateRow> {
    solve_steady_state_with(network, boundary_t0, grid, &SolverOptions::default())
}

/// Steady state: constant flow per pipe and the square-law pressure profile
/// `P(x)^2 = P_left^2 - lambda ZRT (M/A)|M/A| x / D`, which is exact for the
/// discrete steady cell equations. Pipe flows and node pressures come from a
/// small Newton solve of the node network.
pub fn solve_steady_state_with(
    network: &NetworkTopology,
    boundary_t0: &BoundaryValues,
    grid: &GridSpec,
    opts: &SolverOptions,
) -> Result<StateRow> {
    opts.check()?;
    let layout = Layout::new(network, grid)?;
    let regions = network.regions();
    let e = regions.len();
    let mut nodes: Vec<_> = network.nodes.iter().collect();
    nodes.sort_by_key(|n| n.id);
    let nn = nodes.len();
    let node_of = |region: usize, end: End| -> usize {
        nodes
            .iter()
            .position(|n| network.resolved_ports(n).contains(&(region, end)))
            .expect("validated network attaches every end")
    };
    let ends: Vec<(usize, usize)> = (0..e).map(|r| (node_of(r, End::Left), node_of(r, End::Right))).collect();
    // P_L^2 - P_R^2 = k M|M|
    let k: Vec<f64> = regions
        .iter()
        .map(|p| p.friction * p.zrt() * p.length / (p.diameter * p.area() * p.area()))
        .collect();
    let sources: Vec<f64> = boundary_t0.pressures.values().copied().collect();
    if sources.is_empty() {
        return Err(GasError::Contract("no source pressure given".into()));
    }
    let p_init = sources.iter().sum::<f64>() / sources.len() as f64;
    let n = e + nn;
    let mut x = vec![0.0; n];
    for v in x[e..].iter_mut() {
        *v = p_init;
    }
    let ps2 = opts.pressure_scale * opts.pressure_scale;
    let residual = |x: &[f64], jac: Option<&mut Vec<f64>>| -> Result<Vec<f64>> {
        let mut f = vec![0.0; n];
        let mut j = vec![0.0; n * n];
        for r in 0..e {
            let (l, rr) = ends[r];
            let (pl, pr, m) = (x[e + l], x[e + rr], x[r]);
            f[r] = (pl * pl - pr * pr - k[r] * m * m.abs()) / ps2;
            j[r * n + e + l] = 2.0 * pl / ps2;
            j[r * n + e + rr] = -2.0 * pr / ps2;
            j[r * n + r] = -2.0 * k[r] * (m.abs() + 1e-9) / ps2;
        }
        for (ni, node) in nodes.iter().enumerate() {
            let row = e + ni;
            match node.kind {
                NodeKind::Source => {
                    let target = *boundary_t0.pressures.get(&node.id).ok_or_else(|| {
                        GasError::Contract(format!("no pressure boundary for source {}", node.id))
                    })?;
                    f[row] = (x[e + ni] - target) / opts.pressure_scale;
                    j[row * n + e + ni] = 1.0 / opts.pressure_scale;
                }
                kind => {
                    let mut net = if kind == NodeKind::Demand {
                        -*boundary_t0.flows.get(&node.id).ok_or_else(|| {
                            GasError::Contract(format!("no flow boundary for demand {}", node.id))
                        })?
                    } else {
                        0.0
                    };
                    for (region, end) in network.resolved_ports(node) {
                        let sign = if end == End::Right { 1.0 } else { -1.0 };
                        net += sign * x[region];
                        j[row * n + region] += sign / opts.flow_scale;
                    }
                    f[row] = net / opts.flow_scale;
                }
            }
        }
        if let Some(out) = jac {
            *out = j;
        }
        Ok(f)
    };
    let norm = |f: &[f64]| f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut jac = Vec::new();
    let mut f = residual(&x, Some(&mut jac))?;
    let mut fnorm = norm(&f);
    let mut iters = 0;
    // Iterate to round-off so the profiles meet exactly at shared nodes.
    while fnorm > 1e-14 && iters < opts.max_iters.max(50) {
        iters += 1;
        let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let mut a = jac.clone();
        dense_solve(&mut a, &mut rhs, n)?;
        let mut alpha = 1.0;
        loop {
            let mut trial: Vec<f64> = x.iter().zip(&rhs).map(|(a, d)| a + alpha * d).collect();
            for v in trial[e..].iter_mut() {
                if !(*v > 0.0) {
                    *v = 1e-3 * opts.pressure_scale;
                }
            }
            let mut tj = Vec::new();
            let tf = residual(&trial, Some(&mut tj))?;
            let tn = norm(&tf);
            if tn < fnorm || !opts.line_search || alpha < 1e-4 {
                let stalled = tn >= fnorm;
                x = trial;
                f = tf;
                jac = tj;
                fnorm = tn;
                if stalled && fnorm <= opts.newton_tol {
                    iters = usize::MAX - 1;
                }
                break;
            }
            alpha *= 0.5;
        }
        if iters == usize::MAX - 1 {
            break;
        }
    }
    if !(fnorm <= opts.newton_tol) {
        return Err(GasError::SolverFailure {
            time_index: 0,
            reason: "steady-state Newton did not converge".into(),
            residual: fnorm,
        });
    }
    let mut flow = Vec::with_capacity(e);
    let mut pressure = Vec::with_capacity(e);
    for r in 0..e {
        let pipe = regions[r];
        let nx = layout.nx[r];
        let m = x[r];
        let q = m / pipe.area();
        let pl = x[e + ends[r].0];
        let drop_per_cell = pipe.friction * pipe.zrt() * q * q.abs() * grid.dx / pipe.diameter;
        let mut prof = Vec::with_capacity(nx);
        for i in 0..nx {
            let p2 = pl * pl - i as f64 * drop_per_cell;
            if !(p2 > 0.0) {
                return Err(GasError::SolverFailure {
                    time_index: 0,
                    reason: format!("steady pressure in region {r} falls to zero"),
                    residual: fnorm,
                });
            }
            prof.push(p2.sqrt());
        }
        flow.push(vec![m; nx]);
        pressure.push(prof);
    }
    Ok(StateRow { flow, pressure })
}

/// Full transient run: steady row at `t = 0`, then one implicit step per `dt`.
pub fn simulate(
    network: &NetworkTopology,
    schedule: &BoundarySchedule,
    grid: &GridSpec,
    opts: &SolverOptions,
) -> Result<StateField> {
    opts.check()?;
    schedule.validate(network)?;
    let layout = Layout::new(network, grid)?;
    let nt = grid.time_points(schedule.horizon)?;
    let mut rows = Vec::with_capacity(nt);
    let b0 = boundary_at(schedule, 0.0)?;
    let first = solve_steady_state_with(network, &b0, grid, opts)?;
    let mut x = layout.flatten(&first)?;
    rows.push(first);
    for k in 1..nt {
        let t = (k as f64 * grid.dt).min(schedule.horizon);
        let bc = boundary_at(schedule, t)?;
        x = layout.newton(&x, x.clone(), &bc, opts).map_err(|e| match e {
            GasError::SolverFailure { reason, residual, .. } => {
                GasError::SolverFailure { time_index: k, reason, residual }
            }
            other => other,
        })?;
        rows.push(layout.unflatten(&x));
    }
    Ok(StateField::from_rows(&rows, *grid))
}

/// Junction diagnostics of one row: worst net flow imbalance (kg/s) and worst
/// pairwise pressure mismatch (Pa) over all junction and demand nodes.
pub fn junction_defects(network: &NetworkTopology, row: &StateRow, bc: &BoundaryValues) -> (f64, f64) {
    let mut worst_flow: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    for node in &network.nodes {
        if node.kind == NodeKind::Source {
            continue;
        }
        let ports = network.resolved_ports(node);
        let mut net = if node.kind == NodeKind::Demand { -bc.flows[&node.id] } else { 0.0 };
        let mut ps = Vec::new();
        for &(r, end) in &ports {
            let i = if end == End::Left { 0 } else { row.flow[r].len() - 1 };
            let sign = if end == End::Right { 1.0 } else { -1.0 };
            net += sign * row.flow[r][i];
            ps.push(row.pressure[r][i]);
        }
        worst_flow = worst_flow.max(net.abs());
        for a in 0..ps.len() {
            for b in a + 1..ps.len() {
                worst_p = worst_p.max((ps[a] - ps[b]).abs());
            }
        }
    }
    (worst_flow, worst_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_paper_network;
    use crate::schedule::PiecewiseSeries;

    fn paper_bc(d2: f64, d3: f64) -> BoundaryValues {
        BoundaryValues {
            pressures: [(0u32, 3.0e5)].into_iter().collect(),
            flows: [(2u32, d2), (3u32, d3)].into_iter().collect(),
        }
    }

    #[test]
    fn residual_count_matches_unknowns() {
        let (net, _) = build_paper_network();
        let grid = GridSpec::new(640.0, 400.0);
        let layout = Layout::new(&net, &grid).unwrap();
        assert_eq!(layout.n, 2 * (151 + 126 + 101));
        assert_eq!(layout.cell_rows + layout.node_eqs.len(), layout.n);
    }

    #[test]
    fn steady_junction_balance() {
        let (net, _) = build_paper_network();
        let grid = GridSpec::new(640.0, 400.0);
        let row = solve_steady_state(&net, &paper_bc(1.0, 1.0), &grid).unwrap();
        assert!((row.flow[0][0] - 2.0).abs() < 1e-12);
        assert!(row.flow[0].iter().all(|&m| m == row.flow[0][0]));
        let (f, p) = junction_defects(&net, &row, &paper_bc(1.0, 1.0));
        assert!(f < 1e-10 && p < 1e-6, "{f} {p}");
    }

    #[test]
    fn zero_demand_is_uniform() {
        let (net, _) = build_paper_network();
        let grid = GridSpec::new(640.0, 400.0);
        let row = solve_steady_state(&net, &paper_bc(0.0, 0.0), &grid).unwrap();
        for r in 0..3 {
            assert!(row.flow[r].iter().all(|&m| m.abs() < 1e-12));
            assert!(row.pressure[r].iter().all(|&p| (p - 3.0e5).abs() < 1e-6));
        }
    }

    #[test]
    fn bordered_solve_matches_dense() {
        let (net, _) = build_paper_network();
        let grid = GridSpec::new(640.0, 2000.0);
        let layout = Layout::new(&net, &grid).unwrap();
        let row = solve_steady_state(&net, &paper_bc(1.0, 1.5), &grid).unwrap();
        let x = layout.flatten(&row).unwrap();
        let mut guess = x.clone();
        for (i, v) in guess.iter_mut().enumerate() {
            *v += if i % 2 == 0 { 0.01 * (i as f64).sin() } else { 30.0 * (i as f64).cos() };
        }
        let asm = layout.assemble(&x, &guess, &paper_bc(1.2, 1.5), &SolverOptions::default()).unwrap();
        let rhs: Vec<f64> = asm.residual.iter().map(|v| -v).collect();
        let dx = layout.solve(&asm.jacobian, &rhs).unwrap();
        let mut a = asm.jacobian.to_dense();
        let mut dense = rhs.clone();
        dense_solve(&mut a, &mut dense, layout.n).unwrap();
        for i in 0..layout.n {
            assert!((dx[i] - dense[i]).abs() < 1e-8 * (1.0 + dense[i].abs()), "{i}: {} vs {}", dx[i], dense[i]);
        }
    }

    #[test]
    fn steady_state_is_a_fixed_point() {
        let (net, _) = build_paper_network();
        let grid = GridSpec::new(640.0, 400.0);
        let bc = paper_bc(1.3, 0.8);
        let row = solve_steady_state(&net, &bc, &grid).unwrap();
        let next = step_transient(&row, &bc, &net, &grid, &SolverOptions::default()).unwrap();
        assert!(next.max_rel_diff(&row) < 1e-9);
    }

    #[test]
    fn interior_pressure_touches_only_its_stencils() {
        let (net, _) = build_paper_network();
        let grid = GridSpec::new(640.0, 2000.0);
        let bc = paper_bc(1.0, 1.0);
        let row = solve_steady_state(&net, &bc, &grid).unwrap();
        let base = assemble_residuals(&row, &row, &bc, &net, &grid).unwrap();
        let mut bumped = row.clone();
        let (region, cell) = (1usize, 4usize);
        bumped.pressure[region][cell] += 1.0;
        let other = assemble_residuals(&row, &bumped, &bc, &net, &grid).unwrap();
        let layout = Layout::new(&net, &grid).unwrap();
        let ro = layout.row_off[region];
        let expected: Vec<usize> = (2 * (cell - 1)..2 * (cell + 1)).map(|i| ro + i).collect();
        let changed: Vec<usize> =
            (0..base.residual.len()).filter(|&i| base.residual[i] != other.residual[i]).collect();
        assert_eq!(changed, expected);
    }

    #[test]
    fn demand_step_lowers_junction_pressure() {
        let (net, mut sched) = build_paper_network();
        sched.demand_flow.insert(2, PiecewiseSeries::steps(vec![1.0, 2.0], vec![6400.0]).unwrap());
        let grid = GridSpec::new(640.0, 400.0);
        let field = simulate(&net, &sched, &grid, &SolverOptions::default()).unwrap();
        let junction: Vec<f64> = field.pressure[0].column(150);
        let start = 10; // first row touched by the ramp
        for t in start..junction.len() - 1 {
            assert!(junction[t + 1] <= junction[t] + 1e-6, "t={t}: {} -> {}", junction[t], junction[t + 1]);
        }
        assert!(junction[junction.len() - 1] < junction[0] - 1000.0);
        // Approaches the new steady level.
        let steady = solve_steady_state(&net, &paper_bc(2.0, 1.0), &grid).unwrap();
        let target = steady.pressure[0][150];
        assert!((junction[junction.len() - 1] - target).abs() < 0.02 * (junction[0] - target));
    }
}
