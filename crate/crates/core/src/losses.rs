//! Data and physics losses over per-region `(M, P)` fields.
//!
//! Fields are flat `[M (d_t x d_x,e), P (d_t x d_x,e)]` per region, the layout
//! of a `(2, d_t, d_x,e)` model output. Every RMS is mean-over-points then
//! square root. Gradients of the physics terms are assembled from the
//! residual partials of the solver's stencil code.

use std::rc::Rc;

use pcno_autodiff::{Tape, Tensor, Var};
use pcno_gas::residual::{box_residuals, corners, steady_residuals, PipeCoefficients};
use pcno_gas::{boundary_at, BoundarySchedule, End, GridSpec, NetworkTopology, NodeKind, StateField};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// `(α0, α1, α2)`: equation loss.
    pub alpha: [f64; 3],
    /// `(β0, β1, β2)`: initial-condition loss.
    pub beta: [f64; 3],
    /// `(δ0, δ1, δ2)`: boundary loss.
    pub delta: [f64; 3],
    /// `(γ1, γ2)`: data loss on normalized flow and pressure.
    pub gamma: [f64; 2],
}

impl LossWeights {
    /// Coefficient table defaults with `δ1 = ZRT` of the given gas.
    pub fn paper(zrt: f64) -> Self {
        Self { alpha: [0.2, 2.5, 30.0], beta: [0.1, 2.5, 30.0], delta: [0.2, zrt, 1.0], gamma: [1.0, 1.0] }
    }

    pub fn for_network(network: &NetworkTopology) -> Self {
        Self::paper(network.pipes.first().map_or(1.0, |p| p.zrt()))
    }

    pub fn zero() -> Self {
        Self { alpha: [0.0; 3], beta: [0.0; 3], delta: [0.0; 3], gamma: [0.0; 2] }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.alpha.iter().chain(&self.beta).chain(&self.delta).chain(&self.gamma);
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CoreError::Contract(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub data: f64,
    pub equation: f64,
    pub initial: f64,
    pub boundary_flow: f64,
    pub boundary_pressure: f64,
    /// `α0 L_EQ + β0 L_I + δ0 (δ1 B_M + δ2 B_P)`.
    pub pde: f64,
    pub total: f64,
    pub region_data: Vec<f64>,
    pub region_equation: Vec<f64>,
    pub region_initial: Vec<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,data,equation,initial,boundary_flow,boundary_pressure,pde,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.data, self.equation, self.initial, self.boundary_flow, self.boundary_pressure, self.pde, self.total
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.data, self.equation, self.initial, self.boundary_flow, self.boundary_pressure, self.pde, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_vec = |f: fn(&LossReport) -> &Vec<f64>| {
            let len = reports.iter().map(|r| f(r).len()).max().unwrap_or(0);
            (0..len).map(|i| reports.iter().map(|r| f(r).get(i).copied().unwrap_or(0.0)).sum::<f64>() / n).collect()
        };
        LossReport {
            data: avg(|r| r.data),
            equation: avg(|r| r.equation),
            initial: avg(|r| r.initial),
            boundary_flow: avg(|r| r.boundary_flow),
            boundary_pressure: avg(|r| r.boundary_pressure),
            pde: avg(|r| r.pde),
            total: avg(|r| r.total),
            region_data: avg_vec(|r| &r.region_data),
            region_equation: avg_vec(|r| &r.region_equation),
            region_initial: avg_vec(|r| &r.region_initial),
        }
    }
}

/// Boundary port at the end grid column of a pipe.
#[derive(Debug, Clone, Copy)]
struct Port {
    region: usize,
    column: usize,
    /// `+1` for flow entering the node (right pipe end), `-1` otherwise.
    sign: f64,
}

#[derive(Debug, Clone)]
struct NodeTerm {
    ports: Vec<Port>,
    /// Demand withdrawal or source pressure per time level.
    series: Vec<f64>,
}

/// Everything the physics losses need about one scenario on one grid.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub grid: GridSpec,
    nt: usize,
    nx: Vec<usize>,
    coeffs: Vec<PipeCoefficients>,
    demands: Vec<NodeTerm>,
    junction_flows: Vec<NodeTerm>,
    sources: Vec<NodeTerm>,
    /// Nodes with at least two ports whose pressures must agree.
    pressure_groups: Vec<Vec<Port>>,
}

impl LossContext {
    pub fn new(network: &NetworkTopology, schedule: &BoundarySchedule, grid: &GridSpec) -> Result<Self> {
        network.ensure_valid()?;
        schedule.validate(network)?;
        grid.check()?;
        let nt = grid.time_points(schedule.horizon)?;
        let nx = grid.space_points_all(network)?;
        let coeffs = network.regions().iter().map(|p| PipeCoefficients::new(p, grid)).collect();
        let bcs = (0..nt)
            .map(|k| boundary_at(schedule, (k as f64 * grid.dt).min(schedule.horizon)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (mut demands, mut junction_flows, mut sources, mut pressure_groups) = (vec![], vec![], vec![], vec![]);
        for node in &network.nodes {
            let ports: Vec<Port> = network
                .resolved_ports(node)
                .into_iter()
                .map(|(region, end)| Port {
                    region,
                    column: if end == End::Left { 0 } else { nx[region] - 1 },
                    sign: if end == End::Right { 1.0 } else { -1.0 },
                })
                .collect();
            match node.kind {
                NodeKind::Source => {
                    let series = bcs.iter().map(|b| b.pressures[&node.id]).collect();
                    sources.push(NodeTerm { ports, series });
                }
                NodeKind::Demand => {
                    let series = bcs.iter().map(|b| b.flows[&node.id]).collect();
                    if ports.len() > 1 {
                        pressure_groups.push(ports.clone());
                    }
                    demands.push(NodeTerm { ports, series });
                }
                NodeKind::Junction => {
                    if ports.len() > 1 {
                        pressure_groups.push(ports.clone());
                    }
                    junction_flows.push(NodeTerm { ports, series: vec![0.0; nt] });
                }
            }
        }
        Ok(Self { grid: *grid, nt, nx, coeffs, demands, junction_flows, sources, pressure_groups })
    }

    pub fn regions(&self) -> usize {
        self.nx.len()
    }

    pub fn time_points(&self) -> usize {
        self.nt
    }

    pub fn extents(&self) -> Vec<(usize, usize)> {
        self.nx.iter().map(|&x| (self.nt, x)).collect()
    }

    fn check(&self, fields: &[&[f64]]) -> Result<()> {
        if fields.len() != self.nx.len() {
            return Err(CoreError::Contract(format!("{} regions for a {}-pipe network", fields.len(), self.nx.len())));
        }
        for (e, f) in fields.iter().enumerate() {
            if f.len() != 2 * self.nt * self.nx[e] {
                return Err(CoreError::Contract(format!(
                    "region {e}: {} values for a 2x{}x{} field",
                    f.len(),
                    self.nt,
                    self.nx[e]
                )));
            }
            if self.nt < 2 || self.nx[e] < 2 {
                return Err(CoreError::Contract("grid too small for a stencil".into()));
            }
        }
        Ok(())
    }
}

/// `sqrt(mean(r^2))` with `d rms / d r_i = r_i / (n rms)` (zero at the origin).
fn rms(r: &[f64]) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt()
}

fn rms_adjoint(r: &[f64], value: f64, g: f64) -> impl Iterator<Item = f64> + '_ {
    let k = if value > 0.0 { g / (r.len() as f64 * value) } else { 0.0 };
    r.iter().map(move |v| k * v)
}

/// Per-region accumulation target for field gradients.
type Grads<'a> = Option<&'a mut [Vec<f64>]>;

fn equation_terms(ctx: &LossContext, w: [f64; 2], fields: &[&[f64]], mut grads: Grads, g: f64) -> Vec<f64> {
    let e_count = ctx.regions() as f64;
    let mut out = Vec::with_capacity(ctx.regions());
    for (e, f) in fields.iter().enumerate() {
        let (nt, nx) = (ctx.nt, ctx.nx[e]);
        let (m, p) = f.split_at(nt * nx);
        let c = &ctx.coeffs[e];
        let cells = (nt - 1) * (nx - 1);
        let mut r1 = Vec::with_capacity(cells);
        let mut r2 = Vec::with_capacity(cells);
        let mut partials = Vec::with_capacity(if grads.is_some() { cells } else { 0 });
        for t in 0..nt - 1 {
            let (mo, po) = (&m[t * nx..(t + 1) * nx], &p[t * nx..(t + 1) * nx]);
            let (mn, pn) = (&m[(t + 1) * nx..(t + 2) * nx], &p[(t + 1) * nx..(t + 2) * nx]);
            for x in 0..nx - 1 {
                let cell = box_residuals(c, &corners(mo, po, x), &corners(mn, pn, x));
                r1.push(cell.values[0]);
                r2.push(cell.values[1]);
                if grads.is_some() {
                    partials.push(cell.partials);
                }
            }
        }
        let (v1, v2) = (rms(&r1), rms(&r2));
        out.push(w[0] * v1 + w[1] * v2);
        if let Some(gr) = grads.as_deref_mut() {
            let gf = &mut gr[e];
            let a1: Vec<f64> = rms_adjoint(&r1, v1, g * w[0] / e_count).collect();
            let a2: Vec<f64> = rms_adjoint(&r2, v2, g * w[1] / e_count).collect();
            for t in 0..nt - 1 {
                for x in 0..nx - 1 {
                    let k = t * (nx - 1) + x;
                    let d = &partials[k];
                    // Corner offsets in the flat [M, P] layout: old row t, new row t+1.
                    let idx = |row: usize| {
                        [row * nx + x, nt * nx + row * nx + x, row * nx + x + 1, nt * nx + row * nx + x + 1]
                    };
                    let (io, inew) = (idx(t), idx(t + 1));
                    for j in 0..4 {
                        gf[io[j]] += a1[k] * d[0][j] + a2[k] * d[1][j];
                        gf[inew[j]] += a1[k] * d[0][4 + j] + a2[k] * d[1][4 + j];
                    }
                }
            }
        }
    }
    out
}

fn initial_terms(ctx: &LossContext, w: [f64; 2], fields: &[&[f64]], mut grads: Grads, g: f64) -> Vec<f64> {
    let e_count = ctx.regions() as f64;
    let mut out = Vec::with_capacity(ctx.regions());
    for (e, f) in fields.iter().enumerate() {
        let (nt, nx) = (ctx.nt, ctx.nx[e]);
        let (m, p) = (&f[..nx], &f[nt * nx..nt * nx + nx]);
        let cells: Vec<_> = (0..nx - 1).map(|x| steady_residuals(&ctx.coeffs[e], &corners(m, p, x))).collect();
        let r1: Vec<f64> = cells.iter().map(|c| c.values[0]).collect();
        let r2: Vec<f64> = cells.iter().map(|c| c.values[1]).collect();
        let (v1, v2) = (rms(&r1), rms(&r2));
        out.push(w[0] * v1 + w[1] * v2);
        if let Some(gr) = grads.as_deref_mut() {
            let gf = &mut gr[e];
            let a1: Vec<f64> = rms_adjoint(&r1, v1, g * w[0] / e_count).collect();
            let a2: Vec<f64> = rms_adjoint(&r2, v2, g * w[1] / e_count).collect();
            for (x, c) in cells.iter().enumerate() {
                let idx = [x, nt * nx + x, x + 1, nt * nx + x + 1];
                for j in 0..4 {
                    gf[idx[j]] += a1[x] * c.partials[0][j] + a2[x] * c.partials[1][j];
                }
            }
        }
    }
    out
}

#[inline]
fn flow_at(ctx: &LossContext, fields: &[&[f64]], port: &Port, t: usize) -> f64 {
    fields[port.region][t * ctx.nx[port.region] + port.column]
}

#[inline]
fn flow_index(ctx: &LossContext, port: &Port, t: usize) -> usize {
    t * ctx.nx[port.region] + port.column
}

#[inline]
fn pressure_index(ctx: &LossContext, port: &Port, t: usize) -> usize {
    ctx.nt * ctx.nx[port.region] + t * ctx.nx[port.region] + port.column
}

/// RMS over time of the net flow `Σ sign·M − series` at a node, with its adjoint.
fn balance_term(ctx: &LossContext, node: &NodeTerm, fields: &[&[f64]], grads: &mut Grads, g: f64) -> f64 {
    let r: Vec<f64> = (0..ctx.nt)
        .map(|t| node.ports.iter().map(|p| p.sign * flow_at(ctx, fields, p, t)).sum::<f64>() - node.series[t])
        .collect();
    let v = rms(&r);
    if let Some(gr) = grads.as_deref_mut() {
        for (t, a) in rms_adjoint(&r, v, g).enumerate() {
            for p in &node.ports {
                gr[p.region][flow_index(ctx, p, t)] += a * p.sign;
            }
        }
    }
    v
}

fn boundary_flow_terms(ctx: &LossContext, fields: &[&[f64]], mut grads: Grads, g: f64) -> f64 {
    let mut total = 0.0;
    for group in [&ctx.demands, &ctx.junction_flows] {
        if group.is_empty() {
            continue;
        }
        let k = 1.0 / group.len() as f64;
        for node in group {
            total += k * balance_term(ctx, node, fields, &mut grads, g * k);
        }
    }
    total
}

/// RMS over time of `P_a − P_b` (or `P_a − series` when `b` is `None`).
fn pressure_gap(
    ctx: &LossContext,
    fields: &[&[f64]],
    a: &Port,
    b: Option<&Port>,
    series: &[f64],
    grads: &mut Grads,
    g: f64,
) -> f64 {
    let r: Vec<f64> = (0..ctx.nt)
        .map(|t| {
            let pa = fields[a.region][pressure_index(ctx, a, t)];
            let pb = b.map_or_else(|| series[t], |b| fields[b.region][pressure_index(ctx, b, t)]);
            pa - pb
        })
        .collect();
    let v = rms(&r);
    if let Some(gr) = grads.as_deref_mut() {
        for (t, adj) in rms_adjoint(&r, v, g).enumerate() {
            gr[a.region][pressure_index(ctx, a, t)] += adj;
            if let Some(b) = b {
                gr[b.region][pressure_index(ctx, b, t)] -= adj;
            }
        }
    }
    v
}

fn boundary_pressure_terms(ctx: &LossContext, fields: &[&[f64]], mut grads: Grads, g: f64) -> f64 {
    let mut total = 0.0;
    if !ctx.sources.is_empty() {
        let ks = 1.0 / ctx.sources.len() as f64;
        for s in &ctx.sources {
            let kp = ks / s.ports.len() as f64;
            for p in &s.ports {
                total += kp * pressure_gap(ctx, fields, p, None, &s.series, &mut grads, g * kp);
            }
        }
    }
    if !ctx.pressure_groups.is_empty() {
        let kj = 1.0 / ctx.pressure_groups.len() as f64;
        for ports in &ctx.pressure_groups {
            let n = ports.len();
            let kp = kj / (n * (n - 1) / 2) as f64;
            for i in 0..n {
                for j in i + 1..n {
                    total += kp * pressure_gap(ctx, fields, &ports[i], Some(&ports[j]), &[], &mut grads, g * kp);
                }
            }
        }
    }
    total
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Physics loss report; with `grads`, adds `g · d(pde)/d(field)` per region.
pub fn pde_terms(
    ctx: &LossContext,
    w: &LossWeights,
    fields: &[&[f64]],
    mut grads: Grads,
    g: f64,
) -> Result<LossReport> {
    ctx.check(fields)?;
    let [a0, a1, a2] = w.alpha;
    let [b0, b1, b2] = w.beta;
    let [d0, d1, d2] = w.delta;
    let region_equation = equation_terms(ctx, [a1, a2], fields, grads.as_deref_mut(), g * a0);
    let region_initial = initial_terms(ctx, [b1, b2], fields, grads.as_deref_mut(), g * b0);
    let boundary_flow = boundary_flow_terms(ctx, fields, grads.as_deref_mut(), g * d0 * d1);
    let boundary_pressure = boundary_pressure_terms(ctx, fields, grads.as_deref_mut(), g * d0 * d2);
    let equation = mean(&region_equation);
    let initial = mean(&region_initial);
    let pde = a0 * equation + b0 * initial + d0 * (d1 * boundary_flow + d2 * boundary_pressure);
    Ok(LossReport {
        equation,
        initial,
        boundary_flow,
        boundary_pressure,
        pde,
        total: pde,
        region_equation,
        region_initial,
        ..LossReport::default()
    })
}

/// `(γ1/E) Σ_e RMS(ΔM) + (γ2/E) Σ_e RMS(ΔP)` on flat `[M, P]` fields, with
/// `g · d/d(pred)` added to `grads`.
pub fn data_terms(gamma: [f64; 2], pred: &[&[f64]], target: &[&[f64]], mut grads: Grads, g: f64) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.iter().zip(target).any(|(a, b)| a.len() != b.len() || a.len() % 2 != 0) {
        return Err(CoreError::Contract("prediction and target grids differ".into()));
    }
    let e = pred.len() as f64;
    let mut per = Vec::with_capacity(pred.len());
    for (r, (a, b)) in pred.iter().zip(target).enumerate() {
        let half = a.len() / 2;
        let mut value = 0.0;
        for (q, gq) in gamma.iter().enumerate() {
            let d: Vec<f64> = (q * half..(q + 1) * half).map(|i| a[i] - b[i]).collect();
            let v = rms(&d);
            value += gq * v;
            if let Some(gr) = grads.as_deref_mut() {
                for (i, adj) in rms_adjoint(&d, v, g * gq / e).enumerate() {
                    gr[r][q * half + i] += adj;
                }
            }
        }
        per.push(value);
    }
    Ok((mean(&per), per))
}

fn flat_regions(field: &StateField) -> Vec<Vec<f64>> {
    field
        .flow
        .iter()
        .zip(&field.pressure)
        .map(|(m, p)| m.data.iter().chain(&p.data).copied().collect())
        .collect()
}

fn views(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Physics loss of a physical-unit field under its own grid.
pub fn pde_loss(pred: &StateField, network: &NetworkTopology, schedule: &BoundarySchedule, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let ctx = LossContext::new(network, schedule, &pred.grid)?;
    let flat = flat_regions(pred);
    if !ctx.extents().iter().zip(&pred.flow).all(|(&(nt, nx), f)| f.shape() == (nt, nx)) {
        return Err(CoreError::Contract("field shape does not match the network grid".into()));
    }
    pde_terms(&ctx, w, &views(&flat), None, 1.0)
}

pub fn equation_loss(pred: &StateField, network: &NetworkTopology, schedule: &BoundarySchedule, a1: f64, a2: f64) -> Result<f64> {
    let w = LossWeights { alpha: [1.0, a1, a2], ..LossWeights::zero() };
    Ok(pde_loss(pred, network, schedule, &w)?.equation)
}

pub fn initial_loss(pred: &StateField, network: &NetworkTopology, schedule: &BoundarySchedule, b1: f64, b2: f64) -> Result<f64> {
    let w = LossWeights { beta: [1.0, b1, b2], ..LossWeights::zero() };
    Ok(pde_loss(pred, network, schedule, &w)?.initial)
}

pub fn boundary_loss_flow(pred: &StateField, network: &NetworkTopology, schedule: &BoundarySchedule) -> Result<f64> {
    Ok(pde_loss(pred, network, schedule, &LossWeights::zero())?.boundary_flow)
}

pub fn boundary_loss_pressure(pred: &StateField, network: &NetworkTopology, schedule: &BoundarySchedule) -> Result<f64> {
    Ok(pde_loss(pred, network, schedule, &LossWeights::zero())?.boundary_pressure)
}

/// Data loss between normalized per-region `(2, d_t, d_x,e)` tensors.
pub fn data_loss(pred: &[Tensor], target: &[Tensor], gamma1: f64, gamma2: f64) -> Result<f64> {
    if pred.iter().zip(target).any(|(a, b)| a.shape() != b.shape()) {
        return Err(CoreError::Contract("prediction and target grids differ".into()));
    }
    let a: Vec<&[f64]> = pred.iter().map(|t| t.re()).collect();
    let b: Vec<&[f64]> = target.iter().map(|t| t.re()).collect();
    Ok(data_terms([gamma1, gamma2], &a, &b, None, 1.0)?.0)
}

/// Scalar tape node for the physics loss over physical-unit region outputs.
pub fn pde_loss_var(tape: &mut Tape, physical: &[Var], ctx: Rc<LossContext>, w: LossWeights) -> Result<(Var, LossReport)> {
    w.validate()?;
    let fields: Vec<&[f64]> = physical.iter().map(|&v| tape.value(v).re()).collect();
    let report = pde_terms(&ctx, &w, &fields, None, 1.0)?;
    let value = Tensor::scalar(report.pde);
    let var = tape.custom(
        physical,
        value,
        Box::new(move |g, parents| {
            let fields: Vec<&[f64]> = parents.iter().map(|t| t.re()).collect();
            let mut grads: Vec<Vec<f64>> = fields.iter().map(|f| vec![0.0; f.len()]).collect();
            pde_terms(&ctx, &w, &fields, Some(&mut grads), g.re()[0]).expect("shapes checked in forward");
            grads
                .into_iter()
                .zip(parents)
                .map(|(d, p)| Tensor::real(p.shape(), d).expect("parent shape"))
                .collect()
        }),
    );
    Ok((var, report))
}

/// Scalar tape node for the data loss against normalized targets.
pub fn data_loss_var(tape: &mut Tape, normalized: &[Var], targets: Rc<Vec<Tensor>>, gamma: [f64; 2]) -> Result<(Var, Vec<f64>)> {
    let pred: Vec<&[f64]> = normalized.iter().map(|&v| tape.value(v).re()).collect();
    if normalized.iter().zip(targets.iter()).any(|(&v, t)| tape.value(v).shape() != t.shape()) || pred.len() != targets.len() {
        return Err(CoreError::Contract("prediction and target grids differ".into()));
    }
    let tv: Vec<&[f64]> = targets.iter().map(|t| t.re()).collect();
    let (value, per) = data_terms(gamma, &pred, &tv, None, 1.0)?;
    let var = tape.custom(
        normalized,
        Tensor::scalar(value),
        Box::new(move |g, parents| {
            let pred: Vec<&[f64]> = parents.iter().map(|t| t.re()).collect();
            let tv: Vec<&[f64]> = targets.iter().map(|t| t.re()).collect();
            let mut grads: Vec<Vec<f64>> = pred.iter().map(|f| vec![0.0; f.len()]).collect();
            data_terms(gamma, &pred, &tv, Some(&mut grads), g.re()[0]).expect("shapes checked in forward");
            grads
                .into_iter()
                .zip(parents)
                .map(|(d, p)| Tensor::real(p.shape(), d).expect("parent shape"))
                .collect()
        }),
    );
    Ok((var, per))
}

/// Flat `[M, P]` views of a state field, exposed for tests and tools.
pub fn flatten_field(field: &StateField) -> Vec<Vec<f64>> {
    flat_regions(field)
}
