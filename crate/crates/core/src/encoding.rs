//! Multi-region input encoding and normalization statistics.
//!
//! Channel layout per region: region-id bits (MSB first, value `e - 1`),
//! `x` in metres, `t` in seconds, one channel per demand flow (ascending node
//! id), one channel per source pressure (ascending node id). Boundary
//! channels are replicated along `x` and identical in every region.

use pcno_autodiff::Tensor;
use pcno_gas::{boundary_at, BoundarySchedule, GridSpec, NetworkTopology, NodeKind, StateField};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Number of bits used for region identifiers.
pub fn region_bits(regions: usize) -> usize {
    let mut b = 0;
    while (1usize << b) < regions {
        b += 1;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    RegionBit,
    Coordinate,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub names: Vec<String>,
    pub kinds: Vec<ChannelKind>,
}

impl ChannelLayout {
    pub fn for_network(network: &NetworkTopology) -> Self {
        let e = network.pipes.len();
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        for b in 0..region_bits(e) {
            names.push(format!("region_bit_{b}"));
            kinds.push(ChannelKind::RegionBit);
        }
        names.extend(["x_m".to_string(), "t_s".to_string()]);
        kinds.extend([ChannelKind::Coordinate, ChannelKind::Coordinate]);
        for id in network.node_ids(NodeKind::Demand) {
            names.push(format!("demand_flow_{id}"));
            kinds.push(ChannelKind::Boundary);
        }
        for id in network.node_ids(NodeKind::Source) {
            names.push(format!("source_pressure_{id}"));
            kinds.push(ChannelKind::Boundary);
        }
        Self { names, kinds }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Per-region input tensors of shape `(d_a, d_t, d_x,e)` in region order.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEncoding {
    pub regions: Vec<Tensor>,
}

impl InputEncoding {
    pub fn channels(&self) -> usize {
        self.regions.first().map_or(0, |t| t.shape()[0])
    }
}

pub fn encode_inputs(network: &NetworkTopology, schedule: &BoundarySchedule, grid: &GridSpec) -> Result<InputEncoding> {
    network.ensure_valid()?;
    schedule.validate(network)?;
    let nt = grid.time_points(schedule.horizon)?;
    let nxs = grid.space_points_all(network)?;
    let e = nxs.len();
    let bits = region_bits(e);
    let demands = network.node_ids(NodeKind::Demand);
    let sources = network.node_ids(NodeKind::Source);
    let da = bits + 2 + demands.len() + sources.len();
    // Boundary series sampled once, shared by every region.
    let mut series = vec![vec![0.0; nt]; demands.len() + sources.len()];
    for k in 0..nt {
        let t = (k as f64 * grid.dt).min(schedule.horizon);
        let b = boundary_at(schedule, t)?;
        for (j, id) in demands.iter().enumerate() {
            series[j][k] = b.flows[id];
        }
        for (j, id) in sources.iter().enumerate() {
            series[demands.len() + j][k] = b.pressures[id];
        }
    }
    let mut regions = Vec::with_capacity(e);
    for (r, &nx) in nxs.iter().enumerate() {
        let plane = nt * nx;
        let mut data = vec![0.0; da * plane];
        for b in 0..bits {
            let bit = ((r >> (bits - 1 - b)) & 1) as f64;
            data[b * plane..(b + 1) * plane].iter_mut().for_each(|v| *v = bit);
        }
        for k in 0..nt {
            for i in 0..nx {
                data[bits * plane + k * nx + i] = i as f64 * grid.dx;
                data[(bits + 1) * plane + k * nx + i] = (k as f64 * grid.dt).min(schedule.horizon);
            }
        }
        for (j, s) in series.iter().enumerate() {
            let c = bits + 2 + j;
            for k in 0..nt {
                data[c * plane + k * nx..c * plane + (k + 1) * nx].iter_mut().for_each(|v| *v = s[k]);
            }
        }
        regions.push(Tensor::real(&[da, nt, nx], data)?);
    }
    Ok(InputEncoding { regions })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    /// Mean for standardized channels, minimum for coordinate channels.
    pub shift: f64,
    /// Standard deviation, or range for coordinate channels. Always `> 0`.
    pub scale: f64,
}

impl ChannelStats {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.shift
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: Vec<ChannelStats>,
    pub flow: ChannelStats,
    pub pressure: ChannelStats,
}

fn guarded(scale: f64) -> f64 {
    if scale > 1e-12 * 1.0f64.max(scale.abs()) && scale.is_finite() {
        scale
    } else {
        1.0
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
    min: f64,
    max: f64,
}

impl Moments {
    fn new() -> Self {
        Self { n: 0.0, sum: 0.0, sum_sq: 0.0, min: f64::INFINITY, max: f64::NEG_INFINITY }
    }

    fn push_all(&mut self, v: &[f64]) {
        for &x in v {
            self.n += 1.0;
            self.sum += x;
            self.sum_sq += x * x;
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
    }

    fn standard(&self) -> ChannelStats {
        let mean = self.sum / self.n;
        let var = (self.sum_sq / self.n - mean * mean).max(0.0);
        ChannelStats { shift: mean, scale: guarded(var.sqrt()) }
    }

    fn range(&self) -> ChannelStats {
        ChannelStats { shift: self.min, scale: guarded(self.max - self.min) }
    }
}

impl NormStats {
    /// Statistics over every sample in `inputs`, with output statistics over
    /// the samples that carry targets.
    pub fn fit(layout: &ChannelLayout, inputs: &[&InputEncoding], targets: &[&StateField]) -> Result<Self> {
        if inputs.is_empty() || targets.is_empty() {
            return Err(CoreError::Contract("norm stats need at least one sample with a target".into()));
        }
        let mut m = vec![Moments::new(); layout.len()];
        for enc in inputs {
            for t in &enc.regions {
                let plane = t.shape()[1] * t.shape()[2];
                for (c, mc) in m.iter_mut().enumerate() {
                    mc.push_all(&t.re()[c * plane..(c + 1) * plane]);
                }
            }
        }
        let inputs = m
            .iter()
            .zip(&layout.kinds)
            .map(|(mc, k)| if *k == ChannelKind::Coordinate { mc.range() } else { mc.standard() })
            .collect();
        let (mut mf, mut mp) = (Moments::new(), Moments::new());
        for f in targets {
            f.flow.iter().for_each(|a| mf.push_all(&a.data));
            f.pressure.iter().for_each(|a| mp.push_all(&a.data));
        }
        Ok(Self { inputs, flow: mf.standard(), pressure: mp.standard() })
    }

    /// Input statistics from data; output statistics from boundary levels.
    /// Flow is centred on the mean demand with its spread; pressure on the
    /// mean source pressure with a 5 % spread.
    pub fn physics_prior(layout: &ChannelLayout, inputs: &[&InputEncoding]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(CoreError::Contract("norm stats need at least one sample".into()));
        }
        let mut m = vec![Moments::new(); layout.len()];
        for enc in inputs {
            for t in &enc.regions {
                let plane = t.shape()[1] * t.shape()[2];
                for (c, mc) in m.iter_mut().enumerate() {
                    mc.push_all(&t.re()[c * plane..(c + 1) * plane]);
                }
            }
        }
        let mut flow = Moments::new();
        let mut pressure = Moments::new();
        for (c, name) in layout.names.iter().enumerate() {
            if name.starts_with("demand_flow_") {
                flow.n += m[c].n;
                flow.sum += m[c].sum;
                flow.sum_sq += m[c].sum_sq;
            } else if name.starts_with("source_pressure_") {
                pressure.n += m[c].n;
                pressure.sum += m[c].sum;
            }
        }
        let inputs = m
            .iter()
            .zip(&layout.kinds)
            .map(|(mc, k)| if *k == ChannelKind::Coordinate { mc.range() } else { mc.standard() })
            .collect();
        let flow = if flow.n > 0.0 { flow.standard() } else { ChannelStats { shift: 0.0, scale: 1.0 } };
        let p_mean = if pressure.n > 0.0 { pressure.sum / pressure.n } else { 0.0 };
        Ok(Self { inputs, flow, pressure: ChannelStats { shift: p_mean, scale: guarded(0.05 * p_mean) } })
    }

    pub fn normalize_inputs(&self, enc: &InputEncoding) -> Result<InputEncoding> {
        let regions = enc
            .regions
            .iter()
            .map(|t| {
                let c = t.shape()[0];
                if c != self.inputs.len() {
                    return Err(CoreError::Contract(format!("{c} channels, stats for {}", self.inputs.len())));
                }
                let plane = t.len() / c;
                let mut d = t.re().to_vec();
                for (ch, s) in self.inputs.iter().enumerate() {
                    d[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = s.apply(*v));
                }
                Ok(Tensor::real(t.shape(), d)?)
            })
            .collect::<Result<_>>()?;
        Ok(InputEncoding { regions })
    }

    pub fn denormalize_inputs(&self, enc: &InputEncoding) -> Result<InputEncoding> {
        let regions = enc
            .regions
            .iter()
            .map(|t| {
                let c = t.shape()[0];
                let plane = t.len() / c.max(1);
                let mut d = t.re().to_vec();
                for (ch, s) in self.inputs.iter().enumerate() {
                    d[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = s.invert(*v));
                }
                Ok(Tensor::real(t.shape(), d)?)
            })
            .collect::<Result<_>>()?;
        Ok(InputEncoding { regions })
    }

    /// `[M, P]` scales and shifts for mapping normalized outputs to physical units.
    pub fn output_affine(&self) -> ([f64; 2], [f64; 2]) {
        ([self.flow.scale, self.pressure.scale], [self.flow.shift, self.pressure.shift])
    }

    /// Normalized targets per region as `(2, d_t, d_x,e)` tensors.
    pub fn normalize_targets(&self, field: &StateField) -> Result<Vec<Tensor>> {
        field
            .flow
            .iter()
            .zip(&field.pressure)
            .map(|(m, p)| {
                let mut d: Vec<f64> = m.data.iter().map(|&v| self.flow.apply(v)).collect();
                d.extend(p.data.iter().map(|&v| self.pressure.apply(v)));
                Ok(Tensor::real(&[2, m.nt, m.nx], d)?)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcno_gas::build_paper_network;

    #[test]
    fn bit_width() {
        assert_eq!(region_bits(1), 0);
        assert_eq!(region_bits(2), 1);
        assert_eq!(region_bits(3), 2);
        assert_eq!(region_bits(4), 2);
        assert_eq!(region_bits(5), 3);
    }

    #[test]
    fn paper_layout_has_seven_channels() {
        let (net, _) = build_paper_network();
        let l = ChannelLayout::for_network(&net);
        assert_eq!(l.len(), 7);
        assert_eq!(l.names[6], "source_pressure_0");
    }

    #[test]
    fn constant_channel_uses_unit_scale() {
        let s = Moments { n: 3.0, sum: 6.0, sum_sq: 12.0, min: 2.0, max: 2.0 }.standard();
        assert_eq!(s.scale, 1.0);
        assert_eq!(s.apply(2.0), 0.0);
    }
}
