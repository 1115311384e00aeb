#![allow(dead_code)]

use pcno_autodiff::{ParamSet, Tape, Tensor};
use pcno_core::losses::{data_loss_var, pde_loss_var};
use pcno_core::{
    encode_inputs, forward, init_params, LossContext, LossWeights, NormStats, OutputAffine, PcnoConfig, Variant,
};
use pcno_gas::{
    build_paper_network, simulate, BoundarySchedule, End, GridSpec, NetworkTopology, NodeKind, NodeSpec,
    PiecewiseSeries, PipeSpec, SolverOptions, StateField,
};
use std::rc::Rc;

/// Two pipes in series (source -> pipe 1 -> junction -> pipe 2 -> demand),
/// each 7 km so that `dx = 1000` gives 8 grid points.
pub fn toy_network() -> NetworkTopology {
    let (paper, _) = build_paper_network();
    let pipe = |id: u32, base: &PipeSpec| PipeSpec { id, length: 7000.0, ..base.clone() };
    NetworkTopology {
        pipes: vec![pipe(1, &paper.pipes[0]), pipe(2, &paper.pipes[1])],
        nodes: vec![
            NodeSpec { id: 0, kind: NodeKind::Source, ports: vec![(1, End::Left)] },
            NodeSpec { id: 1, kind: NodeKind::Junction, ports: vec![(1, End::Right), (2, End::Left)] },
            NodeSpec { id: 2, kind: NodeKind::Demand, ports: vec![(2, End::Right)] },
        ],
    }
}

/// `8 x 8` grid per region with one demand switch.
pub fn toy_problem() -> (NetworkTopology, BoundarySchedule, GridSpec) {
    let net = toy_network();
    let mut sched = BoundarySchedule::new(700.0, 100.0);
    sched.source_pressure.insert(0, PiecewiseSeries::constant(3.0e5));
    sched.demand_flow.insert(2, PiecewiseSeries::steps(vec![1.2, 1.8], vec![300.0]).unwrap());
    (net, sched, GridSpec::new(100.0, 1000.0))
}

pub fn toy_config(variant: Variant) -> PcnoConfig {
    PcnoConfig {
        variant,
        layers: 1,
        width: 4,
        z_t: 2,
        z_x: 3,
        z_e: 2,
        r_t: 0.0,
        r_x: 0.0,
        regions: 2,
        in_channels: 5,
        out_channels: 2,
        proj_hidden: 6,
    }
}

pub fn toy_affine() -> OutputAffine {
    OutputAffine { scale: [0.5, 1.5e4], shift: [1.5, 2.95e5] }
}

pub struct Tiny {
    pub net: NetworkTopology,
    pub sched: BoundarySchedule,
    pub grid: GridSpec,
    pub inputs: Vec<Tensor>,
    pub targets: Rc<Vec<Tensor>>,
    pub ctx: Rc<LossContext>,
    pub truth: StateField,
}

pub fn tiny() -> Tiny {
    let (net, sched, grid) = toy_problem();
    let truth = simulate(&net, &sched, &grid, &SolverOptions::default()).unwrap();
    let enc = encode_inputs(&net, &sched, &grid).unwrap();
    let layout = pcno_core::ChannelLayout::for_network(&net);
    let norm = NormStats::fit(&layout, &[&enc], &[&truth]).unwrap();
    let inputs = norm.normalize_inputs(&enc).unwrap().regions;
    let a = toy_affine();
    let targets: Vec<Tensor> = truth
        .flow
        .iter()
        .zip(&truth.pressure)
        .map(|(m, p)| {
            let mut d: Vec<f64> = m.data.iter().map(|v| (v - a.shift[0]) / a.scale[0]).collect();
            d.extend(p.data.iter().map(|v| (v - a.shift[1]) / a.scale[1]));
            Tensor::real(&[2, m.nt, m.nx], d).unwrap()
        })
        .collect();
    let ctx = Rc::new(LossContext::new(&net, &sched, &grid).unwrap());
    Tiny { net, sched, grid, inputs, targets: Rc::new(targets), ctx, truth }
}

/// `L_data + L_PDE` of the toy problem and, on request, its parameter gradients.
pub fn toy_loss(t: &Tiny, cfg: &PcnoConfig, params: &ParamSet, grads: bool) -> (f64, Option<pcno_autodiff::ParamGrads>) {
    let mut tape = Tape::new();
    let pred = forward(&mut tape, params, cfg, &t.inputs, &toy_affine()).unwrap();
    let (d, _) = data_loss_var(&mut tape, &pred.normalized, t.targets.clone(), [1.0, 1.0]).unwrap();
    let (p, _) = pde_loss_var(&mut tape, &pred.physical, t.ctx.clone(), LossWeights::for_network(&t.net)).unwrap();
    let l = tape.add(d, p).unwrap();
    let v = tape.value(l).re()[0];
    (v, grads.then(|| tape.backward(l, params).unwrap()))
}

pub fn toy_params(cfg: &PcnoConfig, seed: u64) -> ParamSet {
    init_params(cfg, seed).unwrap()
}

/// Toy scenarios with demand levels drawn from `seed`.
pub fn toy_samples(n: usize, seed: u64, with_target: bool) -> Vec<pcno_core::Sample> {
    use rand::{Rng, SeedableRng};
    let (net, _, grid) = toy_problem();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut sched = BoundarySchedule::new(700.0, 100.0);
            sched.source_pressure.insert(0, PiecewiseSeries::constant(3.0e5));
            let (a, b) = (rng.gen_range(1.0..2.0), rng.gen_range(1.0..2.0));
            sched.demand_flow.insert(2, PiecewiseSeries::steps(vec![a, b], vec![300.0]).unwrap());
            let target = with_target.then(|| simulate(&net, &sched, &grid, &SolverOptions::default()).unwrap());
            let encoding = encode_inputs(&net, &sched, &grid).unwrap();
            pcno_core::Sample { seed: seed + i as u64, schedule: sched, grid, encoding, target }
        })
        .collect()
}

pub fn toy_train_config(variant: Variant) -> pcno_core::TrainConfig {
    let mut c = pcno_core::TrainConfig::desk(toy_config(variant), LossWeights::for_network(&toy_network()));
    c.model = toy_config(variant);
    c.epochs = 2;
    c.batch_size = 2;
    c.n_data = 6;
    c.n_pde = 4;
    c.data_grid = None;
    c.pde_grid = None;
    c.val_fraction = 0.34;
    c
}
