//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 7-9 train at a reduced budget unless `PCNO_FULL_SCALE=1`; their
//! FAIL lines only fail the process under `PCNO_ACCEPT_STRICT=1`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use pcno_core::losses::{boundary_loss_flow, boundary_loss_pressure, equation_loss, initial_loss};
use pcno_core::trainer::StepLog;
use pcno_core::{
    evaluate, generate, param_count, plan_alignment, train, write_dataset, Checkpoint, GenerationConfig, LossWeights,
    PcnoConfig, Sample, TrainConfig, TrainIo, Variant,
};
use pcno_gas::{
    boundary_at, build_paper_network, junction_defects, random_scenario, simulate, single_pipe_network,
    solve_steady_state, BoundaryValues, GridSpec, NetworkTopology, SolverOptions, SquareWaveSpec,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, start: Instant) -> Result<String, String> {
    let took = start.elapsed();
    ensure(took < limit, format!("took {took:.2?}, limit {limit:?}"))?;
    Ok(format!("{took:.2?}"))
}

fn steady_state_oracle() -> Outcome {
    let start = Instant::now();
    let (net, _) = build_paper_network();
    let grid = GridSpec::new(640.0, 400.0);
    let mut worst = 0.0f64;
    for pipe in &net.pipes {
        let single = single_pipe_network(pipe.clone());
        for flow in [0.5, 1.0, 2.0, 5.0] {
            let bc = BoundaryValues { pressures: BTreeMap::from([(0, 3.0e5)]), flows: BTreeMap::from([(1, flow)]) };
            let row = solve_steady_state(&single, &bc, &grid).map_err(|e| e.to_string())?;
            let q = flow / pipe.area();
            for (i, &p) in row.pressure[0].iter().enumerate() {
                let x = i as f64 * grid.dx;
                let exact = (3.0e5f64.powi(2) - pipe.friction * pipe.zrt() * q * q.abs() * x / pipe.diameter).sqrt();
                worst = worst.max((p - exact).abs() / exact);
            }
        }
    }
    ensure(worst <= 1e-6, format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}, {}", within(Duration::from_secs(1), start)?))
}

fn conservation() -> Outcome {
    let start = Instant::now();
    let (net, _) = build_paper_network();
    let opts = SolverOptions::default();
    let sched = random_scenario(&net, &SquareWaveSpec::paper(), 640.0, 640.0, 42).map_err(|e| e.to_string())?;
    let grid = GridSpec::new(640.0, 400.0);
    let field = simulate(&net, &sched, &grid, &opts).map_err(|e| e.to_string())?;
    let zrt = net.pipes[0].zrt();
    let (mut wf, mut wp) = (0.0f64, 0.0f64);
    for t in 0..field.time_points() {
        let bc = boundary_at(&sched, t as f64 * grid.dt).map_err(|e| e.to_string())?;
        let (f, p) = junction_defects(&net, &field.row(t), &bc);
        wf = wf.max(f);
        wp = wp.max(p);
    }
    ensure(wf <= 10.0 * opts.newton_tol, format!("flow defect {wf:e}"))?;
    ensure(wp <= 10.0 * opts.newton_tol * zrt, format!("pressure defect {wp:e}"))?;
    Ok(format!(
        "{} rows, flow defect {wf:.1e} kg/s, pressure defect {wp:.1e} Pa, {}",
        field.time_points(),
        within(Duration::from_secs(10), start)?
    ))
}

fn loss_consistency() -> Outcome {
    let (net, _) = build_paper_network();
    let o = SolverOptions::default();
    let w = LossWeights::for_network(&net);
    let cell = 10.0 * o.newton_tol * o.pressure_scale;
    let tol = [
        (w.alpha[1] + w.alpha[2]) * cell,
        (w.beta[1] + w.beta[2]) * cell,
        10.0 * o.newton_tol * o.flow_scale,
        10.0 * o.newton_tol * net.pipes[0].zrt(),
    ];
    let mut worst = [0.0f64; 4];
    for seed in [1, 2, 3] {
        let sched = random_scenario(&net, &SquareWaveSpec::paper(), 640.0, 640.0, seed).map_err(|e| e.to_string())?;
        let field = simulate(&net, &sched, &GridSpec::new(640.0, 400.0), &o).map_err(|e| e.to_string())?;
        let got = [
            equation_loss(&field, &net, &sched, w.alpha[1], w.alpha[2]),
            initial_loss(&field, &net, &sched, w.beta[1], w.beta[2]),
            boundary_loss_flow(&field, &net, &sched),
            boundary_loss_pressure(&field, &net, &sched),
        ];
        for (k, g) in got.into_iter().enumerate() {
            worst[k] = worst[k].max(g.map_err(|e| e.to_string())?);
        }
    }
    let names = ["equation", "initial", "boundary flow", "boundary pressure"];
    for k in 0..4 {
        ensure(worst[k] <= tol[k], format!("{} loss {:e} > {:e}", names[k], worst[k], tol[k]))?;
    }
    Ok(names.iter().zip(worst.iter().zip(tol)).map(|(n, (g, t))| format!("{n} {g:.1e}<={t:.1e}")).collect::<Vec<_>>().join(", "))
}

mod common;

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let t = common::tiny();
    let cfg = common::toy_config(Variant::Pcno);
    let params = common::toy_params(&cfg, 17);
    let (l0, g) = common::toy_loss(&t, &cfg, &params, true);
    let g = g.expect("gradients");
    let h = 1e-6;
    let mut worst = (String::new(), 0.0f64);
    for (k, (name, value)) in params.iter().enumerate() {
        let (mut diff, mut nf, mut na) = (0.0, 0.0, 0.0);
        for s in 0..value.real_scalars() {
            let (mut up, mut dn) = (params.clone(), params.clone());
            let id = pcno_autodiff::ParamId(k);
            up.get_mut(id).set_scalar_at(s, value.scalar_at(s) + h);
            dn.get_mut(id).set_scalar_at(s, value.scalar_at(s) - h);
            let fd = (common::toy_loss(&t, &cfg, &up, false).0 - common::toy_loss(&t, &cfg, &dn, false).0) / (2.0 * h);
            let an = g.grads[k].scalar_at(s);
            diff += (fd - an) * (fd - an);
            nf += fd * fd;
            na += an * an;
        }
        let rel = if f64::max(nf, na) > 0.0 { diff.sqrt() / f64::max(nf, na).sqrt() } else { 0.0 };
        if rel >= worst.1 {
            worst = (name.to_string(), rel);
        }
    }
    ensure(worst.1 < 1e-5, format!("{}: relative error {:e}", worst.0, worst.1))?;
    Ok(format!(
        "{} tensors, loss {l0:.3e}, worst {} {:.1e}, {}",
        params.len(),
        worst.0,
        worst.1,
        within(Duration::from_secs(60), start)?
    ))
}

fn alignment() -> Outcome {
    use pcno_autodiff::{Tape, Tensor};
    let ext = [(136, 151), (136, 126), (136, 101)];
    let plan = plan_alignment(&ext, 0.0, 0.001).map_err(|e| e.to_string())?;
    ensure(plan.d_x == 151 && plan.d_t == 136, format!("aligned extent {}x{}", plan.d_t, plan.d_x))?;
    let mut tape = Tape::new();
    let xs: Vec<_> = ext
        .iter()
        .enumerate()
        .map(|(e, &(dt, dx))| {
            let d = (0..2 * dt * dx).map(|i| ((i * 7 + e * 13) as f64).sin()).collect();
            tape.constant(Tensor::real(&[2, 1, dt, dx], d).unwrap())
        })
        .collect();
    let joined = pcno_core::align_a1(&mut tape, &xs, &plan).map_err(|e| e.to_string())?;
    let back = pcno_core::unalign_a2(&mut tape, joined, &plan).map_err(|e| e.to_string())?;
    for (a, b) in xs.iter().zip(&back) {
        ensure(tape.value(*a) == tape.value(*b), "round trip differs")?;
    }
    let pads: Vec<_> = plan.regions.iter().map(|r| r.x).collect();
    Ok(format!("d_x 151, spatial pads {pads:?}, exact round trip"))
}

fn parameter_ordering() -> Outcome {
    let n: Vec<usize> =
        Variant::ALL.iter().map(|v| param_count(&PcnoConfig::paper(*v))).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let (pcno, pcno_c, pcno_3d, fno_2d, fno_3d) = (n[0], n[1], n[2], n[3], n[4]);
    ensure(pcno_c < pcno && pcno < fno_2d, "PCNO-C < PCNO < FNO-2D violated")?;
    ensure(pcno < pcno_3d && pcno_3d < fno_3d, "PCNO < PCNO-3D < FNO-3D violated")?;
    ensure(pcno * 50 <= fno_2d, format!("FNO-2D/PCNO = {:.1}", fno_2d as f64 / pcno as f64))?;
    Ok(format!(
        "PCNO {pcno}, PCNO-C {pcno_c}, PCNO-3D {pcno_3d}, FNO-2D {fno_2d}, FNO-3D {fno_3d} (FNO-2D/PCNO {:.1})",
        fno_2d as f64 / pcno as f64
    ))
}

struct Budget {
    width: usize,
    n_data: usize,
    n_pde: usize,
    epochs: usize,
    decay_every: usize,
    n_seen: usize,
    n_unseen: usize,
    seeds: [u64; 3],
}

impl Budget {
    fn from_env() -> Self {
        if std::env::var("PCNO_FULL_SCALE").is_ok_and(|v| v == "1") {
            Self { width: 32, n_data: 200, n_pde: 200, epochs: 12, decay_every: 4, n_seen: 50, n_unseen: 10, seeds: [0, 1, 2] }
        } else {
            Self { width: 16, n_data: 24, n_pde: 4, epochs: 6, decay_every: 3, n_seen: 20, n_unseen: 5, seeds: [0, 1, 2] }
        }
    }

    fn describe(&self) -> String {
        format!(
            "width {}, {} data + {} PDE, {} epochs, {} seen / {} unseen test samples",
            self.width, self.n_data, self.n_pde, self.epochs, self.n_seen, self.n_unseen
        )
    }

    fn config(&self, net: &NetworkTopology, variant: Variant, seed: u64, physics_only: bool) -> TrainConfig {
        let model = PcnoConfig {
            regions: net.pipes.len(),
            in_channels: pcno_core::ChannelLayout::for_network(net).len(),
            width: self.width,
            ..PcnoConfig::paper(variant)
        };
        let mut weights = LossWeights::for_network(net);
        weights.gamma = [1e4, 1e4];
        let mut c = TrainConfig::desk(model, weights);
        c.model.width = self.width;
        c.epochs = self.epochs;
        c.batch_size = 1;
        c.lr = 3e-3;
        c.lr_decay_every = self.decay_every;
        c.seed = seed;
        c.n_data = if physics_only { 0 } else { self.n_data };
        c.n_pde = self.n_pde;
        c
    }
}

struct Sets {
    net: NetworkTopology,
    data: Vec<Sample>,
    pde: Vec<Sample>,
    seen: Vec<Sample>,
    unseen: Vec<Sample>,
}

fn gen(net: &NetworkTopology, n: usize, seed: u64, grid: GridSpec, physics_only: bool) -> Vec<Sample> {
    let mut cfg = GenerationConfig::new(n, seed, grid);
    cfg.physics_only = physics_only;
    generate(net, &cfg).expect("dataset generation").0
}

fn sets(b: &Budget) -> Sets {
    let (net, _) = build_paper_network();
    Sets {
        data: gen(&net, b.n_data, 1000, GridSpec::new(640.0, 400.0), false),
        pde: gen(&net, b.n_pde, 2000, GridSpec::new(320.0, 200.0), true),
        seen: gen(&net, b.n_seen, 5000, GridSpec::new(640.0, 400.0), false),
        unseen: gen(&net, b.n_unseen, 6000, GridSpec::new(160.0, 100.0), false),
        net,
    }
}

/// Seen-resolution flow error of every trained model, keyed by run label.
struct Trained {
    seen: BTreeMap<String, Vec<f64>>,
    unseen: Vec<f64>,
}

fn train_all(b: &Budget, s: &Sets) -> Trained {
    let mut seen = BTreeMap::<String, Vec<f64>>::new();
    let mut unseen = Vec::new();
    let runs = [
        ("PCNO", Variant::Pcno, false),
        ("PCNO-C", Variant::PcnoC, false),
        ("PCNO-3D", Variant::Pcno3d, false),
        ("FNO-2D", Variant::Fno2d, false),
        ("PCNO physics-only", Variant::Pcno, true),
    ];
    for (label, variant, physics_only) in runs {
        for &seed in &b.seeds {
            let start = Instant::now();
            let cfg = b.config(&s.net, variant, seed, physics_only);
            let data: &[Sample] = if physics_only { &[] } else { &s.data };
            let out = train(&cfg, &s.net, data, &s.pde, &TrainIo::default(), |_| {}).expect("training");
            let mut test: Vec<(String, &[Sample])> = vec![("seen".into(), &s.seen)];
            if label == "PCNO" {
                test.push(("unseen".into(), &s.unseen));
            }
            let r = evaluate(&out.checkpoint, &test).expect("evaluation");
            let f = r.entry("seen").unwrap().flow.mean;
            eprintln!("  trained {label} seed {seed}: seen flow error {f:.4} ({:.0?})", start.elapsed());
            seen.entry(label.into()).or_default().push(f);
            if let Some(u) = r.entry("unseen") {
                eprintln!("    unseen flow error {:.4}", u.flow.mean);
                unseen.push(u.flow.mean);
            }
        }
    }
    Trained { seen, unseen }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn desk_learning(t: &Trained) -> Outcome {
    let seen = mean(&t.seen["PCNO"]);
    let unseen = mean(&t.unseen);
    let msg = format!("seen flow error {seen:.4}, unseen {unseen:.4} (ratio {:.2})", unseen / seen);
    ensure(seen <= 0.05 && unseen <= 5.0 * seen, msg.clone())?;
    Ok(msg)
}

fn ablation(t: &Trained) -> Outcome {
    let m = |k: &str| mean(&t.seen[k]);
    let (p, c, d3, f2) = (m("PCNO"), m("PCNO-C"), m("PCNO-3D"), m("FNO-2D"));
    let msg = format!("mean flow error PCNO {p:.4}, PCNO-C {c:.4}, PCNO-3D {d3:.4}, FNO-2D {f2:.4}");
    ensure(p <= c && c <= d3 && p <= f2, msg.clone())?;
    Ok(msg)
}

fn physics_only(t: &Trained) -> Outcome {
    let (po, dp) = (&t.seen["PCNO physics-only"], &t.seen["PCNO"]);
    let msg = format!("physics-only {:.4} vs data+PDE {:.4} (per seed {po:.4?} vs {dp:.4?})", mean(po), mean(dp));
    ensure(po.iter().zip(dp).all(|(a, b)| a > b), msg.clone())?;
    Ok(msg)
}

fn determinism() -> Outcome {
    let (net, _) = build_paper_network();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let grid = GridSpec::new(5400.0, 10000.0);
    let mut bytes = Vec::new();
    let mut runs = Vec::new();
    for k in 0..2 {
        let cfg = GenerationConfig::new(4, 9, grid);
        let (data, skipped) = generate(&net, &cfg).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("d{k}.pcno"));
        let manifest = pcno_core::dataset::manifest_for(&net, &data, skipped, serde_json::to_value(&cfg).unwrap());
        write_dataset(&path, &manifest, &data).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(&path).map_err(|e| e.to_string())?);

        let model = PcnoConfig {
            width: 4,
            layers: 1,
            z_t: 2,
            z_x: 2,
            z_e: 2,
            proj_hidden: 8,
            regions: net.pipes.len(),
            in_channels: pcno_core::ChannelLayout::for_network(&net).len(),
            ..PcnoConfig::paper(Variant::Pcno)
        };
        let mut tc = TrainConfig::desk(model, LossWeights::for_network(&net));
        (tc.epochs, tc.batch_size, tc.n_data, tc.n_pde, tc.data_grid, tc.pde_grid) = (2, 2, 3, 1, None, None);
        let out = train(&tc, &net, &data, &data[3..], &TrainIo::default(), |_| {}).map_err(|e| e.to_string())?;
        let ck = dir.path().join(format!("c{k}.pcno"));
        out.checkpoint.save(&ck).map_err(|e| e.to_string())?;
        let log: String = out.log.iter().map(StepLog::csv_row).collect();
        let report = evaluate(&Checkpoint::load(&ck).map_err(|e| e.to_string())?, &[("seen".into(), &data)])
            .map_err(|e| e.to_string())?;
        runs.push((std::fs::read(&ck).map_err(|e| e.to_string())?, log, serde_json::to_vec(&report).unwrap()));
    }
    ensure(bytes[0] == bytes[1], "datasets differ")?;
    ensure(runs[0].0 == runs[1].0, "checkpoints differ")?;
    ensure(runs[0].1 == runs[1].1, "training logs differ")?;
    ensure(runs[0].2 == runs[1].2, "evaluation reports differ")?;
    Ok(format!("dataset {} B, checkpoint {} B, log and report identical", bytes[0].len(), runs[0].0.len()))
}

fn run(n: usize, name: &str, tag: &str, f: impl FnOnce() -> Outcome) -> bool {
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    match out {
        Ok(msg) => {
            println!("criterion {n:>2} PASS  {name}{tag}: {msg}");
            true
        }
        Err(msg) => {
            println!("criterion {n:>2} FAIL  {name}{tag}: {msg}");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and friends must not start training.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let strict = std::env::var("PCNO_ACCEPT_STRICT").is_ok_and(|v| v == "1");
    let full = std::env::var("PCNO_FULL_SCALE").is_ok_and(|v| v == "1");
    let mut hard_ok = true;
    hard_ok &= run(1, "steady-state square law", "", steady_state_oracle);
    hard_ok &= run(2, "junction conservation over 24 h", "", conservation);
    hard_ok &= run(3, "PDE loss vanishes on solver output", "", loss_consistency);
    hard_ok &= run(4, "gradients match finite differences", "", gradient_check);
    hard_ok &= run(5, "alignment arithmetic", "", alignment);
    hard_ok &= run(6, "parameter-count ordering", "", parameter_ordering);

    let budget = Budget::from_env();
    eprintln!("training for criteria 7-9: {}", budget.describe());
    let s = sets(&budget);
    let trained = catch_unwind(AssertUnwindSafe(|| train_all(&budget, &s)));
    let soft = match (strict, full) {
        (true, _) => "",
        (false, true) => " (informational)",
        (false, false) => " (reduced budget, informational)",
    };
    let mut soft_ok = true;
    match &trained {
        Ok(t) => {
            soft_ok &= run(7, "learning and zero-shot super-resolution", soft, || desk_learning(t));
            soft_ok &= run(8, "ablation ordering", soft, || ablation(t));
            soft_ok &= run(9, "physics-only degradation", soft, || physics_only(t));
        }
        Err(_) => {
            for (n, name) in [(7, "learning and zero-shot super-resolution"), (8, "ablation ordering"), (9, "physics-only degradation")] {
                println!("criterion {n:>2} FAIL  {name}: training did not complete");
            }
            soft_ok = false;
        }
    }
    hard_ok &= run(10, "bit-identical reruns", "", determinism);
    println!("acceptance finished in {:.0?}", start.elapsed());
    if !hard_ok || (strict && !soft_ok) {
        std::process::exit(1);
    }
}
