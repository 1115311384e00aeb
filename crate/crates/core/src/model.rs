//! Partitioned coupled neural operator and its baseline variants.
//!
//! Layout of the hidden state is `(width, E, d_t', d_x')`. Per Fourier layer:
//!
//! ```text
//! v <- act( W v + b + F^-1[ K2 (K1 (F v)) ] )
//! ```
//!
//! with `K1` mixing regions per retained mode and `K2` mixing channels per
//! region, applied separately to the low and high temporal mode blocks.

use pcno_autodiff::{two_sided, DType, ParamId, ParamSet, Tape, Tensor, Var, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "PCNO")]
    Pcno,
    #[serde(rename = "PCNO-C")]
    PcnoC,
    #[serde(rename = "PCNO-3D")]
    Pcno3d,
    #[serde(rename = "FNO-2D")]
    Fno2d,
    #[serde(rename = "FNO-3D")]
    Fno3d,
}

impl std::str::FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::parse(s)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Pcno, Variant::PcnoC, Variant::Pcno3d, Variant::Fno2d, Variant::Fno3d];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pcno => "PCNO",
            Variant::PcnoC => "PCNO-C",
            Variant::Pcno3d => "PCNO-3D",
            Variant::Fno2d => "FNO-2D",
            Variant::Fno3d => "FNO-3D",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::Contract(format!("unknown variant {s:?}")))
    }

    fn aligned(self) -> bool {
        self != Variant::Fno2d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcnoConfig {
    pub variant: Variant,
    pub layers: usize,
    pub width: usize,
    pub z_t: usize,
    pub z_x: usize,
    /// Regional cutoff of the 3D variants.
    pub z_e: usize,
    pub r_t: f64,
    pub r_x: f64,
    pub regions: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub proj_hidden: usize,
}

impl PcnoConfig {
    /// Four layers of width 64, cutoffs 25, `r_x = 0.001`, three regions, seven input channels.
    pub fn paper(variant: Variant) -> Self {
        Self {
            variant,
            layers: 4,
            width: 64,
            z_t: 25,
            z_x: 25,
            z_e: 3,
            r_t: 0.0,
            r_x: 0.001,
            regions: 3,
            in_channels: 7,
            out_channels: 2,
            proj_hidden: 128,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Contract(format!("model config: {m}")));
        if self.layers == 0 {
            return bad("layers must be >= 1");
        }
        if self.z_t == 0 || self.z_x == 0 || self.z_e == 0 {
            return bad("cutoffs must be positive");
        }
        if !(self.r_t >= 0.0 && self.r_x >= 0.0) {
            return bad("padding ratios must be >= 0");
        }
        if self.regions == 0 || self.in_channels == 0 || self.out_channels == 0 || self.proj_hidden == 0 {
            return bad("channel and region counts must be positive");
        }
        Ok(())
    }

    fn z_e_eff(&self) -> usize {
        self.z_e.min(self.regions)
    }
}

/// Per-region zero padding that brings every region onto one grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPad {
    pub d_t: usize,
    pub d_x: usize,
    pub t: (usize, usize),
    pub x: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub regions: Vec<RegionPad>,
    pub d_t: usize,
    pub d_x: usize,
}

pub fn plan_alignment(extents: &[(usize, usize)], r_t: f64, r_x: f64) -> Result<AlignmentPlan> {
    if !(r_t >= 0.0 && r_x >= 0.0) {
        return Err(CoreError::Contract("padding ratios must be >= 0".into()));
    }
    let &(dt0, _) = extents.first().ok_or_else(|| CoreError::Contract("no regions to align".into()))?;
    let dx_max = extents.iter().map(|e| e.1).max().unwrap_or(0);
    let ht = (dt0 as f64 * r_t).floor() as usize;
    let hx = (dx_max as f64 * r_x).floor() as usize;
    let regions = extents
        .iter()
        .map(|&(d_t, d_x)| {
            if d_t != dt0 {
                return Err(CoreError::Contract(format!("regions disagree on d_t: {dt0} vs {d_t}")));
            }
            let head = hx + (dx_max - d_x) / 2;
            let tail = 2 * hx + dx_max - d_x - head;
            Ok(RegionPad { d_t, d_x, t: (ht, ht), x: (head, tail) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentPlan { regions, d_t: dt0 + 2 * ht, d_x: dx_max + 2 * hx })
}

/// Pad features `(C, 1, d_t, d_x,e)` per plan and stack them on the region axis.
pub fn align_a1(tape: &mut Tape, xs: &[Var], plan: &AlignmentPlan) -> Result<Var> {
    if xs.len() != plan.regions.len() {
        return Err(CoreError::Contract(format!("{} regions for a plan of {}", xs.len(), plan.regions.len())));
    }
    let mut padded = Vec::with_capacity(xs.len());
    for (&x, r) in xs.iter().zip(&plan.regions) {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != 1 || s[2] != r.d_t || s[3] != r.d_x {
            return Err(CoreError::Contract(format!("region extent {s:?} does not match plan {r:?}")));
        }
        padded.push(tape.pad(x, &[(0, 0), (0, 0), r.t, r.x])?);
    }
    Ok(tape.concat(&padded, 1)?)
}

/// Remove the padding of [`align_a1`], returning `(C, 1, d_t, d_x,e)` per region.
pub fn unalign_a2(tape: &mut Tape, joined: Var, plan: &AlignmentPlan) -> Result<Vec<Var>> {
    let s = tape.value(joined).shape().to_vec();
    if s.len() != 4 || s[1] != plan.regions.len() || s[2] != plan.d_t || s[3] != plan.d_x {
        return Err(CoreError::Contract(format!("joined shape {s:?} does not match plan")));
    }
    plan.regions
        .iter()
        .enumerate()
        .map(|(e, r)| Ok(tape.crop(joined, &[0..s[0], e..e + 1, r.t.0..r.t.0 + r.d_t, r.x.0..r.x.0 + r.d_x])?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Init bound of the uniform draw.
    pub fan_in: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    RegionMix,
    Spectral,
}

impl ParamShape {
    pub fn scalars(&self) -> usize {
        let n: usize = self.shape.iter().product();
        if self.dtype == DType::C128 {
            2 * n
        } else {
            n
        }
    }
}

/// Exact tensor shapes of every parameter, in initialization order.
pub fn build_variant(cfg: &PcnoConfig) -> Result<Vec<ParamShape>> {
    cfg.validate()?;
    let w = cfg.width;
    let e = cfg.regions;
    let (zt, zx, ze) = (cfg.z_t, cfg.z_x, cfg.z_e_eff());
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, dtype, fan_in, kind| {
        out.push(ParamShape { name, shape, dtype, fan_in, kind });
    };
    push("lift.w".into(), vec![w, cfg.in_channels], DType::F64, cfg.in_channels, ParamKind::Weight);
    push("lift.b".into(), vec![w], DType::F64, cfg.in_channels, ParamKind::Bias);
    for l in 0..cfg.layers {
        let p = format!("layer{l}");
        match cfg.variant {
            Variant::Pcno | Variant::PcnoC => {
                for half in ["low", "high"] {
                    push(format!("{p}.k1.{half}"), vec![zt, zx, e, e], DType::C128, e, ParamKind::RegionMix);
                }
                for half in ["low", "high"] {
                    let shape = if cfg.variant == Variant::Pcno { vec![w, w, e] } else { vec![w, w] };
                    push(format!("{p}.k2.{half}"), shape, DType::C128, w, ParamKind::Spectral);
                }
            }
            Variant::Pcno3d => push(format!("{p}.k"), vec![w, w, ze, 2 * zt, zx], DType::C128, w, ParamKind::Spectral),
            Variant::Fno3d => push(format!("{p}.k"), vec![w, w, ze, 2 * zt, 2 * zx], DType::C128, w, ParamKind::Spectral),
            Variant::Fno2d => {
                for r in 0..e {
                    push(format!("{p}.k.e{r}"), vec![w, w, 1, 2 * zt, zx], DType::C128, w, ParamKind::Spectral);
                }
            }
        }
        if cfg.variant == Variant::Fno2d {
            for r in 0..e {
                push(format!("{p}.w.e{r}"), vec![w, w], DType::F64, w, ParamKind::Weight);
                push(format!("{p}.b.e{r}"), vec![w], DType::F64, w, ParamKind::Bias);
            }
        } else {
            push(format!("{p}.w"), vec![w, w], DType::F64, w, ParamKind::Weight);
            push(format!("{p}.b"), vec![w], DType::F64, w, ParamKind::Bias);
        }
    }
    let h = cfg.proj_hidden;
    push("proj.w1".into(), vec![h, w], DType::F64, w, ParamKind::Weight);
    push("proj.b1".into(), vec![h], DType::F64, w, ParamKind::Bias);
    push("proj.w2".into(), vec![cfg.out_channels, h], DType::F64, h, ParamKind::Weight);
    push("proj.b2".into(), vec![cfg.out_channels], DType::F64, h, ParamKind::Bias);
    Ok(out)
}

/// Number of real scalars; complex entries count twice.
pub fn param_count(cfg: &PcnoConfig) -> Result<usize> {
    Ok(build_variant(cfg)?.iter().map(ParamShape::scalars).sum())
}

/// Uniform initialization: real weights and biases in `±1/sqrt(fan_in)`,
/// region mixing in `±1/E`, channel/mode mixing in `±1/(fan_in·E)`, real and
/// imaginary parts drawn independently.
pub fn init_params(cfg: &PcnoConfig, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for p in build_variant(cfg)? {
        let n: usize = p.shape.iter().product();
        let bound = match p.kind {
            ParamKind::Weight | ParamKind::Bias => 1.0 / (p.fan_in as f64).sqrt(),
            ParamKind::RegionMix => 1.0 / cfg.regions as f64,
            ParamKind::Spectral => 1.0 / (p.fan_in * cfg.regions) as f64,
        };
        let mut draw = || rng.gen_range(-bound..=bound);
        let t = match p.dtype {
            DType::F64 => Tensor::real(&p.shape, (0..n).map(|_| draw()).collect())?,
            DType::C128 => Tensor::complex(&p.shape, (0..n).map(|_| C64::new(draw(), draw())).collect())?,
        };
        set.insert(p.name, t);
    }
    Ok(set)
}

/// Region extents `(d_t, d_x,e)` of a set of encodings `(d_a, d_t, d_x,e)`.
pub fn extents(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs.iter().map(|t| (t.shape()[1], t.shape()[2])).collect()
}

struct Bound<'a> {
    tape: &'a mut Tape,
    set: &'a ParamSet,
}

impl Bound<'_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let id: ParamId =
            self.set.id_of(name).ok_or_else(|| CoreError::Contract(format!("missing parameter {name:?}")))?;
        Ok(self.tape.param(self.set, id))
    }
}

fn range(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn check_cutoffs(cfg: &PcnoConfig, d_t: usize, d_x: usize) -> Result<()> {
    let h = d_x / 2 + 1;
    let zx_limit = if cfg.variant == Variant::Fno3d { d_x / 2 } else { h };
    if 2 * cfg.z_t > d_t || cfg.z_x > zx_limit {
        return Err(CoreError::Contract(format!(
            "cutoffs (Z_t={}, Z_x={}) exceed the {d_t}x{d_x} grid spectrum",
            cfg.z_t, cfg.z_x
        )));
    }
    Ok(())
}

/// Spectral branch of layer `l` on an aligned state `(w, E, d_t, d_x)`.
fn spectral_joint(b: &mut Bound, cfg: &PcnoConfig, l: usize, v: Var) -> Result<Var> {
    let shape = b.tape.value(v).shape().to_vec();
    let (w, e, dt, dx) = (shape[0], shape[1], shape[2], shape[3]);
    check_cutoffs(cfg, dt, dx)?;
    let (zt, zx) = (cfg.z_t, cfg.z_x);
    let tt = two_sided(dt, zt);
    match cfg.variant {
        Variant::Pcno | Variant::PcnoC => {
            let f = b.tape.rfft_tx_keep(v, zx)?;
            let mut blocks = Vec::with_capacity(2);
            for (half, t_idx) in [("low", (0..zt).collect::<Vec<_>>()), ("high", (dt - zt..dt).collect())] {
                let blk = b.tape.gather(f, &[range(w), range(e), t_idx, range(zx)])?;
                let k1 = b.p(&format!("layer{l}.k1.{half}"))?;
                let k2 = b.p(&format!("layer{l}.k2.{half}"))?;
                let mixed = b.tape.region_mix(k1, blk)?;
                blocks.push(b.tape.channel_mix(k2, mixed)?);
            }
            let cat = b.tape.concat(&blocks, 2)?;
            let full = b.tape.scatter(cat, &[w, e, dt, zx], &[range(w), range(e), tt, range(zx)])?;
            Ok(b.tape.irfft_tx(full, dx)?)
        }
        Variant::Pcno3d => {
            let ze = cfg.z_e_eff();
            let f = b.tape.rfft_tx_keep(v, zx)?;
            let f = b.tape.fft_axis(f, 1, false)?;
            let blk = b.tape.gather(f, &[range(w), range(ze), tt.clone(), range(zx)])?;
            let k = b.p(&format!("layer{l}.k"))?;
            let mixed = b.tape.mode_mix(k, blk)?;
            let full = b.tape.scatter(mixed, &[w, e, dt, zx], &[range(w), range(ze), tt, range(zx)])?;
            let full = b.tape.fft_axis(full, 1, true)?;
            Ok(b.tape.irfft_tx(full, dx)?)
        }
        Variant::Fno3d => {
            let ze = cfg.z_e_eff();
            let xx = two_sided(dx, zx);
            let c = b.tape.to_complex(v)?;
            let nx = xx.len();
            let c = b.tape.fft_axis(c, 3, false)?;
            let c = b.tape.gather(c, &[range(w), range(e), range(dt), xx.clone()])?;
            let c = b.tape.fft_axis(c, 2, false)?;
            let c = b.tape.fft_axis(c, 1, false)?;
            let blk = b.tape.gather(c, &[range(w), range(ze), tt.clone(), range(nx)])?;
            let k = b.p(&format!("layer{l}.k"))?;
            let mixed = b.tape.mode_mix(k, blk)?;
            let full = b.tape.scatter(mixed, &[w, e, dt, nx], &[range(w), range(ze), tt, range(nx)])?;
            let full = b.tape.fft_axis(full, 1, true)?;
            let full = b.tape.fft_axis(full, 2, true)?;
            let full = b.tape.scatter(full, &[w, e, dt, dx], &[range(w), range(e), range(dt), xx])?;
            let full = b.tape.fft_axis(full, 3, true)?;
            Ok(b.tape.real_part(full)?)
        }
        Variant::Fno2d => Err(CoreError::Contract("FNO-2D has no joint spectral layer".into())),
    }
}

/// Independent spectral convolution of region `r` on `(w, 1, d_t, d_x,r)`.
fn spectral_region(b: &mut Bound, cfg: &PcnoConfig, l: usize, r: usize, v: Var) -> Result<Var> {
    let shape = b.tape.value(v).shape().to_vec();
    let (w, dt, dx) = (shape[0], shape[2], shape[3]);
    check_cutoffs(cfg, dt, dx)?;
    let tt = two_sided(dt, cfg.z_t);
    let f = b.tape.rfft_tx_keep(v, cfg.z_x)?;
    let blk = b.tape.gather(f, &[range(w), vec![0], tt.clone(), range(cfg.z_x)])?;
    let k = b.p(&format!("layer{l}.k.e{r}"))?;
    let mixed = b.tape.mode_mix(k, blk)?;
    let full = b.tape.scatter(mixed, &[w, 1, dt, cfg.z_x], &[range(w), vec![0], tt, range(cfg.z_x)])?;
    Ok(b.tape.irfft_tx(full, dx)?)
}

/// Per-region model outputs.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Normalized `(d_u, d_t, d_x,e)` outputs.
    pub normalized: Vec<Var>,
    /// `(M, P)` in kg/s and Pa, same shapes.
    pub physical: Vec<Var>,
}

/// Output denormalization `y = scale * u + shift` per output channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputAffine {
    pub scale: [f64; 2],
    pub shift: [f64; 2],
}

impl OutputAffine {
    pub const IDENTITY: OutputAffine = OutputAffine { scale: [1.0, 1.0], shift: [0.0, 0.0] };
}

/// Forward pass on normalized encodings `(d_a, d_t, d_x,e)`, one per region.
pub fn forward(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &PcnoConfig,
    inputs: &[Tensor],
    affine: &OutputAffine,
) -> Result<Prediction> {
    cfg.validate()?;
    if inputs.len() != cfg.regions {
        return Err(CoreError::Contract(format!("{} regions, model expects {}", inputs.len(), cfg.regions)));
    }
    if cfg.out_channels != 2 {
        return Err(CoreError::Contract("forward produces (M, P); out_channels must be 2".into()));
    }
    let mut b = Bound { tape, set: params };
    let lw = b.p("lift.w")?;
    let lb = b.p("lift.b")?;
    let mut lifted = Vec::with_capacity(inputs.len());
    for x in inputs {
        let s = x.shape();
        if s.len() != 3 || s[0] != cfg.in_channels {
            return Err(CoreError::Contract(format!("encoding shape {s:?}, expected ({}, t, x)", cfg.in_channels)));
        }
        let c = b.tape.constant(x.clone().reshaped(&[s[0], 1, s[1], s[2]])?);
        lifted.push(b.tape.linear(lw, Some(lb), c)?);
    }
    let hidden: Vec<Var> = if cfg.variant.aligned() {
        let plan = plan_alignment(&extents(inputs), cfg.r_t, cfg.r_x)?;
        let mut v = align_a1(b.tape, &lifted, &plan)?;
        for l in 0..cfg.layers {
            let s = spectral_joint(&mut b, cfg, l, v)?;
            let (w, bias) = (b.p(&format!("layer{l}.w"))?, b.p(&format!("layer{l}.b"))?);
            let lin = b.tape.linear(w, Some(bias), v)?;
            let sum = b.tape.add(s, lin)?;
            v = if l + 1 < cfg.layers { b.tape.gelu(sum)? } else { sum };
            b.tape.release_since(0, &[v]);
        }
        let parts = unalign_a2(b.tape, v, &plan)?;
        b.tape.release_since(0, &parts);
        parts
    } else {
        let mut out: Vec<Var> = Vec::with_capacity(lifted.len());
        for r in 0..lifted.len() {
            let mut v = lifted[r];
            for l in 0..cfg.layers {
                let s = spectral_region(&mut b, cfg, l, r, v)?;
                let (w, bias) = (b.p(&format!("layer{l}.w.e{r}"))?, b.p(&format!("layer{l}.b.e{r}"))?);
                let lin = b.tape.linear(w, Some(bias), v)?;
                let sum = b.tape.add(s, lin)?;
                v = if l + 1 < cfg.layers { b.tape.gelu(sum)? } else { sum };
                let live: Vec<Var> = out.iter().copied().chain([v]).chain(lifted[r + 1..].iter().copied()).collect();
                b.tape.release_since(0, &live);
            }
            out.push(v);
        }
        out
    };
    let (w1, b1, w2, b2) = (b.p("proj.w1")?, b.p("proj.b1")?, b.p("proj.w2")?, b.p("proj.b2")?);
    let mut normalized = Vec::with_capacity(hidden.len());
    let mut physical = Vec::with_capacity(hidden.len());
    for (i, &h) in hidden.iter().enumerate() {
        let hidden_live = &hidden[i + 1..];
        let z = b.tape.linear(w1, Some(b1), h)?;
        let z = b.tape.gelu(z)?;
        let u = b.tape.linear(w2, Some(b2), z)?;
        let s = b.tape.value(u).shape().to_vec();
        let u = b.tape.reshape(u, &[s[0], s[2], s[3]])?;
        let y = b.tape.channel_affine(u, &affine.scale, &affine.shift)?;
        normalized.push(u);
        physical.push(y);
        let live: Vec<Var> = normalized.iter().chain(&physical).chain(hidden_live).copied().collect();
        b.tape.release_since(0, &live);
    }
    Ok(Prediction { normalized, physical })
}
