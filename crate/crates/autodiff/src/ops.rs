//! Differentiable ops on the [`Tape`]: arithmetic, pointwise maps, channel
//! linear maps, indexing and FFTs.

use std::ops::Range;
use std::rc::Rc;

use crate::error::{AdError, Result};
use crate::fft::{fft_axis_raw, half_weight, irfft_last_raw, rfft_last_raw};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, strides, DType, Storage, Tensor, C64};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact-erf GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `c[m x n] = a[m x k] b[k x n]` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: extents and strides describe in-bounds views of `a`, `b`, `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() || a.dtype() != b.dtype() {
        return Err(AdError::Shape(format!(
            "{what}: {:?}/{:?} vs {:?}/{:?}",
            a.shape(),
            a.dtype(),
            b.shape(),
            b.dtype()
        )));
    }
    Ok(())
}

fn map_storage(t: &Tensor, fr: impl Fn(f64) -> f64, fc: impl Fn(C64) -> C64) -> Tensor {
    match t.storage() {
        Storage::Real(v) => Tensor::real(t.shape(), v.iter().map(|&x| fr(x)).collect()).unwrap(),
        Storage::Complex(v) => Tensor::complex(t.shape(), v.iter().map(|&x| fc(x)).collect()).unwrap(),
    }
}

/// Source offsets of a per-axis index selection, in row-major output order.
fn selection_offsets(shape: &[usize], idx: &[Vec<usize>]) -> Result<Vec<usize>> {
    if idx.len() != shape.len() {
        return Err(AdError::Shape(format!("{} index lists for rank {}", idx.len(), shape.len())));
    }
    for (a, list) in idx.iter().enumerate() {
        if let Some(&bad) = list.iter().find(|&&i| i >= shape[a]) {
            return Err(AdError::Contract(format!("index {bad} out of range on axis {a} (extent {})", shape[a])));
        }
    }
    let st = strides(shape);
    let mut offs = vec![0usize];
    for (a, list) in idx.iter().enumerate() {
        let mut next = Vec::with_capacity(offs.len() * list.len());
        for &o in &offs {
            next.extend(list.iter().map(|&i| o + i * st[a]));
        }
        offs = next;
    }
    Ok(offs)
}

fn gather_with(t: &Tensor, shape: &[usize], offs: &[usize]) -> Tensor {
    match t.storage() {
        Storage::Real(v) => Tensor::real(shape, offs.iter().map(|&o| v[o]).collect()).unwrap(),
        Storage::Complex(v) => Tensor::complex(shape, offs.iter().map(|&o| v[o]).collect()).unwrap(),
    }
}

fn scatter_with(t: &Tensor, shape: &[usize], offs: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape, t.dtype());
    match (t.storage(), &mut out) {
        (Storage::Real(v), o) => {
            let o = o.re_mut();
            for (k, &off) in offs.iter().enumerate() {
                o[off] += v[k];
            }
        }
        (Storage::Complex(v), o) => {
            let o = o.cx_mut();
            for (k, &off) in offs.iter().enumerate() {
                o[off] += v[k];
            }
        }
    }
    out
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.custom(&[a, b], out, Box::new(|g, _| vec![g.clone(), g.clone()])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub")?;
        let mut neg = y.clone();
        neg.scale(-1.0);
        let mut out = x.clone();
        out.add_assign(&neg);
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, _| {
                let mut n = g.clone();
                n.scale(-1.0);
                vec![g.clone(), n]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.custom(
            &[a],
            out,
            Box::new(move |g, _| {
                let mut r = g.clone();
                r.scale(s);
                vec![r]
            }),
        )
    }

    /// Elementwise product of two real tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        x.expect_dtype(DType::F64, "mul")?;
        let out: Vec<f64> = x.re().iter().zip(y.re()).map(|(p, q)| p * q).collect();
        let out = Tensor::real(x.shape(), out)?;
        Ok(self.custom(
            &[a, b],
            out,
            Box::new(|g, p| {
                let ga = g.re().iter().zip(p[1].re()).map(|(g, y)| g * y).collect();
                let gb = g.re().iter().zip(p[0].re()).map(|(g, x)| g * x).collect();
                vec![Tensor::real(g.shape(), ga).unwrap(), Tensor::real(g.shape(), gb).unwrap()]
            }),
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.expect_dtype(DType::F64, "gelu")?;
        let out = map_storage(x, gelu, |z| z);
        Ok(self.custom(
            &[a],
            out,
            Box::new(|g, p| {
                let d = g.re().iter().zip(p[0].re()).map(|(g, &x)| g * gelu_grad(x)).collect();
                vec![Tensor::real(g.shape(), d).unwrap()]
            }),
        ))
    }

    /// Sum of all entries of a real tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.expect_dtype(DType::F64, "sum")?;
        let s: f64 = x.re().iter().sum();
        Ok(self.custom(
            &[a],
            Tensor::scalar(s),
            Box::new(|g, p| vec![Tensor::real(p[0].shape(), vec![g.re()[0]; p[0].len()]).unwrap()]),
        ))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Sum of squared magnitudes (real for both dtypes).
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).norm_sq();
        self.custom(
            &[a],
            Tensor::scalar(s),
            Box::new(|g, p| {
                let k = 2.0 * g.re()[0];
                vec![map_storage(p[0], |x| k * x, |z| z * k)]
            }),
        )
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.expect_dtype(DType::C128, "real_part")?;
        let out = Tensor::real(x.shape(), x.cx().iter().map(|z| z.re).collect())?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(|g, _| vec![Tensor::complex(g.shape(), g.re().iter().map(|&v| C64::new(v, 0.0)).collect()).unwrap()]),
        ))
    }

    pub fn to_complex(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        x.expect_dtype(DType::F64, "to_complex")?;
        let out = Tensor::complex(x.shape(), x.re().iter().map(|&v| C64::new(v, 0.0)).collect())?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(|g, _| vec![Tensor::real(g.shape(), g.cx().iter().map(|z| z.re).collect()).unwrap()]),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.custom(
            &[a],
            out,
            Box::new(|g, p| vec![g.clone().reshaped(p[0].shape()).unwrap()]),
        ))
    }

    /// Channel map `y[o, ...] = sum_i w[o, i] x[i, ...] + b[o]` on the leading axis.
    pub fn linear(&mut self, w: Var, b: Option<Var>, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        wv.expect_dtype(DType::F64, "linear weight")?;
        xv.expect_dtype(DType::F64, "linear input")?;
        if wv.shape().len() != 2 || xv.shape().is_empty() || wv.shape()[1] != xv.shape()[0] {
            return Err(AdError::Shape(format!("linear: weight {:?}, input {:?}", wv.shape(), xv.shape())));
        }
        let (co, ci) = (wv.shape()[0], wv.shape()[1]);
        let p = xv.len() / ci.max(1);
        let mut shape = xv.shape().to_vec();
        shape[0] = co;
        let mut y = vec![0.0; co * p];
        gemm(co, ci, p, wv.re(), (ci, 1), xv.re(), (p, 1), &mut y);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [co] {
                return Err(AdError::Shape(format!("linear bias {:?} for {co} outputs", bv.shape())));
            }
            for (o, &bo) in bv.re().iter().enumerate() {
                y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bo);
            }
        }
        let out = Tensor::real(&shape, y)?;
        let mut parents = vec![w, x];
        parents.extend(b);
        Ok(self.custom(
            &parents,
            out,
            Box::new(move |g, pv| {
                let (wv, xv) = (pv[0], pv[1]);
                let mut gw = vec![0.0; co * ci];
                gemm(co, p, ci, g.re(), (p, 1), xv.re(), (1, p), &mut gw);
                let mut gx = vec![0.0; ci * p];
                gemm(ci, co, p, wv.re(), (1, ci), g.re(), (p, 1), &mut gx);
                let mut out = vec![Tensor::real(wv.shape(), gw).unwrap(), Tensor::real(xv.shape(), gx).unwrap()];
                if pv.len() == 3 {
                    let gb = (0..co).map(|o| g.re()[o * p..(o + 1) * p].iter().sum()).collect();
                    out.push(Tensor::real(&[co], gb).unwrap());
                }
                out
            }),
        ))
    }

    /// `y[c, ...] = scale[c] x[c, ...] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_dtype(DType::F64, "channel_affine")?;
        let c = xv.shape().first().copied().unwrap_or(0);
        if scale.len() != c || shift.len() != c {
            return Err(AdError::Shape(format!("channel_affine: {c} channels, {} coefficients", scale.len())));
        }
        let p = xv.len() / c.max(1);
        let mut y = xv.re().to_vec();
        for ch in 0..c {
            y[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
        }
        let out = Tensor::real(xv.shape(), y)?;
        let scale = scale.to_vec();
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _| {
                let mut d = g.re().to_vec();
                for (ch, &s) in scale.iter().enumerate() {
                    d[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v *= s);
                }
                vec![Tensor::real(g.shape(), d).unwrap()]
            }),
        ))
    }

    /// Select the outer product of per-axis index lists.
    pub fn gather(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let offs = Rc::new(selection_offsets(xv.shape(), idx)?);
        let shape: Vec<usize> = idx.iter().map(|l| l.len()).collect();
        let out = gather_with(xv, &shape, &offs);
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, p| vec![scatter_with(g, p[0].shape(), &offs)]),
        ))
    }

    /// Place `x` into a zero tensor of `shape` at the outer product of `idx`.
    /// Repeated indices accumulate.
    pub fn scatter(&mut self, x: Var, shape: &[usize], idx: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let sel: Vec<usize> = idx.iter().map(|l| l.len()).collect();
        if sel != xv.shape() {
            return Err(AdError::Shape(format!("scatter: selection {sel:?} for input {:?}", xv.shape())));
        }
        let offs = Rc::new(selection_offsets(shape, idx)?);
        let out = scatter_with(xv, shape, &offs);
        let in_shape = xv.shape().to_vec();
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _| vec![gather_with(g, &in_shape, &offs)]),
        ))
    }

    /// Zero padding by `(head, tail)` per axis.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if pads.len() != shape.len() {
            return Err(AdError::Shape(format!("{} pads for rank {}", pads.len(), shape.len())));
        }
        let out: Vec<usize> = shape.iter().zip(pads).map(|(n, (h, t))| n + h + t).collect();
        let idx: Vec<Vec<usize>> = shape.iter().zip(pads).map(|(&n, &(h, _))| (h..h + n).collect()).collect();
        self.scatter(x, &out, &idx)
    }

    /// Contiguous sub-block.
    pub fn crop(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let idx: Vec<Vec<usize>> = ranges.iter().map(|r| r.clone().collect()).collect();
        self.gather(x, &idx)
    }

    /// Concatenate along `axis`; all other extents and dtypes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| AdError::Contract("concat of nothing".into()))?);
        let rank = first.shape().len();
        if axis >= rank {
            return Err(AdError::Shape(format!("concat axis {axis} for rank {rank}")));
        }
        let dtype = first.dtype();
        let mut shape = first.shape().to_vec();
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = self.value(v);
            let ok = t.dtype() == dtype
                && t.shape().len() == rank
                && (0..rank).all(|a| a == axis || t.shape()[a] == shape[a]);
            if !ok {
                return Err(AdError::Shape(format!("concat: {:?} vs {:?}", t.shape(), shape)));
            }
            sizes.push(t.shape()[axis]);
        }
        shape[axis] = sizes.iter().sum();
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let total = shape[axis] * inner;
        let mut idx_of = Vec::with_capacity(xs.len());
        let mut start = 0;
        for &s in &sizes {
            idx_of.push(start);
            start += s;
        }
        let out = match dtype {
            DType::F64 => {
                let mut o = vec![0.0; outer * total];
                for (j, &v) in xs.iter().enumerate() {
                    let src = self.value(v).re();
                    let w = sizes[j] * inner;
                    for r in 0..outer {
                        o[r * total + idx_of[j] * inner..][..w].copy_from_slice(&src[r * w..(r + 1) * w]);
                    }
                }
                Tensor::real(&shape, o)?
            }
            DType::C128 => {
                let mut o = vec![C64::new(0.0, 0.0); outer * total];
                for (j, &v) in xs.iter().enumerate() {
                    let src = self.value(v).cx();
                    let w = sizes[j] * inner;
                    for r in 0..outer {
                        o[r * total + idx_of[j] * inner..][..w].copy_from_slice(&src[r * w..(r + 1) * w]);
                    }
                }
                Tensor::complex(&shape, o)?
            }
        };
        Ok(self.custom(
            xs,
            out,
            Box::new(move |g, pv| {
                pv.iter()
                    .enumerate()
                    .map(|(j, p)| {
                        let w = sizes[j] * inner;
                        let start = idx_of[j] * inner;
                        let offs: Vec<usize> =
                            (0..outer).flat_map(|r| (0..w).map(move |k| r * total + start + k)).collect();
                        gather_with(g, p.shape(), &offs)
                    })
                    .collect()
            }),
        ))
    }

    /// Complex FFT along `axis`; unnormalized forward, `1/n` inverse.
    pub fn fft_axis(&mut self, x: Var, axis: usize, inverse: bool) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_dtype(DType::C128, "fft_axis")?;
        if axis >= xv.shape().len() {
            return Err(AdError::Shape(format!("fft axis {axis} for shape {:?}", xv.shape())));
        }
        let n = xv.shape()[axis] as f64;
        let out = Tensor::complex(xv.shape(), fft_axis_raw(xv.cx(), xv.shape(), axis, inverse))?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, _| {
                // Adjoint of the DFT is n times the normalized inverse.
                let mut d = fft_axis_raw(g.cx(), g.shape(), axis, !inverse);
                let s = if inverse { 1.0 / n } else { n };
                d.iter_mut().for_each(|v| *v *= s);
                vec![Tensor::complex(g.shape(), d).unwrap()]
            }),
        ))
    }

    /// Real FFT along the last axis (`n -> n/2 + 1` bins).
    pub fn rfft_last(&mut self, x: Var) -> Result<Var> {
        let n = *self.value(x).shape().last().ok_or_else(|| AdError::Shape("rfft of a scalar".into()))?;
        self.rfft_last_keep(x, n / 2 + 1)
    }

    /// The first `keep` bins of [`Tape::rfft_last`].
    pub fn rfft_last_keep(&mut self, x: Var, keep: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_dtype(DType::F64, "rfft_last")?;
        let n = *xv.shape().last().ok_or_else(|| AdError::Shape("rfft of a scalar".into()))?;
        if keep == 0 || keep > n / 2 + 1 {
            return Err(AdError::Shape(format!("cannot keep {keep} bins of a length-{n} real FFT")));
        }
        let (shape, data) = rfft_last_raw(xv.re(), xv.shape(), keep);
        let out = Tensor::complex(&shape, data)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, p| {
                let w: Vec<C64> =
                    g.cx().iter().enumerate().map(|(i, z)| z * (n as f64 / half_weight(i % keep, n))).collect();
                let (_, d) = irfft_last_raw(&w, g.shape(), n).unwrap();
                vec![Tensor::real(p[0].shape(), d).unwrap()]
            }),
        ))
    }

    /// Inverse real FFT along the last axis onto `n` points; the input may hold
    /// fewer than `n/2 + 1` bins, the rest being zero.
    pub fn irfft_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_dtype(DType::C128, "irfft_last")?;
        let h = *xv.shape().last().ok_or_else(|| AdError::Shape("irfft of a scalar".into()))?;
        let (shape, data) = irfft_last_raw(xv.cx(), xv.shape(), n)?;
        let out = Tensor::real(&shape, data)?;
        Ok(self.custom(
            &[x],
            out,
            Box::new(move |g, p| {
                let (_, mut d) = rfft_last_raw(g.re(), g.shape(), h);
                for (i, v) in d.iter_mut().enumerate() {
                    *v *= half_weight(i % h, n) / n as f64;
                }
                vec![Tensor::complex(p[0].shape(), d).unwrap()]
            }),
        ))
    }

    /// Complex FFT along time (second-to-last axis), real FFT along space (last axis).
    pub fn rfft_tx(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).shape().len();
        if r < 2 || self.value(x).shape()[r - 1] < 2 {
            return Err(AdError::Shape(format!("rfft_tx needs (..., t, x>=2), got {:?}", self.value(x).shape())));
        }
        let h = self.rfft_last(x)?;
        self.fft_axis(h, r - 2, false)
    }

    /// [`Tape::rfft_tx`] restricted to the first `keep` spatial bins.
    pub fn rfft_tx_keep(&mut self, x: Var, keep: usize) -> Result<Var> {
        let r = self.value(x).shape().len();
        if r < 2 {
            return Err(AdError::Shape(format!("rfft_tx needs (..., t, x), got {:?}", self.value(x).shape())));
        }
        let h = self.rfft_last_keep(x, keep)?;
        self.fft_axis(h, r - 2, false)
    }

    pub fn irfft_tx(&mut self, f: Var, n_x: usize) -> Result<Var> {
        let r = self.value(f).shape().len();
        if r < 2 {
            return Err(AdError::Shape("irfft_tx needs rank >= 2".into()));
        }
        let t = self.fft_axis(f, r - 2, true)?;
        self.irfft_last(t, n_x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn gather_scatter_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::real(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather(x, &[vec![1], vec![2, 0]]).unwrap();
        assert_eq!(tape.value(g).re(), &[6.0, 4.0]);
        let p = tape.pad(x, &[(0, 1), (2, 0)]).unwrap();
        assert_eq!(tape.value(p).shape(), &[3, 5]);
        assert_eq!(tape.value(p).re()[2], 1.0);
        assert_eq!(tape.value(p).re()[14], 0.0);
        let c = tape.concat(&[x, x], 1).unwrap();
        assert_eq!(tape.value(c).re(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
    }
}
