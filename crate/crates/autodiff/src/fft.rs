//! FFT kernels over one axis of a row-major tensor.
//!
//! Forward transforms are unnormalized; inverse transforms carry `1/n`.

use std::cell::RefCell;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

use crate::error::{AdError, Result};
use crate::tensor::{numel, Tensor, C64};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static REAL_PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

type RealPlans = (Arc<dyn RealToComplex<f64>>, Arc<dyn ComplexToReal<f64>>);

fn real_plan(n: usize) -> RealPlans {
    REAL_PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Complex FFT along `axis`.
pub fn fft_axis_raw(x: &[C64], shape: &[usize], axis: usize, inverse: bool) -> Vec<C64> {
    let (outer, n, inner) = split(shape, axis);
    if n == 0 || x.is_empty() {
        return x.to_vec();
    }
    let fft = plan(n, inverse);
    let mut buf = if inner == 1 {
        x.to_vec()
    } else {
        let mut b = Vec::with_capacity(x.len());
        for o in 0..outer {
            for i in 0..inner {
                b.extend((0..n).map(|k| x[(o * n + k) * inner + i]));
            }
        }
        b
    };
    fft.process(&mut buf);
    if inverse {
        let s = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
    if inner == 1 {
        return buf;
    }
    let mut out = vec![C64::new(0.0, 0.0); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let line = &buf[(o * inner + i) * n..(o * inner + i + 1) * n];
            for (k, v) in line.iter().enumerate() {
                out[(o * n + k) * inner + i] = *v;
            }
        }
    }
    out
}

/// Real FFT along the last axis keeping the first `keep <= n/2 + 1` bins.
pub fn rfft_last_raw(x: &[f64], shape: &[usize], keep: usize) -> (Vec<usize>, Vec<C64>) {
    let n = *shape.last().expect("rank >= 1");
    let lines = x.len() / n.max(1);
    let r2c = real_plan(n).0;
    let mut input = r2c.make_input_vec();
    let mut spec = r2c.make_output_vec();
    let mut scratch = r2c.make_scratch_vec();
    let mut out = Vec::with_capacity(lines * keep);
    for line in x.chunks_exact(n) {
        input.copy_from_slice(line);
        r2c.process_with_scratch(&mut input, &mut spec, &mut scratch).expect("r2c buffer sizes");
        out.extend_from_slice(&spec[..keep]);
    }
    let mut s = shape.to_vec();
    *s.last_mut().unwrap() = keep;
    (s, out)
}

/// Inverse of [`rfft_last_raw`] onto `n` real points; missing high bins are
/// zero. Imaginary parts of the DC and (even `n`) Nyquist bins are ignored.
pub fn irfft_last_raw(y: &[C64], shape: &[usize], n: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let h = *shape.last().expect("rank >= 1");
    if h == 0 || h > n / 2 + 1 {
        return Err(AdError::Shape(format!("half spectrum of {h} bins cannot give {n} points")));
    }
    let c2r = real_plan(n).1;
    let mut spec = c2r.make_input_vec();
    let mut line = c2r.make_output_vec();
    let mut scratch = c2r.make_scratch_vec();
    let s = 1.0 / n as f64;
    let mut out = Vec::with_capacity(y.len() / h * n);
    for src in y.chunks_exact(h) {
        spec[..h].copy_from_slice(src);
        spec[h..].iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        spec[0].im = 0.0;
        if n % 2 == 0 {
            spec[n / 2].im = 0.0;
        }
        c2r.process_with_scratch(&mut spec, &mut line, &mut scratch).expect("c2r buffer sizes");
        out.extend(line.iter().map(|v| v * s));
    }
    let mut sh = shape.to_vec();
    *sh.last_mut().unwrap() = n;
    Ok((sh, out))
}

/// Hermitian weight of half-spectrum bin `k` for a length-`n` signal.
pub fn half_weight(k: usize, n: usize) -> f64 {
    if k == 0 || 2 * k == n {
        1.0
    } else {
        2.0
    }
}

/// Full complex FFT along the second-to-last axis (time) and real FFT along
/// the last axis (space) of a real tensor.
pub fn rfft_tx(v: &Tensor) -> Result<Tensor> {
    let r = v.shape().len();
    if r < 2 || v.shape()[r - 1] < 2 {
        return Err(AdError::Shape(format!("rfft_tx needs (..., t, x>=2), got {:?}", v.shape())));
    }
    let n = v.shape()[r - 1];
    let (s, half) = rfft_last_raw(v.re(), v.shape(), n / 2 + 1);
    let full = fft_axis_raw(&half, &s, r - 2, false);
    Tensor::complex(&s, full)
}

/// Inverse of [`rfft_tx`] onto `n_x` spatial points.
pub fn irfft_tx(f: &Tensor, n_x: usize) -> Result<Tensor> {
    let r = f.shape().len();
    if r < 2 {
        return Err(AdError::Shape("irfft_tx needs rank >= 2".into()));
    }
    let t = fft_axis_raw(f.cx(), f.shape(), r - 2, true);
    let (s, out) = irfft_last_raw(&t, f.shape(), n_x)?;
    Tensor::real(&s, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_maps_to_dc() {
        let v = Tensor::real(&[4, 6], vec![2.5; 24]).unwrap();
        let f = rfft_tx(&v).unwrap();
        assert_eq!(f.shape(), &[4, 4]);
        for (i, z) in f.cx().iter().enumerate() {
            if i == 0 {
                assert!((z.re - 2.5 * 24.0).abs() < 1e-12 && z.im.abs() < 1e-12);
            } else {
                assert!(z.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn odd_length_round_trip() {
        let data: Vec<f64> = (0..35).map(|i| ((i * 7 % 11) as f64).sin()).collect();
        let v = Tensor::real(&[5, 7], data).unwrap();
        let back = irfft_tx(&rfft_tx(&v).unwrap(), 7).unwrap();
        assert!(back.max_abs_diff(&v) < 1e-13);
    }

    #[test]
    fn middle_axis_matches_naive_dft() {
        let shape = [2, 5, 3];
        let x: Vec<C64> = (0..30).map(|i| C64::new((i as f64).cos(), (i as f64 * 0.3).sin())).collect();
        let y = fft_axis_raw(&x, &shape, 1, false);
        for o in 0..2 {
            for i in 0..3 {
                for k in 0..5 {
                    let mut s = C64::new(0.0, 0.0);
                    for n in 0..5 {
                        let w = C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * n) as f64 / 5.0);
                        s += x[(o * 5 + n) * 3 + i] * w;
                    }
                    assert!((s - y[(o * 5 + k) * 3 + i]).norm() < 1e-12);
                }
            }
        }
    }
}
