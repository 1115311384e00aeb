//! Frequency truncation and the complex mixing maps of the spectral layers.
//!
//! Activations are laid out `(channels, regions, t, x)`, so a truncated
//! spectral block is `(C, E, Z_t, Z_x)` and the mixing weights index modes
//! after the channel axes.

use crate::error::{AdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, DType, Tensor, C64};

/// Retained temporal indices `[0, z) ++ [n - z, n)`.
pub fn two_sided(n: usize, z: usize) -> Vec<usize> {
    (0..z).chain(n - z..n).collect()
}

/// Low- and high-frequency temporal blocks of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBlocks {
    pub low: Tensor,
    pub high: Tensor,
}

fn check_cutoffs(shape: &[usize], z_t: usize, z_x: usize) -> Result<(usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(AdError::Shape(format!("spectrum of shape {shape:?}")));
    }
    let (dt, dx) = (shape[r - 2], shape[r - 1]);
    if z_t == 0 || z_x == 0 || 2 * z_t > dt || z_x > dx {
        return Err(AdError::Contract(format!("cutoffs ({z_t}, {z_x}) exceed a {dt}x{dx} spectrum")));
    }
    Ok((dt, dx))
}

fn select_tx(f: &[C64], shape: &[usize], t_idx: &[usize], z_x: usize) -> Vec<C64> {
    let r = shape.len();
    let (dt, dx) = (shape[r - 2], shape[r - 1]);
    let outer = numel(&shape[..r - 2]);
    let mut out = Vec::with_capacity(outer * t_idx.len() * z_x);
    for o in 0..outer {
        for &t in t_idx {
            let base = (o * dt + t) * dx;
            out.extend_from_slice(&f[base..base + z_x]);
        }
    }
    out
}

/// Split a `(..., d_t, d_x/2+1)` spectrum into its retained low/high blocks.
pub fn truncate_modes(f: &Tensor, z_t: usize, z_x: usize) -> Result<ModeBlocks> {
    f.expect_dtype(DType::C128, "truncate_modes")?;
    let (dt, _) = check_cutoffs(f.shape(), z_t, z_x)?;
    let r = f.shape().len();
    let mut bs = f.shape().to_vec();
    bs[r - 2] = z_t;
    bs[r - 1] = z_x;
    let low: Vec<usize> = (0..z_t).collect();
    let high: Vec<usize> = (dt - z_t..dt).collect();
    Ok(ModeBlocks {
        low: Tensor::complex(&bs, select_tx(f.cx(), f.shape(), &low, z_x))?,
        high: Tensor::complex(&bs, select_tx(f.cx(), f.shape(), &high, z_x))?,
    })
}

/// Scatter low/high blocks back into a zero `(..., d_t, d_x)` spectrum.
pub fn untruncate(blocks: &ModeBlocks, d_t: usize, d_x: usize) -> Result<Tensor> {
    let bs = blocks.low.shape();
    if blocks.high.shape() != bs || bs.len() < 2 {
        return Err(AdError::Shape("mode blocks disagree".into()));
    }
    let r = bs.len();
    let (z_t, z_x) = (bs[r - 2], bs[r - 1]);
    let mut shape = bs.to_vec();
    shape[r - 2] = d_t;
    shape[r - 1] = d_x;
    check_cutoffs(&shape, z_t, z_x)?;
    let mut out = Tensor::zeros(&shape, DType::C128);
    let outer = numel(&bs[..r - 2]);
    let o = out.cx_mut();
    for k in 0..outer {
        for t in 0..z_t {
            for x in 0..z_x {
                let src = (k * z_t + t) * z_x + x;
                o[(k * d_t + t) * d_x + x] = blocks.low.cx()[src];
                o[(k * d_t + d_t - z_t + t) * d_x + x] = blocks.high.cx()[src];
            }
        }
    }
    Ok(out)
}

fn need_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    t.expect_dtype(DType::C128, what)?;
    if t.shape().len() != rank {
        return Err(AdError::Shape(format!("{what}: expected rank {rank}, got {:?}", t.shape())));
    }
    Ok(())
}

impl Tape {
    /// Per-mode mixing across regions:
    /// `out[c, e', m] = sum_e k1[m, e', e] x[c, e, m]` with `k1: (Z_t, Z_x, E, E)`
    /// and `x: (C, E, Z_t, Z_x)`.
    pub fn region_mix(&mut self, k1: Var, x: Var) -> Result<Var> {
        let (kv, xv) = (self.value(k1), self.value(x));
        need_rank(kv, 4, "region_mix weight")?;
        need_rank(xv, 4, "region_mix input")?;
        let (c, e, zt, zx) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if kv.shape() != [zt, zx, e, e] {
            return Err(AdError::Shape(format!("region_mix: weight {:?} for input {:?}", kv.shape(), xv.shape())));
        }
        let m = zt * zx;
        // (e', e, m) copy of the weight for contiguous inner loops.
        let kt: Vec<C64> = (0..e * e * m).map(|i| {
            let (ep, rest) = (i / (e * m), i % (e * m));
            let (ee, mm) = (rest / m, rest % m);
            kv.cx()[(mm * e + ep) * e + ee]
        }).collect();
        let mut out = vec![C64::new(0.0, 0.0); c * e * m];
        let xs = xv.cx();
        for ci in 0..c {
            for ep in 0..e {
                let dst = &mut out[(ci * e + ep) * m..][..m];
                for ee in 0..e {
                    let w = &kt[(ep * e + ee) * m..][..m];
                    let src = &xs[(ci * e + ee) * m..][..m];
                    for j in 0..m {
                        dst[j] += w[j] * src[j];
                    }
                }
            }
        }
        let out = Tensor::complex(xv.shape(), out)?;
        Ok(self.custom(
            &[k1, x],
            out,
            Box::new(move |g, p| {
                let (kv, xv) = (p[0], p[1]);
                let (gs, xs, ks) = (g.cx(), xv.cx(), kv.cx());
                let mut gk = vec![C64::new(0.0, 0.0); m * e * e];
                let mut gx = vec![C64::new(0.0, 0.0); c * e * m];
                for ci in 0..c {
                    for ep in 0..e {
                        let gr = &gs[(ci * e + ep) * m..][..m];
                        for ee in 0..e {
                            let xr = &xs[(ci * e + ee) * m..][..m];
                            for j in 0..m {
                                gk[(j * e + ep) * e + ee] += gr[j] * xr[j].conj();
                                gx[(ci * e + ee) * m + j] += ks[(j * e + ep) * e + ee].conj() * gr[j];
                            }
                        }
                    }
                }
                vec![Tensor::complex(kv.shape(), gk).unwrap(), Tensor::complex(xv.shape(), gx).unwrap()]
            }),
        ))
    }

    /// Per-region channel mixing:
    /// `out[o, e, m] = sum_i k2[o, i, e] x[i, e, m]` with `k2: (O, I, E)`, or
    /// `k2: (O, I)` shared by every region.
    pub fn channel_mix(&mut self, k2: Var, x: Var) -> Result<Var> {
        let (kv, xv) = (self.value(k2), self.value(x));
        xv.expect_dtype(DType::C128, "channel_mix input")?;
        kv.expect_dtype(DType::C128, "channel_mix weight")?;
        if xv.shape().len() < 2 {
            return Err(AdError::Shape(format!("channel_mix input {:?}", xv.shape())));
        }
        let (ci, e) = (xv.shape()[0], xv.shape()[1]);
        let m = numel(&xv.shape()[2..]);
        let shared = kv.shape().len() == 2;
        let ok = match kv.shape() {
            [_, i] => *i == ci,
            [_, i, ee] => *i == ci && *ee == e,
            _ => false,
        };
        if !ok {
            return Err(AdError::Shape(format!("channel_mix: weight {:?} for input {:?}", kv.shape(), xv.shape())));
        }
        let co = kv.shape()[0];
        let w = |k: &[C64], o: usize, i: usize, r: usize| if shared { k[o * ci + i] } else { k[(o * ci + i) * e + r] };
        let mut out = vec![C64::new(0.0, 0.0); co * e * m];
        let (ks, xs) = (kv.cx(), xv.cx());
        for o in 0..co {
            for r in 0..e {
                let dst = &mut out[(o * e + r) * m..][..m];
                for i in 0..ci {
                    let k = w(ks, o, i, r);
                    let src = &xs[(i * e + r) * m..][..m];
                    for j in 0..m {
                        dst[j] += k * src[j];
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = co;
        let out = Tensor::complex(&shape, out)?;
        Ok(self.custom(
            &[k2, x],
            out,
            Box::new(move |g, p| {
                let (kv, xv) = (p[0], p[1]);
                let (gs, xs, ks) = (g.cx(), xv.cx(), kv.cx());
                let mut gk = vec![C64::new(0.0, 0.0); kv.len()];
                let mut gx = vec![C64::new(0.0, 0.0); xv.len()];
                for o in 0..co {
                    for r in 0..e {
                        let gr = &gs[(o * e + r) * m..][..m];
                        for i in 0..ci {
                            let xr = &xs[(i * e + r) * m..][..m];
                            let mut acc = C64::new(0.0, 0.0);
                            for j in 0..m {
                                acc += gr[j] * xr[j].conj();
                            }
                            let kidx = if shared { o * ci + i } else { (o * ci + i) * e + r };
                            gk[kidx] += acc;
                            let kc = ks[kidx].conj();
                            let gxr = &mut gx[(i * e + r) * m..][..m];
                            for j in 0..m {
                                gxr[j] += kc * gr[j];
                            }
                        }
                    }
                }
                vec![Tensor::complex(kv.shape(), gk).unwrap(), Tensor::complex(xv.shape(), gx).unwrap()]
            }),
        ))
    }

    /// Mode-wise channel mixing with a separate matrix per retained mode:
    /// `out[o, m] = sum_i k[o, i, m] x[i, m]` with `k: (O, I, modes...)` and
    /// `x: (I, modes...)`.
    pub fn mode_mix(&mut self, k: Var, x: Var) -> Result<Var> {
        let (kv, xv) = (self.value(k), self.value(x));
        xv.expect_dtype(DType::C128, "mode_mix input")?;
        kv.expect_dtype(DType::C128, "mode_mix weight")?;
        if kv.shape().len() != xv.shape().len() + 1 || kv.shape()[1] != xv.shape()[0] || kv.shape()[2..] != xv.shape()[1..] {
            return Err(AdError::Shape(format!("mode_mix: weight {:?} for input {:?}", kv.shape(), xv.shape())));
        }
        let (co, ci) = (kv.shape()[0], kv.shape()[1]);
        let m = numel(&xv.shape()[1..]);
        let (ks, xs) = (kv.cx(), xv.cx());
        let mut out = vec![C64::new(0.0, 0.0); co * m];
        for o in 0..co {
            let dst = &mut out[o * m..][..m];
            for i in 0..ci {
                let w = &ks[(o * ci + i) * m..][..m];
                let src = &xs[i * m..][..m];
                for j in 0..m {
                    dst[j] += w[j] * src[j];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = co;
        let out = Tensor::complex(&shape, out)?;
        Ok(self.custom(
            &[k, x],
            out,
            Box::new(move |g, p| {
                let (kv, xv) = (p[0], p[1]);
                let (gs, xs, ks) = (g.cx(), xv.cx(), kv.cx());
                let mut gk = vec![C64::new(0.0, 0.0); kv.len()];
                let mut gx = vec![C64::new(0.0, 0.0); xv.len()];
                for o in 0..co {
                    let gr = &gs[o * m..][..m];
                    for i in 0..ci {
                        let xr = &xs[i * m..][..m];
                        let kr = &ks[(o * ci + i) * m..][..m];
                        let gkr = &mut gk[(o * ci + i) * m..][..m];
                        for j in 0..m {
                            gkr[j] += gr[j] * xr[j].conj();
                        }
                        let gxr = &mut gx[i * m..][..m];
                        for j in 0..m {
                            gxr[j] += kr[j].conj() * gr[j];
                        }
                    }
                }
                vec![Tensor::complex(kv.shape(), gk).unwrap(), Tensor::complex(xv.shape(), gx).unwrap()]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectrum(t: usize, x: usize) -> Tensor {
        let data = (0..2 * t * x).map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
        Tensor::complex(&[2, t, x], data).unwrap()
    }

    #[test]
    fn full_cutoffs_round_trip() {
        let f = spectrum(8, 5);
        let b = truncate_modes(&f, 4, 5).unwrap();
        assert_eq!(untruncate(&b, 8, 5).unwrap(), f);
    }

    #[test]
    fn last_temporal_mode_is_high() {
        let mut f = Tensor::zeros(&[1, 10, 4], DType::C128);
        f.cx_mut()[9 * 4] = C64::new(1.0, 0.0);
        let b = truncate_modes(&f, 3, 2).unwrap();
        assert_eq!(b.low.max_abs(), 0.0);
        assert_eq!(b.high.cx()[2 * 2], C64::new(1.0, 0.0));
    }

    #[test]
    fn paper_cutoffs_keep_expected_count() {
        let f = spectrum(136, 76);
        let b = truncate_modes(&f, 25, 25).unwrap();
        assert_eq!(b.low.len() + b.high.len(), 2 * (2 * 25 * 25));
        assert!(truncate_modes(&f, 69, 25).is_err());
        assert!(truncate_modes(&f, 25, 77).is_err());
    }
}
