//! 2-d convolution on channels-last `[H, W, C]` images.

use rayon::prelude::*;

use crate::error::shape_err;
use crate::gemm::{gemm, gemm_tn, Layout};
use crate::{Real, Result, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Geom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

impl Geom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.cin
    }
}

fn im2col(x: &[Real], g: Geom) -> Vec<Real> {
    let taps = g.taps();
    let mut cols = vec![0.0; g.h * g.w * taps];
    let pad = g.pad();
    cols.par_chunks_mut(g.w * taps).enumerate().for_each(|(y, row)| {
        for xx in 0..g.w {
            let dst = &mut row[xx * taps..(xx + 1) * taps];
            for ky in 0..g.k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= g.w as isize {
                        continue;
                    }
                    let src = (sy as usize * g.w + sx as usize) * g.cin;
                    let off = (ky * g.k + kx) * g.cin;
                    dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    });
    cols
}

fn col2im(cols: &[Real], g: Geom) -> Vec<Real> {
    let taps = g.taps();
    let pad = g.pad();
    let mut x = vec![0.0; g.h * g.w * g.cin];
    x.par_chunks_mut(g.w * g.cin).enumerate().for_each(|(y, row)| {
        for xx in 0..g.w {
            let dst = &mut row[xx * g.cin..(xx + 1) * g.cin];
            for ky in 0..g.k {
                // output pixel whose tap (ky, kx) reads input (y, xx)
                let oy = y as isize - ky as isize + pad;
                if oy < 0 || oy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ox = xx as isize - kx as isize + pad;
                    if ox < 0 || ox >= g.w as isize {
                        continue;
                    }
                    let src = (oy as usize * g.w + ox as usize) * taps + (ky * g.k + kx) * g.cin;
                    for (d, s) in dst.iter_mut().zip(&cols[src..src + g.cin]) {
                        *d += *s;
                    }
                }
            }
        }
    });
    x
}

impl<'t> Var<'t> {
    /// Stride-1, zero-padded convolution of `[H, W, Cin]` with weights
    /// `[k·k·Cin, Cout]` (tap-major, then input channel) and bias `[Cout]`.
    /// `k` must be odd; output is `[H, W, Cout]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, k: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let &[h, wd, cin] = x.shape() else {
            return shape_err(format!("conv2d input must be [H, W, C], got {:?}", x.shape()));
        };
        if k.is_multiple_of(2) {
            return shape_err(format!("conv2d kernel size {k} must be odd"));
        }
        let &[taps, cout] = w.shape() else {
            return shape_err(format!("conv2d weight must be 2-d, got {:?}", w.shape()));
        };
        if taps != k * k * cin {
            return shape_err(format!(
                "conv2d weight {:?} does not match k={k}, cin={cin}",
                w.shape()
            ));
        }
        let g = Geom { h, w: wd, cin, cout, k };
        let px = h * wd;
        let mut out = vec![0.0; px * cout];
        if k == 1 {
            gemm(px, taps, cout, x.data(), Layout::row_major(taps), w.data(), Layout::row_major(cout), &mut out, false);
        } else {
            let cols = im2col(x.data(), g);
            gemm(px, taps, cout, &cols, Layout::row_major(taps), w.data(), Layout::row_major(cout), &mut out, false);
        }
        let value = Tensor::new([h, wd, cout], out)?;
        let y = self.tape.op(&[self, weight], value, move |args| {
            let (x, w, gy) = (&args.inputs[0], &args.inputs[1], args.grad.data());
            let taps = g.taps();
            let px = g.h * g.w;
            let gw = args.needs[1].then(|| {
                let mut gw = vec![0.0; taps * g.cout];
                if g.k == 1 {
                    gemm_tn(px, taps, g.cout, x.data(), gy, &mut gw, false);
                } else {
                    let cols = im2col(x.data(), g);
                    gemm_tn(px, taps, g.cout, &cols, gy, &mut gw, false);
                }
                Tensor::new([taps, g.cout], gw).expect("shape")
            });
            let gx = args.needs[0].then(|| {
                let mut dcols = vec![0.0; px * taps];
                gemm(px, g.cout, taps, gy, Layout::row_major(g.cout), w.data(), Layout::transposed(g.cout), &mut dcols, false);
                let dx = if g.k == 1 { dcols } else { col2im(&dcols, g) };
                Tensor::new([g.h, g.w, g.cin], dx).expect("shape")
            });
            vec![gx, gw]
        });
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    /// 2×2 average pooling with stride 2 on `[H, W, C]`; H and W must be even.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[h, w, c] = x.shape() else {
            return shape_err(format!("avg_pool2 input must be [H, W, C], got {:?}", x.shape()));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2 needs even spatial dims, got {h}×{w}"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    let at = |dy: usize, dx: usize| xd[((2 * y + dy) * w + 2 * xx + dx) * c + ch];
                    out[(y * wo + xx) * c + ch] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        let value = Tensor::new([ho, wo, c], out)?;
        Ok(self.tape.op(&[self], value, move |args| {
            let g = args.grad.data();
            let mut gx = vec![0.0; h * w * c];
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        gx[(y * w + xx) * c + ch] = 0.25 * g[((y / 2) * wo + xx / 2) * c + ch];
                    }
                }
            }
            vec![Some(Tensor::new([h, w, c], gx).expect("shape"))]
        }))
    }

    /// Nearest-neighbour 2× upsampling of `[H, W, C]`.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let &[h, w, c] = x.shape() else {
            return shape_err(format!("upsample2 input must be [H, W, C], got {:?}", x.shape()));
        };
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                let src = ((y / 2) * w + xx / 2) * c;
                out[(y * wo + xx) * c..(y * wo + xx + 1) * c].copy_from_slice(&xd[src..src + c]);
            }
        }
        let value = Tensor::new([ho, wo, c], out)?;
        Ok(self.tape.op(&[self], value, move |args| {
            let g = args.grad.data();
            let mut gx = vec![0.0; h * w * c];
            for y in 0..ho {
                for xx in 0..wo {
                    let dst = ((y / 2) * w + xx / 2) * c;
                    for ch in 0..c {
                        gx[dst + ch] += g[(y * wo + xx) * c + ch];
                    }
                }
            }
            vec![Some(Tensor::new([h, w, c], gx).expect("shape"))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    /// Direct nested-loop convolution.
    fn naive(x: &Tensor, w: &Tensor, k: usize, cout: usize) -> Vec<crate::Real> {
        let &[h, wd, cin] = x.shape() else { unreachable!() };
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; h * wd * cout];
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            for c in 0..cin {
                                acc += x.data()[(sy as usize * wd + sx as usize) * cin + c]
                                    * w.data()[((ky * k + kx) * cin + c) * cout + o];
                            }
                        }
                    }
                    out[(y * wd + xx) * cout + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let x = Tensor::from_fn([5, 6, 3], |i| ((i * 37) % 11) as crate::Real / 11.0 - 0.4);
        let w = Tensor::from_fn([27, 4], |i| ((i * 13) % 7) as crate::Real / 7.0 - 0.5);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, 3).unwrap();
        let expect = naive(&x, &w, 3, 4);
        for (a, b) in y.value().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([4, 6, 2], |i| i as crate::Real), true);
        let p = x.avg_pool2().unwrap();
        assert_eq!(p.shape(), vec![2, 3, 2]);
        let u = p.upsample2().unwrap();
        assert_eq!(u.shape(), vec![4, 6, 2]);
        let g = tape.backward(u.sum()).unwrap();
        // each input feeds one pooled cell (weight 1/4) which feeds 4 outputs
        assert!(g.get(x).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(tape.constant(Tensor::zeros([3, 4, 1])).avg_pool2().is_err());
    }
}
