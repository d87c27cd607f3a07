//! Raw array kernels shared by tape ops and by non-differentiable callers
//! (the random-feature extractor, hard rasterization).
//!
//! All reductions run in a fixed sequential order.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for c in 0..g.c {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x` is `[n, c, h, w]`, `weight` is `[o, c, kh, kw]`; returns `[n, o, ho, wo]`.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let ck = g.ck();
    let mut out = vec![T::zero(); g.n * g.o * hw];
    let mut cols = vec![T::zero(); ck * hw];
    for n in 0..g.n {
        im2col(g, &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w], &mut cols);
        let dst = &mut out[n * g.o * hw..(n + 1) * g.o * hw];
        if let Some(b) = bias {
            for o in 0..g.o {
                dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.o, ck, hw, weight, ck as isize, 1, &cols, hw as isize, 1, beta, dst);
    }
    out
}

/// Accumulates gradients of a convolution into `gx`, `gw`, `gb`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let ck = g.ck();
    let mut cols = vec![T::zero(); ck * hw];
    let mut gcols = vec![T::zero(); ck * hw];
    for n in 0..g.n {
        let go = &grad_out[n * g.o * hw..(n + 1) * g.o * hw];
        if let Some(gb) = gb.as_deref_mut() {
            for o in 0..g.o {
                let mut s = T::zero();
                for &v in &go[o * hw..(o + 1) * hw] {
                    s += v;
                }
                gb[o] += s;
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            im2col(g, &x[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w], &mut cols);
            // gw (o x ck) += go (o x hw) * cols^T (hw x ck)
            T::gemm(g.o, hw, ck, go, hw as isize, 1, &cols, 1, hw as isize, T::one(), gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            // gcols (ck x hw) = w^T (ck x o) * go (o x hw)
            T::gemm(ck, g.o, hw, weight, 1, ck as isize, go, hw as isize, 1, T::zero(), &mut gcols);
            col2im_add(g, &gcols, &mut gx[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w]);
        }
    }
}

/// `[m, k] x [k, n]`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, T::zero(), &mut out);
    out
}

/// Pixel-space location of normalized coordinate `t` along an axis of
/// `size` samples, clamped to the border, plus its derivative.
#[inline]
fn unnormalize<T: Real>(t: T, size: usize) -> (T, T) {
    let scale = T::c((size.max(1) - 1) as f64 * 0.5);
    let p = (t + T::one()) * scale;
    let hi = T::c((size.max(1) - 1) as f64);
    if p < T::zero() {
        (T::zero(), T::zero())
    } else if p > hi {
        (hi, T::zero())
    } else {
        (p, scale)
    }
}

#[inline]
fn cell(p: usize, size: usize) -> usize {
    if size < 2 {
        0
    } else {
        p.min(size - 2)
    }
}

/// Bilinear lookup into a channel-first map `[c, h, w]` at normalized
/// coordinates `coords = [k, 2]` holding `(x, y)`; `(-1, -1)` is the centre
/// of the top-left pixel. Returns `[k, c]`.
pub fn grid_sample_forward<T: Real>(c: usize, h: usize, w: usize, map: &[T], coords: &[T]) -> Vec<T> {
    let k = coords.len() / 2;
    let mut out = vec![T::zero(); k * c];
    for i in 0..k {
        let (px, _) = unnormalize(coords[2 * i], w);
        let (py, _) = unnormalize(coords[2 * i + 1], h);
        let x0 = cell(px.floor().to_usize().unwrap(), w);
        let y0 = cell(py.floor().to_usize().unwrap(), h);
        let fx = px - T::c(x0 as f64);
        let fy = py - T::c(y0 as f64);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        for ch in 0..c {
            let plane = &map[ch * h * w..(ch + 1) * h * w];
            let v00 = plane[y0 * w + x0];
            let v01 = plane[y0 * w + x1];
            let v10 = plane[y1 * w + x0];
            let v11 = plane[y1 * w + x1];
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            out[i * c + ch] = top + (bot - top) * fy;
        }
    }
    out
}

pub fn grid_sample_backward<T: Real>(
    c: usize,
    h: usize,
    w: usize,
    map: &[T],
    coords: &[T],
    grad_out: &[T],
    mut gmap: Option<&mut [T]>,
    mut gcoords: Option<&mut [T]>,
) {
    let k = coords.len() / 2;
    for i in 0..k {
        let (px, dpx) = unnormalize(coords[2 * i], w);
        let (py, dpy) = unnormalize(coords[2 * i + 1], h);
        let x0 = cell(px.floor().to_usize().unwrap(), w);
        let y0 = cell(py.floor().to_usize().unwrap(), h);
        let fx = px - T::c(x0 as f64);
        let fy = py - T::c(y0 as f64);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let mut gfx = T::zero();
        let mut gfy = T::zero();
        for ch in 0..c {
            let g = grad_out[i * c + ch];
            let base = ch * h * w;
            if let Some(gm) = gmap.as_deref_mut() {
                gm[base + y0 * w + x0] += g * (T::one() - fx) * (T::one() - fy);
                gm[base + y0 * w + x1] += g * fx * (T::one() - fy);
                gm[base + y1 * w + x0] += g * (T::one() - fx) * fy;
                gm[base + y1 * w + x1] += g * fx * fy;
            }
            let v00 = map[base + y0 * w + x0];
            let v01 = map[base + y0 * w + x1];
            let v10 = map[base + y1 * w + x0];
            let v11 = map[base + y1 * w + x1];
            gfx += g * ((v01 - v00) * (T::one() - fy) + (v11 - v10) * fy);
            gfy += g * ((v10 - v00) * (T::one() - fx) + (v11 - v01) * fx);
        }
        if let Some(gc) = gcoords.as_deref_mut() {
            gc[2 * i] += gfx * dpx;
            gc[2 * i + 1] += gfy * dpy;
        }
    }
}
