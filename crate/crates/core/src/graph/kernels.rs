//! Raw slice kernels shared by the tape's forward and backward rules.

use rayon::prelude::*;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` with `a[m×k]`, `g[m×n]`.
pub fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` with `g[m×n]`, `b[k×n]`.
pub fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// Geometry of a same-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Output rows `oy` with `oy + dy` inside the input, for a kernel offset `dy`.
    fn span(extent: usize, d: isize) -> (usize, usize) {
        let lo = (-d).max(0) as usize;
        let hi = (extent as isize - d).min(extent as isize).max(0) as usize;
        (lo, hi.max(lo))
    }

    fn offsets(&self, ky: usize, kx: usize) -> (isize, isize) {
        (
            ky as isize - (self.kh / 2) as isize,
            kx as isize - (self.kw / 2) as isize,
        )
    }
}

/// `y[b, co] = Σ_ci k[co, ci] ⋆ x[b, ci]` with zero padding.
pub fn conv2d_forward(x: &[f64], k: &[f64], geom: ConvGeom) -> Vec<f64> {
    let hw = geom.hw();
    let mut y = vec![0.0; geom.batch * geom.cout * hw];
    y.par_chunks_mut(geom.cout * hw)
        .zip(x.par_chunks(geom.cin * hw))
        .for_each(|(yb, xb)| conv_one(xb, k, yb, geom));
    y
}

fn conv_one(xb: &[f64], k: &[f64], yb: &mut [f64], g: ConvGeom) {
    let hw = g.hw();
    let w = g.w;
    for co in 0..g.cout {
        let yo = &mut yb[co * hw..(co + 1) * hw];
        for ci in 0..g.cin {
            let xi = &xb[ci * hw..(ci + 1) * hw];
            let kbase = (co * g.cin + ci) * g.kh * g.kw;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[kbase + ky * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (dy, dx) = g.offsets(ky, kx);
                    let (ylo, yhi) = ConvGeom::span(g.h, dy);
                    let (xlo, xhi) = ConvGeom::span(g.w, dx);
                    for oy in ylo..yhi {
                        let iy = (oy as isize + dy) as usize;
                        let yrow = &mut yo[oy * w + xlo..oy * w + xhi];
                        let xs = (xlo as isize + dx) as usize;
                        let xrow = &xi[iy * w + xs..iy * w + xs + (xhi - xlo)];
                        for (o, &v) in yrow.iter_mut().zip(xrow) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input.
pub fn conv2d_backward_input(g: &[f64], k: &[f64], geom: ConvGeom) -> Vec<f64> {
    let hw = geom.hw();
    let w = geom.w;
    let mut dx = vec![0.0; geom.batch * geom.cin * hw];
    dx.par_chunks_mut(geom.cin * hw)
        .zip(g.par_chunks(geom.cout * hw))
        .for_each(|(dxb, gb)| {
            for co in 0..geom.cout {
                let go = &gb[co * hw..(co + 1) * hw];
                for ci in 0..geom.cin {
                    let di = &mut dxb[ci * hw..(ci + 1) * hw];
                    let kbase = (co * geom.cin + ci) * geom.kh * geom.kw;
                    for ky in 0..geom.kh {
                        for kx in 0..geom.kw {
                            let wv = k[kbase + ky * geom.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (dy, ddx) = geom.offsets(ky, kx);
                            let (ylo, yhi) = ConvGeom::span(geom.h, dy);
                            let (xlo, xhi) = ConvGeom::span(geom.w, ddx);
                            for oy in ylo..yhi {
                                let iy = (oy as isize + dy) as usize;
                                let xs = (xlo as isize + ddx) as usize;
                                let drow = &mut di[iy * w + xs..iy * w + xs + (xhi - xlo)];
                                let grow = &go[oy * w + xlo..oy * w + xhi];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient with respect to the kernel. Per-sample partials are summed in
/// batch order so the result does not depend on thread scheduling.
pub fn conv2d_backward_kernel(x: &[f64], g: &[f64], geom: ConvGeom) -> Vec<f64> {
    let hw = geom.hw();
    let w = geom.w;
    let ksize = geom.cout * geom.cin * geom.kh * geom.kw;
    let partials: Vec<Vec<f64>> = x
        .par_chunks(geom.cin * hw)
        .zip(g.par_chunks(geom.cout * hw))
        .map(|(xb, gb)| {
            let mut dk = vec![0.0; ksize];
            for co in 0..geom.cout {
                let go = &gb[co * hw..(co + 1) * hw];
                for ci in 0..geom.cin {
                    let xi = &xb[ci * hw..(ci + 1) * hw];
                    let kbase = (co * geom.cin + ci) * geom.kh * geom.kw;
                    for ky in 0..geom.kh {
                        for kx in 0..geom.kw {
                            let (dy, dx) = geom.offsets(ky, kx);
                            let (ylo, yhi) = ConvGeom::span(geom.h, dy);
                            let (xlo, xhi) = ConvGeom::span(geom.w, dx);
                            let mut acc = 0.0;
                            for oy in ylo..yhi {
                                let iy = (oy as isize + dy) as usize;
                                let xs = (xlo as isize + dx) as usize;
                                let xrow = &xi[iy * w + xs..iy * w + xs + (xhi - xlo)];
                                let grow = &go[oy * w + xlo..oy * w + xhi];
                                acc += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            dk[kbase + ky * geom.kw + kx] += acc;
                        }
                    }
                }
            }
            dk
        })
        .collect();
    let mut dk = vec![0.0; ksize];
    for p in partials {
        dk.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    dk
}

/// Maps each flat index of a row-major tensor with `shape` to the flat index
/// of the source element under `perm` (output axis `i` is input axis `perm[i]`).
pub fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}
