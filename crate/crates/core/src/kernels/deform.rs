//! Modulated deformable convolution (stride 1, "same" padding, odd square kernel).
//!
//! Offsets carry `2·k²` channels, `(dy, dx)` interleaved per tap in row-major
//! tap order; modulation carries `k²` channels. Samples outside the feature map
//! read as zero.

use crate::par;

#[derive(Clone, Copy, Debug)]
pub struct DeformGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
}

impl DeformGeom {
    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Integer corner and fractional weights of one bilinear sample.
#[derive(Clone, Copy, Debug)]
struct Site {
    y0: isize,
    x0: isize,
    ly: f64,
    lx: f64,
}

fn plan(offsets: &[f64], g: &DeformGeom) -> Vec<Site> {
    let (t_n, p_n) = (g.taps(), g.plane());
    let half = (g.k / 2) as f64;
    let mut sites = Vec::with_capacity(t_n * p_n);
    for t in 0..t_n {
        let (ky, kx) = ((t / g.k) as f64, (t % g.k) as f64);
        let dy = &offsets[2 * t * p_n..(2 * t + 1) * p_n];
        let dx = &offsets[(2 * t + 1) * p_n..(2 * t + 2) * p_n];
        for p in 0..p_n {
            let py = (p / g.w) as f64 + ky - half + dy[p];
            let px = (p % g.w) as f64 + kx - half + dx[p];
            let (fy, fx) = (py.floor(), px.floor());
            sites.push(Site {
                y0: fy as isize,
                x0: fx as isize,
                ly: py - fy,
                lx: px - fx,
            });
        }
    }
    sites
}

#[inline]
fn corners(src: &[f64], s: &Site, h: usize, w: usize) -> [f64; 4] {
    let at = |y: isize, x: isize| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            src[y as usize * w + x as usize]
        } else {
            0.0
        }
    };
    [
        at(s.y0, s.x0),
        at(s.y0, s.x0 + 1),
        at(s.y0 + 1, s.x0),
        at(s.y0 + 1, s.x0 + 1),
    ]
}

/// Forward pass. Returns `(output, samples)` where `samples[ci·T + t, p]` is the
/// unmodulated bilinear sample, kept for the backward pass.
pub fn deform_forward(
    x: &[f64],
    offsets: &[f64],
    modulation: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &DeformGeom,
) -> (Vec<f64>, Vec<f64>) {
    let (t_n, p_n) = (g.taps(), g.plane());
    let sites = plan(offsets, g);
    let mut samples = vec![0.0; g.c_in * t_n * p_n];
    par::for_each_chunk(&mut samples, t_n * p_n, |ci, dst| {
        let src = &x[ci * p_n..(ci + 1) * p_n];
        for (d, s) in dst.iter_mut().zip(&sites) {
            let [v00, v01, v10, v11] = corners(src, s, g.h, g.w);
            *d = (1.0 - s.ly) * ((1.0 - s.lx) * v00 + s.lx * v01)
                + s.ly * ((1.0 - s.lx) * v10 + s.lx * v11);
        }
    });
    let cols = modulated(&samples, modulation, g);
    let out = project(&cols, kernel, bias, g);
    (out, samples)
}

fn modulated(samples: &[f64], modulation: &[f64], g: &DeformGeom) -> Vec<f64> {
    let tp = g.taps() * g.plane();
    let mut cols = samples.to_vec();
    for chunk in cols.chunks_mut(tp) {
        for (c, m) in chunk.iter_mut().zip(modulation) {
            *c *= m;
        }
    }
    cols
}

fn project(cols: &[f64], kernel: &[f64], bias: Option<&[f64]>, g: &DeformGeom) -> Vec<f64> {
    let p_n = g.plane();
    let depth = g.c_in * g.taps();
    let mut out = vec![0.0; g.c_out * p_n];
    par::for_each_chunk(&mut out, p_n, |co, dst| {
        if let Some(b) = bias {
            dst.fill(b[co]);
        }
        for j in 0..depth {
            let wv = kernel[co * depth + j];
            for (d, c) in dst.iter_mut().zip(&cols[j * p_n..(j + 1) * p_n]) {
                *d += wv * c;
            }
        }
    });
    out
}

/// Gradients of a deformable convolution.
pub struct DeformGrads {
    pub x: Vec<f64>,
    pub offsets: Vec<f64>,
    pub modulation: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn deform_backward(
    x: &[f64],
    offsets: &[f64],
    modulation: &[f64],
    kernel: &[f64],
    samples: &[f64],
    gout: &[f64],
    g: &DeformGeom,
) -> DeformGrads {
    let (t_n, p_n) = (g.taps(), g.plane());
    let depth = g.c_in * t_n;
    let sites = plan(offsets, g);

    // d out / d cols
    let mut gcol = vec![0.0; depth * p_n];
    par::for_each_chunk(&mut gcol, p_n, |j, dst| {
        for co in 0..g.c_out {
            let wv = kernel[co * depth + j];
            for (d, go) in dst.iter_mut().zip(&gout[co * p_n..(co + 1) * p_n]) {
                *d += wv * go;
            }
        }
    });

    let cols = modulated(samples, modulation, g);
    let mut gk = vec![0.0; g.c_out * depth];
    par::for_each_chunk(&mut gk, depth, |co, dst| {
        let go = &gout[co * p_n..(co + 1) * p_n];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = go
                .iter()
                .zip(&cols[j * p_n..(j + 1) * p_n])
                .map(|(a, b)| a * b)
                .sum();
        }
    });
    let gb: Vec<f64> = (0..g.c_out)
        .map(|co| gout[co * p_n..(co + 1) * p_n].iter().sum())
        .collect();

    let mut gm = vec![0.0; t_n * p_n];
    for ci in 0..g.c_in {
        let base = ci * t_n * p_n;
        for (i, d) in gm.iter_mut().enumerate() {
            *d += gcol[base + i] * samples[base + i];
        }
    }

    // d out / d samples
    let mut gs = gcol;
    for chunk in gs.chunks_mut(t_n * p_n) {
        for (v, m) in chunk.iter_mut().zip(modulation) {
            *v *= m;
        }
    }

    let mut gx = vec![0.0; g.c_in * p_n];
    par::for_each_chunk(&mut gx, p_n, |ci, dst| {
        let gsc = &gs[ci * t_n * p_n..(ci + 1) * t_n * p_n];
        for (gv, s) in gsc.iter().zip(&sites) {
            let wts = [
                (1.0 - s.ly) * (1.0 - s.lx),
                (1.0 - s.ly) * s.lx,
                s.ly * (1.0 - s.lx),
                s.ly * s.lx,
            ];
            let pos = [
                (s.y0, s.x0),
                (s.y0, s.x0 + 1),
                (s.y0 + 1, s.x0),
                (s.y0 + 1, s.x0 + 1),
            ];
            for (wt, (y, xx)) in wts.iter().zip(pos) {
                if y >= 0 && xx >= 0 && (y as usize) < g.h && (xx as usize) < g.w {
                    dst[y as usize * g.w + xx as usize] += wt * gv;
                }
            }
        }
    });

    let mut goff = vec![0.0; 2 * t_n * p_n];
    par::for_each_chunk(&mut goff, 2 * p_n, |t, dst| {
        let (gdy, gdx) = dst.split_at_mut(p_n);
        for ci in 0..g.c_in {
            let src = &x[ci * p_n..(ci + 1) * p_n];
            let gsc = &gs[(ci * t_n + t) * p_n..(ci * t_n + t + 1) * p_n];
            for p in 0..p_n {
                let s = &sites[t * p_n + p];
                let [v00, v01, v10, v11] = corners(src, s, g.h, g.w);
                let d_py = (1.0 - s.lx) * (v10 - v00) + s.lx * (v11 - v01);
                let d_px = (1.0 - s.ly) * (v01 - v00) + s.ly * (v11 - v10);
                gdy[p] += gsc[p] * d_py;
                gdx[p] += gsc[p] * d_px;
            }
        }
    });
    // split_at_mut gave [dy-plane | dx-plane] per tap, which is the interleaved channel order.

    DeformGrads {
        x: gx,
        offsets: goff,
        modulation: gm,
        kernel: gk,
        bias: gb,
    }
}
