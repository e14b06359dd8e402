//! Straightforward reimplementations used as references.

use std::collections::{BTreeSet, HashSet};

use omr_core::eigenlane::LaneCurve;
use omr_core::geometry::LaneGeometry;
use omr_core::Tensor;

/// Six nested loops, zero padding, no cleverness.
pub fn conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci_n, h, w) = x.chw().unwrap();
    let (co_n, kk) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; co_n * oh * ow];
    for co in 0..co_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..ci_n {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                * k.data()[((co * ci_n + ci) * kk + ky) * kk + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(&[co_n, oh, ow], out).unwrap()
}

/// Lane x at image row `y` by searching for the enclosing sample segment.
fn interp(rows: &[f64], xs: &[f64], y: f64) -> Option<f64> {
    for i in 0..rows.len() - 1 {
        if y >= rows[i] && y <= rows[i + 1] {
            let t = (y - rows[i]) / (rows[i + 1] - rows[i]);
            return Some(xs[i] + t * (xs[i + 1] - xs[i]));
        }
    }
    None
}

/// Pixels `(row, col)` of a raster with pixel size `scale` within `half`
/// raster columns of the curve, restricted to the valid rows.
pub fn stripe_set(geom: &LaneGeometry, curve: &LaneCurve, scale: f64, height: usize, width: usize, half: f64) -> HashSet<(usize, usize)> {
    let (top, bottom) = (geom.rows[curve.valid.0], geom.rows[curve.valid.1]);
    let mut set = HashSet::new();
    for r in 0..height {
        let y = (r as f64 + 0.5) * scale - 0.5;
        if y < top || y > bottom {
            continue;
        }
        let Some(x) = interp(&geom.rows, &curve.xs, y) else { continue };
        let gx = (x + 0.5) / scale - 0.5;
        for c in 0..width {
            if (c as f64 - gx).abs() <= half {
                set.insert((r, c));
            }
        }
    }
    set
}

pub fn pixel_set_iou(geom: &LaneGeometry, a: &LaneCurve, b: &LaneCurve, half: f64) -> f64 {
    let sa = stripe_set(geom, a, 1.0, geom.image_height, geom.image_width, half);
    let sb = stripe_set(geom, b, 1.0, geom.image_height, geom.image_width, half);
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Line IoU from explicit per-row intervals `[x - e, x + e]`.
pub fn interval_liou(pred: &[f64], gt: &[f64], rows: (usize, usize), e: f64) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for r in rows.0..=rows.1 {
        let (a0, a1) = (pred[r] - e, pred[r] + e);
        let (b0, b1) = (gt[r] - e, gt[r] + e);
        inter += a1.min(b1) - a0.max(b0);
        union += a1.max(b1) - a0.min(b0);
    }
    inter / union
}

/// Selection by visiting pixels in decreasing score order and suppressing
/// every pixel inside each selected lane's stripe. Returns the selected
/// grid pixels in order.
pub fn nms(
    p: &Tensor,
    curve_at: &dyn Fn(usize) -> Vec<f64>,
    geom: &LaneGeometry,
    threshold: f64,
    cap: usize,
    half: f64,
) -> Vec<usize> {
    let (_, h, w) = p.chw().unwrap();
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| p.data()[b].total_cmp(&p.data()[a]).then(a.cmp(&b)));
    let mut suppressed: BTreeSet<usize> = BTreeSet::new();
    let mut picked = Vec::new();
    for idx in order {
        if picked.len() == cap || p.data()[idx] <= threshold {
            break;
        }
        if suppressed.contains(&idx) {
            continue;
        }
        picked.push(idx);
        suppressed.insert(idx);
        let xs = curve_at(idx);
        let full = LaneCurve::full(xs);
        for (r, c) in stripe_set(geom, &full, geom.stride as f64, h, w, half) {
            suppressed.insert(r * w + c);
        }
    }
    picked
}

/// Largest one-to-one assignment with every pair above `threshold`, by
/// trying every injective map of predictions into GT slots (or none).
pub fn exhaustive_tp(ious: &[Vec<f64>], n_gt: usize, threshold: f64) -> usize {
    fn go(ious: &[Vec<f64>], p: usize, taken: u32, n_gt: usize, threshold: f64) -> usize {
        if p == ious.len() {
            return 0;
        }
        let mut best = go(ious, p + 1, taken, n_gt, threshold);
        for g in 0..n_gt {
            if taken & (1 << g) == 0 && ious[p][g] > threshold {
                best = best.max(1 + go(ious, p + 1, taken | (1 << g), n_gt, threshold));
            }
        }
        best
    }
    go(ious, 0, 0, n_gt, threshold)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors (row-major `n×n`), sorted
/// by decreasing eigenvalue.
pub fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (j, &src) in order.iter().enumerate() {
        for i in 0..n {
            vecs[i * n + j] = v[i * n + src];
        }
    }
    (vals, vecs)
}

/// Mean per-lane RMSE of projecting lanes onto the top `m` eigenvectors of
/// `Σ x xᵀ`, computed with [`jacobi_eigen`].
pub fn truncation_rmse(lanes: &[Vec<f64>], m: usize) -> f64 {
    let n = lanes[0].len();
    let mut gram = vec![0.0; n * n];
    for x in lanes {
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] += x[i] * x[j];
            }
        }
    }
    let (_, vecs) = jacobi_eigen(gram, n);
    let mut total = 0.0;
    for x in lanes {
        let mut resid = x.clone();
        for j in 0..m {
            let dot: f64 = (0..n).map(|i| vecs[i * n + j] * x[i]).sum();
            for i in 0..n {
                resid[i] -= dot * vecs[i * n + j];
            }
        }
        total += (resid.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    }
    total / lanes.len() as f64
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
