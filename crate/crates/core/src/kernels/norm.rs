//! Per-channel batch normalization fused with ReLU.

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch mean and biased variance per channel (training mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Normalize with batch statistics (`running = None`) or the given running
/// `(mean, var)`, then apply `max(0, gamma * xhat + beta)`.
pub fn bn_relu_forward(
    x: &[f64],
    c: usize,
    gamma: &[f64],
    beta: &[f64],
    running: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, BnSaved) {
    let n = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    let mut batch_mean = Vec::new();
    let mut batch_var = Vec::new();
    for ch in 0..c {
        let src = &x[ch * n..(ch + 1) * n];
        let (mean, var) = match running {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mean = src.iter().sum::<f64>() / n as f64;
                let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                batch_mean.push(mean);
                batch_var.push(var);
                (mean, var)
            }
        };
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = is;
        for i in 0..n {
            let xh = (src[i] - mean) * is;
            xhat[ch * n + i] = xh;
            out[ch * n + i] = (gamma[ch] * xh + beta[ch]).max(0.0);
        }
    }
    (
        out,
        BnSaved {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    )
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn bn_relu_backward(
    gout: &[f64],
    out: &[f64],
    c: usize,
    gamma: &[f64],
    saved: &BnSaved,
    training: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = gout.len() / c;
    let mut gx = vec![0.0; gout.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let range = ch * n..(ch + 1) * n;
        let dy: Vec<f64> = gout[range.clone()]
            .iter()
            .zip(&out[range.clone()])
            .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
            .collect();
        let xh = &saved.xhat[range.clone()];
        let sum_dy: f64 = dy.iter().sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
        gg[ch] = sum_dy_xh;
        gb[ch] = sum_dy;
        let scale = gamma[ch] * saved.inv_std[ch];
        let dst = &mut gx[range];
        if training {
            let nf = n as f64;
            for i in 0..n {
                dst[i] = scale / nf * (nf * dy[i] - sum_dy - xh[i] * sum_dy_xh);
            }
        } else {
            for i in 0..n {
                dst[i] = scale * dy[i];
            }
        }
    }
    (gx, gg, gb)
}
