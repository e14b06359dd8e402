//! Focal classification loss and the line-IoU regression loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before the logarithm.
pub const CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Weight of the positive class; negatives get `1 - alpha`. `None`
    /// weighs both classes by one.
    pub alpha: Option<f64>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

impl FocalConfig {
    fn weights(&self) -> (f64, f64) {
        match self.alpha {
            Some(a) => (a, 1.0 - a),
            None => (1.0, 1.0),
        }
    }

    /// Per-pixel loss and its derivative with respect to the prediction.
    fn pixel(&self, pred: f64, positive: bool) -> (f64, f64) {
        let (wp, wn) = self.weights();
        let clamped = !(CLAMP..=1.0 - CLAMP).contains(&pred);
        let p = pred.clamp(CLAMP, 1.0 - CLAMP);
        let g = self.gamma;
        // Written for p_t = p; the negative class mirrors it through p -> 1 - p.
        let (pt, w, sign) = if positive { (p, wp, 1.0) } else { (1.0 - p, wn, -1.0) };
        let q = 1.0 - pt;
        let value = -w * q.powf(g) * pt.ln();
        let dpt = if g == 0.0 {
            -w / pt
        } else {
            -w * (-g * q.powf(g - 1.0) * pt.ln() + q.powf(g) / pt)
        };
        (value, if clamped { 0.0 } else { sign * dpt })
    }
}

fn check_binary(gt: &Tensor) -> Result<()> {
    if gt.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("focal loss target must be binary".into()));
    }
    Ok(())
}

/// Mean focal loss of `pred` against the binary map `gt`.
pub fn focal_loss_value(pred: &Tensor, gt: &Tensor, cfg: &FocalConfig) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim("focal_loss", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    check_binary(gt)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &t)| cfg.pixel(p, t == 1.0).0)
        .sum();
    Ok(total / pred.len() as f64)
}

/// Focal loss recorded on the tape.
pub fn focal_loss(tape: &mut Tape, pred: Var, gt: &Tensor, cfg: &FocalConfig) -> Result<Var> {
    let value = focal_loss_value(tape.value(pred), gt, cfg)?;
    let gt = gt.clone();
    let cfg = cfg.clone();
    Ok(tape.custom(
        &[pred],
        Tensor::scalar(value),
        Box::new(move |inputs, _, gout| {
            let n = inputs[0].len() as f64;
            let scale = gout.item() / n;
            let g = Tensor::from_fn(inputs[0].shape(), |i| {
                scale * cfg.pixel(inputs[0].data()[i], gt.data()[i] == 1.0).1
            });
            vec![Some(g)]
        }),
    ))
}

/// Line IoU between two curves over rows `rows.0..=rows.1`, each point
/// widened to `[x - e, x + e]`. `None` when the row range is empty.
pub fn line_iou(pred: &[f64], gt: &[f64], rows: (usize, usize), e: f64) -> Option<f64> {
    let (a, b) = line_iou_parts(pred, gt, rows, e)?;
    Some(a / b)
}

fn line_iou_parts(pred: &[f64], gt: &[f64], rows: (usize, usize), e: f64) -> Option<(f64, f64)> {
    if rows.0 > rows.1 || rows.1 >= pred.len().min(gt.len()) {
        return None;
    }
    let (mut overlap, mut union) = (0.0, 0.0);
    for r in rows.0..=rows.1 {
        let d = (pred[r] - gt[r]).abs();
        overlap += 2.0 * e - d;
        union += 2.0 * e + d;
    }
    Some((overlap, union))
}

/// `1 - LIoU`; 1 when the curves share no rows.
pub fn liou_loss_value(pred: &[f64], gt: &[f64], rows: Option<(usize, usize)>, e: f64) -> f64 {
    match rows.and_then(|r| line_iou(pred, gt, r, e)) {
        Some(iou) => 1.0 - iou,
        None => {
            log::warn!("line IoU over zero shared rows; loss set to 1");
            1.0
        }
    }
}

/// Regression target of one predicted row vector.
#[derive(Clone, Debug)]
pub struct LaneTarget {
    pub xs: Vec<f64>,
    pub rows: Option<(usize, usize)>,
}

/// Mean LIoU loss between the rows of `pred` (`[n, N]`) and `targets`.
pub fn liou_loss(tape: &mut Tape, pred: Var, targets: Vec<LaneTarget>, e: f64) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    let [n, rows] = shape[..] else {
        return Err(Error::dim("liou_loss", format!("prediction must be [n, N], got {shape:?}")));
    };
    if n != targets.len() || n == 0 || targets.iter().any(|t| t.xs.len() != rows) {
        return Err(Error::dim("liou_loss", format!("{n} predictions for {} targets", targets.len())));
    }
    if e <= 0.0 {
        return Err(Error::Config(format!("LIoU extension must be positive, got {e}")));
    }
    let p = tape.value(pred).data();
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, t)| liou_loss_value(&p[i * rows..(i + 1) * rows], &t.xs, t.rows, e))
        .sum();
    let value = Tensor::scalar(total / n as f64);
    Ok(tape.custom(
        &[pred],
        value,
        Box::new(move |inputs, _, gout| {
            let p = inputs[0].data();
            let scale = gout.item() / n as f64;
            let mut g = Tensor::zeros(inputs[0].shape());
            for (i, t) in targets.iter().enumerate() {
                let row = &p[i * rows..(i + 1) * rows];
                let Some(r) = t.rows else { continue };
                let Some((a, b)) = line_iou_parts(row, &t.xs, r, e) else {
                    continue;
                };
                // d(1 - A/B)/dp = sign(p - g) (A + B) / B²
                let k = scale * (a + b) / (b * b);
                for j in r.0..=r.1 {
                    let s = (row[j] - t.xs[j]).signum();
                    g.data_mut()[i * rows + j] = k * s;
                }
            }
            vec![Some(g)]
        }),
    ))
}
