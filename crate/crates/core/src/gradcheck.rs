//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, below which both
    /// gradients are indistinguishable from finite-difference noise.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(label, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.checked > 0 && self.max_rel_error < cfg.tolerance
    }

    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64, cfg: &GradCheckConfig) {
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((label.to_string(), idx, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Usage("gradient check needs a scalar objective".into()));
    }
    Ok(t.item())
}

/// Check `d f / d inputs` for a function built on a fresh tape.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        scalar(&t, out)
    };

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.wrt(*var).unwrap_or(&zeros).clone();
        for j in 0..inputs[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(&format!("input{i}"), j, analytic.data()[j], numeric, cfg);
        }
    }
    Ok(report)
}

/// Check parameter gradients of `f` over the named parameters of `store`.
/// At most `per_tensor` randomly chosen elements of each tensor are probed
/// (all of them when `per_tensor` is `None`).
pub fn check_params<F, R>(
    store: &ParamStore,
    names: &[String],
    f: F,
    per_tensor: Option<usize>,
    rng: &mut R,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    R: Rng,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    for name in names {
        let n = store.require(name)?.len();
        let zeros = Tensor::zeros(store.require(name)?.shape());
        let analytic = grads.param(name).unwrap_or(&zeros).clone();
        let idx: Vec<usize> = match per_tensor {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in idx {
            let orig = store.require(name)?.data()[j];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(name).expect("probed parameter").data_mut()[j] = v;
                let mut t = Tape::new();
                let out = f(&mut t, &probe)?;
                scalar(&t, out)
            };
            let plus = eval(orig + cfg.step)?;
            let minus = eval(orig - cfg.step)?;
            probe.get_mut(name).expect("probed parameter").data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(name, j, analytic.data()[j], numeric, cfg);
        }
    }
    Ok(report)
}
