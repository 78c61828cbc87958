//! Central-difference verification of analytic gradients at 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Coordinates probed per input; `None` probes every element.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discrepancy {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Discrepancy>,
    pub checked: usize,
    pub tol: f64,
    /// Probes repeated with a smaller step because the first one straddled a kink.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn empty(tol: f64) -> Self {
        Self {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
            tol,
            refined: 0,
        }
    }

    pub fn observe(&mut self, d: Discrepancy, floor: f64) {
        let denom = d.analytic.abs().max(d.numeric.abs()).max(floor);
        let err = (d.analytic - d.numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some(d);
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.refined += other.refined;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Coordinates of a tensor with `numel` elements that a check probes.
pub fn probe_indices(numel: usize, max_coords: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max_coords {
        Some(k) if k < numel => {
            let mut idx = sample(rng, numel, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..numel).collect(),
    }
}

/// Compares the analytic gradient of a scalar function of `inputs` with central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&vars)?.value();
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        let v = out.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Instability(format!(
                "function value {v} is not finite"
            )))
        }
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&vars)?;
    if !out.value().all_finite() {
        return Err(Error::Instability("function value is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    if let Some(bad) = analytic.iter().position(|g| !g.all_finite()) {
        return Err(Error::Instability(format!(
            "analytic gradient of input {bad} is not finite"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::empty(cfg.tol);
    let mut probe = inputs.to_vec();
    for (input, x) in inputs.iter().enumerate() {
        for index in probe_indices(x.numel(), cfg.max_coords, &mut rng) {
            let orig = x.data()[index];
            probe[input].data_mut()[index] = orig + cfg.eps;
            let plus = eval(&probe)?;
            probe[input].data_mut()[index] = orig - cfg.eps;
            let minus = eval(&probe)?;
            probe[input].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            report.observe(
                Discrepancy {
                    input,
                    index,
                    analytic: analytic[input].data()[index],
                    numeric,
                },
                cfg.floor,
            );
        }
    }
    Ok(report)
}
