//! Analytic gradients against central finite differences.
//!
//! A function's output is projected onto fixed pseudo-random weights, giving
//! a scalar `L`. For each checked entry `x_i` the analytic `dL/dx_i` is
//! compared with the five-point central difference
//! `(8 (L(x+h) - L(x-h)) - (L(x+2h) - L(x-2h))) / 12h` using
//! `|a - n| / max(|a|, |n|, floor)`. The fourth-order stencil allows a step
//! large enough that rounding in `L` stays far below the tolerance.
//!
//! ReLU kinks and L1 ties make `L` piecewise smooth; a step that straddles a
//! kink measures a chord instead of the derivative at the point. The numeric
//! estimate is therefore repeated with halved steps until two consecutive
//! estimates agree, and the smaller-step one is used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ActError, Result};
use crate::model::ActModel;
use crate::nn::{Binding, ParamStore};
use crate::tensor::{backward, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Initial finite-difference step `h`.
    pub step: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-2,
            floor: 1e-5,
            per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0 }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst = format!("{name}[{index}] analytic {analytic:e} numeric {numeric:e}");
        }
    }
}

/// Five-point central difference of `at(delta) = L(x + delta)` over a ladder
/// of halved steps. Stops once two consecutive estimates agree to `1e-7`
/// relative; otherwise returns the estimate of the closest-agreeing pair,
/// which is where the step has dropped below the distance to the nearest
/// kink but rounding has not yet taken over.
fn derivative(mut at: impl FnMut(f64) -> Result<f64>, h: f64, floor: f64) -> Result<f64> {
    let mut estimate = |h: f64| -> Result<f64> {
        let near = at(h)? - at(-h)?;
        let far = at(2.0 * h)? - at(-2.0 * h)?;
        Ok((8.0 * near - far) / (12.0 * h))
    };
    let mut prev = estimate(h)?;
    let mut best = (f64::INFINITY, prev);
    let mut step = h;
    for _ in 0..16 {
        step /= 2.0;
        let next = estimate(step)?;
        let gap = (next - prev).abs();
        if gap < best.0 {
            best = (gap, next);
        }
        if gap <= 1e-7 * next.abs().max(prev.abs()).max(floor) {
            return Ok(next);
        }
        prev = next;
    }
    Ok(best.1)
}

fn projection(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn entries(numel: usize, per_tensor: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match per_tensor {
        Some(k) if k < numel => (0..k).map(|_| rng.random_range(0..numel)).collect(),
        _ => (0..numel).collect(),
    }
}

fn perturbed(t: &Tensor, index: usize, delta: f64) -> Tensor {
    let mut p = t.clone();
    p.data_mut()[index] += delta;
    p
}

/// Checks `f` with respect to every named input.
pub fn check_fn<F>(inputs: &[(&str, Tensor)], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let leaves: Vec<Var> = inputs.iter().map(|(_, t)| Var::leaf(t.clone())).collect();
    let out = f(&leaves)?;
    let w = projection(out.shape(), &mut rng);
    let grads = backward(&out.dot_const(&w)?)?;
    let value = |ts: Vec<Tensor>| -> Result<f64> {
        let vars: Vec<Var> = ts.into_iter().map(Var::constant).collect();
        Ok(f(&vars)?.dot_const(&w)?.data()[0])
    };
    let mut report = GradCheckReport::new();
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&leaves[k]);
        for i in entries(t.numel(), cfg.per_tensor, &mut rng) {
            let shifted = |delta: f64| {
                inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (_, u))| if j == k { perturbed(u, i, delta) } else { u.clone() })
                    .collect()
            };
            let numeric = derivative(|h| value(shifted(h)), cfg.step, cfg.floor)?;
            report.record(name, i, analytic[i], numeric, cfg.floor);
        }
    }
    if !report.max_rel_error.is_finite() {
        return Err(ActError::NonFinite("gradient check"));
    }
    Ok(report)
}

/// Checks `f(params, input)` with respect to every parameter in `store`
/// and the input.
pub fn check_store<F>(store: &ParamStore, input: &Tensor, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Binding, &Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Var::leaf(input.clone());
    let out = f(&store.bind(true), &x)?;
    let w = projection(out.shape(), &mut rng);
    let grads = backward(&out.dot_const(&w)?)?;

    let eval = |store: &ParamStore, image: &Tensor| -> Result<f64> {
        Ok(f(&store.bind(false), &Var::constant(image.clone()))?.dot_const(&w)?.data()[0])
    };
    let mut report = GradCheckReport::new();
    let h = cfg.step;
    for (k, prm) in store.iter().enumerate() {
        let analytic = grads.param(k).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; prm.tensor.numel()]);
        let id = store.id_of(&prm.name).expect("registered parameter");
        for i in entries(prm.tensor.numel(), cfg.per_tensor, &mut rng) {
            let at = |delta: f64| {
                let mut shifted = store.clone();
                shifted.tensor_mut(id).data_mut()[i] += delta;
                eval(&shifted, input)
            };
            let numeric = derivative(at, h, cfg.floor)?;
            report.record(&prm.name, i, analytic[i], numeric, cfg.floor);
        }
    }
    let analytic = grads.wrt(&x);
    for i in entries(input.numel(), cfg.per_tensor, &mut rng) {
        let at = |delta: f64| eval(store, &perturbed(input, i, delta));
        let numeric = derivative(at, h, cfg.floor)?;
        report.record("input", i, analytic[i], numeric, cfg.floor);
    }
    if !report.max_rel_error.is_finite() {
        return Err(ActError::NonFinite("gradient check"));
    }
    Ok(report)
}

/// Checks a full forward pass of `model` on `input` with respect to every
/// parameter tensor and the input image.
pub fn check_model(model: &ActModel, input: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    check_store(model.params(), input, |p, x| model.forward_var(p, x), cfg)
}
