//! Central-difference verification of tape gradients.
//!
//! Every element of every input (and, for module checks, every
//! parameter) is perturbed by `±step` and the resulting slope is
//! compared against the analytic gradient. Outputs are reduced to a
//! scalar by a fixed random weighting so arbitrary output shapes can be
//! checked. Elements sitting on a non-differentiable kink (one-sided
//! slopes disagree, e.g. relu at zero) are skipped and counted rather
//! than scored.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::Params;
use crate::Result;

use super::{Tape, Tensor, TensorId};

/// Settings for a finite-difference gradient comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation half-width.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, tolerance: 1e-4 }
    }
}

/// Outcome of one gradient comparison.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    /// Largest relative error across all checked elements.
    pub max_rel_err: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements skipped because a kink was detected at the evaluation
    /// point.
    pub skipped: usize,
    tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} max rel err {:>10.3e}  checked {:>6}  skipped {:>3}  {}",
            self.name,
            self.max_rel_err,
            self.checked,
            self.skipped,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// One-sided slopes must agree to within this fraction of the central
/// slope's magnitude, otherwise the element is treated as a kink.
const KINK_TOL: f64 = 1e-3;

/// Relative errors are measured against at least this magnitude, so
/// elements with near-zero gradients compare on an absolute scale.
const DENOM_FLOOR: f64 = 1e-4;

impl GradCheck {
    /// Checks a closure of plain tensor inputs (weights included as
    /// inputs if the op has them).
    pub fn check_op(
        &self,
        name: &str,
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
    ) -> Result<GradReport> {
        let mut no_params = ();
        self.check_with_params(name, &mut no_params, inputs, |tape, _m, ids| build(tape, ids))
    }

    /// Checks a module forward: both the given inputs and every
    /// parameter the module owns are perturbed.
    pub fn check_with_params<M: Params<f64>>(
        &self,
        name: &str,
        module: &mut M,
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Tape<f64>, &mut M, &[TensorId]) -> Result<TensorId>,
    ) -> Result<GradReport> {
        let mut inputs: Vec<Tensor<f64>> = inputs.to_vec();

        // Analytic pass: forward once, dot with a fixed weighting,
        // run the tape backward, and flatten all gradients in the same
        // order the FD loop will walk elements.
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .map(|t| {
                let mut leaf = t.clone().requiring_grad();
                tape.leaf(&mut leaf)
            })
            .collect();
        let out = build(&mut tape, module, &ids)?;
        let direction = scalar_direction(tape.shape(out));
        let scalar = weighted_sum(&mut tape, out, &direction)?;
        let f0 = tape.scalar_value(scalar);
        tape.backward(scalar)?;

        let mut analytic: Vec<f64> = Vec::new();
        for (t, id) in inputs.iter().zip(&ids) {
            match tape.grad(*id) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        for p in module.params() {
            match tape.param_grad(&p.name) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat(0.0).take(p.value.numel())),
            }
        }
        drop(tape);

        let input_elems: usize = inputs.iter().map(|t| t.numel()).sum();
        let total = analytic.len();

        let mut max_rel_err: f64 = 0.0;
        let mut checked = 0;
        let mut skipped = 0;
        for e in 0..total {
            let orig = read_element(&inputs, module, input_elems, e);
            write_element(&mut inputs, module, input_elems, e, orig + self.step);
            let f_plus = eval_scalar(&inputs, module, &build, &direction)?;
            write_element(&mut inputs, module, input_elems, e, orig - self.step);
            let f_minus = eval_scalar(&inputs, module, &build, &direction)?;
            write_element(&mut inputs, module, input_elems, e, orig);

            let central = (f_plus - f_minus) / (2.0 * self.step);
            let left = (f0 - f_minus) / self.step;
            let right = (f_plus - f0) / self.step;
            if (left - right).abs() > KINK_TOL * central.abs().max(1.0) {
                skipped += 1;
                continue;
            }
            let denom = analytic[e].abs().max(central.abs()).max(DENOM_FLOOR);
            max_rel_err = max_rel_err.max((analytic[e] - central).abs() / denom);
            checked += 1;
        }

        Ok(GradReport {
            name: name.to_string(),
            max_rel_err,
            checked,
            skipped,
            tolerance: self.tolerance,
        })
    }
}

fn eval_scalar<M: Params<f64>>(
    inputs: &[Tensor<f64>],
    module: &mut M,
    build: &impl Fn(&mut Tape<f64>, &mut M, &[TensorId]) -> Result<TensorId>,
    direction: &[f64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| {
            let mut leaf = t.clone();
            tape.leaf(&mut leaf)
        })
        .collect();
    let out = build(&mut tape, module, &ids)?;
    let scalar = weighted_sum(&mut tape, out, direction)?;
    Ok(tape.scalar_value(scalar))
}

/// Fixed pseudo-random weighting in `[0.5, 1.5)`, so no output element
/// is masked by a zero weight.
fn scalar_direction(shape: &[usize]) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    (0..numel).map(|_| rng.gen_range(0.5..1.5)).collect()
}

fn weighted_sum(tape: &mut Tape<f64>, out: TensorId, direction: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(out).to_vec();
    let dir = Tensor::new(&shape, direction.to_vec())?;
    let dir = tape.constant(&dir);
    let prod = tape.mul(out, dir)?;
    tape.sum_all(prod)
}

fn read_element<M: Params<f64>>(
    inputs: &[Tensor<f64>],
    module: &mut M,
    input_elems: usize,
    e: usize,
) -> f64 {
    if e < input_elems {
        let (t, off) = locate(inputs.iter().map(|t| t.numel()), e);
        inputs[t].data()[off]
    } else {
        let e = e - input_elems;
        let params = module.params();
        let (p, off) = locate(params.iter().map(|p| p.value.numel()), e);
        params[p].value.data()[off]
    }
}

fn write_element<M: Params<f64>>(
    inputs: &mut [Tensor<f64>],
    module: &mut M,
    input_elems: usize,
    e: usize,
    value: f64,
) {
    if e < input_elems {
        let (t, off) = locate(inputs.iter().map(|t| t.numel()), e);
        inputs[t].data_mut()[off] = value;
    } else {
        let e = e - input_elems;
        let mut params = module.params_mut();
        let (p, off) = locate(params.iter().map(|p| p.value.numel()), e);
        params[p].value.data_mut()[off] = value;
    }
}

/// Maps a flat element index onto (container index, offset).
fn locate(sizes: impl Iterator<Item = usize>, mut e: usize) -> (usize, usize) {
    for (i, n) in sizes.enumerate() {
        if e < n {
            return (i, e);
        }
        e -= n;
    }
    panic!("element index out of range");
}

/// Deterministic standard-normal test tensor.
pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Deterministic uniform test tensor on `[lo, hi)`.
pub fn rand_uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
