//! Finite-difference validation of the differentiation engine.
//!
//! Three families of suites:
//! - one per primitive, checking both the first derivative and the derivative
//!   of a projected first derivative (which exercises each backward rule's own
//!   backward rule);
//! - first-order parameter gradients of randomly drawn small models;
//! - the second-order data gradient of the gradient-match loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gradients::{self, grad_check, label_tensor, GradCheckReport, MatchLoss, VirtualLabels};
use crate::kernels::Window;
use crate::models::{build_model, Arch, ArchSpec, Model};
use crate::tensor::Tensor;

/// Finite-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;
/// Tolerance for first-order parameter gradients.
pub const PARAM_GRAD_TOL: f64 = 1e-4;
/// Tolerance for the second-order data gradient of the match loss.
pub const DATA_GRAD_TOL: f64 = 1e-3;
/// Tolerance for the isolated primitive suites.
pub const PRIMITIVE_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checks: usize,
    /// Sampled coordinates whose difference stencil crosses a ReLU or
    /// max-pool switch; central differences do not estimate a derivative there.
    pub skipped: usize,
    /// Description of the worst coordinate.
    pub worst: String,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    fn absorb(&mut self, label: &str, r: &GradCheckReport) {
        self.checks += r.checked;
        if r.max_rel_err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(r.max_rel_err);
            self.worst = format!(
                "{label}: coord {} analytic {:.6e} numeric {:.6e}",
                r.worst_index, r.analytic, r.numeric
            );
        }
    }

    fn new(name: &str, tolerance: f64) -> Self {
        SuiteResult { name: name.to_string(), max_rel_err: 0.0, tolerance, checks: 0, skipped: 0, worst: String::new() }
    }
}

/// Drops coordinates where `x ± step` lands on a different smooth piece.
fn smooth_coords<F>(coords: Vec<usize>, at: &Tensor, pattern: F, suite: &mut SuiteResult) -> Result<Vec<usize>>
where
    F: Fn(&Tensor) -> Result<u64>,
{
    let base = pattern(at)?;
    let mut keep = Vec::with_capacity(coords.len());
    let mut probe = at.clone();
    for i in coords {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + FD_STEP;
        let up = pattern(&probe)?;
        probe.data_mut()[i] = x0 - FD_STEP;
        let down = pattern(&probe)?;
        probe.data_mut()[i] = x0;
        if up == base && down == base {
            keep.push(i);
        } else {
            suite.skipped += 1;
        }
    }
    Ok(keep)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Signed values with magnitude in `[lo, hi]`, keeping clear of kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

type Builder = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks `build` against each of its inputs, first and second order.
fn primitive_suite(name: &str, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, build: &Builder) -> Result<SuiteResult> {
    let mut suite = SuiteResult::new(name, PRIMITIVE_TOL);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = build(&mut tape, &vars)?;
        tape.shape(y).to_vec()
    };
    let w_out = uniform(rng, &out_shape, 0.5, 1.5);
    for which in 0..inputs.len() {
        let w_grad = uniform(rng, inputs[which].shape(), 0.5, 1.5);
        // f(x) = <w_out, op(..x..)>
        let first = |x: &Tensor| -> Result<(f64, Tensor)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| tape.leaf(if i == which { x.clone() } else { t.clone() }))
                .collect();
            let y = build(&mut tape, &vars)?;
            let w = tape.leaf(w_out.clone());
            let p = tape.mul(y, w)?;
            let f = tape.sum(p);
            let g = tape.grad(f, &[vars[which]])?[0];
            Ok((tape.value(f).item(), tape.value(g).clone()))
        };
        // h(x) = <w_grad, df/dx>
        let second = |x: &Tensor| -> Result<(f64, Tensor)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| tape.leaf(if i == which { x.clone() } else { t.clone() }))
                .collect();
            let y = build(&mut tape, &vars)?;
            let w = tape.leaf(w_out.clone());
            let p = tape.mul(y, w)?;
            let f = tape.sum(p);
            let g = tape.grad(f, &[vars[which]])?[0];
            let wg = tape.leaf(w_grad.clone());
            let q = tape.mul(g, wg)?;
            let h = tape.sum(q);
            let dh = tape.grad(h, &[vars[which]])?[0];
            Ok((tape.value(h).item(), tape.value(dh).clone()))
        };
        let x0 = &inputs[which];
        let r1 = grad_check(|x| Ok(first(x)?.0), &first(x0)?.1, x0, FD_STEP, None)?;
        suite.absorb(&format!("input {which} first order"), &r1);
        let r2 = grad_check(|x| Ok(second(x)?.0), &second(x0)?.1, x0, FD_STEP, None)?;
        suite.absorb(&format!("input {which} second order"), &r2);
    }
    Ok(suite)
}

/// One suite per primitive.
pub fn primitive_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let r = &mut rng;

    macro_rules! suite {
        ($name:expr, [$($t:expr),*], $f:expr) => {{
            let inputs = vec![$($t),*];
            out.push(primitive_suite($name, inputs, r, &$f)?);
        }};
    }

    let a = uniform(r, &[3, 4], -1.0, 1.0);
    let b = uniform(r, &[3, 4], -1.0, 1.0);
    suite!("add", [a.clone(), b.clone()], |t: &mut Tape, v: &[Var]| {
        let s = t.add(v[0], v[1])?;
        Ok(t.square(s))
    });
    suite!("sub", [a.clone(), b.clone()], |t: &mut Tape, v: &[Var]| {
        let s = t.sub(v[0], v[1])?;
        Ok(t.square(s))
    });
    suite!("mul", [a.clone(), b.clone()], |t: &mut Tape, v: &[Var]| {
        let m = t.mul(v[0], v[1])?;
        t.mul(m, v[1])
    });
    suite!("square", [a.clone()], |t: &mut Tape, v: &[Var]| {
        let s = t.square(v[0]);
        t.mul(s, v[0])
    });
    suite!("sum", [a.clone()], |t: &mut Tape, v: &[Var]| {
        let sq = t.square(v[0]);
        let s = t.sum(sq);
        t.scalar_mul(s, v[0])
    });
    suite!("expand", [uniform(r, &[], 0.5, 1.5), b.clone()], |t: &mut Tape, v: &[Var]| {
        let e = t.expand(v[0], &[3, 4])?;
        let m = t.mul(e, v[1])?;
        t.mul(m, e)
    });
    suite!("affine", [a.clone()], |t: &mut Tape, v: &[Var]| {
        let s = t.affine(v[0], -1.7, 0.3);
        let s = t.square(s);
        Ok(t.affine(s, 0.5, 2.0))
    });
    suite!("scalar_mul", [uniform(r, &[], 0.5, 1.5), a.clone()], |t: &mut Tape, v: &[Var]| {
        let s = t.scalar_mul(v[0], v[1])?;
        let s2 = t.scalar_mul(v[0], s)?;
        t.mul(s2, v[1])
    });
    suite!("powf", [uniform(r, &[5], 0.5, 2.0)], |t: &mut Tape, v: &[Var]| Ok(t.powf(v[0], -0.5)));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [4, 3] } else { [3, 4] };
        let sb = if tb { [2, 4] } else { [4, 2] };
        let name = format!("matmul(ta={ta},tb={tb})");
        let ma = uniform(r, &sa, -1.0, 1.0);
        let mb = uniform(r, &sb, -1.0, 1.0);
        out.push(primitive_suite(&name, vec![ma, mb], r, &move |t: &mut Tape, v: &[Var]| {
            let m = t.matmul_t(v[0], v[1], ta, tb)?;
            Ok(t.square(m))
        })?);
    }
    suite!("bias_add", [uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)], |t: &mut Tape, v: &[Var]| {
        let y = t.bias_add(v[0], v[1])?;
        Ok(t.square(y))
    });
    suite!("relu", [away_from_zero(r, &[3, 4], 0.1, 1.0)], |t: &mut Tape, v: &[Var]| {
        let y = t.relu(v[0]);
        let sq = t.square(v[0]);
        t.mul(y, sq)
    });
    suite!("sigmoid", [uniform(r, &[3, 4], -3.0, 3.0)], |t: &mut Tape, v: &[Var]| Ok(t.sigmoid(v[0])));
    for (stride, pad) in [(1, 0), (2, 2), (1, 1)] {
        let name = format!("conv2d(stride={stride},pad={pad})");
        let x = uniform(r, &[2, 2, 6, 5], -1.0, 1.0);
        let k = uniform(r, &[3, 2, 3, 3], -1.0, 1.0);
        out.push(primitive_suite(&name, vec![x, k], r, &move |t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], Window { stride, pad })?;
            Ok(t.sigmoid(y))
        })?);
    }
    suite!("avg_pool", [uniform(r, &[1, 2, 4, 6], -1.0, 1.0)], |t: &mut Tape, v: &[Var]| {
        let y = t.avg_pool(v[0], 2, 2)?;
        Ok(t.square(y))
    });
    suite!("max_pool", [uniform(r, &[1, 2, 4, 6], -1.0, 1.0)], |t: &mut Tape, v: &[Var]| {
        let y = t.max_pool(v[0], 2, 2)?;
        Ok(t.square(y))
    });
    suite!("reshape", [a.clone()], |t: &mut Tape, v: &[Var]| {
        let y = t.reshape(v[0], &[2, 6])?;
        Ok(t.sigmoid(y))
    });
    suite!("softmax", [uniform(r, &[3, 4], -2.0, 2.0)], |t: &mut Tape, v: &[Var]| t.softmax(v[0]));
    suite!("log_softmax", [uniform(r, &[3, 4], -2.0, 2.0)], |t: &mut Tape, v: &[Var]| t.log_softmax(v[0]));
    suite!("cross_entropy", [uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], 0.1, 1.0)], |t: &mut Tape, v: &[Var]| {
        t.cross_entropy(v[0], v[1])
    });
    Ok(out)
}

/// A small randomly drawn model and batch.
pub struct RandomCase {
    pub model: Model,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Draws an architecture, seed and batch size (≤ 4) from `rng`.
pub fn random_case(rng: &mut ChaCha8Rng) -> Result<RandomCase> {
    let classes = rng.random_range(2..=10);
    let spec = match rng.random_range(0..3) {
        0 => {
            let c = [1, 3][rng.random_range(0..2)];
            let hw = rng.random_range(3..=8);
            ArchSpec::new(Arch::Mlp, [c, hw, hw], classes).with_width(rng.random_range(0.1..0.5))
        }
        1 => {
            let shape = [[1, 28, 28], [3, 32, 32], [1, 12, 12], [3, 10, 10]][rng.random_range(0..4)];
            ArchSpec::new(Arch::LenetSmall, shape, classes).with_width(rng.random_range(0.2..0.6))
        }
        _ => {
            let c = [1, 3][rng.random_range(0..2)];
            let hw = [8, 12][rng.random_range(0..2)];
            ArchSpec::new(Arch::Convmini, [c, hw, hw], classes).with_width(rng.random_range(0.125..0.25))
        }
    };
    let model = build_model(&spec, rng.random())?;
    let batch = rng.random_range(1..=4);
    let [c, h, w] = spec.input_shape;
    let inputs = uniform(rng, &[batch, c, h, w], 0.0, 1.0);
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    Ok(RandomCase { model, inputs, labels })
}

fn sample_coords(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(k);
    all.sort_unstable();
    all
}

/// First-order parameter gradients against central differences, over
/// `configs` random cases with `coords_per_case` sampled coordinates each
/// (all coordinates when the model is smaller than that).
pub fn param_grad_suite(configs: usize, coords_per_case: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = SuiteResult::new("param_grad", PARAM_GRAD_TOL);
    for case_no in 0..configs {
        let case = random_case(&mut rng)?;
        let labels = label_tensor(&case.labels);
        let f = |p: &Tensor| gradients::forward_loss_shifted(&case.model.with_params(p.data().to_vec())?, &case.inputs, &labels);
        let analytic = gradients::param_grad(&case.model, &case.inputs, &labels)?;
        let analytic = Tensor::from_parts(vec![case.model.dim()], analytic.values);
        let at = Tensor::from_parts(vec![case.model.dim()], case.model.params.clone());
        let coords = sample_coords(&mut rng, case.model.dim(), coords_per_case);
        let pattern = |p: &Tensor| gradients::selection_pattern(&case.model.with_params(p.data().to_vec())?, &case.inputs);
        let coords = smooth_coords(coords, &at, pattern, &mut suite)?;
        let r = grad_check(f, &analytic, &at, FD_STEP, Some(&coords))?;
        suite.absorb(&format!("case {case_no} ({}, batch {})", case.model.spec.describe(), case.labels.len()), &r);
    }
    Ok(suite)
}

/// Second-order data gradient of the squared gradient-match loss against
/// central differences of the match loss itself.
pub fn data_grad_suite(configs: usize, coords_per_case: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = SuiteResult::new("match_data_grad", DATA_GRAD_TOL);
    for case_no in 0..configs {
        let case = random_case(&mut rng)?;
        let labels = label_tensor(&case.labels);
        // target gradient from an unrelated batch with the same labels
        let other = uniform(&mut rng, case.inputs.shape(), 0.0, 1.0);
        let target = gradients::param_grad(&case.model, &other, &labels)?;
        let mask = vec![true; case.labels.len()];
        let f = |x: &Tensor| gradients::match_loss(&case.model, x, VirtualLabels::Fixed(&labels), &target, MatchLoss::SquaredL2);
        let analytic = gradients::data_grad_of_match_loss(&case.model, &case.inputs, &labels, &target, &mask)?.1;
        let coords = sample_coords(&mut rng, case.inputs.len(), coords_per_case);
        let coords = smooth_coords(coords, &case.inputs, |x| gradients::selection_pattern(&case.model, x), &mut suite)?;
        let r = grad_check(f, &analytic, &case.inputs, FD_STEP, Some(&coords))?;
        suite.absorb(&format!("case {case_no} ({}, batch {})", case.model.spec.describe(), case.labels.len()), &r);
    }
    Ok(suite)
}

/// Every suite, as run by the `gradcheck` command.
pub fn run_all(configs: usize, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = primitive_suites(seed)?;
    out.push(param_grad_suite(configs, 32, seed ^ 0x9e37_79b9)?);
    out.push(data_grad_suite(configs, 16, seed ^ 0x7f4a_7c15)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{with_backward_sign_flip, OpKind};

    #[test]
    fn every_primitive_suite_passes() {
        for s in primitive_suites(11).unwrap() {
            assert!(s.passed(), "{} failed: {:.3e} ({})", s.name, s.max_rel_err, s.worst);
        }
    }

    #[test]
    fn injected_sign_flip_names_the_op() {
        let results = with_backward_sign_flip(OpKind::Sigmoid, || primitive_suites(11).unwrap());
        let failed: Vec<&str> = results.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
        assert!(failed.contains(&"sigmoid"), "{failed:?}");
        assert!(!failed.contains(&"softmax"));
    }
}
