//! Loss, parameter gradients, and the data gradient of a gradient-matching loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layout::FlatGradient;
use crate::models::Model;
use crate::tensor::{one_hot, Tensor};

/// Converts labels given either as `[B]` class indices or `[B, C]` rows into
/// a `[B, C]` target tensor.
pub fn targets_for(labels: &Tensor, batch: usize, classes: usize) -> Result<Tensor> {
    match *labels.shape() {
        [b] => {
            if b != batch {
                return Err(Error::shape("labels", format!("batch {batch}"), format!("batch {b}")));
            }
            let mut idx = Vec::with_capacity(b);
            for &v in labels.data() {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
                    return Err(Error::shape("labels", format!("class index in [0, {classes})"), v));
                }
                idx.push(v as usize);
            }
            Ok(one_hot(&idx, classes))
        }
        [b, c] => {
            if b != batch || c != classes {
                return Err(Error::shape("labels", format!("[{batch}, {classes}]"), format!("[{b}, {c}]")));
            }
            Ok(labels.clone())
        }
        ref s => Err(Error::shape("labels", "[B] or [B, C]", format!("{:?}", s))),
    }
}

/// Label tensor `[B]` from class indices.
pub fn label_tensor(labels: &[usize]) -> Tensor {
    Tensor::from_parts(vec![labels.len()], labels.iter().map(|&l| l as f64).collect())
}

fn check_batch(model: &Model, inputs: &Tensor) -> Result<()> {
    model.check_input(inputs)?;
    if inputs.batch() == 0 {
        return Err(Error::shape("forward", "non-empty batch", "batch 0"));
    }
    Ok(())
}

/// Mean softmax cross-entropy of `model` over the batch.
pub fn forward_loss(model: &Model, inputs: &Tensor, labels: &Tensor) -> Result<f64> {
    check_batch(model, inputs)?;
    let targets = targets_for(labels, inputs.batch(), model.num_classes())?;
    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape);
    let x = tape.leaf(inputs.clone());
    let t = tape.leaf(targets);
    let logits = model.forward_on(&mut tape, &params, x)?;
    let loss = tape.cross_entropy(logits, t)?;
    Ok(tape.value(loss).item())
}

/// `forward_loss − ln C`, evaluated without ever forming `ln C`.
///
/// Near-uniform logits put the loss at about `ln C`, where one ulp swamps the
/// change a 1e-5 parameter step produces on weakly connected coordinates. The
/// shifted form keeps every intermediate small, so central differences of it
/// resolve much smaller derivatives. Same gradient as [`forward_loss`].
pub fn forward_loss_shifted(model: &Model, inputs: &Tensor, labels: &Tensor) -> Result<f64> {
    check_batch(model, inputs)?;
    let (b, c) = (inputs.batch(), model.num_classes());
    let targets = targets_for(labels, b, c)?;
    let logits = model.forward(inputs)?;
    let mut total = 0.0;
    for i in 0..b {
        let (z, t) = (logits.row(i), targets.row(i));
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|&v| (v - m).exp_m1()).sum::<f64>() / c as f64;
        let lse_shifted = m + s.ln_1p();
        let mass: f64 = t.iter().sum();
        let dot: f64 = z.iter().zip(t).map(|(a, w)| a * w).sum();
        total += mass * lse_shifted - dot;
    }
    let value = total / b as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    Ok(value)
}

/// [`Tape::selection_pattern`] of the forward pass at `inputs`.
pub fn selection_pattern(model: &Model, inputs: &Tensor) -> Result<u64> {
    check_batch(model, inputs)?;
    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape);
    let x = tape.leaf(inputs.clone());
    model.forward_on(&mut tape, &params, x)?;
    Ok(tape.selection_pattern())
}

/// Gradient of the mean loss with respect to the model parameters.
pub fn param_grad(model: &Model, inputs: &Tensor, labels: &Tensor) -> Result<FlatGradient> {
    Ok(loss_and_param_grad(model, inputs, labels)?.1)
}

pub fn loss_and_param_grad(model: &Model, inputs: &Tensor, labels: &Tensor) -> Result<(f64, FlatGradient)> {
    check_batch(model, inputs)?;
    let targets = targets_for(labels, inputs.batch(), model.num_classes())?;
    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape);
    let x = tape.leaf(inputs.clone());
    let t = tape.leaf(targets);
    let logits = model.forward_on(&mut tape, &params, x)?;
    let loss = tape.cross_entropy(logits, t)?;
    let grads = tape.grad(loss, &params)?;
    let mut values = Vec::with_capacity(model.dim());
    for g in grads {
        values.extend_from_slice(tape.value(g).data());
    }
    Ok((tape.value(loss).item(), FlatGradient::new(values, model.layout().clone())?))
}

/// Distance between the gradient induced by virtual data and a captured gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLoss {
    /// `‖g' − g‖²`.
    #[default]
    SquaredL2,
    /// `1 − ⟨g', g⟩ / (‖g'‖ ‖g‖)`.
    Cosine,
}

/// How the virtual labels enter the match objective.
#[derive(Clone, Copy, Debug)]
pub enum VirtualLabels<'a> {
    /// Known labels (`[B]` indices or `[B, C]` rows); not optimized.
    Fixed(&'a Tensor),
    /// Soft labels `softmax(logits)` whose `[B, C]` logits are optimized jointly.
    Learned(&'a Tensor),
}

#[derive(Clone, Debug)]
pub struct MatchEval {
    pub loss: f64,
    /// Derivative of the match loss with respect to the virtual inputs.
    pub input_grad: Tensor,
    /// Derivative with respect to learned label logits, when labels are learned.
    pub label_grad: Option<Tensor>,
}

/// Value of the match loss and its derivatives with respect to the virtual
/// data, computed by differentiating through the recorded parameter-gradient
/// computation.
pub fn match_loss_and_grads(
    model: &Model,
    virtual_inputs: &Tensor,
    labels: VirtualLabels<'_>,
    target_grad: &FlatGradient,
    kind: MatchLoss,
) -> Result<MatchEval> {
    let mut tape = Tape::new();
    let rec = record_match(&mut tape, model, virtual_inputs, labels, target_grad, kind)?;
    let mut wrt = vec![rec.inputs];
    wrt.extend(rec.label_logits);
    let d = tape.grad(rec.objective, &wrt)?;
    Ok(MatchEval {
        loss: rec.value,
        input_grad: tape.value(d[0]).clone(),
        label_grad: rec.label_logits.map(|_| tape.value(d[1]).clone()),
    })
}

/// Value of the match loss only (no second backward pass).
pub fn match_loss(
    model: &Model,
    virtual_inputs: &Tensor,
    labels: VirtualLabels<'_>,
    target_grad: &FlatGradient,
    kind: MatchLoss,
) -> Result<f64> {
    let mut tape = Tape::new();
    Ok(record_match(&mut tape, model, virtual_inputs, labels, target_grad, kind)?.value)
}

struct MatchRecord {
    inputs: Var,
    label_logits: Option<Var>,
    objective: Var,
    value: f64,
}

fn record_match(
    tape: &mut Tape,
    model: &Model,
    virtual_inputs: &Tensor,
    labels: VirtualLabels<'_>,
    target_grad: &FlatGradient,
    kind: MatchLoss,
) -> Result<MatchRecord> {
    check_batch(model, virtual_inputs)?;
    target_grad.check_layout(model.layout())?;
    let (b, c) = (virtual_inputs.batch(), model.num_classes());
    let params = model.param_leaves(tape);
    let x = tape.leaf(virtual_inputs.clone());
    let (targets, label_logits) = match labels {
        VirtualLabels::Fixed(l) => (tape.leaf(targets_for(l, b, c)?), None),
        VirtualLabels::Learned(logits) => {
            if logits.shape() != [b, c] {
                return Err(Error::shape("label logits", format!("[{b}, {c}]"), format!("{:?}", logits.shape())));
            }
            let leaf = tape.leaf(logits.clone());
            (tape.softmax(leaf)?, Some(leaf))
        }
    };
    let logits = model.forward_on(tape, &params, x)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let grads = tape.grad(loss, &params)?;
    let objective = match_objective(tape, &grads, target_grad, kind)?;
    let value = tape.value(objective).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("match loss is {value}")));
    }
    Ok(MatchRecord { inputs: x, label_logits, objective, value })
}

fn match_objective(tape: &mut Tape, grads: &[Var], target: &FlatGradient, kind: MatchLoss) -> Result<Var> {
    let slots = target.layout.slots();
    let mut acc: Option<Var> = None;
    let sum_into = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
        Ok(())
    };
    match kind {
        MatchLoss::SquaredL2 => {
            for (g, slot) in grads.iter().zip(slots) {
                let t = tape.leaf(Tensor::from_parts(slot.shape.clone(), target.slice(slot).to_vec()));
                let d = tape.sub(*g, t)?;
                let sq = tape.square(d);
                let s = tape.sum(sq);
                sum_into(tape, &mut acc, s)?;
            }
            acc.ok_or_else(|| Error::LayoutMismatch("empty layout".into()))
        }
        MatchLoss::Cosine => {
            let target_norm = target.norm_sq().sqrt();
            if target_norm == 0.0 {
                return Err(Error::InvalidArgument("cosine match against a zero gradient".into()));
            }
            let mut norm_acc: Option<Var> = None;
            for (g, slot) in grads.iter().zip(slots) {
                let t = tape.leaf(Tensor::from_parts(slot.shape.clone(), target.slice(slot).to_vec()));
                let prod = tape.mul(*g, t)?;
                let dot = tape.sum(prod);
                sum_into(tape, &mut acc, dot)?;
                let sq = tape.square(*g);
                let n = tape.sum(sq);
                sum_into(tape, &mut norm_acc, n)?;
            }
            let (dot, n2) = match (acc, norm_acc) {
                (Some(d), Some(n)) => (d, n),
                _ => return Err(Error::LayoutMismatch("empty layout".into())),
            };
            let inv_norm = tape.powf(n2, -0.5);
            let inv_norm = tape.scale(inv_norm, 1.0 / target_norm);
            let cos = tape.scalar_mul(inv_norm, dot)?;
            Ok(tape.affine(cos, -1.0, 1.0))
        }
    }
}

/// Gradient of `‖∇θL(virtual_inputs) − target_grad‖²` with respect to the
/// virtual inputs, with rows where `update_mask` is false set to exactly zero.
pub fn data_grad_of_match_loss(
    model: &Model,
    virtual_inputs: &Tensor,
    virtual_labels: &Tensor,
    target_grad: &FlatGradient,
    update_mask: &[bool],
) -> Result<(f64, Tensor)> {
    if update_mask.len() != virtual_inputs.batch() {
        return Err(Error::shape("update_mask", format!("length {}", virtual_inputs.batch()), format!("length {}", update_mask.len())));
    }
    let eval = match_loss_and_grads(model, virtual_inputs, VirtualLabels::Fixed(virtual_labels), target_grad, MatchLoss::SquaredL2)?;
    let mut grad = eval.input_grad;
    apply_row_mask(&mut grad, update_mask);
    Ok((eval.loss, grad))
}

/// Zeroes the leading-axis rows of `t` where `mask` is false.
pub fn apply_row_mask(t: &mut Tensor, mask: &[bool]) {
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            t.row_mut(i).fill(0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |analytic_i − fd_i| / max(1e-8, |fd_i|)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` (the claimed gradient of `f` at `at`) against central
/// differences of `f`. When `coords` is given only those flat indices are
/// perturbed; otherwise every coordinate is.
pub fn grad_check<F>(f: F, analytic: &Tensor, at: &Tensor, step: f64, coords: Option<&[usize]>) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    if analytic.shape() != at.shape() {
        return Err(Error::shape("grad_check", format!("{:?}", at.shape()), format!("{:?}", analytic.shape())));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..at.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut probe = at.clone();
    for &i in coords {
        let x0 = at.data()[i];
        probe.data_mut()[i] = x0 + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("f evaluated to {fp} / {fm} around coordinate {i}")));
        }
        let fd = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / fd.abs().max(1e-8);
        if report.checked == 0 || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = fd;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Arch, ArchSpec};

    #[test]
    fn uniform_logits_give_ln_c() {
        // zero parameters => zero logits for every input
        let spec = ArchSpec::new(Arch::Mlp, [1, 4, 4], 7);
        let m = build_model(&spec, 0).unwrap();
        let m = m.with_params(vec![0.0; m.dim()]).unwrap();
        let x = Tensor::full(&[3, 1, 4, 4], 0.3);
        let loss = forward_loss(&m, &x, &label_tensor(&[0, 3, 6])).unwrap();
        assert!((loss - (7f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logits_give_vanishing_loss() {
        let spec = ArchSpec::new(Arch::Mlp, [1, 2, 2], 3);
        let m = build_model(&spec, 0).unwrap();
        let mut p = vec![0.0; m.dim()];
        // fc2 bias favours class 1 by a huge margin
        let bias = m.layout().slots().last().unwrap().range();
        p[bias.start + 1] = 200.0;
        let m = m.with_params(p).unwrap();
        let loss = forward_loss(&m, &Tensor::zeros(&[2, 1, 2, 2]), &label_tensor(&[1, 1])).unwrap();
        assert!(loss < 1e-80);
    }

    #[test]
    fn label_errors_are_structured() {
        let m = build_model(&ArchSpec::new(Arch::Mlp, [1, 2, 2], 3), 0).unwrap();
        let x = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(matches!(forward_loss(&m, &x, &label_tensor(&[1])), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(forward_loss(&m, &x, &label_tensor(&[1, 3])), Err(Error::ShapeMismatch { .. })));
        assert!(forward_loss(&m, &x, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn mask_length_must_match_batch() {
        let m = build_model(&ArchSpec::new(Arch::Mlp, [1, 2, 2], 3), 0).unwrap();
        let x = Tensor::zeros(&[2, 1, 2, 2]);
        let g = m.flat();
        assert!(data_grad_of_match_loss(&m, &x, &label_tensor(&[0, 1]), &g, &[true]).is_err());
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let m = build_model(&ArchSpec::new(Arch::Mlp, [1, 2, 2], 3), 0).unwrap();
        let other = build_model(&ArchSpec::new(Arch::Mlp, [1, 2, 2], 4), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            data_grad_of_match_loss(&m, &x, &label_tensor(&[0]), &other.flat(), &[true]),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let at = Tensor::new(vec![5], vec![0.3, -1.2, 2.5, 0.0, 7.0]).unwrap();
        let f = |x: &Tensor| Ok(x.data().iter().map(|v| v * v).sum());
        let r = grad_check(f, &at.map(|v| 2.0 * v), &at, 1e-3, None).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn grad_check_rejects_bad_inputs() {
        let at = Tensor::zeros(&[2]);
        let ones = Tensor::ones(&[2]);
        let f = |x: &Tensor| Ok(x.sum());
        assert!(grad_check(f, &ones, &at, 0.0, None).is_err());
        let nan = |_: &Tensor| Ok(f64::NAN);
        assert!(matches!(grad_check(nan, &ones, &at, 1e-3, None), Err(Error::NonFinite(_))));
    }
}
