//! Finite-difference gradient checking.
//!
//! The numeric side only ever runs forward evaluations on fresh tapes, so it
//! shares no code with the backward rules it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::element::Element;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Comparison between tape gradients and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Per-input relative error over the checked coordinates.
    pub per_input: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub coords: Vec<Vec<usize>>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`, or 0 when all three vanish.
///
/// The floor keeps a structurally zero gradient (rounding noise on the tape
/// side, an exact zero on the numeric side) from reading as a 100% error.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn).max(floor);
    if denom < 1e-300 {
        0.0
    } else {
        diff / denom
    }
}

/// Records `f` with every input as a leaf and returns the leaf gradients.
pub fn tape_gradients<T: Element, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Evaluates `f` forward only, with inputs recorded as constants.
pub fn evaluate<T: Element, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.value(root).item().as_f64())
}

/// Fourth-order difference of a scalar function of several tensors at one
/// coordinate of input `which`, from samples at ±step and ±2·step.
///
/// The weights are the derivative at zero of the cubic through the samples,
/// taken at the offsets that survive rounding to `T`, so the estimate stays
/// fourth order even when `T` cannot represent `x ± step` exactly.
pub fn central_difference<T: Element>(
    eval: &dyn Fn(&[Tensor<T>]) -> Result<f64>,
    inputs: &[Tensor<T>],
    which: usize,
    coord: usize,
    step: f64,
) -> Result<f64> {
    let x = inputs[which].data()[coord];
    let mut shifted = inputs.to_vec();
    let mut offsets = [0.0; 4];
    let mut values = [0.0; 4];
    for (k, m) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
        let xv = T::from_f64(x.as_f64() + m * step);
        offsets[k] = xv.as_f64() - x.as_f64();
        shifted[which] = inputs[which].with_value(coord, xv);
        values[k] = eval(&shifted)?;
    }
    Ok(derivative_at_zero(&offsets, &values))
}

/// Derivative at 0 of the polynomial interpolating `(o_i, f_i)`; no node may
/// sit at 0 and nodes must be distinct.
fn derivative_at_zero(o: &[f64], f: &[f64]) -> f64 {
    let n = o.len();
    let mut total = 0.0;
    for i in 0..n {
        // L_i'(0) = sum over k != i of 1/(o_i - o_k) * prod over j != i,k of (0 - o_j)/(o_i - o_j)
        let mut w = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            let mut term = 1.0 / (o[i] - o[k]);
            for j in (0..n).filter(|&j| j != i && j != k) {
                term *= -o[j] / (o[i] - o[j]);
            }
            w += term;
        }
        total += w * f[i];
    }
    total
}

/// Picks up to `per_input` random coordinates of each input.
pub fn pick_coords<T: Element, R: Rng + ?Sized>(inputs: &[Tensor<T>], per_input: usize, rng: &mut R) -> Vec<Vec<usize>> {
    inputs
        .iter()
        .map(|t| {
            if t.len() <= per_input {
                (0..t.len()).collect()
            } else {
                let mut c = sample(rng, t.len(), per_input).into_vec();
                c.sort_unstable();
                c
            }
        })
        .collect()
}

/// Denominator floor of [`relative_error`] as a fraction of the norm of
/// the whole checked numeric gradient.
pub const FLOOR_FRACTION: f64 = 1e-6;

fn scale_of(parts: &[Vec<f64>]) -> f64 {
    parts.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Checks tape gradients of `f` against central differences of `f` itself.
pub fn check<T: Element, F>(f: F, inputs: &[Tensor<T>], coords: &[Vec<usize>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<T>]| evaluate(&f, xs);
    check_against(&f, &eval, inputs, coords, step)
}

/// Checks tape gradients of `f` against central differences of a separate
/// evaluator of the same function, typically a 64-bit promotion of a
/// 32-bit model so the numeric side is free of single-precision noise.
pub fn check_against<T: Element, F>(
    f: &F,
    eval: &dyn Fn(&[Tensor<T>]) -> Result<f64>,
    inputs: &[Tensor<T>],
    coords: &[Vec<usize>],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let grads = tape_gradients(f, inputs)?;
    let mut report = GradCheckReport {
        per_input: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
        coords: coords.to_vec(),
    };
    for (i, cs) in coords.iter().enumerate() {
        let a: Vec<f64> = cs.iter().map(|&c| grads[i].data()[c].as_f64()).collect();
        let n = cs
            .iter()
            .map(|&c| central_difference(eval, inputs, i, c, step))
            .collect::<Result<Vec<f64>>>()?;
        report.analytic.push(a);
        report.numeric.push(n);
    }
    let floor = FLOOR_FRACTION * scale_of(&report.numeric);
    for (a, n) in report.analytic.iter().zip(&report.numeric) {
        report.per_input.push(relative_error(a, n, floor));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0], 0.0), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.0, 0.1], 0.0) - 0.1).abs() < 1e-2);
        assert_eq!(relative_error(&[1e-20], &[0.0], 0.0), 1.0);
        assert!(relative_error(&[1e-20], &[0.0], 1e-8) < 1e-11);
    }

    #[test]
    fn stencil_is_exact_on_quartics_minus_leading_term() {
        // a cubic is reproduced exactly, including asymmetric offsets
        let p = |t: f64| 2.0 - 3.0 * t + 0.5 * t * t + 4.0 * t * t * t;
        for o in [[-0.2, -0.1, 0.1, 0.2], [-0.21, -0.09, 0.1, 0.23]] {
            let f: Vec<f64> = o.iter().map(|&t| p(t)).collect();
            assert!((derivative_at_zero(&o, &f) + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn check_detects_a_wrong_gradient() {
        // d/dx of sum(x*x) computed correctly by the tape
        let x = Tensor::<f64>::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        };
        let r = check(f, std::slice::from_ref(&x), &[vec![0, 1, 2]], 1e-5).unwrap();
        assert!(r.max_rel_error() < 1e-8);
        // an evaluator of a different function must disagree
        let wrong = |xs: &[Tensor<f64>]| Ok(xs[0].data().iter().map(|v| v * v * v).sum::<f64>());
        let r = check_against(&f, &wrong, &[x], &[vec![0, 1, 2]], 1e-5).unwrap();
        assert!(r.max_rel_error() > 0.1);
    }
}
