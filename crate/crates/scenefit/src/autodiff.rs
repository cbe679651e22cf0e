//! Scalar reverse-mode automatic differentiation on an explicit tape.
//!
//! Every differentiable quantity in the library is a [`Var`]: a handle into a
//! [`Tape`] that records, for each operation, its parents and the local
//! partial derivatives evaluated at the forward point. The backward pass is a
//! single reverse sweep accumulating `grad[parent] += grad[node] * partial`,
//! so it never has to re-dispatch on the operation kind.
//!
//! Generic numeric code is written against the [`Scalar`] trait, which both
//! `f64` and `Var` implement. Evaluating the same function with `S = f64`
//! performs the identical floating-point operations in the identical order,
//! which is what makes tape-vs-plain value comparisons exact.
//!
//! Kink conventions: `min2`, `max2` and `abs` take the derivative of the
//! branch actually selected, with ties resolved toward the first operand.
//! This keeps the per-pixel minimum of the photometric loss deterministic.

use std::cell::{Cell, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::{Error, Result};

/// Operation kinds recorded on the tape. Only used for error reporting and
/// introspection; the backward sweep runs off the stored partials alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddC,
    SubC,
    RSubC,
    MulC,
    DivC,
    RDivC,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Min,
    Max,
}

const NO_PARENT: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
    op: OpKind,
}

/// Records a single scalar computation. One tape per optimization instance;
/// a tape is confined to one thread for the duration of a forward/backward
/// pair (it is not `Sync`).
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    n_inputs: Cell<usize>,
    poison: Cell<Option<(usize, OpKind)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            n_inputs: Cell::new(0),
            poison: Cell::new(None),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
            n_inputs: Cell::new(0),
            poison: Cell::new(None),
        }
    }

    /// Clears all recorded nodes but keeps the allocation, so a fresh graph
    /// can be rebuilt every optimization step without reallocating.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.n_inputs.set(0);
        self.poison.set(None);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduces an input variable. Non-finite values poison the tape; the
    /// error surfaces from [`Tape::check`] or [`Tape::backward`].
    pub fn var(&self, value: f64) -> Var<'_> {
        self.n_inputs.set(self.n_inputs.get() + 1);
        self.push(OpKind::Input, [NO_PARENT; 2], [0.0; 2], value)
    }

    /// Number of input variables created so far. Inputs occupy the first
    /// `num_inputs` node slots when created before any arithmetic.
    pub fn num_inputs(&self) -> usize {
        self.n_inputs.get()
    }

    /// A constant (zero-gradient) value on this tape.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(OpKind::Const, [NO_PARENT; 2], [0.0; 2], value)
    }

    fn push(&self, op: OpKind, parents: [u32; 2], partials: [f64; 2], value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NO_PARENT as usize, "tape overflow");
        nodes.push(Node {
            parents,
            partials,
            op,
        });
        if !value.is_finite() && self.poison.get().is_none() {
            self.poison.set(Some((idx, op)));
        }
        Var {
            tape: self,
            idx: idx as u32,
            val: value,
        }
    }

    /// Returns an error if any recorded value was NaN/Inf, identifying the
    /// first offending node.
    pub fn check(&self) -> Result<()> {
        match self.poison.get() {
            None => Ok(()),
            Some((node, op)) => Err(Error::NonFinite {
                op: op_name(op),
                node,
            }),
        }
    }

    /// Reverse sweep from `output`, seeding `d output / d output = seed`.
    /// Returns the gradient with respect to every node; callers usually only
    /// read the input slots. The tape itself is not mutated, so repeated
    /// backward passes yield identical results.
    pub fn backward(&self, output: Var<'_>, seed: f64) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.len()];
        self.backward_into(output, seed, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Tape::backward`] but reuses the caller's buffer.
    pub fn backward_into(&self, output: Var<'_>, seed: f64, grads: &mut Vec<f64>) -> Result<()> {
        self.check()?;
        debug_assert!(std::ptr::eq(output.tape, self));
        let nodes = self.nodes.borrow();
        grads.clear();
        grads.resize(nodes.len(), 0.0);
        grads[output.idx as usize] = seed;
        for i in (0..=output.idx as usize).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NO_PARENT {
                    grads[p as usize] += g * node.partials[k];
                }
            }
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: op_name(nodes[bad].op),
                node: bad,
            });
        }
        Ok(())
    }

    /// Operation kind recorded at a node; introspection and error reporting.
    pub fn op_at(&self, node: usize) -> OpKind {
        self.nodes.borrow()[node].op
    }
}

fn op_name(op: OpKind) -> &'static str {
    match op {
        OpKind::Input => "input",
        OpKind::Const => "const",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Div => "div",
        OpKind::Neg => "neg",
        OpKind::AddC => "add-const",
        OpKind::SubC => "sub-const",
        OpKind::RSubC => "const-sub",
        OpKind::MulC => "mul-const",
        OpKind::DivC => "div-const",
        OpKind::RDivC => "const-div",
        OpKind::Exp => "exp",
        OpKind::Ln => "ln",
        OpKind::Sqrt => "sqrt",
        OpKind::Abs => "abs",
        OpKind::Sin => "sin",
        OpKind::Cos => "cos",
        OpKind::Min => "min",
        OpKind::Max => "max",
    }
}

/// A value recorded on a [`Tape`]. Cheap to copy; arithmetic on it appends
/// nodes to the owning tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} = {})", self.idx, self.val)
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx as usize
    }

    fn unary(self, op: OpKind, partial: f64, value: f64) -> Var<'t> {
        self.tape
            .push(op, [self.idx, NO_PARENT], [partial, 0.0], value)
    }

    fn binary(self, rhs: Var<'t>, op: OpKind, pa: f64, pb: f64, value: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        self.tape.push(op, [self.idx, rhs.idx], [pa, pb], value)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Add, 1.0, 1.0, self.val + rhs.val)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Sub, 1.0, -1.0, self.val - rhs.val)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, OpKind::Mul, rhs.val, self.val, self.val * rhs.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.val;
        self.binary(
            rhs,
            OpKind::Div,
            inv,
            -self.val * inv * inv,
            self.val * inv,
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(OpKind::Neg, -1.0, -self.val)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(OpKind::AddC, 1.0, self.val + c)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.unary(OpKind::SubC, 1.0, self.val - c)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(OpKind::MulC, c, self.val * c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.unary(OpKind::DivC, 1.0 / c, self.val / c)
    }
}

/// Scalar abstraction shared by plain `f64` evaluation and tape recording.
///
/// Division by values of the type, constants on the right of `+ - * /`, and
/// the transcendental set needed by the warping and loss pipelines. Branches
/// in generic code must be taken on `.value()`.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant in the same evaluation context (same tape for [`Var`]).
    fn lift(self, c: f64) -> Self;
    /// `c - self`.
    fn rsub(self, c: f64) -> Self;
    /// `c / self`.
    fn rdiv(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    /// Minimum; ties select the first operand.
    fn min2(self, other: Self) -> Self;
    /// Maximum; ties select the first operand.
    fn max2(self, other: Self) -> Self;

    fn recip(self) -> Self {
        self.rdiv(1.0)
    }
    /// `1 - self`.
    fn one_minus(self) -> Self {
        self.rsub(1.0)
    }
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, c: f64) -> f64 {
        c
    }
    fn rsub(self, c: f64) -> f64 {
        c - self
    }
    fn rdiv(self, c: f64) -> f64 {
        c / self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    fn min2(self, other: f64) -> f64 {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn max2(self, other: f64) -> f64 {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn lift(self, c: f64) -> Var<'t> {
        self.tape.constant(c)
    }
    fn rsub(self, c: f64) -> Var<'t> {
        self.unary(OpKind::RSubC, -1.0, c - self.val)
    }
    fn rdiv(self, c: f64) -> Var<'t> {
        self.unary(OpKind::RDivC, -c / (self.val * self.val), c / self.val)
    }
    fn exp(self) -> Var<'t> {
        let e = self.val.exp();
        self.unary(OpKind::Exp, e, e)
    }
    fn ln(self) -> Var<'t> {
        self.unary(OpKind::Ln, 1.0 / self.val, self.val.ln())
    }
    fn sqrt(self) -> Var<'t> {
        let r = self.val.sqrt();
        self.unary(OpKind::Sqrt, 0.5 / r, r)
    }
    fn abs(self) -> Var<'t> {
        let sign = if self.val >= 0.0 { 1.0 } else { -1.0 };
        self.unary(OpKind::Abs, sign, self.val.abs())
    }
    fn sin(self) -> Var<'t> {
        self.unary(OpKind::Sin, self.val.cos(), self.val.sin())
    }
    fn cos(self) -> Var<'t> {
        self.unary(OpKind::Cos, -self.val.sin(), self.val.cos())
    }
    fn min2(self, other: Var<'t>) -> Var<'t> {
        if self.val <= other.val {
            self.binary(other, OpKind::Min, 1.0, 0.0, self.val)
        } else {
            self.binary(other, OpKind::Min, 0.0, 1.0, other.val)
        }
    }
    fn max2(self, other: Var<'t>) -> Var<'t> {
        if self.val >= other.val {
            self.binary(other, OpKind::Max, 1.0, 0.0, self.val)
        } else {
            self.binary(other, OpKind::Max, 0.0, 1.0, other.val)
        }
    }
}

/// A finished forward pass: the tape plus the output node, ready for any
/// number of backward sweeps.
pub struct Recording {
    tape: Tape,
    output: u32,
    value: f64,
    n_inputs: usize,
}

impl std::fmt::Debug for Recording {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Recording")
            .field("value", &self.value)
            .field("nodes", &self.tape.len())
            .field("inputs", &self.n_inputs)
            .finish()
    }
}

impl Recording {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn num_nodes(&self) -> usize {
        self.tape.len()
    }

    /// Gradient of the output with respect to the recorded inputs, scaled by
    /// `seed`.
    pub fn gradient(&self, seed: f64) -> Result<Vec<f64>> {
        let nodes = self.tape.nodes.borrow();
        let out = Var {
            tape: &self.tape,
            idx: self.output,
            val: self.value,
        };
        drop(nodes);
        let grads = self.tape.backward(out, seed)?;
        Ok(grads[..self.n_inputs].to_vec())
    }
}

/// Identity helper that pins a closure to the differentiable-program
/// signature used by [`record`] and [`grad_check`]. Binding a closure to a
/// variable first loses the higher-ranked lifetime; routing it through this
/// function keeps it.
pub fn program<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    f
}

/// Runs `f` on a fresh tape with the given inputs. The returned value is
/// bit-identical to evaluating the same expression on plain `f64`s, because
/// the tape performs the same floating-point operations in the same order.
pub fn record<F>(inputs: &[f64], f: F) -> Result<Recording>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|&v| tape.var(v)).collect();
    let out = f(&tape, &vars);
    tape.check()?;
    let (idx, val) = (out.idx, out.val);
    drop(vars);
    Ok(Recording {
        tape,
        output: idx,
        value: val,
        n_inputs: inputs.len(),
    })
}

/// Comparison of an analytic gradient against central finite differences.
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    /// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_coordinate: usize,
    /// Analytic derivative at the worst coordinate.
    pub analytic: f64,
    /// Central-difference derivative at the worst coordinate.
    pub numeric: f64,
}

/// Checks the tape gradient of `f` against central finite differences
/// `(f(x+h) - f(x-h)) / 2h` per coordinate. The expression should be smooth
/// near `inputs`; callers perturb away from `min`/`abs` kinks.
pub fn grad_check<F>(f: F, inputs: &[f64], step: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let rec = record(inputs, &f)?;
    let analytic = rec.gradient(1.0)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic: if analytic.is_empty() { 0.0 } else { analytic[0] },
        numeric: 0.0,
    };
    let mut shifted = inputs.to_vec();
    for i in 0..inputs.len() {
        shifted[i] = inputs[i] + step;
        let plus = record(&shifted, &f)?.value();
        shifted[i] = inputs[i] - step;
        let minus = record(&shifted, &f)?.value();
        shifted[i] = inputs[i];
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forward_product() {
        let rec = record(&[3.0, 4.0], |_, v| v[0] * v[1]).unwrap();
        assert_eq!(rec.value(), 12.0);
    }

    #[test]
    fn forward_exp_zero() {
        let rec = record(&[0.0], |_, v| v[0].exp()).unwrap();
        assert_eq!(rec.value(), 1.0);
    }

    #[test]
    fn backward_square() {
        let rec = record(&[3.0], |_, v| v[0] * v[0]).unwrap();
        let g = rec.gradient(1.0).unwrap();
        assert_eq!(g[0], 6.0);
    }

    #[test]
    fn backward_sum_is_ones() {
        let rec = record(&[1.7, -2.4], |_, v| v[0] + v[1]).unwrap();
        let g = rec.gradient(1.0).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
    }

    #[test]
    fn min_subgradient_selects_first_on_tie() {
        let rec = record(&[2.0, 5.0], |_, v| v[0].min2(v[1])).unwrap();
        assert_eq!(rec.gradient(1.0).unwrap(), vec![1.0, 0.0]);

        let tie = record(&[2.0, 2.0], |_, v| v[0].min2(v[1])).unwrap();
        assert_eq!(tie.gradient(1.0).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn gradient_linear_in_seed() {
        let rec = record(&[1.3, 0.4], |_, v| (v[0] * v[1]).sin() + v[0]).unwrap();
        let g1 = rec.gradient(1.0).unwrap();
        let g3 = rec.gradient(3.0).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((a * 3.0 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_is_identical() {
        let rec = record(&[0.3, 0.8], |_, v| (v[0] / v[1]).exp() * v[1]).unwrap();
        let g1 = rec.gradient(1.0).unwrap();
        let g2 = rec.gradient(1.0).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let f = program(|_, v| (v[0] * v[0]).sin());
        let g = program(|_, v| v[0].exp() * v[0]);
        let x = [0.7];
        let gf = record(&x, &f).unwrap().gradient(1.0).unwrap();
        let gg = record(&x, &g).unwrap().gradient(1.0).unwrap();
        let gsum = record(&x, |t: &Tape, v: &[Var<'_>]| f(t, v) + g(t, v))
            .unwrap()
            .gradient(1.0)
            .unwrap();
        assert!((gsum[0] - (gf[0] + gg[0])).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_evaluation_is_reported_with_node() {
        let err = record(&[1.0, 0.0], |_, v| v[0] / v[1]).unwrap_err();
        match err {
            Error::NonFinite { op, .. } => assert_eq!(op, "div"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn nonfinite_input_is_an_error() {
        let err = record(&[f64::NAN], |_, v| v[0] + 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "input", .. }));
    }

    #[test]
    fn grad_check_square() {
        let report = grad_check(|_, v| v[0] * v[0], &[3.0], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn tape_value_matches_plain_evaluation_bitwise() {
        // Same expression evaluated through the Scalar trait on both carriers.
        fn expr<S: Scalar>(x: &[S]) -> S {
            let a = (x[0] * x[1]).exp() / (x[2] + 2.5);
            let b = x[0].sin() * x[2].sqrt() - x[1].rsub(1.0);
            (a + b).abs().min2(x[0] * 10.0)
        }
        let inputs = [0.3, -0.7, 1.9];
        let plain = expr(&inputs);
        let rec = record(&inputs, |_, v| expr(v)).unwrap();
        assert_eq!(rec.value().to_bits(), plain.to_bits());
    }

    #[test]
    fn clear_resets_tape() {
        let tape = Tape::new();
        let a = tape.var(1.0);
        let _ = a * a;
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert_eq!(tape.len(), 0);
        assert_eq!(tape.num_inputs(), 0);
        assert!(tape.check().is_ok());
    }

    proptest! {
        // Every differentiable operation kind agrees with central differences
        // at random smooth points.
        #[test]
        fn prop_ops_match_finite_differences(x in 0.2f64..2.0, y in 0.2f64..2.0) {
            let ops: Vec<(&str, Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>)> = vec![
                ("add", Box::new(|_: &Tape, v: &[Var<'_>]| v[0] + v[1])),
                ("sub", Box::new(|_: &Tape, v: &[Var<'_>]| v[0] - v[1])),
                ("mul", Box::new(|_: &Tape, v: &[Var<'_>]| v[0] * v[1])),
                ("div", Box::new(|_: &Tape, v: &[Var<'_>]| v[0] / v[1])),
                ("neg", Box::new(|_: &Tape, v: &[Var<'_>]| -v[0])),
                ("exp", Box::new(|_: &Tape, v: &[Var<'_>]| v[0].exp())),
                ("ln", Box::new(|_: &Tape, v: &[Var<'_>]| v[0].ln())),
                ("sqrt", Box::new(|_: &Tape, v: &[Var<'_>]| v[0].sqrt())),
                ("sin", Box::new(|_: &Tape, v: &[Var<'_>]| v[0].sin())),
                ("cos", Box::new(|_: &Tape, v: &[Var<'_>]| v[0].cos())),
                ("rsub", Box::new(|_: &Tape, v: &[Var<'_>]| v[0].rsub(2.0))),
                ("rdiv", Box::new(|_: &Tape, v: &[Var<'_>]| v[0].rdiv(3.0))),
                ("addc", Box::new(|_: &Tape, v: &[Var<'_>]| v[0] + 1.25)),
                ("mulc", Box::new(|_: &Tape, v: &[Var<'_>]| v[0] * -0.75)),
            ];
            for (name, f) in &ops {
                let report = grad_check(f, &[x, y], 1e-6).unwrap();
                prop_assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
            }
        }

        #[test]
        fn prop_composite_grad_matches(x in -1.0f64..1.0, y in 0.3f64..1.5) {
            // Avoid abs/min kinks by construction.
            let f = program(|_, v: &[Var<'_>]| {
                ((v[0] * v[1]).sin() + v[1].ln()).exp() / (v[1] + 0.5)
            });
            let report = grad_check(f, &[x, y], 1e-6).unwrap();
            prop_assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
