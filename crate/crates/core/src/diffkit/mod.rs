//! Dense `f64` tensors with a recording tape for reverse-mode gradients.
//!
//! Graphs are ordinary Rust closures over a [`Tape`]. The closure receives
//! [`Bindings`] mapping input names to tape variables and returns the output
//! variable. [`evaluate_with_gradients`] runs the closure once and
//! backpropagates; [`finite_difference_gradient`] runs it `2n` times as an
//! independent central-difference oracle.

mod tape;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use tape::{Gradients, Tape, Var, ARCCOS_CLAMP, GATHER_ZERO};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("gradient requested for non-scalar output of shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
}

/// Named inputs to a graph.
pub type Inputs = BTreeMap<String, Tensor>;

/// Input names bound to their leaf variables on the tape.
#[derive(Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var, DiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownInput(name.to_string()))
    }
}

fn bind(tape: &mut Tape, inputs: &Inputs) -> Bindings {
    let vars = inputs
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect();
    Bindings { vars }
}

fn check_wrt(inputs: &Inputs, wrt: &[&str]) -> Result<(), DiffError> {
    match wrt.iter().find(|name| !inputs.contains_key(**name)) {
        Some(name) => Err(DiffError::UnknownInput(name.to_string())),
        None => Ok(()),
    }
}

/// Pure forward evaluation.
pub fn evaluate<F>(graph: F, inputs: &Inputs) -> Result<Tensor, DiffError>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let bindings = bind(&mut tape, inputs);
    let out = graph(&mut tape, &bindings)?;
    Ok(tape.value(out).clone())
}

/// Forward value plus reverse-mode gradients for every name in `wrt`.
///
/// With an empty `wrt` this is a plain forward pass and the output may have
/// any shape; otherwise the output must hold exactly one element.
pub fn evaluate_with_gradients<F>(
    graph: F,
    inputs: &Inputs,
    wrt: &[&str],
) -> Result<(Tensor, BTreeMap<String, Tensor>), DiffError>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var, DiffError>,
{
    check_wrt(inputs, wrt)?;
    let mut tape = Tape::new();
    let bindings = bind(&mut tape, inputs);
    let out = graph(&mut tape, &bindings)?;
    let value = tape.value(out).clone();
    if wrt.is_empty() {
        return Ok((value, BTreeMap::new()));
    }
    let grads = tape.backward(out)?;
    let mut named = BTreeMap::new();
    for name in wrt {
        named.insert(name.to_string(), grads.wrt(bindings.get(name)?));
    }
    Ok((value, named))
}

/// Central-difference gradient estimate, one coordinate at a time.
pub fn finite_difference_gradient<F>(
    graph: F,
    inputs: &Inputs,
    wrt: &[&str],
    eps: f64,
) -> Result<BTreeMap<String, Tensor>, DiffError>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var, DiffError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(DiffError::InvalidStep(eps));
    }
    check_wrt(inputs, wrt)?;
    let scalar = |inputs: &Inputs| -> Result<f64, DiffError> {
        let out = evaluate(&graph, inputs)?;
        out.item().ok_or(DiffError::NonScalarOutput {
            shape: out.shape().to_vec(),
        })
    };
    // Surface a non-scalar output even when every wrt tensor is empty.
    scalar(inputs)?;

    let mut probe = inputs.clone();
    let mut out = BTreeMap::new();
    for name in wrt {
        let base = inputs[*name].clone();
        let mut grad = Tensor::zeros(base.shape());
        for i in 0..base.numel() {
            let x = base.data()[i];
            probe.get_mut(*name).unwrap().data_mut()[i] = x + eps;
            let plus = scalar(&probe)?;
            probe.get_mut(*name).unwrap().data_mut()[i] = x - eps;
            let minus = scalar(&probe)?;
            probe.get_mut(*name).unwrap().data_mut()[i] = x;
            grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
        out.insert(name.to_string(), grad);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are tiny.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
