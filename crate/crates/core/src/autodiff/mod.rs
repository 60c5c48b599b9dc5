//! Reverse-mode differentiation over dense tensors, plus Adam, the
//! learning-rate schedule and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
pub mod kernels;
mod scalar;
mod schedule;
mod tensor;

pub use adam::{AdamConfig, AdamSlot, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{BnStats, Gradients, Graph, NormMode, Var};
pub use scalar::Scalar;
pub use schedule::LrSchedule;
pub use tensor::Tensor;

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {stage} of {op}")]
    NonFinite { op: &'static str, stage: &'static str },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("{0}")]
    Invalid(String),
}

/// Anything that owns named parameter tensors.
pub trait Parameterized<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

/// A plain name → tensor map, handy for small checks.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> Parameterized<T> for ParamMap<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (k, v) in self {
            f(k, v);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (k, v) in self.iter_mut() {
            f(k, v);
        }
    }
}
