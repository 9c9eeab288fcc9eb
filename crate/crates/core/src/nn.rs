//! Shared layer building blocks and parameter traversal.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Visits named parameter matrices in a fixed order.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, m| ok &= m.is_finite());
        ok
    }

    /// Names in visit order.
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }
}

/// Graph handles of a module's parameters, in the module's visit order.
pub trait Bound {
    fn vars(&self) -> Vec<Var>;
}

/// Affine map `x·W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Scalar> Linear<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Matrix::uniform(input, output, bound, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> LinearVars {
        LinearVars {
            weight: g.param(self.weight.clone()),
            bias: g.param(self.bias.clone()),
        }
    }

    /// Plain forward pass without recording a graph.
    pub fn apply(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.weight);
        for r in 0..y.rows() {
            for (v, &b) in y.row_mut(r).iter_mut().zip(self.bias.row(0)) {
                *v += b;
            }
        }
        y
    }

    pub fn visit_prefixed(&self, prefix: &str, f: &mut dyn FnMut(&str, &Matrix<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.linear(x, self.weight, self.bias)
    }

    pub fn push_vars(&self, out: &mut Vec<Var>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

/// Leaky rectifier slope used by every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu_matrix<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let s = T::lit(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { v * s })
}
