//! Adam with one state object per module, so each module keeps its own learning rate.

use crate::autodiff::{Gradients, Var};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grads` for the parameters bound to `vars` (module visit order).
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>, vars: &[Var]) {
        assert_eq!(module.param_names().len(), vars.len(), "parameter/var count mismatch");
        let mut i = 0;
        self.apply_inner(module, &mut |(r, c)| {
            let g = grads.get_or_zeros(vars[i], r, c);
            i += 1;
            g
        });
    }

    /// Same as [`Adam::step`] with one caller-provided gradient per parameter.
    pub fn step_with<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &[Matrix<T>]) {
        let mut i = 0;
        self.apply_inner(module, &mut |shape| {
            let g = grads[i].clone();
            assert_eq!(g.shape(), shape, "gradient shape mismatch");
            i += 1;
            g
        });
    }

    fn apply_inner<M: Module<T> + ?Sized>(&mut self, module: &mut M, next_grad: &mut dyn FnMut((usize, usize)) -> Matrix<T>) {
        if self.lr == 0.0 {
            return;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = T::lit(self.lr * c2.sqrt() / c1);
        let eps = T::lit(self.eps * c2.sqrt());
        let (tb1, tb2) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let first = &mut self.first;
        let second = &mut self.second;
        let mut idx = 0;
        module.visit_mut(&mut |_, p| {
            let g = next_grad(p.shape());
            if first.len() <= idx {
                first.push(Matrix::zeros(p.rows(), p.cols()));
                second.push(Matrix::zeros(p.rows(), p.cols()));
            }
            let m = first[idx].as_mut_slice();
            let v = second[idx].as_mut_slice();
            for (((w, &gi), mi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = tb1 * *mi + ob1 * gi;
                *vi = tb2 * *vi + ob2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() + eps);
            }
            idx += 1;
        });
    }
}
