//! Dense row-major tensors and named model parameters.

use super::scalar::Scalar;

/// N-dimensional dense array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            values.len(),
            numel,
            "tensor: {} values do not fill shape {:?}",
            values.len(),
            shape
        );
        Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); numel])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Additive accumulation into a pre-zeroed gradient slot.
    pub fn accumulate_grad(&mut self, delta: &[F]) {
        assert_eq!(delta.len(), self.values.len(), "gradient shape mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Identity of a parameter, stable across a model's lifetime. Parameters
/// created by expansion get fresh ids; ids never get reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u64);

/// A named, trainable-or-frozen tensor tagged with the phase that created it.
///
/// `origin_phase` together with the name prefix realizes the partition into
/// shared dense parameters, old-phase expert/gating parameters, and
/// current-phase expert/gating parameters.
#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar> {
    pub id: ParamId,
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
    pub origin_phase: usize,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(id: ParamId, name: impl Into<String>, tensor: Tensor<F>, origin_phase: usize) -> Self {
        Parameter {
            id,
            name: name.into(),
            tensor,
            trainable: true,
            origin_phase,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.tensor.shape
    }

    pub fn values(&self) -> &[F] {
        &self.tensor.values
    }
}

/// Anything that owns an ordered collection of parameters.
///
/// Iteration order must be deterministic and stable within a phase; the
/// optimizer, checkpointing and gradient checking all walk parameters
/// through this trait.
pub trait ParamStore<F: Scalar> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<F>));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<F>));

    fn zero_grads(&mut self) {
        self.for_each_param_mut(&mut |p| p.tensor.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_| n += 1);
        n
    }

    fn value_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.tensor.numel());
        n
    }
}

/// Flat list of parameters; the simplest `ParamStore`, used by tests and by
/// snapshots.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Scalar> {
    pub params: Vec<Parameter<F>>,
}

impl<F: Scalar> ParamStore<F> for ParamSet<F> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<F>)) {
        for p in &self.params {
            f(p);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<F>)) {
        for p in &mut self.params {
            f(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_values() {
        let t = Tensor::new(vec![2, 3], vec![0.0f32; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "do not fill shape")]
    fn tensor_rejects_bad_shape() {
        let _ = Tensor::new(vec![2, 3], vec![0.0f32; 5]);
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::new(vec![2], vec![1.0f64, 2.0]);
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 0.0][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }
}
