use crate::Scalar;

/// A named trainable array with its accumulated gradient.
///
/// Non-trainable state (batch-norm running statistics) uses the same type with
/// an empty `grad`.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            name: name.into(),
            shape,
            value,
            grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything owning parameters. Visitation order is stable and defines the
/// layout used by optimizers and checkpoint archives.
pub trait Module<T: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}

    fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// Flattened copy of every parameter value in visitation order.
    fn flat_params(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend(p.value.iter().map(|v| v.as_f64())));
        out
    }

    fn flat_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend(p.grad.iter().map(|v| v.as_f64())));
        out
    }

    /// Mutable access to a single scalar by flat index (parameters only).
    fn with_param_coord(&mut self, index: usize, f: &mut dyn FnMut(&mut T)) -> bool {
        let mut offset = 0;
        let mut hit = false;
        self.visit_params(&mut |p| {
            if !hit && index < offset + p.len() {
                f(&mut p.value[index - offset]);
                hit = true;
            }
            offset += p.len();
        });
        hit
    }
}

/// Prefix every parameter and buffer name of a freshly built layer.
pub fn prefix_names<T: Scalar>(module: &mut dyn Module<T>, prefix: &str) {
    module.visit_params(&mut |p| p.name = format!("{prefix}.{}", p.name));
    module.visit_buffers(&mut |p| p.name = format!("{prefix}.{}", p.name));
}
