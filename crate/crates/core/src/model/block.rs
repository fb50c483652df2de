use rand::Rng;
use shm_nn::{prefix_names, BatchNorm2d, Conv2d, Module, Param, Relu, Scalar, Tensor};

/// Convolution, optional batch normalization, ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: Option<BatchNorm2d<T>>,
    relu: Relu<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        batchnorm: bool,
        rng: &mut R,
    ) -> Self {
        let mut block = Self {
            conv: Conv2d::new(in_ch, out_ch, kernel, rng),
            bn: batchnorm.then(|| BatchNorm2d::new(out_ch)),
            relu: Relu::new(),
        };
        prefix_names(&mut block.conv, &format!("{name}.conv"));
        if let Some(bn) = block.bn.as_mut() {
            prefix_names(bn, &format!("{name}.bn"));
        }
        block
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut y = self.conv.forward(x, train);
        if let Some(bn) = self.bn.as_mut() {
            y = bn.forward(&y, train);
        }
        self.relu.forward(&y, train)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Tensor<T> {
        let mut g = self.relu.backward(g);
        if let Some(bn) = self.bn.as_mut() {
            g = bn.backward(&g);
        }
        self.conv.backward(&g)
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
        if let Some(bn) = self.bn.as_mut() {
            bn.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(bn) = self.bn.as_mut() {
            bn.visit_buffers(f);
        }
    }
}

/// Round `size` up to a multiple of `multiple`.
pub(crate) fn round_up(size: usize, multiple: usize) -> usize {
    size.div_ceil(multiple) * multiple
}
