//! Feedforward networks built from dense layers, with exact analytic
//! gradients.
//!
//! Weights are stored `[out, in]` row-major and inputs are `[batch, in]`
//! (a plain vector of length `in` is treated as a batch of one).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::RealBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Sigmoid => v.iter_mut().for_each(|x| *x = sigmoid(*x)),
        }
    }

    /// Multiply `grad` in place by the activation derivative, expressed in
    /// terms of the activation's output.
    fn backprop(self, output: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.iter_mut().zip(output).for_each(|(g, &y)| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Sigmoid => grad
                .iter_mut()
                .zip(output)
                .for_each(|(g, &y)| *g *= y * (1.0 - y)),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: RealBuffer,
    pub bias: RealBuffer,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Parameters of a feedforward network. Also used as the container for
/// gradients, which are congruent to the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<DenseLayer>,
}

impl NetworkParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 {
                return Err(Error::Shape(format!("layer {k}: weight must be a matrix")));
            }
            if layer.bias.shape() != [layer.out_dim()] {
                return Err(Error::Shape(format!(
                    "layer {k}: bias shape {:?} does not match {} outputs",
                    layer.bias.shape(),
                    layer.out_dim()
                )));
            }
            if layer.activation == Activation::Sigmoid && k + 1 != layers.len() {
                return Err(Error::Shape(format!(
                    "layer {k}: sigmoid is only allowed as the final activation"
                )));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} expects {} inputs but layer {} emits {}",
                    layer.in_dim(),
                    k - 1,
                    layers[k - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Multilayer perceptron with relu hidden layers, initialized uniformly
    /// in `±1/sqrt(fan_in)`.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let weight: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-scale..scale))
                .collect();
            let bias: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-scale..scale)).collect();
            let activation = if k + 2 == dims.len() {
                output_activation
            } else {
                Activation::Relu
            };
            layers.push(DenseLayer {
                weight: RealBuffer::matrix(fan_out, fan_in, weight)?,
                bias: RealBuffer::vector(bias)?,
                activation,
            });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(RealBuffer::len).sum()
    }

    /// All tensors in a fixed order: weight then bias, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &RealBuffer> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut RealBuffer> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn is_congruent(&self, other: &NetworkParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.tensors().zip(other.tensors()).all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(RealBuffer::is_finite)
    }

    /// Flat view of parameter `index` in [`tensors`](Self::tensors) order.
    #[cfg(test)]
    pub(crate) fn value_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t.data_mut()[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Evaluate without caching; usable from shared references.
    pub fn predict(&self, input: &RealBuffer) -> Result<RealBuffer> {
        let batch = self.check_input(input)?;
        let mut act = input.data().to_vec();
        for layer in &self.layers {
            act = layer_forward(layer, &act, batch);
        }
        let out = RealBuffer::matrix(batch, self.output_dim(), act)?;
        out.ensure_finite("network output")?;
        Ok(out)
    }

    /// Smallest `|pre-activation|` over every relu unit for this input, or
    /// infinity when the net has no relu layer.
    pub fn relu_margin(&self, input: &RealBuffer) -> Result<f64> {
        let batch = self.check_input(input)?;
        let mut act = input.data().to_vec();
        let mut margin = f64::INFINITY;
        for layer in &self.layers {
            let mut pre = layer_forward(
                &DenseLayer {
                    activation: Activation::Identity,
                    ..layer.clone()
                },
                &act,
                batch,
            );
            if layer.activation == Activation::Relu {
                margin = pre.iter().fold(margin, |m, z| m.min(z.abs()));
            }
            layer.activation.apply(&mut pre);
            act = pre;
        }
        Ok(margin)
    }

    fn check_input(&self, input: &RealBuffer) -> Result<usize> {
        if input.shape().len() > 2 || input.width() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects inputs of width {}, got shape {:?}",
                self.input_dim(),
                input.shape()
            )));
        }
        Ok(input.rows())
    }
}

fn layer_forward(layer: &DenseLayer, input: &[f64], batch: usize) -> Vec<f64> {
    let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
    let mut out = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        out.extend_from_slice(layer.bias.data());
    }
    // out[b, o] += sum_i input[b, i] * W[o, i]
    gemm(
        batch,
        n_in,
        n_out,
        input,
        (n_in as isize, 1),
        layer.weight.data(),
        (1, n_in as isize),
        &mut out,
        1.0,
    );
    layer.activation.apply(&mut out);
    out
}

/// `c = a·b + beta·c` for row-major `c` of shape `[m, n]`, with `a` of shape
/// `[m, k]` and `b` of shape `[k, n]` given through explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    // SAFETY: the assertions above bound every index reachable through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    batch: usize,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Post-activation output of each layer.
    outputs: Vec<Vec<f64>>,
}

/// A network together with the activations cached by its last forward pass.
#[derive(Debug, Clone)]
pub struct Network {
    params: NetworkParams,
    cache: Option<ForwardCache>,
}

impl Network {
    pub fn new(params: NetworkParams) -> Self {
        Self {
            params,
            cache: None,
        }
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    /// Mutable access invalidates cached activations.
    pub fn params_mut(&mut self) -> &mut NetworkParams {
        self.cache = None;
        &mut self.params
    }

    pub fn into_params(self) -> NetworkParams {
        self.params
    }

    pub fn predict(&self, input: &RealBuffer) -> Result<RealBuffer> {
        self.params.predict(input)
    }

    pub fn forward(&mut self, input: &RealBuffer) -> Result<RealBuffer> {
        let batch = self.params.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.params.layers.len());
        let mut outputs = Vec::with_capacity(self.params.layers.len());
        let mut act = input.data().to_vec();
        for layer in &self.params.layers {
            let out = layer_forward(layer, &act, batch);
            inputs.push(act);
            act = out.clone();
            outputs.push(out);
        }
        let result = RealBuffer::matrix(batch, self.params.output_dim(), act)?;
        result.ensure_finite("network output")?;
        self.cache = Some(ForwardCache {
            batch,
            inputs,
            outputs,
        });
        Ok(result)
    }

    /// Gradients of a scalar loss w.r.t. every weight and bias, given the
    /// loss gradient at the output of the most recent [`forward`](Self::forward).
    pub fn backward(&self, loss_gradient_at_output: &RealBuffer) -> Result<NetworkParams> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let out_dim = self.params.output_dim();
        if loss_gradient_at_output.len() != cache.batch * out_dim
            || loss_gradient_at_output.width() != out_dim
        {
            return Err(Error::Shape(format!(
                "output gradient shape {:?} does not match cached batch [{}, {}]",
                loss_gradient_at_output.shape(),
                cache.batch,
                out_dim
            )));
        }

        let batch = cache.batch;
        let mut grads = self.params.zeros_like();
        let mut delta = loss_gradient_at_output.data().to_vec();
        for k in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[k];
            let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
            layer.activation.backprop(&cache.outputs[k], &mut delta);

            let g = &mut grads.layers[k];
            // dW[o, i] = sum_b delta[b, o] * x[b, i]
            gemm(
                n_out,
                batch,
                n_in,
                &delta,
                (1, n_out as isize),
                &cache.inputs[k],
                (n_in as isize, 1),
                g.weight.data_mut(),
                0.0,
            );
            let db = g.bias.data_mut();
            for row in delta.chunks_exact(n_out) {
                db.iter_mut().zip(row).for_each(|(acc, d)| *acc += d);
            }

            if k > 0 {
                // dx[b, i] = sum_o delta[b, o] * W[o, i]
                let mut upstream = vec![0.0; batch * n_in];
                gemm(
                    batch,
                    n_out,
                    n_in,
                    &delta,
                    (n_out as isize, 1),
                    layer.weight.data(),
                    (n_in as isize, 1),
                    &mut upstream,
                    0.0,
                );
                delta = upstream;
            }
        }
        Ok(grads)
    }
}
