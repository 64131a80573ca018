//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Every forward pass, single-sample or batched, goes through the same
//! per-row kernel, so `forward(x)` and row `i` of `forward_batch(X)` are
//! bit-identical.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Batch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed in terms of the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Elu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Elu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Affine layer `y = W x + b`, `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::shape("layer dimensions must be positive"));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "layer {in_dim}->{out_dim} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self { in_dim, out_dim, weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn uniform<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        let bias = (0..out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { in_dim, out_dim, weights, bias }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let w = &self.weights[j * self.in_dim..(j + 1) * self.in_dim];
            *o = self.bias[j] + dot(w, x);
        }
    }
}

/// Fixed-order dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Intermediates recorded by [`Mlp::forward_tape`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Batch>,
    pre: Vec<Batch>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.inputs[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activations: Vec<Activation>,
}

impl Mlp {
    /// Builds a network from explicit layers. `activations` has one entry per
    /// hidden layer; the output layer is always linear.
    pub fn from_layers(layers: Vec<Dense>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("mlp needs at least one layer"));
        }
        if activations.len() + 1 != layers.len() {
            return Err(Error::shape(format!(
                "{} layers need {} hidden activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer output {} does not feed next input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers, activations })
    }

    fn layer_dims(input: usize, hidden: usize, hidden_layers: usize, output: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(hidden_layers + 1);
        let mut prev = input;
        for _ in 0..hidden_layers {
            dims.push((prev, hidden));
            prev = hidden;
        }
        dims.push((prev, output));
        dims
    }

    /// Randomly initialized ELU network with `hidden_layers` hidden layers of width `hidden`.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let layers = Self::layer_dims(input, hidden, hidden_layers, output)
            .into_iter()
            .map(|(i, o)| Dense::uniform(i, o, rng))
            .collect();
        Self { layers, activations: vec![Activation::Elu; hidden_layers] }
    }

    pub fn zeros(input: usize, hidden: usize, hidden_layers: usize, output: usize) -> Self {
        let layers = Self::layer_dims(input, hidden, hidden_layers, output)
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Self { layers, activations: vec![Activation::Elu; hidden_layers] }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Batch::from_row(input))?.into_data())
    }

    pub fn forward_batch(&self, input: &Batch) -> Result<Batch> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = Batch::zeros(x.rows(), layer.out_dim);
            for i in 0..x.rows() {
                layer.forward_row(x.row(i), y.row_mut(i));
            }
            if let Some(act) = self.activations.get(l) {
                for v in y.data_mut() {
                    *v = act.apply(*v);
                }
            }
            x = y;
        }
        Ok(x)
    }

    /// Forward pass that keeps what [`Mlp::backward_batch`] needs.
    pub fn forward_tape(&self, input: &Batch) -> Result<(Batch, Tape)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.activations.len());
        let mut x = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = Batch::zeros(x.rows(), layer.out_dim);
            for i in 0..x.rows() {
                layer.forward_row(x.row(i), y.row_mut(i));
            }
            inputs.push(x);
            x = match self.activations.get(l) {
                Some(act) => {
                    let mut a = y.clone();
                    for v in a.data_mut() {
                        *v = act.apply(*v);
                    }
                    pre.push(y);
                    a
                }
                None => y,
            };
        }
        Ok((x, Tape { inputs, pre }))
    }

    /// Accumulates parameter gradients of `sum(output * output_grad)` into
    /// `grads` and returns the gradient with respect to the input batch.
    pub fn backward_batch(&self, tape: &Tape, output_grad: &Batch, grads: &mut MlpGrads) -> Result<Batch> {
        if output_grad.rows() != tape.rows() || output_grad.cols() != self.output_dim() {
            return Err(Error::shape(format!(
                "output grad {}x{} does not match forward {}x{}",
                output_grad.rows(),
                output_grad.cols(),
                tape.rows(),
                self.output_dim()
            )));
        }
        if !grads.matches(self) {
            return Err(Error::shape("gradient buffer does not match network"));
        }
        let rows = tape.rows();
        let mut g = output_grad.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l < self.activations.len() {
                let act = self.activations[l];
                for (gv, p) in g.data_mut().iter_mut().zip(tape.pre[l].data()) {
                    *gv *= act.derivative(*p);
                }
            }
            let x = &tape.inputs[l];
            let lg = &mut grads.layers[l];
            let mut gx = Batch::zeros(rows, layer.in_dim);
            for i in 0..rows {
                let gi = g.row(i);
                let xi = x.row(i);
                let gxi = gx.row_mut(i);
                for (j, &gij) in gi.iter().enumerate() {
                    if gij == 0.0 {
                        continue;
                    }
                    lg.bias[j] += gij;
                    axpy(gij, xi, &mut lg.weights[j * layer.in_dim..(j + 1) * layer.in_dim]);
                    axpy(gij, &layer.weights[j * layer.in_dim..(j + 1) * layer.in_dim], gxi);
                }
            }
            g = gx;
        }
        Ok(g)
    }

    /// Single-sample reverse pass: gradients of `output . output_grad` with
    /// respect to the parameters and the input.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let (_, tape) = self.forward_tape(&Batch::from_row(input))?;
        let mut grads = MlpGrads::zeros_like(self);
        let gx = self.backward_batch(&tape, &Batch::from_row(output_grad), &mut grads)?;
        Ok((grads, gx.into_data()))
    }

    fn check_input(&self, input: &Batch) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects input dim {}, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        Ok(())
    }

    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(&mut f);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat parameter vector has {} entries, network has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter();
        self.for_each_param_mut(|p| *p = *it.next().unwrap());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient buffer shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrads { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn matches(&self, mlp: &Mlp) -> bool {
        self.layers.len() == mlp.layers.len()
            && self
                .layers
                .iter()
                .zip(&mlp.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    pub fn zero(&mut self) {
        self.for_each_mut(|v| *v = 0.0);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(&mut f);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_mut(|v| *v *= s);
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    /// Rebuilds a buffer shaped like `mlp` from a flat vector in parameter order.
    pub fn from_flat(mlp: &Mlp, flat: &[f64]) -> Result<Self> {
        let mut g = Self::zeros_like(mlp);
        if flat.len() != mlp.num_params() {
            return Err(Error::shape("flat gradient length does not match network"));
        }
        let mut it = flat.iter();
        g.for_each_mut(|v| *v = *it.next().unwrap());
        Ok(g)
    }
}

/// Clips a set of gradient buffers to a joint L2 norm. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut MlpGrads], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(3, 8, 2, 4);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn identity_linear_layer() {
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let net = Mlp::from_layers(vec![Dense::new(3, 3, w, vec![0.0; 3]).unwrap()], vec![]).unwrap();
        assert_eq!(net.forward(&[0.3, -1.5, 2.0]).unwrap(), vec![0.3, -1.5, 2.0]);
    }

    #[test]
    fn hand_evaluated_two_layer_net() {
        // h = elu(W1 x + b1), y = W2 h + b2 with x = [1, -1]
        let l1 = Dense::new(2, 2, vec![1.0, 2.0, -1.0, 0.5], vec![0.5, 0.0]).unwrap();
        let l2 = Dense::new(2, 1, vec![2.0, -1.0], vec![0.25]).unwrap();
        let net = Mlp::from_layers(vec![l1, l2], vec![Activation::Elu]).unwrap();
        // pre = [1 - 2 + 0.5, -1 - 0.5] = [-0.5, -1.5]
        let h0 = (-0.5f64).exp() - 1.0;
        let h1 = (-1.5f64).exp() - 1.0;
        let expected = 2.0 * h0 - h1 + 0.25;
        let y = net.forward(&[1.0, -1.0]).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn wrong_input_dim_is_shape_error() {
        let net = Mlp::zeros(3, 4, 1, 2);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
        assert!(matches!(net.backward(&[0.0; 3], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let r = Mlp::from_layers(vec![Dense::zeros(2, 3), Dense::zeros(4, 1)], vec![Activation::Elu]);
        assert!(r.is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(3, 5, 2, 2, &mut rng);
        let (g, gx) = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_bias_gradient_equals_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(3, 5, 0, 2, &mut rng);
        let (g, _) = net.backward(&[0.4, -0.2, 1.0], &[0.7, -1.3]).unwrap();
        assert_eq!(g.layers[0].bias, vec![0.7, -1.3]);
    }

    #[test]
    fn batch_rows_match_single_forward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(7, 16, 2, 3, &mut rng);
        let xs: Vec<f64> = (0..5 * 7).map(|i| (i as f64 * 0.37).sin()).collect();
        let batch = Batch::new(5, 7, xs).unwrap();
        let out = net.forward_batch(&batch).unwrap();
        for i in 0..5 {
            assert_eq!(net.forward(batch.row(i)).unwrap(), out.row(i));
        }
    }

    #[test]
    fn clip_scales_to_threshold() {
        let net = Mlp::zeros(1, 1, 0, 1);
        let mut g = MlpGrads::zeros_like(&net);
        g.layers[0].weights[0] = 30.0;
        g.layers[0].bias[0] = 40.0;
        let norm = clip_global_norm(&mut [&mut g], 10.0);
        assert_eq!(norm, 50.0);
        assert!((g.sq_norm().sqrt() - 10.0).abs() < 1e-5);
    }
}
