//! Fully connected encoder/decoder networks with manual backpropagation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl TryFrom<LayerRepr> for Layer {
    type Error = Error;

    fn try_from(r: LayerRepr) -> Result<Self> {
        if r.weights.len() != r.inputs * r.outputs || r.bias.len() != r.outputs {
            return Err(Error::invalid("layer", "weight or bias length does not match its shape"));
        }
        if r.weights.iter().chain(&r.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer weights".into()));
        }
        Ok(Layer {
            weights: DMatrix::from_row_slice(r.outputs, r.inputs, &r.weights),
            bias: DVector::from_vec(r.bias),
        })
    }
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        let (outputs, inputs) = l.weights.shape();
        LayerRepr {
            inputs,
            outputs,
            weights: l.weights.transpose().as_slice().to_vec(),
            bias: l.bias.as_slice().to_vec(),
        }
    }
}

/// An MLP; the activation follows every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetRepr", into = "NetRepr")]
pub struct CoderNet {
    layers: Vec<Layer>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetRepr {
    activation: Activation,
    layers: Vec<Layer>,
}

impl TryFrom<NetRepr> for CoderNet {
    type Error = Error;

    fn try_from(r: NetRepr) -> Result<Self> {
        CoderNet::new(r.layers, r.activation)
    }
}

impl From<CoderNet> for NetRepr {
    fn from(n: CoderNet) -> Self {
        NetRepr {
            activation: n.activation,
            layers: n.layers,
        }
    }
}

/// Per-layer inputs and outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    /// `values[0]` is the input, `values[i + 1]` the output of layer `i`.
    pub values: Vec<DVector<f64>>,
}

impl NetCache {
    pub fn output(&self) -> &DVector<f64> {
        self.values.last().expect("at least the input")
    }
}

/// Parameter gradients shaped like the net's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl NetGrad {
    pub fn zeros_like(net: &CoderNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &NetGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.layers.iter().map(|(w, b)| w.norm_squared() + b.norm_squared()).sum()
    }

    /// Flattened in layer order, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.transpose().as_slice().iter().chain(b.as_slice()).copied().collect::<Vec<_>>())
            .collect()
    }
}

impl CoderNet {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("net", "needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::invalid("net", format!("layer {i}: bias length differs from output width")));
            }
            if i > 0 && l.weights.ncols() != layers[i - 1].weights.nrows() {
                return Err(Error::invalid("net", format!("layer {i}: input width does not match previous output")));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("net layer {i}")));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Glorot-uniform weights and zero biases for the given widths.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid("net widths", "need ≥ 2 positive widths"));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self::new(layers, activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width()).chain(self.layers.iter().map(|l| l.weights.nrows())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::Dimension {
                what: "net input",
                expected: self.input_width(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_cached(x)?.values.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &DVector<f64>) -> Result<NetCache> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.clone());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = &l.weights * values.last().unwrap() + &l.bias;
            if i < last {
                y.apply(|v| *v = self.activation.apply(*v));
            }
            values.push(y);
        }
        Ok(NetCache { values })
    }

    /// Gradients of a loss with `∂L/∂output = grad_out`; also returns
    /// `∂L/∂input`.
    pub fn backward(&self, cache: &NetCache, grad_out: &DVector<f64>) -> (NetGrad, DVector<f64>) {
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if i < last {
                let y = &cache.values[i + 1];
                g.zip_apply(y, |gv, yv| *gv *= self.activation.slope_from_output(yv));
            }
            let input = &cache.values[i];
            grads.push((&g * input.transpose(), g.clone()));
            g = l.weights.tr_mul(&g);
        }
        grads.reverse();
        (NetGrad { layers: grads }, g)
    }

    /// `θ ← θ − lr·g`.
    pub fn step(&mut self, grad: &NetGrad, lr: f64) {
        for (l, (w, b)) in self.layers.iter_mut().zip(&grad.layers) {
            l.weights -= w * lr;
            l.bias -= b * lr;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Applies `f` to every parameter in [`NetGrad::flatten`] order.
    pub fn map_parameter(&mut self, index: usize, f: impl FnOnce(f64) -> f64) {
        let mut offset = index;
        for l in &mut self.layers {
            let (rows, cols) = l.weights.shape();
            if offset < rows * cols {
                let (r, c) = (offset / cols, offset % cols);
                l.weights[(r, c)] = f(l.weights[(r, c)]);
                return;
            }
            offset -= rows * cols;
            if offset < rows {
                l.bias[offset] = f(l.bias[offset]);
                return;
            }
            offset -= rows;
        }
        panic!("parameter index {index} out of range");
    }
}
