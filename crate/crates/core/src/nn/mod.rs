//! A compact CPU layer stack with hand-written backward passes.
//!
//! Activations are `(batch, channels, height, width)` arrays; vector
//! features use `height = width = 1`. Every layer's forward returns a cache
//! that its backward consumes, so one parameter set can serve several
//! forward passes before gradients are applied. Per-sample work fans out
//! through [`Exec`]; reductions run in sample order so parallel and
//! sequential builds agree bit for bit.

mod conv;
pub mod loss;
pub mod optim;

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

pub use conv::ConvGeom;

pub type Tensor = Array4<f64>;

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param { shape: shape.to_vec(), value: vec![0.0; n], grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// He-uniform initialisation with the given fan-in.
    pub fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        for v in &mut p.value {
            *v = (rng.random::<f64>() * 2.0 - 1.0) * bound;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn reset_moments(&mut self) {
        self.m.iter_mut().for_each(|g| *g = 0.0);
        self.v.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    Linear { inputs: usize, outputs: usize },
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    /// Average-pools each channel down to `side x side`.
    AdaptiveAvgPool { side: usize },
    /// `(n, c, h, w) -> (n, c*h*w, 1, 1)`.
    Flatten,
    /// `(n, c*h*w, 1, 1) -> (n, c, h, w)`.
    Reshape { channels: usize, height: usize, width: usize },
    /// Nearest-neighbour 2x upsampling.
    Upsample2x,
    /// `relu(x + conv(relu(conv(x))))` with 3x3 same-size convolutions.
    Residual { channels: usize },
    /// Identity forward; backward multiplies the gradient by `-lambda`.
    GradReverse { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Param>,
}

/// What a layer keeps from its forward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Input(Tensor),
    Output(Tensor),
    Dims([usize; 4]),
    Residual { input: Tensor, hidden: Tensor, sum: Tensor },
}

impl Layer {
    pub fn new<R: Rng>(spec: LayerSpec, rng: &mut R) -> Self {
        let params = match spec {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                let fan_in = in_ch * kernel * kernel;
                vec![Param::he_uniform(&[out_ch, fan_in], fan_in, rng), Param::zeros(&[out_ch])]
            }
            LayerSpec::Linear { inputs, outputs } => {
                vec![Param::he_uniform(&[outputs, inputs], inputs, rng), Param::zeros(&[outputs])]
            }
            LayerSpec::Residual { channels } => {
                let fan_in = channels * 9;
                vec![
                    Param::he_uniform(&[channels, fan_in], fan_in, rng),
                    Param::zeros(&[channels]),
                    // second conv starts small so the block begins near identity
                    scaled(Param::he_uniform(&[channels, fan_in], fan_in, rng), 0.1),
                    Param::zeros(&[channels]),
                ]
            }
            _ => Vec::new(),
        };
        Layer { spec, params }
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<(Tensor, Cache)> {
        let (n, c, h, w) = x.dim();
        let out = match self.spec {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad } => {
                check_channels(c, in_ch, "conv")?;
                let g = ConvGeom { in_ch, out_ch, kernel, stride, pad };
                let y = conv::forward(x, &self.params[0], &self.params[1], g, exec);
                return Ok((y, Cache::Input(x.clone())));
            }
            LayerSpec::Linear { inputs, outputs } => {
                if c * h * w != inputs {
                    return Err(Error::param(format!("linear expects {inputs} inputs, got {}", c * h * w)));
                }
                let x2 = x.to_shape((n, inputs)).expect("contiguous");
                let wt = ndarray::ArrayView2::from_shape((outputs, inputs), &self.params[0].value).unwrap();
                let mut y = x2.dot(&wt.t());
                for mut row in y.rows_mut() {
                    for (v, b) in row.iter_mut().zip(&self.params[1].value) {
                        *v += b;
                    }
                }
                let y = y.into_shape_with_order((n, outputs, 1, 1)).unwrap();
                return Ok((y, Cache::Input(x.clone())));
            }
            LayerSpec::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                return Ok((y.clone(), Cache::Output(y)));
            }
            LayerSpec::LeakyRelu { slope } => {
                return Ok((x.mapv(|v| if v > 0.0 { v } else { slope * v }), Cache::Input(x.clone())));
            }
            LayerSpec::Tanh => {
                let y = x.mapv(f64::tanh);
                return Ok((y.clone(), Cache::Output(y)));
            }
            LayerSpec::Sigmoid => {
                let y = x.mapv(sigmoid);
                return Ok((y.clone(), Cache::Output(y)));
            }
            LayerSpec::AdaptiveAvgPool { side } => {
                if side == 0 || h % side != 0 || w % side != 0 {
                    return Err(Error::param(format!("cannot pool {h}x{w} to {side}x{side}")));
                }
                let (bh, bw) = (h / side, w / side);
                let norm = 1.0 / (bh * bw) as f64;
                let mut y = Array4::zeros((n, c, side, side));
                for ((b, ch, i, j), v) in x.indexed_iter() {
                    y[[b, ch, i / bh, j / bw]] += v * norm;
                }
                y
            }
            LayerSpec::Flatten => x.to_shape((n, c * h * w, 1, 1)).unwrap().to_owned(),
            LayerSpec::Reshape { channels, height, width } => {
                if c * h * w != channels * height * width {
                    return Err(Error::param("reshape size mismatch"));
                }
                x.to_shape((n, channels, height, width)).unwrap().to_owned()
            }
            LayerSpec::Upsample2x => {
                Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(b, ch, i, j)| x[[b, ch, i / 2, j / 2]])
            }
            LayerSpec::Residual { channels } => {
                check_channels(c, channels, "residual")?;
                let g = ConvGeom::same3(channels);
                let hidden = conv::forward(x, &self.params[0], &self.params[1], g, exec);
                let act = hidden.mapv(|v| v.max(0.0));
                let mut sum = conv::forward(&act, &self.params[2], &self.params[3], g, exec);
                sum += x;
                let y = sum.mapv(|v| v.max(0.0));
                return Ok((y, Cache::Residual { input: x.clone(), hidden, sum }));
            }
            LayerSpec::GradReverse { .. } => x.clone(),
        };
        Ok((out, Cache::Dims([n, c, h, w])))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Cache, grad: &Tensor, exec: Exec) -> Tensor {
        match (self.spec, cache) {
            (LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad }, Cache::Input(x)) => {
                let g = ConvGeom { in_ch, out_ch, kernel, stride, pad };
                let (wp, bp) = two(&mut self.params, 0);
                conv::backward(x, grad, wp, bp, g, exec)
            }
            (LayerSpec::Linear { inputs, outputs }, Cache::Input(x)) => {
                let n = x.dim().0;
                let x2 = x.to_shape((n, inputs)).unwrap();
                let g2 = grad.to_shape((n, outputs)).unwrap();
                let dw = g2.t().dot(&x2);
                for (acc, v) in self.params[0].grad.iter_mut().zip(dw.iter()) {
                    *acc += v;
                }
                let db = g2.sum_axis(Axis(0));
                for (acc, v) in self.params[1].grad.iter_mut().zip(db.iter()) {
                    *acc += v;
                }
                let wt = ndarray::ArrayView2::from_shape((outputs, inputs), &self.params[0].value).unwrap();
                g2.dot(&wt).into_shape_with_order(x.raw_dim()).unwrap()
            }
            (LayerSpec::Relu, Cache::Output(y)) => {
                let mut d = grad.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
                d
            }
            (LayerSpec::LeakyRelu { slope }, Cache::Input(x)) => {
                let mut d = grad.clone();
                ndarray::Zip::from(&mut d).and(x).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                d
            }
            (LayerSpec::Tanh, Cache::Output(y)) => {
                let mut d = grad.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                d
            }
            (LayerSpec::Sigmoid, Cache::Output(y)) => {
                let mut d = grad.clone();
                ndarray::Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                d
            }
            (LayerSpec::AdaptiveAvgPool { side }, Cache::Dims([n, c, h, w])) => {
                let (bh, bw) = (h / side, w / side);
                let norm = 1.0 / (bh * bw) as f64;
                Array4::from_shape_fn((*n, *c, *h, *w), |(b, ch, i, j)| grad[[b, ch, i / bh, j / bw]] * norm)
            }
            (LayerSpec::Flatten, Cache::Dims(d)) | (LayerSpec::Reshape { .. }, Cache::Dims(d)) => {
                grad.to_shape((d[0], d[1], d[2], d[3])).unwrap().to_owned()
            }
            (LayerSpec::Upsample2x, Cache::Dims([n, c, h, w])) => {
                let mut d = Array4::zeros((*n, *c, *h, *w));
                for ((b, ch, i, j), v) in grad.indexed_iter() {
                    d[[b, ch, i / 2, j / 2]] += v;
                }
                d
            }
            (LayerSpec::Residual { channels }, Cache::Residual { input, hidden, sum }) => {
                let g = ConvGeom::same3(channels);
                let mut dsum = grad.clone();
                ndarray::Zip::from(&mut dsum).and(sum).for_each(|d, &s| {
                    if s <= 0.0 {
                        *d = 0.0
                    }
                });
                let act = hidden.mapv(|v| v.max(0.0));
                let (w2, b2) = two(&mut self.params, 2);
                let mut dact = conv::backward(&act, &dsum, w2, b2, g, exec);
                ndarray::Zip::from(&mut dact).and(hidden).for_each(|d, &h| {
                    if h <= 0.0 {
                        *d = 0.0
                    }
                });
                let (w1, b1) = two(&mut self.params, 0);
                let mut dx = conv::backward(input, &dact, w1, b1, g, exec);
                dx += &dsum;
                dx
            }
            (LayerSpec::GradReverse { lambda }, _) => grad.mapv(|g| -lambda * g),
            (spec, _) => panic!("cache does not match layer {spec:?}"),
        }
    }
}

fn scaled(mut p: Param, k: f64) -> Param {
    p.value.iter_mut().for_each(|v| *v *= k);
    p
}

fn two(params: &mut [Param], at: usize) -> (&mut Param, &mut Param) {
    let (a, b) = params[at..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

fn check_channels(got: usize, want: usize, what: &str) -> Result<()> {
    if got != want {
        return Err(Error::param(format!("{what} expects {want} channels, got {got}")));
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A chain of layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

pub type Trace = Vec<Cache>;

impl Sequential {
    pub fn new<R: Rng>(specs: &[LayerSpec], rng: &mut R) -> Self {
        Sequential { layers: specs.iter().map(|&s| Layer::new(s, rng)).collect() }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn forward(&self, x: &Tensor, exec: Exec) -> Result<(Tensor, Trace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.forward(&cur, exec)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Forward without keeping caches.
    pub fn infer(&self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, exec)?.0;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, trace: &Trace, grad: &Tensor, exec: Exec) -> Tensor {
        let mut g = grad.clone();
        for (layer, cache) in self.layers.iter_mut().zip(trace).rev() {
            g = layer.backward(cache, &g, exec);
        }
        g
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// `(name, param)` pairs named `<prefix>.<layer>.<slot>`.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params.iter().enumerate().map(move |(k, p)| (format!("{prefix}.{i}.{k}"), p)))
            .collect()
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params.iter_mut().enumerate().map(move |(k, p)| (format!("{prefix}.{i}.{k}"), p)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Param::len).sum()
    }
}
