//! Small fully connected networks: the density network and the shared color head.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Param, ParamGroup, ParamId};
use crate::tape::{self, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("embedding has {got} entries, the color head expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Hands out consecutive parameter ids while a model is assembled.
#[derive(Debug, Default)]
pub struct IdAlloc(usize);

impl IdAlloc {
    pub fn next(&mut self) -> ParamId {
        self.0 += 1;
        ParamId(self.0 - 1)
    }
}

/// Linear layers with ReLU between them and no activation on the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(Param, Param)>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `widths` lists every layer width
    /// including input and output.
    pub fn new(name: &str, widths: &[usize], ids: &mut IdAlloc, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let weight = Param::new(ids.next(), &format!("{name}.{i}.weight"), vec![fan_in, fan_out], data, ParamGroup::Dense);
                let bias = Param::zeros(ids.next(), &format!("{name}.{i}.bias"), vec![fan_out], ParamGroup::Dense);
                (weight, bias)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|(w, _)| w.shape[1]).unwrap_or(0)
    }

    /// Batched forward pass on `rows x input_dim`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (rows, cols) = w.matrix_shape();
            let mut next = tape::matmul(&h, &Tensor::new(rows, cols, w.data.clone()));
            for chunk in next.data.chunks_mut(cols) {
                for (v, bias) in chunk.iter_mut().zip(&b.data) {
                    *v += bias;
                    if i != last {
                        *v = v.max(0.0);
                    }
                }
            }
            h = next;
        }
        h
    }

    pub fn tape_forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(w);
            let bv = tape.param(b);
            h = tape.matmul(h, wv);
            h = tape.add_row(h, bv);
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorHeadConfig {
    pub embedding_dim: usize,
    /// Extra inputs appended after the embedding (view-direction encoding), 0 when unused.
    pub direction_dim: usize,
    pub hidden: usize,
}

/// Maps an embedding (optionally with an encoded view direction) to RGB in `[0, 1]^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorHead {
    pub config: ColorHeadConfig,
    pub net: Mlp,
}

impl ColorHead {
    pub fn new(config: ColorHeadConfig, ids: &mut IdAlloc, rng: &mut impl Rng) -> Self {
        let input = config.embedding_dim + config.direction_dim;
        let net = Mlp::new("color", &[input, config.hidden, 3], ids, rng);
        Self { config, net }
    }

    pub fn input_dim(&self) -> usize {
        self.config.embedding_dim + self.config.direction_dim
    }

    /// Single query. `input` is the embedding, followed by the direction
    /// encoding when the head was built with one.
    pub fn query(&self, input: &[f64]) -> Result<[f64; 3], FieldError> {
        if input.len() != self.input_dim() {
            return Err(FieldError::DimensionMismatch { expected: self.input_dim(), got: input.len() });
        }
        let out = self.forward(&Tensor::new(1, input.len(), input.to_vec()));
        Ok([out.data[0], out.data[1], out.data[2]])
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let mut out = self.net.forward(input);
        out.data.iter_mut().for_each(|v| *v = tape::sigmoid(*v));
        out
    }

    pub fn tape_forward(&self, tape: &mut Tape, input: Var) -> Var {
        let raw = self.net.tape_forward(tape, input);
        tape.sigmoid(raw)
    }
}

/// Real spherical harmonics up to degree 2 (9 values) of a unit direction.
pub fn encode_direction(d: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = d;
    [
        0.282_094_791_773_878_14,
        0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (3.0 * z * z - 1.0),
        1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (x * x - y * y),
    ]
}

pub const DIRECTION_ENCODING_DIM: usize = 9;
