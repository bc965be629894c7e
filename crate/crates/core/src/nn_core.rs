//! Small fully connected networks with reverse-mode gradients and Adam.
//!
//! Hidden layers use `tanh`. Batches are column-major: one sample per column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &str = "quadred-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
    #[error("tape does not belong to this network")]
    TapeMismatch,
    #[error("soft-update rate must be in (0, 1], got {0}")]
    BadTau(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Identity,
    /// `bound * tanh(z)`.
    ScaledTanh(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.ncols(), self.weight.nrows())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: OutputActivation,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.norm_squared() + l.bias.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Cached activations of a forward pass; `activations[0]` is the input.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<DMatrix<f64>>,
}

impl Tape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("tape is never empty")
    }
}

impl Mlp {
    pub fn zeros(dims: &[usize], output: OutputActivation) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::TooFewLayers);
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            output,
        })
    }

    /// Glorot-uniform hidden layers; the last layer is drawn from
    /// `U(-final_scale, final_scale)`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        output: OutputActivation,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims, output)?;
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let (fan_out, fan_in) = layer.weight.shape();
            let limit = if i == last {
                final_scale
            } else {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            };
            for w in layer.weight.iter_mut() {
                *w = rng.random_range(-limit..=limit);
            }
            if i == last {
                for b in layer.bias.iter_mut() {
                    *b = rng.random_range(-limit..=limit);
                }
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Evaluate one sample.
    pub fn forward(&self, input: &DVector<f64>) -> Result<(DVector<f64>, Tape), NnError> {
        let batch = DMatrix::from_column_slice(input.len(), 1, input.as_slice());
        let tape = self.forward_batch(&batch)?;
        let out = tape.output().column(0).into_owned();
        Ok((out, tape))
    }

    /// Output only, no tape kept.
    pub fn predict(&self, input: &DVector<f64>) -> Result<DVector<f64>, NnError> {
        Ok(self.forward(input)?.0)
    }

    pub fn forward_batch(&self, input: &DMatrix<f64>) -> Result<Tape, NnError> {
        if input.nrows() != self.input_dim() {
            return Err(NnError::Dimension {
                expected: self.input_dim(),
                got: input.nrows(),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &activations[i];
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if i < last {
                z.apply(|v| *v = v.tanh());
            } else if let OutputActivation::ScaledTanh(bound) = self.output {
                z.apply(|v| *v = bound * v.tanh());
            }
            activations.push(z);
        }
        Ok(Tape { activations })
    }

    /// Reverse-mode pass. Returns parameter gradients summed over the batch and
    /// the gradient with respect to the input.
    pub fn backward(
        &self,
        tape: &Tape,
        output_grad: &DMatrix<f64>,
    ) -> Result<(MlpGrads, DMatrix<f64>), NnError> {
        if tape.activations.len() != self.layers.len() + 1
            || tape.activations[0].nrows() != self.input_dim()
        {
            return Err(NnError::TapeMismatch);
        }
        let out = tape.output();
        if output_grad.shape() != out.shape() {
            return Err(NnError::Dimension {
                expected: out.len(),
                got: output_grad.len(),
            });
        }
        let last = self.layers.len() - 1;
        // delta = dL/dz for the current layer
        let mut delta = output_grad.clone();
        if let OutputActivation::ScaledTanh(bound) = self.output {
            delta.zip_apply(out, |d, y| {
                let t = if bound != 0.0 { y / bound } else { 0.0 };
                *d *= bound * (1.0 - t * t);
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..=last).rev() {
            let input = &tape.activations[i];
            let weight_grad = &delta * input.transpose();
            let bias_grad = delta.column_sum();
            let mut back = self.layers[i].weight.transpose() * &delta;
            if i > 0 {
                back.zip_apply(input, |d, a| *d *= 1.0 - a * a);
            }
            grads.push(Dense {
                weight: weight_grad,
                bias: bias_grad,
            });
            delta = back;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    /// Serialize as named row-major tensors under `prefix`.
    pub fn write_tensors(&self, prefix: &str, ckpt: &mut Checkpoint) {
        let kind = match self.output {
            OutputActivation::Identity => "identity".to_string(),
            OutputActivation::ScaledTanh(b) => format!("scaled_tanh {b:?}"),
        };
        ckpt.meta.insert(format!("{prefix}.output"), kind);
        for (i, l) in self.layers.iter().enumerate() {
            ckpt.tensors.insert(format!("{prefix}.{i}.weight"), Tensor::from_matrix(&l.weight));
            ckpt.tensors.insert(
                format!("{prefix}.{i}.bias"),
                Tensor::from_matrix(&DMatrix::from_column_slice(l.bias.len(), 1, l.bias.as_slice())),
            );
        }
    }

    pub fn read_tensors(prefix: &str, ckpt: &Checkpoint) -> Result<Self, NnError> {
        let kind = ckpt
            .meta
            .get(&format!("{prefix}.output"))
            .ok_or_else(|| NnError::Checkpoint(format!("missing {prefix}.output")))?;
        let output = match kind.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["identity"] => OutputActivation::Identity,
            ["scaled_tanh", b] => OutputActivation::ScaledTanh(
                b.parse().map_err(|_| NnError::Checkpoint(format!("bad bound in {prefix}.output")))?,
            ),
            _ => return Err(NnError::Checkpoint(format!("unknown activation {kind}"))),
        };
        let mut layers = Vec::new();
        while let Some(w) = ckpt.tensors.get(&format!("{prefix}.{}.weight", layers.len())) {
            let name = format!("{prefix}.{}.bias", layers.len());
            let b = ckpt
                .tensors
                .get(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing {name}")))?;
            let weight = w.to_matrix();
            if b.rows != weight.nrows() || b.cols != 1 {
                return Err(NnError::Checkpoint(format!("{name} has wrong shape")));
            }
            if let Some(prev) = layers.last() {
                let prev: &Dense = prev;
                if prev.weight.nrows() != weight.ncols() {
                    return Err(NnError::Checkpoint(format!("{prefix} layer shapes incompatible")));
                }
            }
            layers.push(Dense {
                weight,
                bias: DVector::from_column_slice(&b.data),
            });
        }
        if layers.is_empty() {
            return Err(NnError::Checkpoint(format!("no layers under {prefix}")));
        }
        Ok(Self { layers, output })
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    first: Vec<Dense>,
    second: Vec<Dense>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        let zeros: Vec<Dense> = net.layers.iter().map(Dense::zeros_like).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam update of `net` in place.
pub fn adam_step(net: &mut Mlp, grads: &MlpGrads, state: &mut AdamState) -> Result<(), NnError> {
    if grads.layers.len() != net.layers.len() || state.first.len() != net.layers.len() {
        return Err(NnError::Dimension {
            expected: net.layers.len(),
            got: grads.layers.len(),
        });
    }
    for (l, g) in net.layers.iter().zip(&grads.layers) {
        if l.weight.shape() != g.weight.shape() {
            return Err(NnError::Dimension {
                expected: l.weight.len(),
                got: g.weight.len(),
            });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let lr = state.learning_rate;
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };
    for (((l, g), m), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        update(
            l.weight.as_mut_slice(),
            g.weight.as_slice(),
            m.weight.as_mut_slice(),
            v.weight.as_mut_slice(),
        );
        update(
            l.bias.as_mut_slice(),
            g.bias.as_slice(),
            m.bias.as_mut_slice(),
            v.bias.as_mut_slice(),
        );
    }
    Ok(())
}

/// `target <- (1 - tau) target + tau online`
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NnError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NnError::BadTau(tau));
    }
    if target.dims() != online.dims() {
        return Err(NnError::Dimension {
            expected: target.parameter_count(),
            got: online.parameter_count(),
        });
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        if tau == 1.0 {
            t.weight.copy_from(&o.weight);
            t.bias.copy_from(&o.bias);
        } else {
            t.weight.zip_apply(&o.weight, |a, b| *a = (1.0 - tau) * *a + tau * b);
            t.bias.zip_apply(&o.bias, |a, b| *a = (1.0 - tau) * *a + tau * b);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Text checkpoint: a header line, `meta <key> <value...>` lines, and tensor
/// records `tensor <name> <rows> <cols>` each followed by one line of
/// row-major values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), NnError> {
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}")?;
        }
        for (name, t) in &self.tensors {
            writeln!(out, "tensor {name} {} {}", t.rows, t.cols)?;
            let mut line = String::with_capacity(t.data.len() * 20);
            for (i, v) in t.data.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                // Debug formatting round-trips f64 exactly.
                write!(line, "{v:?}").expect("write to string");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self, NnError> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| NnError::Checkpoint("empty file".into()))??;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(NnError::Checkpoint("missing header".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| NnError::Checkpoint("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ckpt = Checkpoint::default();
        while let Some(line) = lines.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            match (parts.next(), parts.next()) {
                (Some("meta"), Some(key)) => {
                    ckpt.meta
                        .insert(key.to_string(), parts.next().unwrap_or("").to_string());
                }
                (Some("tensor"), Some(name)) => {
                    let dims: Vec<usize> = parts
                        .next()
                        .unwrap_or("")
                        .split_whitespace()
                        .map(|d| d.parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| NnError::Checkpoint(format!("bad shape for {name}")))?;
                    let [rows, cols] = dims[..] else {
                        return Err(NnError::Checkpoint(format!("bad shape for {name}")));
                    };
                    let values = lines
                        .next()
                        .ok_or_else(|| NnError::Checkpoint(format!("missing data for {name}")))??;
                    let data: Vec<f64> = values
                        .split_whitespace()
                        .map(|v| v.parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| NnError::Checkpoint(format!("bad value in {name}")))?;
                    if data.len() != rows * cols {
                        return Err(NnError::Checkpoint(format!(
                            "{name}: expected {} values, found {}",
                            rows * cols,
                            data.len()
                        )));
                    }
                    ckpt.tensors.insert(name.to_string(), Tensor { rows, cols, data });
                }
                _ => return Err(NnError::Checkpoint(format!("unrecognized line: {line}"))),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NnError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NnError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
