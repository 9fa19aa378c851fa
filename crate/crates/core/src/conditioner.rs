//! Feed-forward conditioner networks producing one `(a, b, c)` triple per
//! transformed coordinate, optionally with MADE-style autoregressive masks.
//!
//! Parameters live in one flat buffer, layer by layer: the weight matrix
//! (row-major, `out × in`) followed by the bias vector. Output unit
//! `3k + j` is coefficient `j` of coordinate `k`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a` and input `z`.
    #[inline]
    fn grad(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConditionerError {
    #[error("expected input of length {expected}, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("expected cotangent of length {expected}, got {got}")]
    CotangentLength { expected: usize, got: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("mask for layer {layer} is {rows}x{cols}, weights are {want_rows}x{want_cols}")]
    MaskShape {
        layer: usize,
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("network needs at least an input and an output layer, all of positive width")]
    BadDims,
    #[error("autoregressive masks need at least one coordinate")]
    ZeroDimension,
    #[error("ordering is not a permutation of 0..{0}")]
    BadOrdering(usize),
}

/// Binary connectivity of one dense layer (`rows = out`, `cols = in`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    #[inline]
    pub fn get(&self, out: usize, inp: usize) -> bool {
        self.bits[out * self.cols + inp]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionerNet {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    masks: Option<Vec<Mask>>,
}

/// Gradients from [`ConditionerNet::vjp`]; `dparams` uses the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NetVjp {
    pub dinput: Vec<f64>,
    pub dparams: Vec<f64>,
}

impl ConditionerNet {
    /// All-zero network.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self, ConditionerError> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(ConditionerError::BadDims);
        }
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            activation,
            params: vec![0.0; n],
            masks: None,
        })
    }

    /// Glorot-uniform weights and zero biases, except that the output layer is
    /// all zeros so the conditioned map starts as the identity.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self, ConditionerError> {
        let mut net = Self::zeros(dims, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = net.n_layers() - 1;
        for l in 0..last {
            let (fan_in, fan_out) = (net.dims[l], net.dims[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let range = net.weight_range(l);
            for w in &mut net.params[range] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    /// Attaches masks and zeroes the masked-out weights.
    pub fn with_masks(mut self, masks: Vec<Mask>) -> Result<Self, ConditionerError> {
        if masks.len() != self.n_layers() {
            return Err(ConditionerError::BadDims);
        }
        for (l, m) in masks.iter().enumerate() {
            let (rows, cols) = (self.dims[l + 1], self.dims[l]);
            if m.rows != rows || m.cols != cols || m.bits.len() != rows * cols {
                return Err(ConditionerError::MaskShape {
                    layer: l,
                    rows: m.rows,
                    cols: m.cols,
                    want_rows: rows,
                    want_cols: cols,
                });
            }
        }
        for (l, m) in masks.iter().enumerate() {
            let range = self.weight_range(l);
            for (w, &keep) in self.params[range].iter_mut().zip(&m.bits) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn masks(&self) -> Option<&[Mask]> {
        self.masks.as_deref()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), ConditionerError> {
        if params.len() != self.params.len() {
            return Err(ConditionerError::ParamCount {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn offset(&self, layer: usize) -> usize {
        self.dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Index range of layer `l`'s weights in the flat buffer.
    pub fn weight_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.offset(l);
        start..start + self.dims[l] * self.dims[l + 1]
    }

    /// Index range of layer `l`'s biases in the flat buffer.
    pub fn bias_range(&self, l: usize) -> std::ops::Range<usize> {
        let start = self.weight_range(l).end;
        start..start + self.dims[l + 1]
    }

    #[inline]
    fn kept(&self, l: usize, idx: usize) -> bool {
        match &self.masks {
            Some(m) => m[l].bits[idx],
            None => true,
        }
    }

    /// Pre-activations `z` and activations `a` of every layer.
    fn run(&self, input: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut zs = Vec::with_capacity(self.n_layers());
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(input.to_vec());
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[self.weight_range(l)];
            let b = &self.params[self.bias_range(l)];
            let x = &acts[l];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut s = 0.0;
                for i in 0..n_in {
                    if self.kept(l, o * n_in + i) {
                        s += row[i] * x[i];
                    }
                }
                *zo += s;
            }
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            debug_assert_eq!(a.len(), n_out);
            zs.push(z);
            acts.push(a);
        }
        (zs, acts)
    }

    fn check_input(&self, input: &[f64]) -> Result<(), ConditionerError> {
        if input.len() != self.input_dim() {
            return Err(ConditionerError::InputLength {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>, ConditionerError> {
        self.check_input(input)?;
        Ok(self.run(input).1.pop().unwrap())
    }

    /// Reverse-mode gradients of `⟨cotangent, eval(input)⟩`.
    pub fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<NetVjp, ConditionerError> {
        let mut dparams = vec![0.0; self.n_params()];
        let dinput = self.vjp_into(input, cotangent, &mut dparams)?;
        Ok(NetVjp { dinput, dparams })
    }

    /// As [`vjp`](Self::vjp), accumulating parameter gradients into `dparams`.
    pub fn vjp_into(
        &self,
        input: &[f64],
        cotangent: &[f64],
        dparams: &mut [f64],
    ) -> Result<Vec<f64>, ConditionerError> {
        self.check_input(input)?;
        if cotangent.len() != self.output_dim() {
            return Err(ConditionerError::CotangentLength {
                expected: self.output_dim(),
                got: cotangent.len(),
            });
        }
        if dparams.len() != self.n_params() {
            return Err(ConditionerError::ParamCount {
                expected: self.n_params(),
                got: dparams.len(),
            });
        }
        let (zs, acts) = self.run(input);
        let last = self.n_layers() - 1;
        let mut abar = cotangent.to_vec();
        for l in (0..self.n_layers()).rev() {
            let n_in = self.dims[l];
            let zbar: Vec<f64> = if l == last {
                abar
            } else {
                abar.iter()
                    .zip(zs[l].iter().zip(&acts[l + 1]))
                    .map(|(g, (&z, &a))| g * self.activation.grad(z, a))
                    .collect()
            };
            let wr = self.weight_range(l);
            let br = self.bias_range(l);
            let x = &acts[l];
            let mut xbar = vec![0.0; n_in];
            for (o, &zb) in zbar.iter().enumerate() {
                dparams[br.start + o] += zb;
                if zb == 0.0 {
                    continue;
                }
                for i in 0..n_in {
                    let idx = o * n_in + i;
                    if self.kept(l, idx) {
                        dparams[wr.start + idx] += zb * x[i];
                        xbar[i] += zb * self.params[wr.start + idx];
                    }
                }
            }
            abar = xbar;
        }
        Ok(abar)
    }
}

/// Hidden-unit degrees for `width` units when the top input degree is `d`.
fn hidden_degrees(width: usize, d: usize) -> Vec<usize> {
    let span = d.saturating_sub(1).max(1);
    (0..width).map(|j| 1 + j % span).collect()
}

/// MADE masks for a network `[D, hidden..., 3D]`.
///
/// `ordering[i]` is the 0-based position of input `i` in the autoregressive
/// order; input `i` and output block `i` both get degree `ordering[i] + 1`.
/// Hidden degrees cycle through `1..D-1`. Hidden masks connect on
/// `deg(out) ≥ deg(in)`, the output mask on `deg(out) > deg(in)`.
pub fn build_masks(
    d: usize,
    hidden: &[usize],
    ordering: &[usize],
) -> Result<Vec<Mask>, ConditionerError> {
    if d == 0 {
        return Err(ConditionerError::ZeroDimension);
    }
    if !is_permutation(ordering, d) {
        return Err(ConditionerError::BadOrdering(d));
    }
    if hidden.iter().any(|&h| h == 0) {
        return Err(ConditionerError::BadDims);
    }
    let input_deg: Vec<usize> = ordering.iter().map(|&o| o + 1).collect();
    let output_deg: Vec<usize> = (0..3 * d).map(|u| input_deg[u / 3]).collect();

    let mut layers: Vec<Vec<usize>> = vec![input_deg];
    for &h in hidden {
        layers.push(hidden_degrees(h, d));
    }
    let mut masks = Vec::with_capacity(hidden.len() + 1);
    for w in layers.windows(2) {
        let (din, dout) = (&w[0], &w[1]);
        let bits = dout
            .iter()
            .flat_map(|&o| din.iter().map(move |&i| o >= i))
            .collect();
        masks.push(Mask {
            rows: dout.len(),
            cols: din.len(),
            bits,
        });
    }
    let din = layers.last().unwrap();
    let bits = output_deg
        .iter()
        .flat_map(|&o| din.iter().map(move |&i| o > i))
        .collect();
    masks.push(Mask {
        rows: output_deg.len(),
        cols: din.len(),
        bits,
    });
    Ok(masks)
}

pub(crate) fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &i in p {
        if i >= n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Number of input→output paths through the masks (`outputs × inputs`).
pub fn mask_paths(masks: &[Mask]) -> Vec<Vec<u64>> {
    let first = &masks[0];
    let mut acc: Vec<Vec<u64>> = (0..first.rows)
        .map(|o| (0..first.cols).map(|i| first.get(o, i) as u64).collect())
        .collect();
    for m in &masks[1..] {
        let n_in = acc[0].len();
        acc = (0..m.rows)
            .map(|o| {
                (0..n_in)
                    .map(|i| {
                        (0..m.cols)
                            .filter(|&h| m.get(o, h))
                            .map(|h| acc[h][i])
                            .sum()
                    })
                    .collect()
            })
            .collect();
    }
    acc
}

/// MADE-masked conditioner for `d` coordinates.
pub fn masked_net(
    d: usize,
    hidden: &[usize],
    ordering: &[usize],
    activation: Activation,
    seed: u64,
) -> Result<ConditionerNet, ConditionerError> {
    let masks = build_masks(d, hidden, ordering)?;
    let mut dims = vec![d];
    dims.extend_from_slice(hidden);
    dims.push(3 * d);
    ConditionerNet::init(&dims, activation, seed)?.with_masks(masks)
}
