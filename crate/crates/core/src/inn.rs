//! Invertible transform built from affine coupling blocks.
//!
//! Each block splits its input `y = [y1, y2]` at `d = floor(D / 2)` and
//! applies two complementary affine coupling layers:
//!
//! ```text
//! v1 = y1 * exp(s(g1(y2))) + h1(y2)
//! v2 = y2 * exp(s(g2(v1))) + h2(v1)
//! ```
//!
//! where `g1, g2, h1, h2` are SELU multilayer perceptrons and `s` is the
//! arctan clamp. The inverse is available in closed form. Gradients are
//! computed by hand-written reverse mode, with the forward pass caching
//! every intermediate the backward pass needs.

use std::f64::consts::FRAC_2_PI;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};

/// Bound on the log-scale of every coupling layer.
pub const DEFAULT_CLAMP: f64 = 1.9;

/// Hidden layers per subnet.
pub const HIDDEN_LAYERS: usize = 3;

const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

/// SELU derivative expressed through the activation `a = selu(x)`.
fn selu_grad_from_output(a: f64) -> f64 {
    if a > 0.0 {
        SELU_LAMBDA
    } else {
        a + SELU_LAMBDA * SELU_ALPHA
    }
}

/// Soft clamp `c * (2 / pi) * atan(u / c)`: odd, zero at zero, bounded by `c`.
pub fn clamp_scale(u: f64, c: f64) -> f64 {
    c * FRAC_2_PI * (u / c).atan()
}

fn clamp_scale_grad(u: f64, c: f64) -> f64 {
    let r = u / c;
    FRAC_2_PI / (1.0 + r * r)
}

/// Fully connected layer computing `x W + b` for row-vector inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// Shape `(fan_in, fan_out)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, scale: f64, rng: &mut R) -> Self {
        let bound = scale / (fan_in as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weight = Array2::from_shape_fn((fan_in, fan_out), |_| draw());
        let bias = Array1::from_shape_fn(fan_out, |_| draw());
        Self { weight, bias }
    }

    pub fn n_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Multilayer perceptron with SELU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
struct MlpCache {
    /// Input to every layer; entries after the first are SELU outputs.
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Hidden layers get fan-in scaled uniform weights; the output layer is
    /// drawn with `output_scale` times that bound (zero gives an all-zero
    /// output layer).
    fn init<R: Rng + ?Sized>(widths: &[usize], output_scale: f64, rng: &mut R) -> Self {
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                if l == last && output_scale == 0.0 {
                    Linear::zeros(w[0], w[1])
                } else if l == last {
                    Linear::uniform(w[0], w[1], output_scale, rng)
                } else {
                    Linear::uniform(w[0], w[1], 1.0, rng)
                }
            })
            .collect();
        Self { layers }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Linear::n_params).sum()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight);
            h += &layer.bias;
            if l < last {
                h.mapv_inplace(selu);
            }
        }
        h
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if l < last {
                z.mapv_inplace(selu);
            }
            inputs.push(h);
            h = z;
        }
        (h, MlpCache { inputs })
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    fn backward(&self, cache: &MlpCache, d_out: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut d = d_out;
        for l in (0..=last).rev() {
            if l < last {
                d.zip_mut_with(&cache.inputs[l + 1], |g, &a| *g *= selu_grad_from_output(a));
            }
            let g = &mut grad.layers[l];
            g.weight += &cache.inputs[l].t().dot(&d);
            g.bias += &d.sum_axis(Axis(0));
            d = d.dot(&self.layers[l].weight.t());
        }
        d
    }
}

/// One invertible block: two complementary affine coupling layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub g1: Mlp,
    pub h1: Mlp,
    pub g2: Mlp,
    pub h2: Mlp,
    pub split: usize,
    pub clamp: f64,
}

/// Intermediates of one block's forward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    y1: Array2<f64>,
    y2: Array2<f64>,
    u1: Array2<f64>,
    u2: Array2<f64>,
    scale1: Array2<f64>,
    scale2: Array2<f64>,
    g1: MlpCache,
    h1: MlpCache,
    g2: MlpCache,
    h2: MlpCache,
}

impl BlockCache {
    pub fn rows(&self) -> usize {
        self.y1.nrows()
    }

    /// The multiplicative factors `exp(s(.))` applied by both layers.
    pub fn scale_factors(&self) -> impl Iterator<Item = f64> + '_ {
        self.scale1.iter().chain(self.scale2.iter()).copied()
    }
}

impl CouplingBlock {
    fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, clamp: f64, output_scale: f64, rng: &mut R) -> Self {
        let split = dim / 2;
        let rest = dim - split;
        let widths = |fan_in: usize, fan_out: usize| {
            let mut w = vec![fan_in];
            w.extend(std::iter::repeat_n(hidden, HIDDEN_LAYERS));
            w.push(fan_out);
            w
        };
        Self {
            g1: Mlp::init(&widths(rest, split), output_scale, rng),
            h1: Mlp::init(&widths(rest, split), output_scale, rng),
            g2: Mlp::init(&widths(split, rest), output_scale, rng),
            h2: Mlp::init(&widths(split, rest), output_scale, rng),
            split,
            clamp,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            g1: self.g1.zeros_like(),
            h1: self.h1.zeros_like(),
            g2: self.g2.zeros_like(),
            h2: self.h2.zeros_like(),
            split: self.split,
            clamp: self.clamp,
        }
    }

    pub fn subnets(&self) -> [(&'static str, &Mlp); 4] {
        [("g1", &self.g1), ("h1", &self.h1), ("g2", &self.g2), ("h2", &self.h2)]
    }

    fn subnets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.g1, &mut self.h1, &mut self.g2, &mut self.h2]
    }

    pub fn n_params(&self) -> usize {
        self.subnets().iter().map(|(_, m)| m.n_params()).sum()
    }

    fn dim(&self) -> usize {
        self.g1.layers[0].weight.nrows() + self.split
    }

    fn check_input(&self, y: ArrayView2<f64>) -> Result<()> {
        if y.ncols() != self.dim() {
            return Err(TdmError::Shape {
                expected: (y.nrows(), self.dim()),
                found: y.dim(),
            });
        }
        Ok(())
    }

    fn scales(&self, u: &Array2<f64>) -> Array2<f64> {
        let c = self.clamp;
        u.mapv(|v| clamp_scale(v, c).exp())
    }

    pub fn forward(&self, y: ArrayView2<f64>) -> Result<(Array2<f64>, BlockCache)> {
        self.check_input(y)?;
        let d = self.split;
        let y1 = y.slice(s![.., ..d]).to_owned();
        let y2 = y.slice(s![.., d..]).to_owned();

        let (u1, g1) = self.g1.forward(y2.view());
        let (t1, h1) = self.h1.forward(y2.view());
        let scale1 = self.scales(&u1);
        let v1 = &y1 * &scale1 + &t1;

        let (u2, g2) = self.g2.forward(v1.view());
        let (t2, h2) = self.h2.forward(v1.view());
        let scale2 = self.scales(&u2);
        let v2 = &y2 * &scale2 + &t2;

        let mut out = Array2::zeros(y.dim());
        out.slice_mut(s![.., ..d]).assign(&v1);
        out.slice_mut(s![.., d..]).assign(&v2);
        if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
            return Err(non_finite("block forward", pos, &out));
        }
        let cache = BlockCache {
            y1,
            y2,
            u1,
            u2,
            scale1,
            scale2,
            g1,
            h1,
            g2,
            h2,
        };
        Ok((out, cache))
    }

    /// Only the first coupling layer: `[y1 * exp(s(g1(y2))) + h1(y2), y2]`.
    pub fn first_layer(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(y)?;
        let d = self.split;
        let y2 = y.slice(s![.., d..]);
        let v1 = &y.slice(s![.., ..d]) * &self.scales(&self.g1.apply(y2)) + self.h1.apply(y2);
        let mut out = y.to_owned();
        out.slice_mut(s![.., ..d]).assign(&v1);
        Ok(out)
    }

    /// Only the second coupling layer: `[z1, z2 * exp(s(g2(z1))) + h2(z1)]`.
    pub fn second_layer(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(z)?;
        let d = self.split;
        let z1 = z.slice(s![.., ..d]);
        let v2 = &z.slice(s![.., d..]) * &self.scales(&self.g2.apply(z1)) + self.h2.apply(z1);
        let mut out = z.to_owned();
        out.slice_mut(s![.., d..]).assign(&v2);
        Ok(out)
    }

    pub fn inverse(&self, y_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(y_out)?;
        let d = self.split;
        let c = self.clamp;
        let v1 = y_out.slice(s![.., ..d]);
        let v2 = y_out.slice(s![.., d..]);
        let inv_scale = |u: Array2<f64>| u.mapv(|v| (-clamp_scale(v, c)).exp());

        let y2 = (&v2 - &self.h2.apply(v1)) * inv_scale(self.g2.apply(v1));
        let y1 = (&v1 - &self.h1.apply(y2.view())) * inv_scale(self.g1.apply(y2.view()));

        let mut out = Array2::zeros(y_out.dim());
        out.slice_mut(s![.., ..d]).assign(&y1);
        out.slice_mut(s![.., d..]).assign(&y2);
        if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
            return Err(non_finite("block inverse", pos, &out));
        }
        Ok(out)
    }

    /// Reverse-mode pass through one block. Parameter gradients accumulate
    /// into `grad`; returns the gradient with respect to the block input.
    pub fn backward(&self, cache: &BlockCache, d_out: ArrayView2<f64>, grad: &mut CouplingBlock) -> Array2<f64> {
        let d = self.split;
        let c = self.clamp;
        let dv1 = d_out.slice(s![.., ..d]).to_owned();
        let dv2 = d_out.slice(s![.., d..]).to_owned();

        // second layer
        let mut dy2 = &dv2 * &cache.scale2;
        let mut du2 = &dy2 * &cache.y2;
        du2.zip_mut_with(&cache.u2, |g, &u| *g *= clamp_scale_grad(u, c));
        let dv1 = dv1
            + self.g2.backward(&cache.g2, du2, &mut grad.g2)
            + self.h2.backward(&cache.h2, dv2, &mut grad.h2);

        // first layer
        let dy1 = &dv1 * &cache.scale1;
        let mut du1 = &dy1 * &cache.y1;
        du1.zip_mut_with(&cache.u1, |g, &u| *g *= clamp_scale_grad(u, c));
        dy2 += &self.g1.backward(&cache.g1, du1, &mut grad.g1);
        dy2 += &self.h1.backward(&cache.h1, dv1, &mut grad.h1);

        let mut d_in = Array2::zeros(d_out.dim());
        d_in.slice_mut(s![.., ..d]).assign(&dy1);
        d_in.slice_mut(s![.., d..]).assign(&dy2);
        d_in
    }
}

fn non_finite(what: &str, pos: usize, out: &Array2<f64>) -> TdmError {
    let (rows, cols) = out.dim();
    let max_abs = out
        .iter()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    TdmError::NonFinite(format!(
        "{what} produced {} at ({}, {}) of a {rows}x{cols} output (largest finite magnitude {max_abs:e})",
        out.iter().nth(pos).copied().unwrap_or(f64::NAN),
        pos / cols,
        pos % cols
    ))
}

/// The transform `f = f_1 o ... o f_T` (applied `f_1` first).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformStack {
    pub blocks: Vec<CouplingBlock>,
    dim: usize,
    hidden_factor: usize,
}

/// Per-block caches of a stack forward pass.
#[derive(Debug, Clone)]
pub struct StackCache {
    pub blocks: Vec<BlockCache>,
}

/// Parameter gradients, laid out exactly like the stack they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGradient(pub TransformStack);

impl StackGradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.0.flatten()
    }
}

/// Identity-initialised stack with the default clamp constant.
pub fn init_stack<R: Rng + ?Sized>(dim: usize, blocks: usize, hidden_factor: usize, rng: &mut R) -> Result<TransformStack> {
    TransformStack::init(dim, blocks, hidden_factor, DEFAULT_CLAMP, 0.0, rng)
}

impl TransformStack {
    /// Builds `blocks` coupling blocks on `dim` features with subnets of
    /// width `hidden_factor * dim`. With `output_scale == 0` every subnet's
    /// last layer is zero and the stack is exactly the identity map.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        blocks: usize,
        hidden_factor: usize,
        clamp: f64,
        output_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(TdmError::InvalidArgument(format!(
                "coupling blocks need at least 2 features, got {dim}"
            )));
        }
        if blocks == 0 || hidden_factor == 0 {
            return Err(TdmError::InvalidArgument(
                "need at least one block and a positive width factor".into(),
            ));
        }
        if !(clamp > 0.0) {
            return Err(TdmError::InvalidArgument(format!("clamp must be positive, got {clamp}")));
        }
        let hidden = hidden_factor * dim;
        let blocks = (0..blocks)
            .map(|_| CouplingBlock::init(dim, hidden, clamp, output_scale, rng))
            .collect();
        Ok(Self {
            blocks,
            dim,
            hidden_factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden_factor(&self) -> usize {
        self.hidden_factor
    }

    pub fn clamp(&self) -> f64 {
        self.blocks[0].clamp
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(CouplingBlock::n_params).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(CouplingBlock::zeros_like).collect(),
            dim: self.dim,
            hidden_factor: self.hidden_factor,
        }
    }

    fn layers(&self) -> impl Iterator<Item = (usize, &'static str, usize, &Linear)> {
        self.blocks.iter().enumerate().flat_map(|(b, block)| {
            block
                .subnets()
                .into_iter()
                .flat_map(move |(name, mlp)| mlp.layers.iter().enumerate().map(move |(l, layer)| (b, name, l, layer)))
        })
    }

    fn tensor_slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers().flat_map(|(_, _, _, layer)| {
            [
                layer.weight.as_slice().expect("standard layout"),
                layer.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    fn tensors(&self) -> impl Iterator<Item = (String, &[f64])> {
        self.layers().flat_map(|(b, name, l, layer)| {
            [
                (
                    format!("block{b}.{name}.layer{l}.weight"),
                    layer.weight.as_slice().expect("standard layout"),
                ),
                (
                    format!("block{b}.{name}.layer{l}.bias"),
                    layer.bias.as_slice().expect("standard layout"),
                ),
            ]
        })
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for mlp in block.subnets_mut() {
                for layer in &mut mlp.layers {
                    out.push(layer.weight.as_slice_mut().expect("standard layout"));
                    out.push(layer.bias.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    /// All parameters in a fixed order: block, subnet (g1, h1, g2, h2),
    /// layer, weight (row-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for t in self.tensor_slices() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(TdmError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Human-readable location of flat parameter `index`.
    pub fn param_path(&self, index: usize) -> String {
        let mut offset = 0;
        for (name, t) in self.tensors() {
            if index < offset + t.len() {
                return format!("{name}[{}]", index - offset);
            }
            offset += t.len();
        }
        format!("<out of range {index}>")
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(TdmError::Shape {
                expected: (x.nrows(), self.dim),
                found: x.dim(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, StackCache)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut z = x.to_owned();
        for block in &self.blocks {
            let (next, cache) = block.forward(z.view())?;
            caches.push(cache);
            z = next;
        }
        Ok((z, StackCache { blocks: caches }))
    }

    /// Outputs after each block: `f_1(x)`, `f_2(f_1(x))`, ...
    pub fn forward_views(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_input(x)?;
        let mut views = Vec::with_capacity(self.blocks.len());
        let mut z = x.to_owned();
        for block in &self.blocks {
            z = block.forward(z.view())?.0;
            views.push(z.clone());
        }
        Ok(views)
    }

    pub fn inverse(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(z)?;
        let mut x = z.to_owned();
        for block in self.blocks.iter().rev() {
            x = block.inverse(x.view())?;
        }
        Ok(x)
    }

    /// Given `dZ = dL/dZ`, returns `dL/dX` and `dL/dtheta`.
    pub fn backward(&self, cache: &StackCache, d_z: ArrayView2<f64>) -> Result<(Array2<f64>, StackGradient)> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(TdmError::InvalidArgument(format!(
                "cache holds {} blocks, stack has {}",
                cache.blocks.len(),
                self.blocks.len()
            )));
        }
        if cache.blocks.first().map(BlockCache::rows) != Some(d_z.nrows()) || d_z.ncols() != self.dim {
            return Err(TdmError::Shape {
                expected: (cache.blocks[0].rows(), self.dim),
                found: d_z.dim(),
            });
        }
        let mut grad = self.zeros_like();
        let mut d = d_z.to_owned();
        for ((block, bc), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            d = block.backward(bc, d.view(), g);
        }
        Ok((d, StackGradient(grad)))
    }

    pub fn to_checkpoint(&self) -> StackCheckpoint {
        let layers = self
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(b, block)| {
                block.subnets().into_iter().flat_map(move |(name, mlp)| {
                    mlp.layers.iter().enumerate().flat_map(move |(l, layer)| {
                        [
                            TensorRecord {
                                name: format!("block{b}.{name}.layer{l}.weight"),
                                shape: layer.weight.shape().to_vec(),
                                values: layer.weight.iter().copied().collect(),
                            },
                            TensorRecord {
                                name: format!("block{b}.{name}.layer{l}.bias"),
                                shape: layer.bias.shape().to_vec(),
                                values: layer.bias.to_vec(),
                            },
                        ]
                    })
                })
            })
            .collect();
        StackCheckpoint {
            dim: self.dim,
            blocks: self.blocks.len(),
            hidden_factor: self.hidden_factor,
            clamp: self.clamp(),
            tensors: layers,
        }
    }

    pub fn from_checkpoint(ckpt: &StackCheckpoint) -> Result<Self> {
        let mut stack = Self::init(
            ckpt.dim,
            ckpt.blocks,
            ckpt.hidden_factor,
            ckpt.clamp,
            0.0,
            &mut crate::rng::seeded_rng(0, 0),
        )?;
        let expected: Vec<(String, usize)> = stack.tensors().map(|(n, t)| (n, t.len())).collect();
        if expected.len() != ckpt.tensors.len() {
            return Err(TdmError::InvalidArgument(format!(
                "checkpoint has {} tensors, architecture needs {}",
                ckpt.tensors.len(),
                expected.len()
            )));
        }
        for ((name, len), rec) in expected.iter().zip(&ckpt.tensors) {
            if name != &rec.name || *len != rec.values.len() || rec.shape.iter().product::<usize>() != *len {
                return Err(TdmError::InvalidArgument(format!(
                    "checkpoint tensor {} does not match {name} ({len} values)",
                    rec.name
                )));
            }
        }
        let flat: Vec<f64> = ckpt.tensors.iter().flat_map(|t| t.values.iter().copied()).collect();
        stack.assign_flat(&flat)?;
        Ok(stack)
    }
}

/// Serialisable parameter dump: architecture metadata plus one row-major
/// tensor per layer weight and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackCheckpoint {
    pub dim: usize,
    pub blocks: usize,
    pub hidden_factor: usize,
    pub clamp: f64,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    fn random_stack(dim: usize, blocks: usize, seed: u64) -> TransformStack {
        TransformStack::init(dim, blocks, 2, DEFAULT_CLAMP, 1.0, &mut seeded_rng(seed, 0)).unwrap()
    }

    #[test]
    fn identity_at_init() {
        let mut rng = seeded_rng(0, 0);
        let stack = init_stack(4, 3, 2, &mut rng).unwrap();
        let x = randn(&mut rng, 10, 4);
        let (z, _) = stack.forward(x.view()).unwrap();
        assert_eq!(z, x);
        assert!(init_stack(1, 3, 2, &mut rng).is_err());
    }

    #[test]
    fn parameter_count_matches_architecture() {
        let stack = init_stack(4, 3, 2, &mut seeded_rng(0, 0)).unwrap();
        // 2->8->8->8->2 per subnet
        let per_subnet = (2 * 8 + 8) + 2 * (8 * 8 + 8) + (8 * 2 + 2);
        assert_eq!(stack.n_params(), 3 * 4 * per_subnet);
        assert_eq!(stack.flatten().len(), 2232);
        // odd dimension: splits 2 | 3
        let stack = init_stack(5, 1, 1, &mut seeded_rng(0, 0)).unwrap();
        let widths_g1 = (3 * 5 + 5) + 2 * (5 * 5 + 5) + (5 * 2 + 2);
        let widths_g2 = (2 * 5 + 5) + 2 * (5 * 5 + 5) + (5 * 3 + 3);
        assert_eq!(stack.n_params(), 2 * widths_g1 + 2 * widths_g2);
    }

    #[test]
    fn clamp_properties() {
        let c = DEFAULT_CLAMP;
        assert_eq!(clamp_scale(0.0, c), 0.0);
        assert!((clamp_scale(1e6, c) - c).abs() < 1e-3);
        for u in [0.1, 1.0, 3.7, 50.0] {
            assert_eq!(clamp_scale(-u, c), -clamp_scale(u, c));
            assert!(clamp_scale(u, c).abs() < c);
        }
    }

    fn constant_mlp(fan_in: usize, fan_out: usize, value: f64) -> Mlp {
        let mut mlp = Mlp::init(&[fan_in, 3, 3, 3, fan_out], 0.0, &mut seeded_rng(0, 0));
        mlp.layers.last_mut().unwrap().bias.fill(value);
        mlp
    }

    #[test]
    fn hand_set_block() {
        let block = CouplingBlock {
            g1: constant_mlp(1, 1, 0.0),
            h1: constant_mlp(1, 1, 1.0),
            g2: constant_mlp(1, 1, 0.0),
            h2: constant_mlp(1, 1, 0.0),
            split: 1,
            clamp: DEFAULT_CLAMP,
        };
        let (out, _) = block.forward(array![[2.0, -3.0], [0.5, 0.25]].view()).unwrap();
        assert_eq!(out, array![[3.0, -3.0], [1.5, 0.25]]);
    }

    #[test]
    fn block_round_trip() {
        let mut rng = seeded_rng(4, 0);
        let stack = random_stack(6, 1, 21);
        let y = randn(&mut rng, 16, 6);
        let (out, _) = stack.blocks[0].forward(y.view()).unwrap();
        let back = stack.blocks[0].inverse(out.view()).unwrap();
        let err = (&back - &y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn stack_views_and_rows() {
        let mut rng = seeded_rng(8, 0);
        let stack = random_stack(3, 3, 2);
        let x = randn(&mut rng, 7, 3);
        let views = stack.forward_views(x.view()).unwrap();
        assert_eq!(views.len(), 3);
        let (z, _) = stack.forward(x.view()).unwrap();
        assert_eq!(views[2], z);
        let single = stack.blocks[0].forward(x.view()).unwrap().0;
        assert_eq!(views[0], single);

        let perm = [6, 0, 3, 1, 5, 2, 4];
        let zp = stack.forward(x.select(Axis(0), &perm).view()).unwrap().0;
        for (k, &p) in perm.iter().enumerate() {
            for j in 0..3 {
                assert!((zp[[k, j]] - z[[p, j]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identity_backward() {
        let mut rng = seeded_rng(1, 0);
        let stack = init_stack(5, 2, 2, &mut rng).unwrap();
        let x = randn(&mut rng, 6, 5);
        let dz = randn(&mut rng, 6, 5);
        let (_, cache) = stack.forward(x.view()).unwrap();
        let (dx, grad) = stack.backward(&cache, dz.view()).unwrap();
        assert_eq!(dx, dz);
        let sums = dz.sum_axis(Axis(0));
        for block in &grad.0.blocks {
            let h1 = &block.h1.layers.last().unwrap().bias;
            let h2 = &block.h2.layers.last().unwrap().bias;
            for j in 0..2 {
                assert!((h1[j] - sums[j]).abs() < 1e-12);
            }
            for j in 0..3 {
                assert!((h2[j] - sums[2 + j]).abs() < 1e-12);
            }
            // output-layer weights see nonzero hidden activations
            assert!(block.g1.layers.last().unwrap().weight.iter().any(|&w| w != 0.0));
        }
    }

    #[test]
    fn flat_round_trip_and_paths() {
        let mut stack = random_stack(4, 2, 5);
        let flat = stack.flatten();
        let mut other = stack.zeros_like();
        other.assign_flat(&flat).unwrap();
        assert_eq!(other, stack);
        assert_eq!(stack.param_path(0), "block0.g1.layer0.weight[0]");
        assert!(stack.assign_flat(&flat[1..]).is_err());

        let ckpt = stack.to_checkpoint();
        let text = serde_json::to_string(&ckpt).unwrap();
        let back: StackCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(TransformStack::from_checkpoint(&back).unwrap(), stack);
        let mut truncated = ckpt.clone();
        truncated.tensors.pop();
        assert!(TransformStack::from_checkpoint(&truncated).is_err());
        stack.blocks.pop();
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let stack = random_stack(4, 2, 5);
        assert!(stack.forward(Array2::zeros((3, 5)).view()).is_err());
        let (_, cache) = stack.forward(Array2::zeros((3, 4)).view()).unwrap();
        assert!(stack.backward(&cache, Array2::zeros((2, 4)).view()).is_err());
        let other = random_stack(4, 3, 5);
        assert!(other.backward(&cache, Array2::zeros((3, 4)).view()).is_err());
    }

    #[test]
    fn scale_factors_bounded() {
        let mut stack = random_stack(4, 2, 9);
        // exaggerate the scale subnets
        for b in &mut stack.blocks {
            b.g1.layers.last_mut().unwrap().weight.mapv_inplace(|w| 100.0 * w);
            b.g2.layers.last_mut().unwrap().weight.mapv_inplace(|w| 100.0 * w);
        }
        let x = randn(&mut seeded_rng(3, 0), 50, 4);
        let (_, cache) = stack.forward(x.view()).unwrap();
        let c = DEFAULT_CLAMP;
        for bc in &cache.blocks {
            for f in bc.scale_factors() {
                assert!(f >= (-c).exp() && f <= c.exp());
            }
        }
    }
}
