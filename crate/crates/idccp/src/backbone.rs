//! Siamese-style D4-equivariant convolutional backbone.
//!
//! One parameter set is replayed on all eight transformed copies of the
//! input, so the stack of branch outputs carries the group structure of the
//! input transformations. All layers here commute with the grid action:
//! convolutions use centered "same" zero padding with odd kernels, pooling
//! strides divide the spatial dims, and pointwise nonlinearities are trivially
//! equivariant. Forward and backward passes are written out by hand and
//! checked against central finite differences.

use crate::error::{Error, Result};
use crate::group::{self, GroupElement, ELEMENTS};
use crate::linalg::Matrix;
use crate::rng::SeededRng;
use crate::tensor::ImageTensor;

/// Declarative layer description used by configs; channel counts are chained
/// automatically when parameters are initialized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Square convolution with odd kernel size and "same" zero padding.
    Conv { kernel: usize, c_out: usize },
    Relu,
    AvgPool { stride: usize },
    MaxPool { stride: usize },
}

/// A convolution layer's weights: `[c_out][c_in][k][k]` plus one bias per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Shifts the padding one row up, breaking rotation equivariance.
    /// Exists as a negative control for the equivariance checks.
    pub uneven_padding: bool,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    #[inline]
    fn w(&self, o: usize, ci: usize, u: usize, v: usize) -> f64 {
        self.weights[((o * self.c_in + ci) * self.kernel + u) * self.kernel + v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    AvgPool(usize),
    MaxPool(usize),
}

/// The single parameter set shared by every branch of the Siamese stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetParams {
    pub layers: Vec<Layer>,
}

impl ConvNetParams {
    /// Initialize parameters for a layer spec: Gaussian kernels with
    /// std `sqrt(2 / (k^2 c_in))`, zero biases.
    pub fn init(spec: &[LayerSpec], in_channels: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.len());
        let mut c_in = in_channels;
        for s in spec {
            match s {
                LayerSpec::Conv { kernel, c_out } => {
                    if kernel % 2 == 0 {
                        return Err(Error::Config(format!(
                            "convolution kernel size must be odd, got {}",
                            kernel
                        )));
                    }
                    let std = (2.0 / ((kernel * kernel) as f64 * c_in as f64)).sqrt();
                    let n = c_out * c_in * kernel * kernel;
                    let weights = (0..n).map(|_| rng.normal() * std).collect();
                    layers.push(Layer::Conv(ConvLayer {
                        kernel: *kernel,
                        c_in,
                        c_out: *c_out,
                        uneven_padding: false,
                        weights,
                        bias: vec![0.0; *c_out],
                    }));
                    c_in = *c_out;
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::AvgPool { stride } => layers.push(Layer::AvgPool(*stride)),
                LayerSpec::MaxPool { stride } => layers.push(Layer::MaxPool(*stride)),
            }
        }
        Ok(ConvNetParams { layers })
    }

    /// The default toy architecture: two 3x3 conv + pool stages and a 1x1
    /// projection to `d` output channels.
    pub fn default_spec(d: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv { kernel: 3, c_out: 16 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { stride: 2 },
            LayerSpec::Conv { kernel: 3, c_out: 32 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { stride: 2 },
            LayerSpec::Conv { kernel: 1, c_out: d },
        ]
    }

    /// Output channel count of the last convolution layer.
    pub fn out_channels(&self, in_channels: usize) -> usize {
        let mut c = in_channels;
        for layer in &self.layers {
            if let Layer::Conv(conv) = layer {
                c = conv.c_out;
            }
        }
        c
    }

    /// Zero-valued clone with the same structure, for gradients and momentum.
    pub fn zeros_like(&self) -> ConvNetParams {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(ConvLayer {
                    weights: vec![0.0; c.weights.len()],
                    bias: vec![0.0; c.bias.len()],
                    ..c.clone()
                }),
                other => other.clone(),
            })
            .collect();
        ConvNetParams { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weights.len() + c.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Apply `f(param, other_param)` elementwise, writing the result into
    /// `self`. Structures must match.
    pub fn zip_apply(&mut self, other: &ConvNetParams, f: impl Fn(f64, f64) -> f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Shape("parameter structure mismatch".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Layer::Conv(ca), Layer::Conv(cb)) => {
                    if ca.weights.len() != cb.weights.len() || ca.bias.len() != cb.bias.len() {
                        return Err(Error::Shape("parameter structure mismatch".into()));
                    }
                    for (x, y) in ca.weights.iter_mut().zip(&cb.weights) {
                        *x = f(*x, *y);
                    }
                    for (x, y) in ca.bias.iter_mut().zip(&cb.bias) {
                        *x = f(*x, *y);
                    }
                }
                (Layer::Relu, Layer::Relu) => {}
                (Layer::AvgPool(_), Layer::AvgPool(_)) => {}
                (Layer::MaxPool(_), Layer::MaxPool(_)) => {}
                _ => return Err(Error::Shape("parameter structure mismatch".into())),
            }
        }
        Ok(())
    }

    /// All trainable values in a fixed order (layer by layer, weights then
    /// bias). Used by finite-difference oracles and serialization.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            if let Layer::Conv(c) = l {
                out.extend_from_slice(&c.weights);
                out.extend_from_slice(&c.bias);
            }
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            if let Layer::Conv(c) = l {
                let nw = c.weights.len();
                c.weights.copy_from_slice(&flat[pos..pos + nw]);
                pos += nw;
                let nb = c.bias.len();
                c.bias.copy_from_slice(&flat[pos..pos + nb]);
                pos += nb;
            }
        }
        Ok(())
    }

    /// Transform every conv kernel's spatial slices by the grid action of
    /// `g`. 1x1 kernels are unaffected.
    pub fn transform_kernels(&self, g: GroupElement) -> ConvNetParams {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) if c.kernel > 1 => {
                    let k = c.kernel;
                    let mut weights = vec![0.0; c.weights.len()];
                    for o in 0..c.c_out {
                        for ci in 0..c.c_in {
                            let base = (o * c.c_in + ci) * k * k;
                            group::act_plane(
                                g,
                                &c.weights[base..base + k * k],
                                k,
                                &mut weights[base..base + k * k],
                            );
                        }
                    }
                    Layer::Conv(ConvLayer {
                        weights,
                        ..c.clone()
                    })
                }
                other => other.clone(),
            })
            .collect();
        ConvNetParams { layers }
    }

    fn validate(&self, img: &ImageTensor) -> Result<()> {
        if !img.is_square() {
            return Err(Error::Shape(format!(
                "backbone input must be square, got {}x{}",
                img.height, img.width
            )));
        }
        let mut c = img.channels;
        let mut dim = img.height;
        for (idx, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(conv) => {
                    if conv.c_in != c {
                        return Err(Error::Config(format!(
                            "layer {}: expects {} input channels, got {}",
                            idx, conv.c_in, c
                        )));
                    }
                    c = conv.c_out;
                }
                Layer::AvgPool(s) | Layer::MaxPool(s) => {
                    if *s == 0 || dim % s != 0 {
                        return Err(Error::Config(format!(
                            "layer {}: pool stride {} does not divide spatial dim {}",
                            idx, s, dim
                        )));
                    }
                    dim /= s;
                }
                Layer::Relu => {}
            }
        }
        Ok(())
    }
}

/// Stored intermediate activations of one branch forward pass;
/// `activations[0]` is the branch input.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub activations: Vec<ImageTensor>,
}

/// The eight branch feature matrices, indexed in the fixed group order.
/// Each is `d x (h*w)`.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub branches: [Matrix; 8],
}

impl FeatureStack {
    pub fn branch(&self, g: GroupElement) -> &Matrix {
        &self.branches[g.index()]
    }
}

/// Tapes for all eight branches of one stack forward pass.
#[derive(Debug, Clone)]
pub struct StackTape {
    pub tapes: [ForwardTape; 8],
}

fn conv_forward(layer: &ConvLayer, x: &ImageTensor) -> ImageTensor {
    let (h, w) = (x.height, x.width);
    let k = layer.kernel;
    let p = (k / 2) as isize;
    let row_shift: isize = if layer.uneven_padding && k > 1 { 1 } else { 0 };
    let mut y = ImageTensor::zeros(h, w, layer.c_out);
    for o in 0..layer.c_out {
        let b = layer.bias[o];
        for i in 0..h {
            for j in 0..w {
                y.set(o, i, j, b);
            }
        }
        for ci in 0..layer.c_in {
            let xp = x.plane(ci);
            for u in 0..k {
                let di = u as isize - p + row_shift;
                for v in 0..k {
                    let dj = v as isize - p;
                    let wgt = layer.w(o, ci, u, v);
                    if wgt == 0.0 {
                        continue;
                    }
                    let hw = h * w;
                    let yplane = &mut y.data[o * hw..(o + 1) * hw];
                    for i in 0..h {
                        let si = i as isize + di;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let xrow = &xp[(si as usize) * w..(si as usize + 1) * w];
                        let yrow = &mut yplane[i * w..(i + 1) * w];
                        let j_lo = (-dj).max(0) as usize;
                        let j_hi = ((w as isize - dj).min(w as isize)) as usize;
                        for j in j_lo..j_hi {
                            yrow[j] += wgt * xrow[(j as isize + dj) as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(
    layer: &ConvLayer,
    x: &ImageTensor,
    grad_y: &ImageTensor,
    grad_layer: &mut ConvLayer,
) -> ImageTensor {
    let (h, w) = (x.height, x.width);
    let k = layer.kernel;
    let p = (k / 2) as isize;
    let row_shift: isize = if layer.uneven_padding && k > 1 { 1 } else { 0 };
    let mut grad_x = ImageTensor::zeros(h, w, layer.c_in);
    for o in 0..layer.c_out {
        let gy = grad_y.plane(o);
        grad_layer.bias[o] += gy.iter().sum::<f64>();
        for ci in 0..layer.c_in {
            let xp = x.plane(ci);
            let hw = h * w;
            let gx = &mut grad_x.data[ci * hw..(ci + 1) * hw];
            for u in 0..k {
                let di = u as isize - p + row_shift;
                for v in 0..k {
                    let dj = v as isize - p;
                    let widx = ((o * layer.c_in + ci) * k + u) * k + v;
                    let wgt = layer.w(o, ci, u, v);
                    let mut wsum = 0.0;
                    for i in 0..h {
                        let si = i as isize + di;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let gyrow = &gy[i * w..(i + 1) * w];
                        let xrow = &xp[(si as usize) * w..(si as usize + 1) * w];
                        let gxrow = &mut gx[(si as usize) * w..(si as usize + 1) * w];
                        let j_lo = (-dj).max(0) as usize;
                        let j_hi = ((w as isize - dj).min(w as isize)) as usize;
                        for j in j_lo..j_hi {
                            let sj = (j as isize + dj) as usize;
                            wsum += gyrow[j] * xrow[sj];
                            gxrow[sj] += gyrow[j] * wgt;
                        }
                    }
                    grad_layer.weights[widx] += wsum;
                }
            }
        }
    }
    grad_x
}

fn pool_forward(x: &ImageTensor, s: usize, max: bool) -> ImageTensor {
    let (h, w) = (x.height / s, x.width / s);
    let mut y = ImageTensor::zeros(h, w, x.channels);
    for c in 0..x.channels {
        for i in 0..h {
            for j in 0..w {
                if max {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..s {
                        for b in 0..s {
                            m = m.max(x.get(c, i * s + a, j * s + b));
                        }
                    }
                    y.set(c, i, j, m);
                } else {
                    let mut acc = 0.0;
                    for a in 0..s {
                        for b in 0..s {
                            acc += x.get(c, i * s + a, j * s + b);
                        }
                    }
                    y.set(c, i, j, acc / (s * s) as f64);
                }
            }
        }
    }
    y
}

fn pool_backward(x: &ImageTensor, grad_y: &ImageTensor, s: usize, max: bool) -> ImageTensor {
    let mut grad_x = ImageTensor::zeros(x.height, x.width, x.channels);
    let (h, w) = (grad_y.height, grad_y.width);
    for c in 0..x.channels {
        for i in 0..h {
            for j in 0..w {
                let g = grad_y.get(c, i, j);
                if max {
                    // Route to the first maximum in row-major block order.
                    let (mut bi, mut bj, mut m) = (0, 0, f64::NEG_INFINITY);
                    for a in 0..s {
                        for b in 0..s {
                            let v = x.get(c, i * s + a, j * s + b);
                            if v > m {
                                m = v;
                                bi = a;
                                bj = b;
                            }
                        }
                    }
                    let old = grad_x.get(c, i * s + bi, j * s + bj);
                    grad_x.set(c, i * s + bi, j * s + bj, old + g);
                } else {
                    let share = g / (s * s) as f64;
                    for a in 0..s {
                        for b in 0..s {
                            let old = grad_x.get(c, i * s + a, j * s + b);
                            grad_x.set(c, i * s + a, j * s + b, old + share);
                        }
                    }
                }
            }
        }
    }
    grad_x
}

fn features_to_matrix(x: &ImageTensor) -> Matrix {
    Matrix::from_fn(x.channels, x.height * x.width, |c, idx| x.data[c * x.height * x.width + idx])
}

/// Forward pass of one branch. Returns the last layer's activations as a
/// `d x (h*w)` matrix plus the tape for the backward pass.
pub fn forward_branch(params: &ConvNetParams, img: &ImageTensor) -> Result<(Matrix, ForwardTape)> {
    params.validate(img)?;
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(img.clone());
    for layer in &params.layers {
        let x = activations.last().unwrap();
        let y = match layer {
            Layer::Conv(c) => conv_forward(c, x),
            Layer::Relu => {
                let mut y = x.clone();
                for v in &mut y.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                y
            }
            Layer::AvgPool(s) => pool_forward(x, *s, false),
            Layer::MaxPool(s) => pool_forward(x, *s, true),
        };
        activations.push(y);
    }
    let features = features_to_matrix(activations.last().unwrap());
    if !features.is_finite() {
        return Err(Error::NonFinite("backbone forward".into()));
    }
    Ok((features, ForwardTape { activations }))
}

/// Forward all eight branches: branch `g` sees `act_on_image(g, img)` and the
/// identical parameter set.
pub fn forward_stack(params: &ConvNetParams, img: &ImageTensor) -> Result<(FeatureStack, StackTape)> {
    let mut feats: Vec<Matrix> = Vec::with_capacity(8);
    let mut tapes: Vec<ForwardTape> = Vec::with_capacity(8);
    for g in ELEMENTS {
        let transformed = group::act_on_image(g, img)?;
        let (f, t) = forward_branch(params, &transformed)?;
        feats.push(f);
        tapes.push(t);
    }
    let branches: [Matrix; 8] = feats.try_into().unwrap();
    let tapes: [ForwardTape; 8] = tapes.try_into().unwrap();
    Ok((FeatureStack { branches }, StackTape { tapes }))
}

fn backward_branch(
    params: &ConvNetParams,
    tape: &ForwardTape,
    grad_features: &Matrix,
    grads: &mut ConvNetParams,
) -> Result<ImageTensor> {
    let last = tape.activations.last().unwrap();
    if grad_features.rows() != last.channels
        || grad_features.cols() != last.height * last.width
    {
        return Err(Error::Shape(format!(
            "feature gradient is {}x{}, expected {}x{}",
            grad_features.rows(),
            grad_features.cols(),
            last.channels,
            last.height * last.width
        )));
    }
    let mut grad = ImageTensor {
        height: last.height,
        width: last.width,
        channels: last.channels,
        data: grad_features.data().to_vec(),
    };
    for (idx, layer) in params.layers.iter().enumerate().rev() {
        let x = &tape.activations[idx];
        grad = match layer {
            Layer::Conv(c) => {
                let grad_layer = match &mut grads.layers[idx] {
                    Layer::Conv(gl) => gl,
                    _ => unreachable!(),
                };
                conv_backward(c, x, &grad, grad_layer)
            }
            Layer::Relu => {
                let mut g = grad;
                for (gv, xv) in g.data.iter_mut().zip(&x.data) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            Layer::AvgPool(s) => pool_backward(x, &grad, *s, false),
            Layer::MaxPool(s) => pool_backward(x, &grad, *s, true),
        };
    }
    Ok(grad)
}

/// Backward through all eight branches, accumulating parameter gradients in
/// the fixed group order. Also returns the gradient with respect to the
/// untransformed input image.
pub fn backward_stack(
    params: &ConvNetParams,
    tape: &StackTape,
    grad_per_branch: &[Matrix; 8],
) -> Result<(ConvNetParams, ImageTensor)> {
    let mut grads = params.zeros_like();
    let first = &tape.tapes[0].activations[0];
    let mut input_grad = ImageTensor::zeros(first.height, first.width, first.channels);
    for g in ELEMENTS {
        let branch_input_grad = backward_branch(
            params,
            &tape.tapes[g.index()],
            &grad_per_branch[g.index()],
            &mut grads,
        )?;
        // Branch g consumed act(g, x): the adjoint of a permutation is its
        // inverse permutation.
        let pulled = group::act_on_image(group::inverse(g), &branch_input_grad)?;
        for (a, b) in input_grad.data.iter_mut().zip(&pulled.data) {
            *a += b;
        }
    }
    Ok((grads, input_grad))
}

/// Largest deviation, over all eight group elements, between running the
/// network on the transformed image and transforming the output of the
/// network with correspondingly transformed kernels. Zero (to roundoff) for
/// architectures built from equivariant layers.
pub fn check_equivariance(params: &ConvNetParams, img: &ImageTensor) -> Result<f64> {
    let mut worst = 0.0f64;
    for g in ELEMENTS {
        let lhs = {
            let transformed = group::act_on_image(g, img)?;
            let (_, tape) = forward_branch(params, &transformed)?;
            tape.activations.last().unwrap().clone()
        };
        let rhs = {
            let rotated = params.transform_kernels(group::inverse(g));
            let (_, tape) = forward_branch(&rotated, img)?;
            group::act_on_image(g, tape.activations.last().unwrap())?
        };
        for (a, b) in lhs.data.iter().zip(&rhs.data) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupElement::*;

    fn random_image(n: usize, channels: usize, seed: u64) -> ImageTensor {
        let mut rng = SeededRng::new(seed);
        ImageTensor::new(n, n, channels, (0..n * n * channels).map(|_| rng.uniform()).collect())
            .unwrap()
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut rng = SeededRng::new(1);
        let params =
            ConvNetParams::init(&ConvNetParams::default_spec(8), 1, &mut rng).unwrap();
        let img = ImageTensor::zeros(8, 8, 1);
        let (f, _) = forward_branch(&params, &img).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn identity_pointwise_conv_flattens_input() {
        let layer = ConvLayer {
            kernel: 1,
            c_in: 1,
            c_out: 1,
            uneven_padding: false,
            weights: vec![1.0],
            bias: vec![0.0],
        };
        let params = ConvNetParams {
            layers: vec![Layer::Conv(layer)],
        };
        let img = random_image(4, 1, 3);
        let (f, _) = forward_branch(&params, &img).unwrap();
        assert_eq!(f.data(), &img.data[..]);
    }

    #[test]
    fn ones_kernel_counts_neighborhood() {
        // 3x3 all-ones kernel over a one-hot 4x4 image: the output marks the
        // 3x3 neighborhood of the hot pixel.
        let layer = ConvLayer {
            kernel: 3,
            c_in: 1,
            c_out: 1,
            uneven_padding: false,
            weights: vec![1.0; 9],
            bias: vec![0.0],
        };
        let params = ConvNetParams {
            layers: vec![Layer::Conv(layer)],
        };
        let mut img = ImageTensor::zeros(4, 4, 1);
        img.set(0, 1, 2, 1.0);
        let (f, _) = forward_branch(&params, &img).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if (i as i32 - 1).abs() <= 1 && (j as i32 - 2).abs() <= 1 {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(f.get(0, i * 4 + j), expect, "at ({}, {})", i, j);
            }
        }
    }

    #[test]
    fn constant_image_branches_identical() {
        let mut rng = SeededRng::new(5);
        let params =
            ConvNetParams::init(&ConvNetParams::default_spec(8), 1, &mut rng).unwrap();
        let img = ImageTensor::new(8, 8, 1, vec![0.3; 64]).unwrap();
        let (stack, _) = forward_stack(&params, &img).unwrap();
        for g in ELEMENTS {
            assert_eq!(stack.branch(g), stack.branch(E));
        }
    }

    #[test]
    fn stack_of_transformed_input_permutes_branches() {
        let mut rng = SeededRng::new(6);
        let params =
            ConvNetParams::init(&ConvNetParams::default_spec(8), 1, &mut rng).unwrap();
        let img = random_image(8, 1, 7);
        let (base, _) = forward_stack(&params, &img).unwrap();
        for h in ELEMENTS {
            let moved = group::act_on_image(h, &img).unwrap();
            let (stack, _) = forward_stack(&params, &moved).unwrap();
            for g in ELEMENTS {
                let expect = base.branch(group::compose(g, h));
                let diff = stack.branch(g).sub(expect).unwrap().max_abs();
                assert!(diff <= 1e-12, "branch {:?} of T_{:?} x differs by {}", g, h, diff);
            }
        }
    }

    #[test]
    fn default_architecture_is_equivariant() {
        let mut rng = SeededRng::new(11);
        let params =
            ConvNetParams::init(&ConvNetParams::default_spec(12), 1, &mut rng).unwrap();
        for seed in 0..5 {
            let img = random_image(16, 1, 100 + seed);
            let err = check_equivariance(&params, &img).unwrap();
            assert!(err <= 1e-12, "equivariance error {}", err);
        }
    }

    #[test]
    fn identity_network_equivariance_is_exact() {
        let params = ConvNetParams { layers: vec![] };
        let img = random_image(8, 1, 13);
        assert_eq!(check_equivariance(&params, &img).unwrap(), 0.0);
    }

    #[test]
    fn uneven_padding_breaks_equivariance() {
        let mut rng = SeededRng::new(17);
        let mut params =
            ConvNetParams::init(&[LayerSpec::Conv { kernel: 3, c_out: 4 }], 1, &mut rng).unwrap();
        if let Layer::Conv(c) = &mut params.layers[0] {
            c.uneven_padding = true;
        }
        let img = random_image(8, 1, 19);
        let err = check_equivariance(&params, &img).unwrap();
        assert!(err > 1e-6, "expected a strictly positive error, got {}", err);
    }

    #[test]
    fn max_pool_is_also_equivariant() {
        let mut rng = SeededRng::new(23);
        let spec = vec![
            LayerSpec::Conv { kernel: 3, c_out: 4 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { stride: 2 },
        ];
        let params = ConvNetParams::init(&spec, 1, &mut rng).unwrap();
        let img = random_image(8, 1, 29);
        let err = check_equivariance(&params, &img).unwrap();
        assert!(err <= 1e-12, "equivariance error {}", err);
    }

    #[test]
    fn zero_upstream_grads_give_zero_param_grads() {
        let mut rng = SeededRng::new(31);
        let params =
            ConvNetParams::init(&ConvNetParams::default_spec(8), 1, &mut rng).unwrap();
        let img = random_image(8, 1, 37);
        let (stack, tape) = forward_stack(&params, &img).unwrap();
        let zeros: [Matrix; 8] = std::array::from_fn(|i| {
            Matrix::zeros(stack.branches[i].rows(), stack.branches[i].cols())
        });
        let (grads, input_grad) = backward_stack(&params, &tape, &zeros).unwrap();
        assert!(grads.to_flat().iter().all(|v| *v == 0.0));
        assert!(input_grad.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pointwise_conv_gradient_by_hand() {
        // Single 1x1 conv, one channel: l = <G, w * X> so dl/dw = <G, X>.
        let layer = ConvLayer {
            kernel: 1,
            c_in: 1,
            c_out: 1,
            uneven_padding: false,
            weights: vec![0.7],
            bias: vec![0.1],
        };
        let params = ConvNetParams {
            layers: vec![Layer::Conv(layer)],
        };
        let img = random_image(4, 1, 41);
        let (_, tape) = forward_stack(&params, &img).unwrap();
        let mut rng = SeededRng::new(43);
        let grads_up: [Matrix; 8] =
            std::array::from_fn(|_| Matrix::from_fn(1, 16, |_, _| rng.normal()));
        let (grads, _) = backward_stack(&params, &tape, &grads_up).unwrap();
        let mut expect_w = 0.0;
        let mut expect_b = 0.0;
        for g in ELEMENTS {
            let branch_img = group::act_on_image(g, &img).unwrap();
            for idx in 0..16 {
                expect_w += grads_up[g.index()].get(0, idx) * branch_img.data[idx];
                expect_b += grads_up[g.index()].get(0, idx);
            }
        }
        let flat = grads.to_flat();
        assert!((flat[0] - expect_w).abs() < 1e-12);
        assert!((flat[1] - expect_b).abs() < 1e-12);
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(47);
        let spec = vec![
            LayerSpec::Conv { kernel: 3, c_out: 3 },
            LayerSpec::Relu,
            LayerSpec::AvgPool { stride: 2 },
            LayerSpec::Conv { kernel: 1, c_out: 4 },
        ];
        let params = ConvNetParams::init(&spec, 1, &mut rng).unwrap();
        let img = random_image(8, 1, 53);
        // Fixed random upstream gradient defines the scalar loss
        // l(theta) = sum_g <G_g, F_g(theta)>.
        let (stack, tape) = forward_stack(&params, &img).unwrap();
        let mut grng = SeededRng::new(59);
        let grads_up: [Matrix; 8] = std::array::from_fn(|i| {
            Matrix::from_fn(stack.branches[i].rows(), stack.branches[i].cols(), |_, _| {
                grng.normal()
            })
        });
        let (grads, _) = backward_stack(&params, &tape, &grads_up).unwrap();
        let analytic = grads.to_flat();

        let loss = |theta: &[f64]| -> f64 {
            let mut p = params.clone();
            p.set_from_flat(theta).unwrap();
            let (s, _) = forward_stack(&p, &img).unwrap();
            ELEMENTS
                .iter()
                .map(|&g| grads_up[g.index()].dot(s.branch(g)).unwrap())
                .sum()
        };
        let theta = params.to_flat();
        let mut idx_rng = SeededRng::new(61);
        let h = 1e-5;
        for _ in 0..5 {
            let i = idx_rng.below(theta.len());
            let mut tp = theta.clone();
            tp[i] += h;
            let fp = loss(&tp);
            tp[i] = theta[i] - h;
            let fm = loss(&tp);
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-4,
                "coordinate {}: analytic {} vs numeric {}",
                i,
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn init_rejects_even_kernel() {
        let mut rng = SeededRng::new(1);
        assert!(
            ConvNetParams::init(&[LayerSpec::Conv { kernel: 4, c_out: 2 }], 1, &mut rng).is_err()
        );
    }

    #[test]
    fn validate_rejects_bad_pool() {
        let mut rng = SeededRng::new(1);
        let params =
            ConvNetParams::init(&[LayerSpec::AvgPool { stride: 3 }], 1, &mut rng).unwrap();
        let img = ImageTensor::zeros(8, 8, 1);
        assert!(forward_branch(&params, &img).is_err());
    }
}
