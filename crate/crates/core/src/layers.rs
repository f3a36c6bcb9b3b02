//! Layers with hand-derived backward passes: linear, layer normalization,
//! ReLU, and inverted dropout. No autograd graph; each backward is written
//! out from the chain rule and checked against finite differences in tests.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{column_sums, matmul_xw, matmul_xwt, matmul_ytx, Tensor};

/// Train/eval switch for dropout sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Fully connected layer; weight is [out × in].
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<LinearLayer> {
        if weight.shape().len() != 2 || bias.shape().len() != 1 {
            return Err(Error::Shape("linear expects 2-D weight, 1-D bias".into()));
        }
        if weight.rows() != bias.len() {
            return Err(Error::Shape(format!(
                "weight rows {} != bias length {}",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(LinearLayer { weight, bias })
    }

    /// Uniform init in [-sqrt(1/fan_in), +sqrt(1/fan_in)], zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> LinearLayer {
        let bound = (1.0 / d_in as f32).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        LinearLayer {
            weight: Tensor::new(vec![d_out, d_in], data).unwrap(),
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

pub fn linear_forward(layer: &LinearLayer, x: &Tensor) -> Result<Tensor> {
    matmul_xwt(x, &layer.weight, Some(&layer.bias))
}

/// Gradients of a linear layer given the stored input and upstream dy.
pub struct LinearGrads {
    pub dx: Tensor,
    pub dweight: Tensor,
    pub dbias: Tensor,
}

pub fn linear_backward(layer: &LinearLayer, x: &Tensor, dy: &Tensor) -> LinearGrads {
    LinearGrads {
        dx: matmul_xw(dy, &layer.weight),
        dweight: matmul_ytx(dy, x),
        dbias: column_sums(dy),
    }
}

/// Per-feature affine normalization over the last dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormLayer {
    pub gain: Tensor,
    pub shift: Tensor,
    pub epsilon: f32,
}

pub const LAYER_NORM_EPSILON: f32 = 1e-5;

impl LayerNormLayer {
    pub fn new(gain: Tensor, shift: Tensor, epsilon: f32) -> Result<LayerNormLayer> {
        if gain.len() != shift.len() {
            return Err(Error::Shape(format!(
                "gain length {} != shift length {}",
                gain.len(),
                shift.len()
            )));
        }
        if epsilon <= 0.0 {
            return Err(Error::Config("layer norm epsilon must be > 0".into()));
        }
        Ok(LayerNormLayer {
            gain,
            shift,
            epsilon,
        })
    }

    /// Identity-at-start init: gain 1, shift 0.
    pub fn init(d: usize) -> LayerNormLayer {
        LayerNormLayer {
            gain: Tensor::filled(vec![d], 1.0),
            shift: Tensor::zeros(vec![d]),
            epsilon: LAYER_NORM_EPSILON,
        }
    }
}

/// State the layer-norm backward needs: normalized activations and the
/// per-row reciprocal standard deviation.
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Per row: (x - mean) / sqrt(var + eps) * gain + shift, population variance.
/// Reductions accumulate in f64.
pub fn layer_norm_forward(layer: &LayerNormLayer, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let (batch, d) = (x.rows(), x.cols());
    if d != layer.gain.len() {
        return Err(Error::Shape(format!(
            "layer norm dim {} but input has {} columns",
            layer.gain.len(),
            d
        )));
    }
    let mut y = Tensor::zeros(vec![batch, d]);
    let mut xhat = Tensor::zeros(vec![batch, d]);
    let mut inv_std = Vec::with_capacity(batch);
    let gain = layer.gain.data();
    let shift = layer.shift.data();
    for b in 0..batch {
        let row = x.row(b);
        let mut mean = 0.0f64;
        for &v in row {
            mean += v as f64;
        }
        mean /= d as f64;
        let mut var = 0.0f64;
        for &v in row {
            let dv = v as f64 - mean;
            var += dv * dv;
        }
        var /= d as f64;
        let istd = 1.0 / (var + layer.epsilon as f64).sqrt();
        inv_std.push(istd as f32);
        let xh = xhat.row_mut(b);
        for (i, &v) in row.iter().enumerate() {
            xh[i] = ((v as f64 - mean) * istd) as f32;
        }
        let yr = y.row_mut(b);
        for i in 0..d {
            yr[i] = xh[i] * gain[i] + shift[i];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub struct LayerNormGrads {
    pub dx: Tensor,
    pub dgain: Tensor,
    pub dshift: Tensor,
}

/// dx_i = istd/d * (d*dh_i - sum_j dh_j - xhat_i * sum_j dh_j*xhat_j)
/// with dh = dy * gain; dgain = sum_b dy*xhat; dshift = sum_b dy.
pub fn layer_norm_backward(
    layer: &LayerNormLayer,
    cache: &LayerNormCache,
    dy: &Tensor,
) -> LayerNormGrads {
    let (batch, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(vec![batch, d]);
    let mut dgain = Tensor::zeros(vec![d]);
    let mut dshift = Tensor::zeros(vec![d]);
    let gain = layer.gain.data();
    for b in 0..batch {
        let dyr = dy.row(b);
        let xh = cache.xhat.row(b);
        let istd = cache.inv_std[b] as f64;
        {
            let dg = dgain.data_mut();
            let ds = dshift.data_mut();
            for i in 0..d {
                dg[i] += dyr[i] * xh[i];
                ds[i] += dyr[i];
            }
        }
        let mut sum_dh = 0.0f64;
        let mut sum_dh_xh = 0.0f64;
        for i in 0..d {
            let dh = (dyr[i] * gain[i]) as f64;
            sum_dh += dh;
            sum_dh_xh += dh * xh[i] as f64;
        }
        let dxr = dx.row_mut(b);
        let dn = d as f64;
        for i in 0..d {
            let dh = (dyr[i] * gain[i]) as f64;
            dxr[i] = (istd / dn * (dn * dh - sum_dh - xh[i] as f64 * sum_dh_xh)) as f32;
        }
    }
    LayerNormGrads { dx, dgain, dshift }
}

/// max(0, x) elementwise.
pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Subgradient 0 at x == 0.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// Survivor scale factors: 0.0 for dropped elements, 1/(1-p) for kept ones.
/// `None` means the site was an identity (eval mode or p == 0).
pub type DropoutMask = Option<Vec<f32>>;

/// Inverted dropout. Train: zero each element with probability p and scale
/// survivors by 1/(1-p). Eval (or p == 0): exact identity.
pub fn dropout_forward(
    x: &Tensor,
    p: f32,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, DropoutMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout p must be in [0,1), got {p}")));
    }
    if phase == Phase::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mut mask = Vec::with_capacity(x.len());
    let mut y = x.clone();
    for v in y.data_mut() {
        let keep = rng.random::<f32>() >= p;
        let m = if keep { keep_scale } else { 0.0 };
        mask.push(m);
        *v *= m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward(mask: &DropoutMask, dy: &Tensor) -> Tensor {
    match mask {
        None => dy.clone(),
        Some(mask) => {
            let mut dx = dy.clone();
            for (g, &m) in dx.data_mut().iter_mut().zip(mask) {
                *g *= m;
            }
            dx
        }
    }
}
