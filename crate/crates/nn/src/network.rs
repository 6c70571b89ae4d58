//! Dense ReLU network: affine → ReLU (→ dropout) per hidden layer, then a
//! final affine map with no activation.
//!
//! Batches are row-major (`rows = samples`) and each weight matrix is stored
//! as `fan_in × fan_out`, so a layer computes `Z = X W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const INPUT_WIDTH: usize = 55;
pub const OUTPUT_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden_sizes: Vec<usize>,
    pub dropout_p: f64,
    pub seed: u64,
    pub input_width: usize,
    pub output_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_sizes: vec![128, 64, 32],
            dropout_p: 0.0,
            seed: 0,
            input_width: INPUT_WIDTH,
            output_width: OUTPUT_WIDTH,
        }
    }
}

impl NetworkConfig {
    pub fn new(hidden_sizes: Vec<usize>) -> Self {
        NetworkConfig {
            hidden_sizes,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::Config("every hidden size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.input_width == 0 || self.output_width == 0 {
            return Err(Error::Config("input and output widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_width)
            .chain(self.hidden_sizes.iter().copied())
            .chain(std::iter::once(self.output_width))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w);
        z += &self.b;
        z
    }
}

/// Weights and biases, input layer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

impl NetworkParams {
    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            layers: self.layers.iter().map(|l| Layer::zeros(l.w.nrows(), l.w.ncols())).collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.ncols())
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Every scalar, layer by layer, weights (row-major) before biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().expect("flat vector too short");
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

/// He-uniform weights (bound `√(6/fan_in)`), zero biases.
pub fn init_network(config: &NetworkConfig) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let widths = config.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            Layer {
                w: Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound)),
                b: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(NetworkParams { layers })
}

fn check_input(params: &NetworkParams, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != params.input_width() {
        return Err(Error::Shape {
            expected: params.input_width(),
            actual: x.ncols(),
        });
    }
    Ok(())
}

/// Dropout masks for one batch, already carrying the `1/(1 − p)` factor.
pub type Masks = Vec<Array2<f64>>;

/// Draws inverted-dropout masks for every hidden layer.
pub fn draw_masks<R: Rng>(params: &NetworkParams, rows: usize, p: f64, rng: &mut R) -> Masks {
    let keep = 1.0 / (1.0 - p);
    params.layers[..params.layers.len() - 1]
        .iter()
        .map(|l| Array2::from_shape_simple_fn((rows, l.w.ncols()), || if rng.gen::<f64>() < p { 0.0 } else { keep }))
        .collect()
}

/// Inference pass (dropout disabled).
pub fn predict(params: &NetworkParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_input(params, &x)?;
    let (last, hidden) = params.layers.split_last().expect("network has layers");
    let mut a = x.to_owned();
    for l in hidden {
        a = l.affine(a.view());
        a.mapv_inplace(|v| v.max(0.0));
    }
    Ok(last.affine(a.view()))
}

/// Forward pass; with `training` set and `dropout_p > 0` masks are drawn from
/// `rng`.
pub fn forward<R: Rng>(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    dropout_p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if training && dropout_p > 0.0 {
        let masks = draw_masks(params, x.nrows(), dropout_p, rng);
        Ok(forward_cached(params, x, Some(&masks))?.output().to_owned())
    } else {
        predict(params, x)
    }
}

/// Activations kept for the backward pass.
pub struct Cache {
    /// Layer inputs, `inputs[0]` being the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Cache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

pub fn forward_cached(params: &NetworkParams, x: ArrayView2<f64>, masks: Option<&Masks>) -> Result<Cache> {
    check_input(params, &x)?;
    let (last, hidden) = params.layers.split_last().expect("network has layers");
    let mut inputs = vec![x.to_owned()];
    let mut pre = Vec::with_capacity(hidden.len());
    for (k, l) in hidden.iter().enumerate() {
        let z = l.affine(inputs[k].view());
        let mut a = z.mapv(|v| v.max(0.0));
        if let Some(m) = masks {
            a *= &m[k];
        }
        pre.push(z);
        inputs.push(a);
    }
    let output = last.affine(inputs.last().expect("input present").view());
    Ok(Cache { inputs, pre, output })
}

/// Batch-mean squared error `(1/B) Σ_i ‖ŷ_i − y_i‖²`.
pub fn batch_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = pred.nrows().max(1) as f64;
    Zip::from(pred).and(target).fold(0.0, |acc, p, t| acc + (p - t) * (p - t)) / n
}

/// Loss of `params` on `(x, y)` with optional fixed masks.
pub fn loss(params: &NetworkParams, x: ArrayView2<f64>, y: ArrayView2<f64>, masks: Option<&Masks>) -> Result<f64> {
    let cache = forward_cached(params, x, masks)?;
    Ok(batch_loss(cache.output.view(), y))
}

/// Reverse-mode gradient of [`batch_loss`]; the ReLU derivative at 0 is 0.
pub fn backward(params: &NetworkParams, cache: &Cache, y: ArrayView2<f64>, masks: Option<&Masks>) -> NetworkParams {
    let n = cache.output.nrows().max(1) as f64;
    let mut delta = (&cache.output - &y) * (2.0 / n);
    let mut grads: Vec<Layer> = Vec::with_capacity(params.layers.len());
    for k in (0..params.layers.len()).rev() {
        let a_in = &cache.inputs[k];
        grads.push(Layer {
            w: a_in.t().dot(&delta),
            b: delta.sum_axis(Axis(0)),
        });
        if k == 0 {
            break;
        }
        let mut up = delta.dot(&params.layers[k].w.t());
        Zip::from(&mut up).and(&cache.pre[k - 1]).for_each(|g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        if let Some(m) = masks {
            up *= &m[k - 1];
        }
        delta = up;
    }
    grads.reverse();
    NetworkParams { layers: grads }
}

/// Loss and gradient on one batch.
pub fn gradient(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    masks: Option<&Masks>,
) -> Result<(f64, NetworkParams)> {
    if y.nrows() != x.nrows() || y.ncols() != params.output_width() {
        return Err(Error::Shape {
            expected: params.output_width(),
            actual: y.ncols(),
        });
    }
    let cache = forward_cached(params, x, masks)?;
    let l = batch_loss(cache.output.view(), y);
    Ok((l, backward(params, &cache, y, masks)))
}

/// Largest relative deviation between [`gradient`] and central differences
/// of step `h`, using `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    h: f64,
    floor: f64,
) -> Result<f64> {
    let (_, g) = gradient(params, x, y, None)?;
    let analytic = g.flat();
    let base = params.flat();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let mut shifted = base.clone();
        shifted[k] = base[k] + h;
        probe.set_flat(&shifted);
        let up = loss(&probe, x, y, None)?;
        shifted[k] = base[k] - h;
        probe.set_flat(&shifted);
        let down = loss(&probe, x, y, None)?;
        let n = (up - down) / (2.0 * h);
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
    }
    Ok(worst)
}
