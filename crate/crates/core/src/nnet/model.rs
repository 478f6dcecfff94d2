use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GradField, ImageGrid, Shape, SoftmaxField};
use crate::synth::rng_from_seed;

/// One layer of a per-pixel network.
///
/// `Dense` mixes channels at each pixel independently (a 1×1 convolution);
/// `Conv3x3` uses a zero-padded 3×3 neighbourhood and keeps the spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv3x3 { inputs: usize, outputs: usize },
    Relu,
    Softmax,
}

impl LayerSpec {
    fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            LayerSpec::Conv3x3 { inputs, outputs } => 9 * inputs * outputs,
            LayerSpec::Relu | LayerSpec::Softmax => 0,
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } | LayerSpec::Conv3x3 { outputs, .. } => outputs,
            LayerSpec::Relu | LayerSpec::Softmax => 0,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv3x3 { inputs, outputs } => (9 * inputs, 9 * outputs),
            LayerSpec::Relu | LayerSpec::Softmax => (0, 0),
        }
    }
}

/// A validated stack of layers ending in a per-pixel softmax.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Two dense layers around a ReLU: `inputs -> hidden -> outputs`.
    pub fn mlp(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self::new(vec![
            LayerSpec::Dense {
                inputs,
                outputs: hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: hidden,
                outputs,
            },
            LayerSpec::Softmax,
        ])
        .expect("well-formed mlp")
    }

    /// A 3×3 convolution followed by a per-pixel dense head.
    pub fn conv_head(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self::new(vec![
            LayerSpec::Conv3x3 {
                inputs,
                outputs: hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: hidden,
                outputs,
            },
            LayerSpec::Softmax,
        ])
        .expect("well-formed conv net")
    }

    pub fn validate(&self) -> Result<()> {
        let Some(LayerSpec::Softmax) = self.layers.last() else {
            return Err(Error::InvalidConfig("last layer must be softmax".into()));
        };
        let mut channels: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { inputs, outputs } | LayerSpec::Conv3x3 { inputs, outputs } => {
                    if inputs == 0 || outputs == 0 {
                        return Err(Error::InvalidConfig(format!("layer {i} has a zero width")));
                    }
                    if let Some(c) = channels {
                        if c != inputs {
                            return Err(Error::InvalidConfig(format!(
                                "layer {i} expects {inputs} channels but receives {c}"
                            )));
                        }
                    }
                    channels = Some(outputs);
                }
                LayerSpec::Softmax if i + 1 != self.layers.len() => {
                    return Err(Error::InvalidConfig("softmax must be the last layer".into()));
                }
                LayerSpec::Relu | LayerSpec::Softmax => {}
            }
        }
        match channels {
            Some(c) if c >= 2 => Ok(()),
            _ => Err(Error::InvalidConfig(
                "network needs a parametric layer with at least 2 outputs".into(),
            )),
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_channels(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match *l {
                LayerSpec::Dense { inputs, .. } | LayerSpec::Conv3x3 { inputs, .. } => Some(inputs),
                _ => None,
            })
            .expect("validated")
    }

    pub fn output_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                LayerSpec::Dense { outputs, .. } | LayerSpec::Conv3x3 { outputs, .. } => Some(outputs),
                _ => None,
            })
            .expect("validated")
    }
}

/// Weight and bias of one layer; both empty for parameter-free layers.
///
/// Dense weights are `[out][in]`; convolution weights are `[out][ky][kx][in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameters of a network, or gradients with the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layers: Vec<LayerParams>,
    seed: u64,
    version: u64,
}

pub type ParamGrads = ModelParams;

impl ModelParams {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let layers = spec
            .layers()
            .iter()
            .map(|l| {
                let (fan_in, fan_out) = l.fans();
                let weight = if l.weight_len() == 0 {
                    Vec::new()
                } else {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..l.weight_len()).map(|_| rng.random_range(-a..a)).collect()
                };
                LayerParams {
                    weight,
                    bias: vec![0.0; l.bias_len()],
                }
            })
            .collect();
        Self {
            layers,
            seed,
            version: 0,
        }
    }

    /// All-zero tensors shaped for `spec`.
    pub fn zeros(spec: &NetSpec) -> Self {
        Self {
            layers: spec
                .layers()
                .iter()
                .map(|l| LayerParams {
                    weight: vec![0.0; l.weight_len()],
                    bias: vec![0.0; l.bias_len()],
                })
                .collect(),
            seed: 0,
            version: 0,
        }
    }

    /// Builds parameters from explicit tensors, checking them against `spec`.
    pub fn from_layers(spec: &NetSpec, layers: Vec<LayerParams>, seed: u64) -> Result<Self> {
        let params = Self {
            layers,
            seed,
            version: 0,
        };
        params.check_shapes(spec)?;
        if params.tensors().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameter".into()));
        }
        Ok(params)
    }

    pub fn check_shapes(&self, spec: &NetSpec) -> Result<()> {
        if self.layers.len() != spec.layers().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter layers for {} spec layers",
                self.layers.len(),
                spec.layers().len()
            )));
        }
        for (i, (p, l)) in self.layers.iter().zip(spec.layers()).enumerate() {
            if p.weight.len() != l.weight_len() || p.bias.len() != l.bias_len() {
                return Err(Error::ShapeMismatch(format!("layer {i} tensors do not match {l:?}")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Incremented by every optimizer update; caches remember it.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Every tensor in a fixed order: weight then bias, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn len(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters concatenated in [`ModelParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    /// Overwrites every parameter from a flat vector. Does not bump the
    /// version: finite-difference probes reuse the same cache lineage.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// `self += factor * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, factor: f64) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += factor * y);
        }
    }
}

/// Activations retained by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer, then the softmax output.
    activations: Vec<Vec<f64>>,
    channels: Vec<usize>,
    height: usize,
    width: usize,
    version: u64,
}

impl ForwardCache {
    pub fn params_version(&self) -> u64 {
        self.version
    }
}

fn dense_forward(input: &[f64], inputs: usize, outputs: usize, p: &LayerParams) -> Vec<f64> {
    let pixels = input.len() / inputs;
    let mut out = Vec::with_capacity(pixels * outputs);
    for px in input.chunks_exact(inputs) {
        for (row, b) in p.weight.chunks_exact(inputs).zip(&p.bias) {
            out.push(b + row.iter().zip(px).map(|(w, x)| w * x).sum::<f64>());
        }
    }
    out
}

fn dense_backward(
    input: &[f64],
    grad_out: &[f64],
    inputs: usize,
    outputs: usize,
    p: &LayerParams,
    g: &mut LayerParams,
) -> Vec<f64> {
    let mut grad_in = vec![0.0; input.len()];
    for ((px, go), gi) in input
        .chunks_exact(inputs)
        .zip(grad_out.chunks_exact(outputs))
        .zip(grad_in.chunks_exact_mut(inputs))
    {
        for (o, &d) in go.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g.bias[o] += d;
            let w = &p.weight[o * inputs..(o + 1) * inputs];
            let gw = &mut g.weight[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                gw[i] += d * px[i];
                gi[i] += d * w[i];
            }
        }
    }
    grad_in
}

/// Gathers the zero-padded 3×3 neighbourhood of `(y, x)` into `patch`, laid
/// out `[ky][kx][in]` to match a convolution weight row.
fn gather_patch(input: &[f64], h: usize, w: usize, inputs: usize, y: usize, x: usize, patch: &mut [f64]) {
    for ky in 0..3 {
        for kx in 0..3 {
            let dst = &mut patch[(ky * 3 + kx) * inputs..(ky * 3 + kx + 1) * inputs];
            let (yy, xx) = ((y + ky).wrapping_sub(1), (x + kx).wrapping_sub(1));
            if yy < h && xx < w {
                dst.copy_from_slice(&input[(yy * w + xx) * inputs..(yy * w + xx + 1) * inputs]);
            } else {
                dst.fill(0.0);
            }
        }
    }
}

fn conv_forward(input: &[f64], h: usize, w: usize, inputs: usize, outputs: usize, p: &LayerParams) -> Vec<f64> {
    let k = 9 * inputs;
    let mut patch = vec![0.0; k];
    let mut out = Vec::with_capacity(h * w * outputs);
    for y in 0..h {
        for x in 0..w {
            gather_patch(input, h, w, inputs, y, x, &mut patch);
            for (row, b) in p.weight.chunks_exact(k).zip(&p.bias) {
                out.push(b + row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>());
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    grad_out: &[f64],
    h: usize,
    w: usize,
    inputs: usize,
    outputs: usize,
    p: &LayerParams,
    g: &mut LayerParams,
) -> Vec<f64> {
    let k = 9 * inputs;
    let mut patch = vec![0.0; k];
    let mut grad_patch = vec![0.0; k];
    let mut grad_in = vec![0.0; input.len()];
    for y in 0..h {
        for x in 0..w {
            let go = &grad_out[(y * w + x) * outputs..(y * w + x + 1) * outputs];
            if go.iter().all(|&d| d == 0.0) {
                continue;
            }
            gather_patch(input, h, w, inputs, y, x, &mut patch);
            grad_patch.fill(0.0);
            for (o, &d) in go.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &p.weight[o * k..(o + 1) * k];
                let grow = &mut g.weight[o * k..(o + 1) * k];
                for ((gw, gp), (&wv, &xv)) in grow.iter_mut().zip(grad_patch.iter_mut()).zip(row.iter().zip(&patch)) {
                    *gw += d * xv;
                    *gp += d * wv;
                }
            }
            for ky in 0..3 {
                for kx in 0..3 {
                    let (yy, xx) = ((y + ky).wrapping_sub(1), (x + kx).wrapping_sub(1));
                    if yy < h && xx < w {
                        let src = &grad_patch[(ky * 3 + kx) * inputs..(ky * 3 + kx + 1) * inputs];
                        let dst = &mut grad_in[(yy * w + xx) * inputs..(yy * w + xx + 1) * inputs];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
    grad_in
}

fn softmax_forward(input: &[f64], channels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(input.len());
    for px in input.chunks_exact(channels) {
        let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &z in px {
            let e = (z - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

/// Runs the network on one image.
pub fn forward(params: &ModelParams, spec: &NetSpec, input: &ImageGrid) -> Result<(SoftmaxField, ForwardCache)> {
    params.check_shapes(spec)?;
    let shape = input.shape();
    if shape.channels != spec.input_channels() {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} input channels, image has {}",
            spec.input_channels(),
            shape.channels
        )));
    }
    let (h, w) = (shape.height, shape.width);
    let mut activations = vec![input.values().to_vec()];
    let mut channels = vec![shape.channels];
    for (layer, p) in spec.layers().iter().zip(params.layers()) {
        let x = activations.last().expect("input pushed");
        let c = *channels.last().expect("input pushed");
        let (next, nc) = match *layer {
            LayerSpec::Dense { inputs, outputs } => (dense_forward(x, inputs, outputs, p), outputs),
            LayerSpec::Conv3x3 { inputs, outputs } => (conv_forward(x, h, w, inputs, outputs, p), outputs),
            LayerSpec::Relu => (x.iter().map(|v| v.max(0.0)).collect(), c),
            LayerSpec::Softmax => (softmax_forward(x, c), c),
        };
        activations.push(next);
        channels.push(nc);
    }
    let out_channels = *channels.last().expect("nonempty");
    let output = activations.last().expect("nonempty").clone();
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    let field = SoftmaxField::from_values_unchecked(Shape::new(h, w, out_channels), output);
    Ok((
        field,
        ForwardCache {
            activations,
            channels,
            height: h,
            width: w,
            version: params.version(),
        },
    ))
}

/// Parameter gradients of `loss ∘ forward`, given `upstream = ∂loss/∂s`.
pub fn backward(params: &ModelParams, spec: &NetSpec, cache: &ForwardCache, upstream: &GradField) -> Result<ParamGrads> {
    params.check_shapes(spec)?;
    if cache.version != params.version() {
        return Err(Error::StaleCache(format!(
            "cache built for parameter version {}, parameters are at {}",
            cache.version,
            params.version()
        )));
    }
    if cache.activations.len() != spec.layers().len() + 1 {
        return Err(Error::StaleCache("cache does not match the network depth".into()));
    }
    let (h, w) = (cache.height, cache.width);
    let out_shape = Shape::new(h, w, *cache.channels.last().expect("nonempty"));
    if upstream.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient is {} but output is {out_shape}",
            upstream.shape()
        )));
    }

    let mut grads = ModelParams::zeros(spec);
    let mut grad = upstream.values().to_vec();
    for (idx, layer) in spec.layers().iter().enumerate().rev() {
        let input = &cache.activations[idx];
        let output = &cache.activations[idx + 1];
        let p = &params.layers()[idx];
        let g = &mut grads.layers[idx];
        grad = match *layer {
            LayerSpec::Dense { inputs, outputs } => dense_backward(input, &grad, inputs, outputs, p, g),
            LayerSpec::Conv3x3 { inputs, outputs } => conv_backward(input, &grad, h, w, inputs, outputs, p, g),
            LayerSpec::Relu => input
                .iter()
                .zip(&grad)
                .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                .collect(),
            LayerSpec::Softmax => {
                let c = cache.channels[idx];
                let mut gz = Vec::with_capacity(grad.len());
                for (s, d) in output.chunks_exact(c).zip(grad.chunks_exact(c)) {
                    let dot: f64 = s.iter().zip(d).map(|(a, b)| a * b).sum();
                    gz.extend(s.iter().zip(d).map(|(a, b)| a * (b - dot)));
                }
                gz
            }
        };
    }
    grads.version = params.version();
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::rng_from_seed;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageGrid {
        let mut rng = rng_from_seed(seed);
        ImageGrid::new(Shape::new(h, w, c), (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec::new(vec![LayerSpec::Dense { inputs: 2, outputs: 2 }]).is_err());
        assert!(NetSpec::new(vec![
            LayerSpec::Dense { inputs: 2, outputs: 3 },
            LayerSpec::Dense { inputs: 4, outputs: 2 },
            LayerSpec::Softmax,
        ])
        .is_err());
        assert!(NetSpec::new(vec![LayerSpec::Softmax, LayerSpec::Softmax]).is_err());
        let spec = NetSpec::conv_head(3, 8, 2);
        assert_eq!((spec.input_channels(), spec.output_channels()), (3, 2));
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let spec = NetSpec::new(vec![LayerSpec::Dense { inputs: 3, outputs: 2 }, LayerSpec::Softmax]).unwrap();
        let params = ModelParams::zeros(&spec);
        let (s, _) = forward(&params, &spec, &random_image(1, 4, 4, 3)).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_like_conv_output_is_normalized() {
        let spec = NetSpec::new(vec![LayerSpec::Conv3x3 { inputs: 2, outputs: 2 }, LayerSpec::Softmax]).unwrap();
        let mut weight = vec![0.0; 36];
        for o in 0..2 {
            // centre tap, same channel
            weight[((o * 3 + 1) * 3 + 1) * 2 + o] = 1.0;
        }
        let params = ModelParams::from_layers(
            &spec,
            vec![
                LayerParams { weight, bias: vec![0.0; 2] },
                LayerParams { weight: vec![], bias: vec![] },
            ],
            0,
        )
        .unwrap();
        let img = random_image(2, 5, 5, 2);
        let (s, _) = forward(&params, &spec, &img).unwrap();
        for p in 0..25 {
            let px = s.pixel(p);
            assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let x = img.pixel(p);
            assert_eq!(px[0] > px[1], x[0] > x[1]);
        }
    }

    #[test]
    fn random_params_stay_on_simplex() {
        let spec = NetSpec::new(vec![
            LayerSpec::Conv3x3 { inputs: 3, outputs: 5 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 5, outputs: 4 },
            LayerSpec::Softmax,
        ])
        .unwrap();
        for seed in 0..10 {
            let params = ModelParams::init(&spec, seed);
            let (s, _) = forward(&params, &spec, &random_image(seed + 100, 6, 7, 3)).unwrap();
            assert!(SoftmaxField::new(s.shape(), s.values().to_vec()).is_ok());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = NetSpec::conv_head(3, 4, 2);
        let params = ModelParams::init(&spec, 3);
        let (s, cache) = forward(&params, &spec, &random_image(4, 4, 4, 3)).unwrap();
        let g = backward(&params, &spec, &cache, &GradField::zeros(s.shape())).unwrap();
        assert!(g.tensors().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_inputs_and_stale_caches_are_rejected() {
        let spec = NetSpec::mlp(2, 4, 2);
        let mut params = ModelParams::init(&spec, 1);
        assert!(matches!(
            forward(&params, &spec, &random_image(1, 2, 2, 3)),
            Err(Error::ShapeMismatch(_))
        ));
        let (s, cache) = forward(&params, &spec, &random_image(1, 2, 2, 2)).unwrap();
        params.bump_version();
        assert!(matches!(
            backward(&params, &spec, &cache, &GradField::zeros(s.shape())),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = NetSpec::mlp(2, 10, 2);
        assert_eq!(ModelParams::init(&spec, 7), ModelParams::init(&spec, 7));
        assert_ne!(ModelParams::init(&spec, 7), ModelParams::init(&spec, 8));
        let a = (6.0f64 / 12.0).sqrt();
        assert!(ModelParams::init(&spec, 7).layers()[0].weight.iter().all(|w| w.abs() <= a));
    }
}
