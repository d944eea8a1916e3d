//! Small fully convolutional feature extractor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Leaky,
    Linear,
}

/// Shape of one convolution layer; the kernel is square and zero padded by
/// `(kernel − 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    /// `out×in×k×k`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

/// Graph handles of one layer's weight and bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

/// Three 3×3 layers with strides 2, 2, 1: `3 → 16 → 32 → feature_dim`.
pub fn default_layers(feature_dim: usize) -> Vec<LayerSpec> {
    let l = |i, o, s, a| LayerSpec { in_channels: i, out_channels: o, kernel: 3, stride: s, activation: a };
    vec![
        l(3, 16, 2, Activation::Leaky),
        l(16, 32, 2, Activation::Leaky),
        l(32, feature_dim, 1, Activation::Linear),
    ]
}

impl EncoderParams {
    /// Uniform fan-in initialization, `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn init(specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        Self::check_specs(specs)?;
        let layers = specs
            .iter()
            .map(|s| {
                let fan_in = (s.in_channels * s.kernel * s.kernel) as f64;
                let bound = (6.0 / fan_in).sqrt();
                ConvLayer {
                    spec: *s,
                    weight: Tensor::from_fn(&[s.out_channels, s.in_channels, s.kernel, s.kernel], |_| rng.range(-bound, bound)),
                    bias: Tensor::zeros(&[s.out_channels]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<ConvLayer>) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        Self::check_specs(&specs)?;
        for l in &layers {
            let s = l.spec;
            if l.weight.dims() != [s.out_channels, s.in_channels, s.kernel, s.kernel] || l.bias.dims() != [s.out_channels] {
                return Err(Error::dims("EncoderParams", format!("layer tensors {:?}/{:?} vs {s:?}", l.weight.dims(), l.bias.dims())));
            }
            if l.weight.data().iter().chain(l.bias.data()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput);
            }
        }
        Ok(Self { layers })
    }

    fn check_specs(specs: &[LayerSpec]) -> Result<()> {
        if specs.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if specs[0].in_channels != 3 {
            return Err(Error::Config("first encoder layer must take 3 channels".into()));
        }
        for w in specs.windows(2) {
            if w[0].out_channels != w[1].in_channels {
                return Err(Error::Config(format!("layer chain breaks at {} → {}", w[0].out_channels, w[1].in_channels)));
            }
        }
        for s in specs {
            if s.kernel % 2 == 0 {
                return Err(Error::EvenKernel(s.kernel));
            }
            if s.stride == 0 || s.out_channels == 0 {
                return Err(Error::Config("stride and channel counts must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.spec.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_channels)
    }

    /// Feature-map size for an `h×w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.total_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::IndivisibleDims { dims: vec![h, w], stride: s });
        }
        Ok((h / s, w / s))
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<ConvVars> {
        self.layers
            .iter()
            .map(|l| ConvVars { weight: g.param(l.weight.clone()), bias: g.param(l.bias.clone()) })
            .collect()
    }

    fn bind_const(&self, g: &mut Graph) -> Vec<ConvVars> {
        self.layers
            .iter()
            .map(|l| ConvVars { weight: g.constant(l.weight.clone()), bias: g.constant(l.bias.clone()) })
            .collect()
    }

    /// Weight then bias of each layer, in layer order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

/// `H×W×3` interleaved pixels to `3×H×W` planes.
pub fn channels_first(image: &Tensor) -> Result<Tensor> {
    let d = image.dims();
    if d.len() != 3 || d[2] != 3 {
        return Err(Error::dims("encode", format!("image must be HxWx3, got {d:?}")));
    }
    let (h, w) = (d[0], d[1]);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        image.data()[p * 3 + c]
    }))
}

/// Graph form of [`encode`].
pub fn encode_graph(g: &mut Graph, image: &Tensor, params: &EncoderParams, vars: &[ConvVars]) -> Result<Var> {
    let x = channels_first(image)?;
    params.output_dims(x.dims()[1], x.dims()[2])?;
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut h = g.constant(x);
    for (l, v) in params.layers.iter().zip(vars) {
        h = g.conv2d(h, v.weight, Some(v.bias), l.spec.stride, (l.spec.kernel - 1) / 2)?;
        if l.spec.activation == Activation::Leaky {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    Ok(h)
}

/// Maps an `H×W×3` image to a `D_l×(H/s)×(W/s)` feature map, `s` the product
/// of layer strides.
pub fn encode(image: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind_const(&mut g);
    let out = encode_graph(&mut g, image, params, &vars)?;
    Ok(g.value(out).clone())
}
