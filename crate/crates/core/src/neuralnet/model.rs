use std::fmt;
use std::str::FromStr;

use super::layers::{self, KERNEL};
use super::tensor::{Scalar, Tensor};
use super::NetError;
use crate::rng::SplitMix64;

/// Input images always have three colour channels.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    /// 3x3 convolution, same-padding.
    Conv { out_channels: usize },
    /// 2x2 window, stride 2.
    MaxPool,
    Relu,
    /// Fully connected over the flattened input.
    Fc { out_features: usize },
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv { out_channels } => write!(f, "conv({out_channels})"),
            Layer::MaxPool => f.write_str("maxpool"),
            Layer::Relu => f.write_str("relu"),
            Layer::Fc { out_features } => write!(f, "fc({out_features})"),
        }
    }
}

impl FromStr for Layer {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, NetError> {
        let s = s.trim();
        let arg = |prefix: &str| -> Option<Result<usize, NetError>> {
            let inner = s.strip_prefix(prefix)?.strip_suffix(')')?;
            Some(match inner.trim().parse::<usize>() {
                Ok(0) | Err(_) => Err(NetError::Architecture(format!(
                    "{s:?}: expected a positive integer argument"
                ))),
                Ok(v) => Ok(v),
            })
        };
        match s {
            "relu" => Ok(Layer::Relu),
            "maxpool" => Ok(Layer::MaxPool),
            _ => {
                if let Some(v) = arg("conv(") {
                    Ok(Layer::Conv { out_channels: v? })
                } else if let Some(v) = arg("fc(") {
                    Ok(Layer::Fc { out_features: v? })
                } else {
                    Err(NetError::Architecture(format!("unknown layer {s:?}")))
                }
            }
        }
    }
}

/// Ordered layer stack. Parses from and prints as
/// `conv(8),relu,maxpool,conv(16),relu,maxpool,fc(1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    layers: Vec<Layer>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            layers: vec![
                Layer::Conv { out_channels: 8 },
                Layer::Relu,
                Layer::MaxPool,
                Layer::Conv { out_channels: 16 },
                Layer::Relu,
                Layer::MaxPool,
                Layer::Fc { out_features: 1 },
            ],
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, NetError> {
        let layers = s
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Layer>, _>>()?;
        Self::new(layers)
    }
}

impl Architecture {
    /// The last layer must be `fc(1)`, producing one logit per sample.
    pub fn new(layers: Vec<Layer>) -> Result<Self, NetError> {
        match layers.last() {
            Some(Layer::Fc { out_features: 1 }) => Ok(Self { layers }),
            Some(other) => Err(NetError::Architecture(format!(
                "final layer must be fc(1), found {other}"
            ))),
            None => Err(NetError::Architecture("empty architecture".into())),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-sample input shape of every layer, followed by the output shape,
    /// for a `[3, size, size]` input.
    pub fn shape_chain(&self, input_size: usize) -> Result<Vec<Vec<usize>>, NetError> {
        if input_size == 0 {
            return Err(NetError::Shape("input size must be positive".into()));
        }
        let mut shapes = vec![vec![INPUT_CHANNELS, input_size, input_size]];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let next = match (*layer, cur.as_slice()) {
                (Layer::Conv { out_channels }, &[_, h, w]) => vec![out_channels, h, w],
                (Layer::MaxPool, &[c, h, w]) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(NetError::ShapeChain {
                            layer: i,
                            message: format!("maxpool needs even spatial extents, got {h}x{w}"),
                        });
                    }
                    vec![c, h / 2, w / 2]
                }
                (Layer::Relu, s) => s.to_vec(),
                (Layer::Fc { out_features }, _) => vec![out_features],
                (Layer::Conv { .. }, s) | (Layer::MaxPool, s) => {
                    return Err(NetError::ShapeChain {
                        layer: i,
                        message: format!("{layer} needs a [C, H, W] input, got {s:?}"),
                    })
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Weight and bias shapes for every layer that has parameters.
    pub fn param_shapes(
        &self,
        input_size: usize,
    ) -> Result<Vec<Option<(Vec<usize>, Vec<usize>)>>, NetError> {
        let chain = self.shape_chain(input_size)?;
        Ok(self
            .layers
            .iter()
            .zip(&chain)
            .map(|(layer, input)| match *layer {
                Layer::Conv { out_channels } => Some((
                    vec![out_channels, input[0], KERNEL, KERNEL],
                    vec![out_channels],
                )),
                Layer::Fc { out_features } => Some((
                    vec![out_features, input.iter().product()],
                    vec![out_features],
                )),
                Layer::MaxPool | Layer::Relu => None,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Weights and biases indexed by layer position; `None` for parameter-free layers.
/// Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = f32> {
    layers: Vec<Option<LayerParams<T>>>,
}

pub type Gradients<T = f32> = Parameters<T>;

impl<T: Scalar> Parameters<T> {
    pub fn from_layers(layers: Vec<Option<LayerParams<T>>>) -> Self {
        Self { layers }
    }

    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn init(arch: &Architecture, input_size: usize, seed: u64) -> Result<Self, NetError> {
        let mut rng = SplitMix64::new(seed);
        let layers = arch
            .param_shapes(input_size)?
            .into_iter()
            .map(|shapes| {
                shapes.map(|(wshape, bshape)| {
                    let (fan_in, fan_out) = match *wshape.as_slice() {
                        [k, c, kh, kw] => (c * kh * kw, k * kh * kw),
                        [g, f] => (f, g),
                        _ => unreachable!("param_shapes yields rank 2 or 4"),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = wshape.iter().product();
                    let data = (0..n)
                        .map(|_| T::from_f64(rng.uniform(-limit, limit)))
                        .collect();
                    LayerParams {
                        weights: Tensor::new(wshape, data).expect("extents match"),
                        bias: Tensor::zeros(bshape),
                    }
                })
            })
            .collect();
        Ok(Self { layers })
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weights: Tensor::zeros(p.weights.shape().to_vec()),
                        bias: Tensor::zeros(p.bias.shape().to_vec()),
                    })
                })
                .collect(),
        }
    }

    pub fn layer(&self, index: usize) -> Option<&LayerParams<T>> {
        self.layers.get(index).and_then(Option::as_ref)
    }

    pub fn layers(&self) -> &[Option<LayerParams<T>>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Option<LayerParams<T>>] {
        &mut self.layers
    }

    /// Weight then bias of each parametric layer, in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.weights, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weights, &mut p.bias])
    }

    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weights: p.weights.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    /// True when the layout matches this architecture at the given input size.
    pub fn check(&self, arch: &Architecture, input_size: usize) -> Result<(), NetError> {
        let expected = arch.param_shapes(input_size)?;
        if expected.len() != self.layers.len() {
            return Err(NetError::Shape(format!(
                "parameters cover {} layers, architecture has {}",
                self.layers.len(),
                expected.len()
            )));
        }
        for (i, (want, have)) in expected.iter().zip(&self.layers).enumerate() {
            let ok = match (want, have) {
                (None, None) => true,
                (Some((ws, bs)), Some(p)) => p.weights.shape() == ws && p.bias.shape() == bs,
                _ => false,
            };
            if !ok {
                return Err(NetError::ShapeChain {
                    layer: i,
                    message: format!("parameters do not match {}", arch.layers[i]),
                });
            }
        }
        Ok(())
    }
}

/// Everything [`model_backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    /// Input of each layer, unflattened.
    inputs: Vec<Tensor<T>>,
    /// Winning indices for maxpool layers.
    argmax: Vec<Option<Vec<usize>>>,
    output_shape: Vec<usize>,
}

fn flatten<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>, NetError> {
    let n = t.shape()[0];
    let f = t.len() / n;
    t.clone().reshape(vec![n, f])
}

fn params_at<T: Scalar>(params: &Parameters<T>, index: usize) -> Result<&LayerParams<T>, NetError> {
    params.layer(index).ok_or_else(|| NetError::ShapeChain {
        layer: index,
        message: "missing parameters".into(),
    })
}

fn at_layer(index: usize) -> impl Fn(NetError) -> NetError {
    move |e| match e {
        NetError::ShapeChain { .. } => e,
        other => NetError::ShapeChain {
            layer: index,
            message: other.to_string(),
        },
    }
}

/// Runs the stack over a `[N, 3, S, S]` batch and returns `[N, 1]` logits.
pub fn model_forward<T: Scalar>(
    arch: &Architecture,
    params: &Parameters<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardCache<T>), NetError> {
    if batch.rank() != 4 || batch.shape()[1] != INPUT_CHANNELS {
        return Err(NetError::Shape(format!(
            "batch must be [N, 3, S, S], got {:?}",
            batch.shape()
        )));
    }
    let mut inputs = Vec::with_capacity(arch.len());
    let mut argmax = Vec::with_capacity(arch.len());
    let mut cur = batch.clone();
    for (i, layer) in arch.layers.iter().enumerate() {
        let (next, arg) = match *layer {
            Layer::Conv { .. } => {
                if cur.rank() != 4 {
                    return Err(NetError::ShapeChain {
                        layer: i,
                        message: format!("conv needs an NCHW input, got {:?}", cur.shape()),
                    });
                }
                let p = params_at(params, i)?;
                let out = layers::conv2d_forward(&cur, &p.weights, &p.bias).map_err(at_layer(i))?;
                (out, None)
            }
            Layer::MaxPool => {
                let (out, arg) = layers::maxpool2_forward(&cur).map_err(at_layer(i))?;
                (out, Some(arg))
            }
            Layer::Relu => (layers::relu_forward(&cur), None),
            Layer::Fc { .. } => {
                let p = params_at(params, i)?;
                let out = layers::fc_forward(&flatten(&cur)?, &p.weights, &p.bias)
                    .map_err(at_layer(i))?;
                (out, None)
            }
        };
        inputs.push(std::mem::replace(&mut cur, next));
        argmax.push(arg);
    }
    let cache = ForwardCache {
        inputs,
        argmax,
        output_shape: cur.shape().to_vec(),
    };
    Ok((cur, cache))
}

/// Exact gradients of a scalar loss given `dloss/dlogits`.
pub fn model_backward<T: Scalar>(
    arch: &Architecture,
    params: &Parameters<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<Gradients<T>, NetError> {
    if cache.inputs.len() != arch.len() || params.layers.len() != arch.len() {
        return Err(NetError::StaleCache(format!(
            "cache holds {} layers, architecture has {}",
            cache.inputs.len(),
            arch.len()
        )));
    }
    if grad_logits.shape() != cache.output_shape.as_slice() {
        return Err(NetError::StaleCache(format!(
            "logit gradient {:?} does not match forward output {:?}",
            grad_logits.shape(),
            cache.output_shape
        )));
    }
    let mut grads = params.zeros_like();
    let mut grad = grad_logits.clone();
    for (i, layer) in arch.layers.iter().enumerate().rev() {
        let input = &cache.inputs[i];
        grad = match *layer {
            Layer::Conv { .. } => {
                let p = params_at(params, i)?;
                let g = layers::conv2d_backward(input, &p.weights, &grad)
                    .map_err(|e| NetError::StaleCache(format!("layer {i}: {e}")))?;
                grads.layers[i] = Some(LayerParams {
                    weights: g.weights,
                    bias: g.bias,
                });
                g.input
            }
            Layer::MaxPool => {
                let arg = cache.argmax[i]
                    .as_ref()
                    .ok_or_else(|| NetError::StaleCache(format!("layer {i}: no argmax")))?;
                layers::maxpool2_backward(input.shape(), arg, &grad)
                    .map_err(|e| NetError::StaleCache(format!("layer {i}: {e}")))?
            }
            Layer::Relu => layers::relu_backward(input, &grad)
                .map_err(|e| NetError::StaleCache(format!("layer {i}: {e}")))?,
            Layer::Fc { .. } => {
                let p = params_at(params, i)?;
                let g = layers::fc_backward(&flatten(input)?, &p.weights, &grad)
                    .map_err(|e| NetError::StaleCache(format!("layer {i}: {e}")))?;
                grads.layers[i] = Some(LayerParams {
                    weights: g.weights,
                    bias: g.bias,
                });
                g.input.reshape(input.shape().to_vec())?
            }
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::layers::fc_forward;

    fn random_batch(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        let len = n * 3 * size * size;
        Tensor::new(
            vec![n, 3, size, size],
            (0..len).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn architecture_text_round_trip() {
        let arch = Architecture::default();
        assert_eq!(arch.to_string(), "conv(8),relu,maxpool,conv(16),relu,maxpool,fc(1)");
        assert_eq!(arch.to_string().parse::<Architecture>().unwrap(), arch);
        assert_eq!(
            " conv(2) , relu,maxpool, fc(1)".parse::<Architecture>().unwrap().len(),
            4
        );
    }

    #[test]
    fn architecture_rejects_bad_text() {
        assert!("conv(8),relu".parse::<Architecture>().is_err());
        assert!("fc(2)".parse::<Architecture>().is_err());
        assert!("conv(0),fc(1)".parse::<Architecture>().is_err());
        assert!("pool,fc(1)".parse::<Architecture>().is_err());
        assert!("".parse::<Architecture>().is_err());
    }

    #[test]
    fn shape_chain_conserves_and_halves() {
        let chain = Architecture::default().shape_chain(32).unwrap();
        assert_eq!(chain[1], vec![8, 32, 32]);
        assert_eq!(chain[3], vec![8, 16, 16]);
        assert_eq!(chain[6], vec![16, 8, 8]);
        assert_eq!(chain[7], vec![1]);
    }

    #[test]
    fn shape_chain_names_offending_layer() {
        let arch: Architecture = "conv(2),maxpool,maxpool,fc(1)".parse().unwrap();
        match arch.shape_chain(6) {
            Err(NetError::ShapeChain { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("{other:?}"),
        }
        let arch: Architecture = "fc(4),conv(2),fc(1)".parse().unwrap();
        assert!(matches!(
            arch.shape_chain(4),
            Err(NetError::ShapeChain { layer: 1, .. })
        ));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = Architecture::default();
        let a = Parameters::<f32>::init(&arch, 16, 7).unwrap();
        let b = Parameters::<f32>::init(&arch, 16, 7).unwrap();
        let c = Parameters::<f32>::init(&arch, 16, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.check(&arch, 16).unwrap();
        assert!(a.check(&arch, 32).is_err());
        let first = a.layer(0).unwrap();
        let limit = (6.0f32 / (27.0 + 72.0)).sqrt();
        assert!(first.weights.data().iter().all(|w| w.abs() <= limit));
        assert!(first.bias.data().iter().all(|&b| b == 0.0));
        assert_eq!(a.count(), 8 * 27 + 8 + 16 * 72 + 16 + 16 * 4 * 4 + 1);
    }

    #[test]
    fn zero_params_give_final_bias() {
        let arch = Architecture::default();
        let mut params = Parameters::<f32>::init(&arch, 8, 1).unwrap().zeros_like();
        params.layers_mut()[6].as_mut().unwrap().bias.data_mut()[0] = 0.75;
        let (logits, _) = model_forward(&arch, &params, &random_batch(3, 8, 2)).unwrap();
        assert_eq!(logits.shape(), &[3, 1]);
        assert!(logits.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn identical_images_identical_logits() {
        let arch = Architecture::default();
        let params = Parameters::<f32>::init(&arch, 8, 3).unwrap();
        let one = random_batch(1, 8, 4);
        let batch = Tensor::stack(&[
            &one.clone().reshape(vec![3, 8, 8]).unwrap(),
            &one.clone().reshape(vec![3, 8, 8]).unwrap(),
        ])
        .unwrap();
        let (logits, _) = model_forward(&arch, &params, &batch).unwrap();
        assert_eq!(logits.data()[0].to_bits(), logits.data()[1].to_bits());
    }

    #[test]
    fn fc_only_equals_fc_forward() {
        let arch: Architecture = "fc(1)".parse().unwrap();
        let params = Parameters::<f32>::init(&arch, 4, 5).unwrap();
        let batch = random_batch(2, 4, 6);
        let (logits, _) = model_forward(&arch, &params, &batch).unwrap();
        let p = params.layer(0).unwrap();
        let direct = fc_forward(&batch.clone().reshape(vec![2, 48]).unwrap(), &p.weights, &p.bias)
            .unwrap();
        assert_eq!(logits, direct);
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let arch = Architecture::default();
        let params = Parameters::<f32>::init(&arch, 8, 9).unwrap();
        let batch = random_batch(4, 8, 10);
        let (logits, _) = model_forward(&arch, &params, &batch).unwrap();
        let sample = |i: usize| {
            Tensor::new(vec![3, 8, 8], batch.data()[i * 192..(i + 1) * 192].to_vec()).unwrap()
        };
        let order = [2usize, 0, 3, 1];
        let samples: Vec<_> = order.iter().map(|&i| sample(i)).collect();
        let permuted = Tensor::stack(&samples.iter().collect::<Vec<_>>()).unwrap();
        let (plogits, _) = model_forward(&arch, &params, &permuted).unwrap();
        for (j, &i) in order.iter().enumerate() {
            assert_eq!(plogits.data()[j].to_bits(), logits.data()[i].to_bits());
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_grads() {
        let arch = Architecture::default();
        let params = Parameters::<f32>::init(&arch, 8, 11).unwrap();
        let (logits, cache) = model_forward(&arch, &params, &random_batch(2, 8, 12)).unwrap();
        let grads =
            model_backward(&arch, &params, &cache, &Tensor::zeros(logits.shape().to_vec())).unwrap();
        assert!(grads.tensors().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stale_cache_rejected() {
        let arch = Architecture::default();
        let params = Parameters::<f32>::init(&arch, 8, 13).unwrap();
        let (_, cache) = model_forward(&arch, &params, &random_batch(2, 8, 14)).unwrap();
        let other: Architecture = "fc(1)".parse().unwrap();
        let other_params = Parameters::<f32>::init(&other, 8, 1).unwrap();
        assert!(matches!(
            model_backward(&other, &other_params, &cache, &Tensor::zeros(vec![2, 1])),
            Err(NetError::StaleCache(_))
        ));
        assert!(matches!(
            model_backward(&arch, &params, &cache, &Tensor::zeros(vec![3, 1])),
            Err(NetError::StaleCache(_))
        ));
        // parameters for a different input size do not fit the cached activations
        let wide = Parameters::<f32>::init(&arch, 16, 1).unwrap();
        assert!(model_backward(&arch, &wide, &cache, &Tensor::zeros(vec![2, 1])).is_err());
    }

    #[test]
    fn forward_rejects_wrong_batch() {
        let arch = Architecture::default();
        let params = Parameters::<f32>::init(&arch, 8, 1).unwrap();
        assert!(model_forward(&arch, &params, &Tensor::zeros(vec![1, 1, 8, 8])).is_err());
        let err = model_forward(&arch, &params, &random_batch(1, 16, 1)).unwrap_err();
        assert!(matches!(err, NetError::ShapeChain { layer: 6, .. }), "{err:?}");
    }
}
