use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::conv_out;
use super::{Element, Graph, NamedTensor, Result, Tensor, TensorError, Var};

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
    #[serde(rename = "logsoftmax")]
    LogSoftmax,
}

impl LayerSpec {
    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm2d { .. } => "batchnorm2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Softmax => "softmax",
            LayerSpec::LogSoftmax => "logsoftmax",
        }
    }

    /// Output shape for a given input shape, or the mismatch that the
    /// forward pass would report.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: String| TensorError::ShapeMismatch {
            layer: self.kind().to_string(),
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 4
                    || input[1] != in_channels
                    || input[2] + 2 * padding < kernel
                    || input[3] + 2 * padding < kernel
                {
                    return Err(bad(format!("[N, {in_channels}, H>={kernel}, W>={kernel}]")));
                }
                Ok(vec![
                    input[0],
                    out_channels,
                    conv_out(input[2], kernel, stride, padding),
                    conv_out(input[3], kernel, stride, padding),
                ])
            }
            LayerSpec::BatchNorm2d { channels, .. } => {
                if input.len() != 4 || input[1] != channels {
                    return Err(bad(format!("[N, {channels}, H, W]")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2x2 => {
                if input.len() != 4 || input[2] < 2 || input[3] < 2 {
                    return Err(bad("[N, C, H>=2, W>=2]".into()));
                }
                Ok(vec![input[0], input[1], input[2] / 2, input[3] / 2])
            }
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return Err(bad("[N, ...]".into()));
                }
                Ok(vec![input[0], input[1..].iter().product::<usize>().max(1)])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.len() != 2 || input[1] != in_features {
                    return Err(bad(format!("[N, {in_features}]")));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::Softmax | LayerSpec::LogSoftmax => {
                if input.len() != 2 {
                    return Err(bad("[N, C]".into()));
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Named trainable tensor (or a non-trainable buffer such as batch-norm
/// running statistics).
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Element> Parameter<T> {
    pub fn trainable(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            requires_grad: false,
            ..Self::trainable(name, value)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

#[derive(Clone, Debug)]
struct Layer<T> {
    spec: LayerSpec,
    params: Vec<Parameter<T>>,
}

/// Graph handles for every parameter bound during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: Vec<Vec<Var>>,
}

/// Sequential stack of layers.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    layers: Vec<Layer<T>>,
}

fn uniform<T: Element, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

impl<T: Element> Network<T> {
    /// Builds the network with weights drawn uniformly from `±sqrt(1/fan_in)`.
    pub fn new<R: Rng + ?Sized>(specs: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.into_iter().enumerate() {
            let prefix = format!("{idx}.{}", spec.kind());
            let params = match spec {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(TensorError::InvalidNetwork(format!("{prefix}: zero-sized hyperparameter")));
                    }
                    let bound = (1.0 / (in_channels * kernel * kernel) as f64).sqrt();
                    vec![
                        Parameter::trainable(
                            format!("{prefix}.weight"),
                            uniform(rng, vec![out_channels, in_channels, kernel, kernel], bound),
                        ),
                        Parameter::trainable(format!("{prefix}.bias"), uniform(rng, vec![out_channels], bound)),
                    ]
                }
                LayerSpec::BatchNorm2d { channels, eps, momentum } => {
                    if channels == 0 || eps <= 0.0 || !(0.0..=1.0).contains(&momentum) {
                        return Err(TensorError::InvalidNetwork(format!("{prefix}: bad hyperparameters")));
                    }
                    vec![
                        Parameter::trainable(format!("{prefix}.weight"), Tensor::full(vec![channels], T::one())),
                        Parameter::trainable(format!("{prefix}.bias"), Tensor::zeros(vec![channels])),
                        Parameter::buffer(format!("{prefix}.running_mean"), Tensor::zeros(vec![channels])),
                        Parameter::buffer(format!("{prefix}.running_var"), Tensor::full(vec![channels], T::one())),
                    ]
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if in_features == 0 || out_features == 0 {
                        return Err(TensorError::InvalidNetwork(format!("{prefix}: zero-sized hyperparameter")));
                    }
                    let bound = (1.0 / in_features as f64).sqrt();
                    vec![
                        Parameter::trainable(
                            format!("{prefix}.weight"),
                            uniform(rng, vec![out_features, in_features], bound),
                        ),
                        Parameter::trainable(format!("{prefix}.bias"), uniform(rng, vec![out_features], bound)),
                    ]
                }
                _ => Vec::new(),
            };
            layers.push(Layer { spec, params });
        }
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = layer.spec.output_shape(&shape).map_err(|e| name_layer(e, idx))?;
        }
        Ok(shape)
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.grad = None;
        }
    }

    /// Forward pass. In [`Mode::Train`] batch-norm layers use batch statistics
    /// and update their running averages.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Binding)> {
        let (out, binding, stats) = self.run(g, x, mode)?;
        for (idx, mean, var, count) in stats {
            let LayerSpec::BatchNorm2d { momentum, .. } = self.layers[idx].spec else {
                unreachable!()
            };
            let m = T::lit(momentum);
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let params = &mut self.layers[idx].params;
            for (rm, &mu) in params[2].value.data_mut().iter_mut().zip(&mean) {
                *rm = (T::one() - m) * *rm + m * mu;
            }
            for (rv, &v) in params[3].value.data_mut().iter_mut().zip(&var) {
                *rv = (T::one() - m) * *rv + m * v * unbias;
            }
        }
        Ok((out, binding))
    }

    /// Forward pass with running statistics; never mutates the network.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Binding)> {
        let (out, binding, _) = self.run(g, x, Mode::Eval)?;
        Ok((out, binding))
    }

    /// Inference on a batch tensor without recording a graph.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let (y, _) = self.forward_eval(&mut g, x)?;
        Ok(g.take_value(y))
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, Binding, Vec<(usize, Vec<T>, Vec<T>, usize)>)> {
        let mut binding = Binding::default();
        let mut stats = Vec::new();
        let mut h = x;
        for (idx, layer) in self.layers.iter().enumerate() {
            layer
                .spec
                .output_shape(g.value(h).shape())
                .map_err(|e| name_layer(e, idx))?;
            let vars: Vec<Var> = layer
                .params
                .iter()
                .take(if matches!(layer.spec, LayerSpec::BatchNorm2d { .. }) { 2 } else { usize::MAX })
                .map(|p| g.leaf(p.value.clone(), p.requires_grad))
                .collect();
            h = match layer.spec {
                LayerSpec::Conv2d { stride, padding, .. } => g.conv2d(h, vars[0], vars[1], stride, padding),
                LayerSpec::BatchNorm2d { eps, .. } => {
                    let shape = g.value(h).shape().to_vec();
                    let running = (mode == Mode::Eval)
                        .then(|| (layer.params[2].value.data(), layer.params[3].value.data()));
                    let (out, mean, var) = g.batch_norm(h, vars[0], vars[1], eps, running)?;
                    if mode == Mode::Train {
                        stats.push((idx, mean, var, shape[0] * shape[2] * shape[3]));
                    }
                    Ok(out)
                }
                LayerSpec::Relu => g.relu(h),
                LayerSpec::MaxPool2x2 => g.maxpool2x2(h),
                LayerSpec::Flatten => g.flatten(h),
                LayerSpec::Linear { .. } => g.linear(h, vars[0], vars[1]),
                LayerSpec::Softmax => g.softmax(h),
                LayerSpec::LogSoftmax => g.log_softmax(h),
            }
            .map_err(|e| name_layer(e, idx))?;
            binding.vars.push(vars);
        }
        Ok((h, binding, stats))
    }

    /// Adds the gradients found on `g` into each parameter's grad buffer.
    pub fn absorb_grads(&mut self, g: &Graph<T>, binding: &Binding) {
        for (layer, vars) in self.layers.iter_mut().zip(&binding.vars) {
            for (p, &v) in layer.params.iter_mut().zip(vars) {
                if !p.requires_grad {
                    continue;
                }
                let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
                match &mut p.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .for_each(|(a, &b)| *a += b),
                    None => p.grad = Some(grad),
                }
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor> {
        self.parameters()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                tensor: p.value.cast(),
            })
            .collect()
    }

    /// Overwrites parameter values from named tensors; every parameter must
    /// be present with a matching shape. Unknown names are ignored.
    pub fn load_named(&mut self, entries: &[NamedTensor]) -> Result<()> {
        for p in self.parameters_mut() {
            let entry = entries
                .iter()
                .find(|e| e.name == p.name)
                .ok_or_else(|| TensorError::Format(format!("missing tensor {}", p.name)))?;
            if entry.tensor.shape() != p.value.shape() {
                return Err(TensorError::Format(format!(
                    "tensor {} has shape {:?}, network expects {:?}",
                    p.name,
                    entry.tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = entry.tensor.cast();
        }
        Ok(())
    }
}

fn name_layer(err: TensorError, idx: usize) -> TensorError {
    match err {
        TensorError::ShapeMismatch {
            layer,
            expected,
            actual,
        } if !layer.contains('#') => TensorError::ShapeMismatch {
            layer: format!("#{idx} {layer}"),
            expected,
            actual,
        },
        other => other,
    }
}
