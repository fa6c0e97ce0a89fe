//! Layers composed from tensor operations.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, BatchMoments, ConvGeometry, Element, Graph, NormStats, Tensor, Var};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Declarative description of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        features: usize,
        eps: f64,
        momentum: f64,
    },
    Dropout2d {
        p: f64,
    },
    Relu,
    LeakyRelu {
        negative_slope: f64,
    },
    Tanh,
    Sigmoid,
    /// Per-sample target shape; the batch axis is kept.
    Reshape {
        shape: Vec<usize>,
    },
}

/// Training or evaluation behavior for dropout and batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

impl LayerSpec {
    /// Name used in architecture tables.
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "Linear",
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::ConvTranspose2d { .. } => "ConvTranspose2d",
            LayerSpec::BatchNorm2d { .. } => "BatchNorm2d",
            LayerSpec::Dropout2d { .. } => "Dropout2d",
            LayerSpec::Relu => "ReLU",
            LayerSpec::LeakyRelu { .. } => "LeakyReLU",
            LayerSpec::Tanh => "Tanh",
            LayerSpec::Sigmoid => "Sigmoid",
            LayerSpec::Reshape { .. } => "Reshape",
        }
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                kernel,
                stride,
                padding,
                ..
            } => Some(ConvGeometry::new(kernel, stride, padding)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::invalid(format!("{}: {what} must be positive", self.kind_name())))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                positive("in_features", *in_features)?;
                positive("out_features", *out_features)
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                positive("in_channels", *in_channels)?;
                positive("out_channels", *out_channels)?;
                positive("kernel", *kernel)?;
                positive("stride", *stride)
            }
            LayerSpec::BatchNorm2d {
                features,
                eps,
                momentum,
            } => {
                positive("features", *features)?;
                if !(*eps > 0.0) || !(0.0..=1.0).contains(momentum) {
                    return Err(Error::invalid(format!(
                        "BatchNorm2d: eps must be > 0 and momentum in [0, 1], got {eps}, {momentum}"
                    )));
                }
                Ok(())
            }
            LayerSpec::Dropout2d { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::invalid(format!(
                        "Dropout2d: probability must lie in [0, 1), got {p}"
                    )));
                }
                Ok(())
            }
            LayerSpec::LeakyRelu { negative_slope } if !negative_slope.is_finite() => Err(
                Error::invalid("LeakyReLU: negative slope must be finite"),
            ),
            LayerSpec::Reshape { shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return Err(Error::invalid(format!(
                        "Reshape: target extents must be positive, got {shape:?}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Learnable parameter shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![in_channels, out_channels, kernel, kernel]),
                ("bias", vec![out_channels]),
            ],
            LayerSpec::BatchNorm2d { features, .. } => {
                vec![("gamma", vec![features]), ("beta", vec![features])]
            }
            _ => Vec::new(),
        }
    }

    /// Exact learnable parameter count.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Output shape for an input of the given shape (batch axis included).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let name = self.kind_name();
        match self {
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match input {
                [b, f] if f == in_features => Ok(vec![*b, *out_features]),
                _ => Err(Error::shape("Linear", input, &[0, *in_features])),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                ..
            } => {
                let [b, c, h, w] = *input else {
                    return Err(Error::shape("conv", input, &[0, *in_channels, 0, 0]));
                };
                if c != *in_channels {
                    return Err(Error::shape("conv", input, &[b, *in_channels, h, w]));
                }
                let geo = self.geometry().expect("conv layers carry geometry");
                let transposed = matches!(self, LayerSpec::ConvTranspose2d { .. });
                let extent = |e| {
                    if transposed {
                        geo.transpose_output(e)
                    } else {
                        geo.conv_output(e)
                    }
                };
                match (extent(h), extent(w)) {
                    (Some(oh), Some(ow)) => Ok(vec![b, *out_channels, oh, ow]),
                    _ => Err(Error::geometry(
                        name,
                        format!("input {h}x{w} with {geo:?} gives an empty output"),
                    )),
                }
            }
            LayerSpec::BatchNorm2d { features, .. } => match input {
                [_, c, _, _] if c == features => Ok(input.to_vec()),
                _ => Err(Error::shape("BatchNorm2d", input, &[0, *features, 0, 0])),
            },
            LayerSpec::Dropout2d { .. } if input.len() < 2 => Err(Error::invalid(format!(
                "Dropout2d needs [b, c, ...], got {input:?}"
            ))),
            LayerSpec::Reshape { shape } => {
                let per_sample: usize = input.iter().skip(1).product();
                if input.is_empty() || per_sample != shape.iter().product::<usize>() {
                    return Err(Error::shape("Reshape", input, shape));
                }
                let mut out = vec![input[0]];
                out.extend_from_slice(shape);
                Ok(out)
            }
            _ => Ok(input.to_vec()),
        }
    }
}

/// A named tensor owned by a layer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: &'static str,
    pub tensor: Tensor<T>,
}

/// Learnable parameters, running-statistic buffers and mode of one layer.
#[derive(Clone, Debug)]
pub struct LayerState<T> {
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Param<T>>,
    pub mode: Mode,
}

/// Weights `~ N(0, 0.02)`, biases 0, batch-norm gamma 1 and beta 0, running
/// mean 0 and running variance 1.
pub fn init_parameters<T: Element>(spec: &LayerSpec, rng: &mut dyn RngCore) -> Result<LayerState<T>> {
    spec.validate()?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut params = Vec::new();
    for (name, shape) in spec.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match name {
            "weight" => (0..n).map(|_| lit(normal.sample(rng))).collect(),
            "gamma" => vec![T::one(); n],
            _ => vec![T::zero(); n],
        };
        params.push(Param {
            name,
            tensor: Tensor::new(shape, data)?.with_requires_grad(true),
        });
    }
    let buffers = match spec {
        LayerSpec::BatchNorm2d { features, .. } => vec![
            Param {
                name: "running_mean",
                tensor: Tensor::zeros([*features])?,
            },
            Param {
                name: "running_var",
                tensor: Tensor::ones([*features])?,
            },
        ],
        _ => Vec::new(),
    };
    Ok(LayerState {
        params,
        buffers,
        mode: Mode::Train,
    })
}

/// Randomness and parameter bookkeeping threaded through a forward pass.
pub struct ForwardCtx<'a> {
    pub rng: &'a mut dyn RngCore,
    /// Register parameters as differentiable leaves (otherwise constants).
    pub track_params: bool,
    /// Tape handle of every parameter visited, in visiting order.
    pub bound: Vec<Option<Var>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(rng: &'a mut dyn RngCore, track_params: bool) -> Self {
        Self {
            rng,
            track_params,
            bound: Vec::new(),
        }
    }
}

/// Channel mask for spatial dropout: each `(sample, channel)` plane is kept
/// with probability `1 - p` and scaled by `1 / (1 - p)`.
pub fn dropout_mask<T: Element>(planes: usize, p: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = lit::<T>(1.0 / (1.0 - p));
    (0..planes)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// A layer: its spec plus its state.
#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub state: LayerState<T>,
}

impl<T: Element> Layer<T> {
    pub fn new(spec: LayerSpec, rng: &mut dyn RngCore) -> Result<Self> {
        let state = init_parameters(&spec, rng)?;
        Ok(Self { spec, state })
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.state.mode = mode;
    }

    fn param_var(&self, g: &mut Graph<T>, i: usize, ctx: &mut ForwardCtx<'_>) -> Var {
        let t = &self.state.params[i].tensor;
        let v = if ctx.track_params {
            g.leaf(t)
        } else {
            g.constant(t.clone())
        };
        ctx.bound.push(ctx.track_params.then_some(v));
        v
    }

    /// Records this layer on the tape. Returns the batch moments when a
    /// batch normalization ran in training mode; the caller decides whether
    /// to fold them into the running statistics.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let y = match &self.spec {
            LayerSpec::Linear { .. } => {
                let w = self.param_var(g, 0, ctx);
                let b = self.param_var(g, 1, ctx);
                g.linear(x, w, Some(b))?
            }
            LayerSpec::Conv2d { .. } | LayerSpec::ConvTranspose2d { .. } => {
                let geo = self.spec.geometry().expect("conv geometry");
                let w = self.param_var(g, 0, ctx);
                let b = self.param_var(g, 1, ctx);
                if matches!(self.spec, LayerSpec::Conv2d { .. }) {
                    g.conv2d(x, w, Some(b), geo)?
                } else {
                    g.conv_transpose2d(x, w, Some(b), geo)?
                }
            }
            LayerSpec::BatchNorm2d { eps, .. } => {
                let gamma = self.param_var(g, 0, ctx);
                let beta = self.param_var(g, 1, ctx);
                let eps = lit::<T>(*eps);
                let stats = match mode {
                    Mode::Train => NormStats::Batch { eps },
                    Mode::Eval => NormStats::Running {
                        mean: self.state.buffers[0].tensor.data(),
                        var: self.state.buffers[1].tensor.data(),
                        eps,
                    },
                };
                return g.batch_norm2d(x, gamma, beta, stats);
            }
            LayerSpec::Dropout2d { p } => {
                let shape = g.value(x).shape();
                if shape.len() < 2 {
                    return Err(Error::invalid(format!("Dropout2d needs [b, c, ...], got {shape:?}")));
                }
                if mode == Mode::Eval || *p == 0.0 {
                    x
                } else {
                    let mask = dropout_mask(shape[0] * shape[1], *p, ctx.rng);
                    g.channel_mask(x, mask)?
                }
            }
            LayerSpec::Relu => g.relu(x),
            LayerSpec::LeakyRelu { negative_slope } => g.leaky_relu(x, lit(*negative_slope)),
            LayerSpec::Tanh => g.tanh(x),
            LayerSpec::Sigmoid => g.sigmoid(x),
            LayerSpec::Reshape { .. } => {
                let target = self.spec.output_shape(g.value(x).shape())?;
                g.reshape(x, target)?
            }
        };
        Ok((y, None))
    }

    /// Folds batch moments into the running statistics:
    /// `r <- (1 - m) r + m * batch`, with the unbiased batch variance.
    pub fn update_running_stats(&mut self, moments: &BatchMoments<T>) {
        let LayerSpec::BatchNorm2d { momentum, .. } = self.spec else {
            return;
        };
        let m = lit::<T>(momentum);
        let keep = T::one() - m;
        let n = moments.count as f64;
        let unbias = lit::<T>(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
        let (mean_buf, rest) = self.state.buffers.split_at_mut(1);
        for (r, &b) in mean_buf[0].tensor.data_mut().iter_mut().zip(&moments.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in rest[0].tensor.data_mut().iter_mut().zip(&moments.var) {
            *r = keep * *r + m * b * unbias;
        }
    }

    /// Runs the layer on a plain tensor in its current mode, updating
    /// running statistics in training mode.
    pub fn apply(&mut self, x: &Tensor<T>, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::new(rng, false);
        let (y, moments) = self.forward(&mut g, xv, self.mode(), &mut ctx)?;
        if let Some(m) = moments {
            self.update_running_stats(&m);
        }
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bn(features: usize) -> LayerSpec {
        LayerSpec::BatchNorm2d {
            features,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    #[test]
    fn parameter_counts() {
        let conv = LayerSpec::Conv2d {
            in_channels: 64,
            out_channels: 128,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!(conv.param_count(), 73_856);
        let up = LayerSpec::ConvTranspose2d {
            in_channels: 128,
            out_channels: 64,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        assert_eq!(up.param_count(), 131_136);
        assert_eq!(bn(8).param_count(), 16);
        let lin = LayerSpec::Linear {
            in_features: 100,
            out_features: 16384,
        };
        assert_eq!(lin.param_count(), 1_654_784);
        for s in [
            LayerSpec::Relu,
            LayerSpec::Tanh,
            LayerSpec::Sigmoid,
            LayerSpec::Dropout2d { p: 0.3 },
            LayerSpec::LeakyRelu { negative_slope: 0.2 },
            LayerSpec::Reshape { shape: vec![4] },
        ] {
            assert_eq!(s.param_count(), 0);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(LayerSpec::Dropout2d { p: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout2d { p: -0.1 }.validate().is_err());
        assert!(LayerSpec::Linear {
            in_features: 0,
            out_features: 3
        }
        .validate()
        .is_err());
        assert!(LayerSpec::Reshape { shape: vec![0, 2] }.validate().is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let spec = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 8,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let a: LayerState<f32> = init_parameters(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: LayerState<f32> = init_parameters(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.params[0].tensor, b.params[0].tensor);
        assert!(a.params[1].tensor.data().iter().all(|&v| v == 0.0));

        let s: LayerState<f32> = init_parameters(&bn(8), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(s.params.iter().map(|p| p.tensor.numel()).sum::<usize>(), 16);
        assert!(s.params[0].tensor.data().iter().all(|&v| v == 1.0));
        assert!(s.buffers[1].tensor.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn batchnorm_two_samples() {
        let mut layer = Layer::<f64>::new(bn(1), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::new([2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let y = layer.apply(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        // running stats: mean 0.1 * 1, var 0.9 + 0.1 * 2 (unbiased)
        assert!((layer.state.buffers[0].tensor.data()[0] - 0.1).abs() < 1e-12);
        assert!((layer.state.buffers[1].tensor.data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_constant_input_and_single_sample() {
        let mut layer = Layer::<f64>::new(bn(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::full([3, 2, 2, 2], 4.5).unwrap();
        let y = layer.apply(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let one = Tensor::full([1, 2, 2, 2], 1.0).unwrap();
        assert!(layer.apply(&one, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        layer.set_mode(Mode::Eval);
        assert!(layer.apply(&one, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
    }

    #[test]
    fn batchnorm_eval_is_pure() {
        let mut layer = Layer::<f64>::new(bn(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        layer.set_mode(Mode::Eval);
        let before = layer.state.buffers.clone();
        let x = Tensor::new([2, 3, 1, 2], (0..12).map(f64::from).collect()).unwrap();
        let a = layer.apply(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = layer.apply(&x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        for (p, q) in before.iter().zip(&layer.state.buffers) {
            assert_eq!(p.tensor, q.tensor);
        }
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::new([2, 3, 2, 2], (0..24).map(|i| i as f32 * 0.5).collect()).unwrap();
        let mut layer = Layer::<f32>::new(LayerSpec::Dropout2d { p: 0.3 }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        layer.set_mode(Mode::Eval);
        assert_eq!(layer.apply(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), x);
        let mut zero = Layer::<f32>::new(LayerSpec::Dropout2d { p: 0.0 }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(zero.apply(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), x);

        layer.set_mode(Mode::Train);
        let y = layer.apply(&x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (plane_in, plane_out) in x.data().chunks(4).zip(y.data().chunks(4)) {
            let dropped = plane_out.iter().all(|&v| v == 0.0);
            let kept = plane_in
                .iter()
                .zip(plane_out)
                .all(|(&a, &b)| (b - a / 0.7).abs() < 1e-5);
            assert!(dropped || kept);
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::new([5], vec![-2.0, -1.0, 0.0, 1.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut run = |spec: LayerSpec| {
            Layer::<f64>::new(spec, &mut rng)
                .unwrap()
                .apply(&x, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
        };
        let leaky = run(LayerSpec::LeakyRelu { negative_slope: 0.2 });
        assert!((leaky.data()[1] + 0.2).abs() < 1e-15);
        assert_eq!(run(LayerSpec::Relu).data(), &[0.0, 0.0, 0.0, 1.0, 3.0]);
        assert_eq!(run(LayerSpec::Tanh).data()[2], 0.0);
        assert_eq!(run(LayerSpec::Sigmoid).data()[2], 0.5);
    }

    #[test]
    fn reshape_keeps_batch_axis() {
        let spec = LayerSpec::Reshape {
            shape: vec![1024, 4, 4],
        };
        assert_eq!(spec.output_shape(&[8, 16384]).unwrap(), vec![8, 1024, 4, 4]);
        let flat = LayerSpec::Reshape { shape: vec![1] };
        assert_eq!(flat.output_shape(&[8, 1, 1, 1]).unwrap(), vec![8, 1]);
        assert!(flat.output_shape(&[8, 2, 1, 1]).is_err());
    }
}
