//! Generator and discriminator builders, forward passes and the
//! architecture-conformance report.
//!
//! At scale factor 1 the generator maps a 100-wide latent vector through a
//! linear layer, a reshape to `1024 x 4 x 4` and six stride-2 transposed
//! convolutions (kernel 4, padding 1) up to `3 x 256 x 256`. The
//! discriminator mirrors it with six stride-2 convolutions (kernel 3,
//! padding 1) from `3 x 256 x 256` down to `256 x 4 x 4`, a reducing 4x4
//! convolution to `1 x 1 x 1`, a reshape and a sigmoid.
//!
//! A scale factor `f` in {2, 4, 8} drops `log2 f` blocks from the wide end
//! of each channel ladder, giving `256 / f` pixel images with every
//! mechanism still present.

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Layer, LayerSpec, Mode, Param};
use crate::tensor::{Element, Gradients, Graph, Tensor, Var};

/// Width of the generator's latent input.
pub const LATENT_DIM: usize = 100;

/// Hidden channel widths of the full-size generator, widest first.
const GENERATOR_WIDTHS: [usize; 6] = [1024, 512, 256, 128, 64, 32];
/// Channel widths of the full-size discriminator blocks, narrowest first.
const DISCRIMINATOR_WIDTHS: [usize; 6] = [8, 16, 32, 64, 128, 256];
const FULL_RESOLUTION: usize = 256;
const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Generator,
    Discriminator,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
        })
    }
}

/// Regularization and normalization knobs shared by both builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerHyper {
    pub dropout_p: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub leaky_slope: f64,
}

impl Default for LayerHyper {
    fn default() -> Self {
        Self {
            dropout_p: 0.3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            leaky_slope: 0.2,
        }
    }
}

/// Ordered layer list with its input/output contract.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub role: Role,
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    /// Per-sample output shape.
    pub output_shape: Vec<usize>,
    pub scale_factor: usize,
}

/// Number of up/down-sampling blocks removed at a scale factor.
fn dropped_blocks(scale_factor: usize) -> Result<usize> {
    match scale_factor {
        1 => Ok(0),
        2 => Ok(1),
        4 => Ok(2),
        8 => Ok(3),
        other => Err(Error::invalid(format!(
            "scale factor must be one of 1, 2, 4, 8, got {other}"
        ))),
    }
}

/// Image side length produced at a scale factor.
pub fn image_size(scale_factor: usize) -> Result<usize> {
    dropped_blocks(scale_factor)?;
    Ok(FULL_RESOLUTION / scale_factor)
}

impl ModelSpec {
    pub fn generator(scale_factor: usize, hyper: &LayerHyper) -> Result<Self> {
        let dropped = dropped_blocks(scale_factor)?;
        let widths = &GENERATOR_WIDTHS[dropped..];
        let mut layers = vec![
            LayerSpec::Linear {
                in_features: LATENT_DIM,
                out_features: widths[0] * 16,
            },
            LayerSpec::Reshape {
                shape: vec![widths[0], 4, 4],
            },
        ];
        for (i, &c_in) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let c_out = if last { IMAGE_CHANNELS } else { widths[i + 1] };
            layers.push(LayerSpec::ConvTranspose2d {
                in_channels: c_in,
                out_channels: c_out,
                kernel: 4,
                stride: 2,
                padding: 1,
            });
            if last {
                layers.push(LayerSpec::Tanh);
            } else {
                layers.push(LayerSpec::BatchNorm2d {
                    features: c_out,
                    eps: hyper.bn_eps,
                    momentum: hyper.bn_momentum,
                });
                layers.push(LayerSpec::Relu);
            }
        }
        let side = image_size(scale_factor)?;
        Self::checked(ModelSpec {
            role: Role::Generator,
            layers,
            input_shape: vec![LATENT_DIM],
            output_shape: vec![IMAGE_CHANNELS, side, side],
            scale_factor,
        })
    }

    /// The first block normalizes before dropout; every later block drops
    /// out before normalizing. This follows the reference table row order.
    pub fn discriminator(scale_factor: usize, hyper: &LayerHyper) -> Result<Self> {
        let dropped = dropped_blocks(scale_factor)?;
        let widths = &DISCRIMINATOR_WIDTHS[..DISCRIMINATOR_WIDTHS.len() - dropped];
        let mut layers = Vec::new();
        let mut c_in = IMAGE_CHANNELS;
        for (i, &c_out) in widths.iter().enumerate() {
            layers.push(LayerSpec::Conv2d {
                in_channels: c_in,
                out_channels: c_out,
                kernel: 3,
                stride: 2,
                padding: 1,
            });
            let bn = LayerSpec::BatchNorm2d {
                features: c_out,
                eps: hyper.bn_eps,
                momentum: hyper.bn_momentum,
            };
            let dropout = LayerSpec::Dropout2d { p: hyper.dropout_p };
            if i == 0 {
                layers.extend([bn, dropout]);
            } else {
                layers.extend([dropout, bn]);
            }
            layers.push(LayerSpec::LeakyRelu {
                negative_slope: hyper.leaky_slope,
            });
            c_in = c_out;
        }
        layers.extend([
            LayerSpec::Conv2d {
                in_channels: c_in,
                out_channels: 1,
                kernel: 4,
                stride: 1,
                padding: 0,
            },
            LayerSpec::Reshape { shape: vec![1] },
            LayerSpec::Sigmoid,
        ]);
        let side = image_size(scale_factor)?;
        Self::checked(ModelSpec {
            role: Role::Discriminator,
            layers,
            input_shape: vec![IMAGE_CHANNELS, side, side],
            output_shape: vec![1],
            scale_factor,
        })
    }

    fn checked(spec: Self) -> Result<Self> {
        let shapes = spec.layer_shapes(1)?;
        let out = shapes.last().map(|s| &s[1..]).unwrap_or(&spec.input_shape[..]);
        if out != spec.output_shape {
            return Err(Error::shape("model output", out, &spec.output_shape));
        }
        Ok(spec)
    }

    /// Output shape after every layer for a batch of `batch`.
    pub fn layer_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.input_shape);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer.validate()?;
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

/// An instantiated model: spec plus per-layer state.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
}

/// Result of recording a model on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub output: Var,
    /// Tape handle of each parameter (in [`Model::parameters`] order), or
    /// `None` when parameters were recorded as constants.
    pub params: Vec<Option<Var>>,
}

impl<T: Element> Model<T> {
    pub fn new(spec: ModelSpec, rng: &mut dyn RngCore) -> Result<Self> {
        spec.layer_shapes(1)?;
        let layers = spec
            .layers
            .iter()
            .map(|s| Layer::new(s.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn role(&self) -> Role {
        self.spec.role
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.layers.iter_mut().for_each(|l| l.set_mode(mode));
    }

    /// Named learnable parameters in a stable order (`"<layer>.<name>"`).
    pub fn parameters(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| {
            l.state
                .params
                .iter()
                .map(move |p| (format!("{i}.{}", p.name), &p.tensor))
        })
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.state.params.iter_mut().map(|p| &mut p.tensor))
    }

    /// Named non-learnable buffers (batch-norm running statistics).
    pub fn buffers(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.layers.iter().enumerate().flat_map(|(i, l)| {
            l.state
                .buffers
                .iter()
                .map(move |p| (format!("{i}.{}", p.name), &p.tensor))
        })
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.state.buffers.iter_mut().map(|p| &mut p.tensor))
    }

    pub fn param_count(&self) -> usize {
        self.parameters().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().for_each(Tensor::zero_grad);
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            let mut want = vec![shape.first().copied().unwrap_or(0)];
            want.extend_from_slice(&self.spec.input_shape);
            return Err(Error::shape("model input", shape, &want));
        }
        Ok(())
    }

    fn record(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        rng: &mut dyn RngCore,
        track_params: bool,
        upto: usize,
    ) -> Result<Bound> {
        self.check_input(g.value(x).shape())?;
        let mut ctx = ForwardCtx::new(rng, track_params);
        let mut h = x;
        for layer in &mut self.layers[..upto] {
            let (y, moments) = layer.forward(g, h, layer.mode(), &mut ctx)?;
            if let Some(m) = moments {
                layer.update_running_stats(&m);
            }
            h = y;
        }
        Ok(Bound {
            output: h,
            params: ctx.bound,
        })
    }

    /// Records the whole model on `g` using each layer's mode. Training-mode
    /// batch normalizations update their running statistics.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        rng: &mut dyn RngCore,
        track_params: bool,
    ) -> Result<Bound> {
        let n = self.layers.len();
        self.record(g, x, rng, track_params, n)
    }

    /// Like [`Model::forward`] but stops before a trailing sigmoid, exposing
    /// the logits the loss is computed from.
    pub fn forward_logits(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        rng: &mut dyn RngCore,
        track_params: bool,
    ) -> Result<Bound> {
        let n = self.layers.len();
        if !matches!(self.layers.last().map(|l| &l.spec), Some(LayerSpec::Sigmoid)) {
            return Err(Error::invalid("model does not end in a sigmoid"));
        }
        self.record(g, x, rng, track_params, n - 1)
    }

    /// Evaluation-mode forward pass that leaves the model untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        // eval mode draws no randomness
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut ctx = ForwardCtx::new(&mut rng, false);
        for layer in &self.layers {
            h = layer.forward(&mut g, h, Mode::Eval, &mut ctx)?.0;
        }
        Ok(g.value(h).clone())
    }

    /// Adds the tape gradients of every tracked parameter into the
    /// parameters' accumulated gradients.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, bound: &Bound) -> Result<()> {
        for (t, v) in self.parameters_mut().zip(&bound.params) {
            if let Some(v) = v {
                grads.accumulate_into(*v, t)?;
            }
        }
        Ok(())
    }

    /// Copy of the model at another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let cast_params = |ps: &[Param<T>]| {
            ps.iter()
                .map(|p| Param {
                    name: p.name,
                    tensor: p.tensor.cast(),
                })
                .collect()
        };
        Model {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    state: crate::nn::LayerState {
                        params: cast_params(&l.state.params),
                        buffers: cast_params(&l.state.buffers),
                        mode: l.state.mode,
                    },
                })
                .collect(),
        }
    }
}

pub fn build_generator<T: Element>(scale_factor: usize, hyper: &LayerHyper, rng: &mut dyn RngCore) -> Result<Model<T>> {
    Model::new(ModelSpec::generator(scale_factor, hyper)?, rng)
}

pub fn build_discriminator<T: Element>(
    scale_factor: usize,
    hyper: &LayerHyper,
    rng: &mut dyn RngCore,
) -> Result<Model<T>> {
    Model::new(ModelSpec::discriminator(scale_factor, hyper)?, rng)
}

/// Decodes a `[b, 100]` latent batch into `[b, 3, H, W]` images in
/// evaluation mode.
pub fn generator_forward<T: Element>(model: &Model<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    if model.role() != Role::Generator {
        return Err(Error::invalid("generator_forward needs a generator"));
    }
    if z.rank() != 2 || z.shape()[1] != LATENT_DIM {
        return Err(Error::shape("generator_forward", z.shape(), &[0, LATENT_DIM]));
    }
    model.infer(z)
}

/// Per-image probability of being real, in evaluation mode.
pub fn discriminator_forward<T: Element>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<T>> {
    if model.role() != Role::Discriminator {
        return Err(Error::invalid("discriminator_forward needs a discriminator"));
    }
    Ok(model.infer(images)?.into_vec())
}

/// One row of a published architecture table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

/// Batch size used in the reference tables.
pub const REFERENCE_BATCH: usize = 8;

fn row(name: &'static str, shape: &[usize], params: usize) -> ReferenceRow {
    ReferenceRow {
        name,
        output_shape: shape.to_vec(),
        params,
    }
}

/// Published per-layer output sizes (batch 8) and parameter counts.
pub fn reference_table(role: Role) -> Vec<ReferenceRow> {
    match role {
        Role::Discriminator => vec![
            row("Conv2d-1", &[8, 8, 128, 128], 224),
            row("BatchNorm2d-2", &[8, 8, 128, 128], 16),
            row("Dropout2d-3", &[8, 8, 128, 128], 0),
            row("LeakyReLU-4", &[8, 8, 128, 128], 0),
            row("Conv2d-5", &[8, 16, 64, 64], 1_168),
            row("Dropout2d-6", &[8, 16, 64, 64], 0),
            row("BatchNorm2d-7", &[8, 16, 64, 64], 32),
            row("LeakyReLU-8", &[8, 16, 64, 64], 0),
            row("Conv2d-9", &[8, 32, 32, 32], 4_640),
            row("Dropout2d-10", &[8, 32, 32, 32], 0),
            row("BatchNorm2d-11", &[8, 32, 32, 32], 64),
            row("LeakyReLU-12", &[8, 32, 32, 32], 0),
            row("Conv2d-13", &[8, 64, 16, 16], 18_496),
            row("Dropout2d-14", &[8, 64, 16, 16], 0),
            row("BatchNorm2d-15", &[8, 64, 16, 16], 128),
            row("LeakyReLU-16", &[8, 64, 16, 16], 0),
            row("Conv2d-17", &[8, 128, 8, 8], 73_856),
            row("Dropout2d-18", &[8, 128, 8, 8], 0),
            row("BatchNorm2d-19", &[8, 128, 8, 8], 256),
            row("LeakyReLU-20", &[8, 128, 8, 8], 0),
            row("Conv2d-21", &[8, 256, 4, 4], 295_168),
            row("Dropout2d-22", &[8, 256, 4, 4], 0),
            row("BatchNorm2d-23", &[8, 256, 4, 4], 512),
            row("LeakyReLU-24", &[8, 256, 4, 4], 0),
        ],
        Role::Generator => vec![
            row("Linear-1", &[8, 16384], 1_654_784),
            row("ConvTranspose2d-2", &[8, 512, 8, 8], 8_389_120),
            row("BatchNorm2d-3", &[8, 512, 8, 8], 1_024),
            row("ReLU-4", &[8, 512, 8, 8], 0),
            row("ConvTranspose2d-5", &[8, 256, 16, 16], 2_097_408),
            row("BatchNorm2d-6", &[8, 256, 16, 16], 512),
            row("ReLU-7", &[8, 256, 16, 16], 0),
            row("ConvTranspose2d-8", &[8, 128, 32, 32], 524_416),
            row("BatchNorm2d-9", &[8, 128, 32, 32], 256),
            row("ReLU-10", &[8, 128, 32, 32], 0),
            row("ConvTranspose2d-11", &[8, 64, 64, 64], 131_136),
            row("BatchNorm2d-12", &[8, 64, 64, 64], 128),
            row("ReLU-13", &[8, 64, 64, 64], 0),
            row("ConvTranspose2d-14", &[8, 32, 128, 128], 32_800),
            row("BatchNorm2d-15", &[8, 32, 128, 128], 64),
            row("ReLU-16", &[8, 32, 128, 128], 0),
            row("ConvTranspose2d-17", &[8, 3, 256, 256], 1_539),
        ],
    }
}

/// Whether a report row has a counterpart in the reference table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSource {
    Table,
    /// Described only in prose (functional reshapes, final activations and
    /// the discriminator's reducing convolution).
    ProseOnly,
}

#[derive(Clone, Debug)]
pub struct ArchRow {
    pub name: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub source: RowSource,
    pub expected: Option<ReferenceRow>,
    pub matches: bool,
}

/// Row-by-row comparison of a model against its reference table.
#[derive(Clone, Debug)]
pub struct ArchReport {
    pub role: Role,
    pub rows: Vec<ArchRow>,
    pub total_params: usize,
    pub tabulated_params: usize,
    pub expected_tabulated_params: usize,
    /// Reference rows with no layer left to compare against.
    pub missing: Vec<ReferenceRow>,
}

impl ArchReport {
    pub fn table_rows(&self) -> impl Iterator<Item = &ArchRow> {
        self.rows.iter().filter(|r| r.source == RowSource::Table)
    }

    pub fn all_match(&self) -> bool {
        self.missing.is_empty() && self.table_rows().all(|r| r.matches)
    }

    pub fn mismatches(&self) -> impl Iterator<Item = &ArchRow> {
        self.table_rows().filter(|r| !r.matches)
    }
}

/// Compares every layer's output shape (at batch 8) and parameter count
/// against the reference table for the model's role.
pub fn verify_architecture<T: Element>(model: &Model<T>) -> ArchReport {
    let reference = reference_table(model.role());
    let shapes = model.spec.layer_shapes(REFERENCE_BATCH);
    let mut rows = Vec::new();
    let mut numbered = 0;
    for (i, layer) in model.layers.iter().enumerate() {
        let kind = layer.spec.kind_name();
        let params: usize = layer.state.params.iter().map(|p| p.tensor.numel()).sum();
        let output_shape = match &shapes {
            Ok(s) => s[i].clone(),
            Err(_) => Vec::new(),
        };
        if matches!(layer.spec, LayerSpec::Reshape { .. }) {
            rows.push(ArchRow {
                name: kind.to_string(),
                output_shape,
                params,
                source: RowSource::ProseOnly,
                expected: None,
                matches: true,
            });
            continue;
        }
        numbered += 1;
        let name = format!("{kind}-{numbered}");
        match reference.get(numbered - 1) {
            Some(exp) => {
                let matches = exp.name == name && exp.output_shape == output_shape && exp.params == params;
                rows.push(ArchRow {
                    name,
                    output_shape,
                    params,
                    source: RowSource::Table,
                    expected: Some(exp.clone()),
                    matches,
                });
            }
            None => rows.push(ArchRow {
                name,
                output_shape,
                params,
                source: RowSource::ProseOnly,
                expected: None,
                matches: true,
            }),
        }
    }
    let missing = reference.iter().skip(numbered).cloned().collect();
    let tabulated_params = rows
        .iter()
        .filter(|r| r.source == RowSource::Table)
        .map(|r| r.params)
        .sum();
    ArchReport {
        role: model.role(),
        total_params: rows.iter().map(|r| r.params).sum(),
        tabulated_params,
        expected_tabulated_params: reference.iter().map(|r| r.params).sum(),
        rows,
        missing,
    }
}

/// Digits grouped in threes.
pub(crate) fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "?".into();
    }
    let parts: Vec<String> = shape.iter().map(ToString::to_string).collect();
    format!("[{}]", parts.join(", "))
}

impl fmt::Display for ArchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} layers (batch {REFERENCE_BATCH})", self.role)?;
        writeln!(
            f,
            "{:<22} {:<22} {:>12} {:>12}  {}",
            "Layer", "Output Size", "Parameters", "Expected", "Status"
        )?;
        writeln!(f, "{}", "-".repeat(82))?;
        for r in &self.rows {
            let (expected, status) = match (&r.expected, r.source) {
                (_, RowSource::ProseOnly) => ("-".to_string(), "prose-only"),
                (Some(e), _) => (group_digits(e.params), if r.matches { "ok" } else { "MISMATCH" }),
                (None, _) => ("-".to_string(), "?"),
            };
            writeln!(
                f,
                "{:<22} {:<22} {:>12} {:>12}  {}",
                r.name,
                shape_text(&r.output_shape),
                group_digits(r.params),
                expected,
                status
            )?;
            if let (Some(e), false) = (&r.expected, r.matches) {
                writeln!(f, "{:<22} expected {} {}", "", e.name, shape_text(&e.output_shape))?;
            }
        }
        for m in &self.missing {
            writeln!(f, "{:<22} {:<22} {:>12} {:>12}  MISSING", m.name, shape_text(&m.output_shape), "-", group_digits(m.params))?;
        }
        writeln!(f, "{}", "-".repeat(82))?;
        writeln!(
            f,
            "tabulated parameters: {} (expected {}), all layers: {}",
            group_digits(self.tabulated_params),
            group_digits(self.expected_tabulated_params),
            group_digits(self.total_params)
        )?;
        write!(
            f,
            "result: {}",
            if self.all_match() { "all rows match" } else { "MISMATCH" }
        )
    }
}
