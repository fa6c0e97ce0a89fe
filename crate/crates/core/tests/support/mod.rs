//! Shared gradient-check fixtures for the gradient and acceptance suites.
#![allow(dead_code)]

use mdcgan::model::{build_discriminator, build_generator, LayerHyper, Model};
use mdcgan::tensor::gradcheck::{central_differences, largest_coords, max_relative_error};
use mdcgan::tensor::{finite_diff_check, CheckOptions, ConvGeometry, Element, Graph, NormStats, Tensor, Var};
use mdcgan::train::{discriminator_objective, generator_objective, sample_noise, DiscBatching, GeneratorLoss};
use mdcgan::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL_F64: f64 = 1e-4;
pub const TOL_F32: f64 = 1e-2;

pub fn rand_tensor<T: Element>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    // drawn on the f32 grid so the f64 case is an exact cast of the f32 one
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi) as f32 as f64))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values in `[0.1, 1]` with random sign, keeping kinks at zero out of reach
/// of the difference step.
pub fn away_from_zero<T: Element>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0f64) as f32 as f64;
            T::from_f64_lossy(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to a scalar through a fixed random weighting so that no
/// gradient component is hidden by symmetric cancellation.
pub fn project<T: Element>(g: &mut Graph<T>, y: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor::<T>(g.value(y).shape(), -1.0, 1.0, seed ^ 0x9e37);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub type OpCase<T> = (&'static str, Tensor<T>, Box<dyn Fn(&mut Graph<T>, Var) -> Result<Var>>);

pub fn op_cases<T: Element>() -> Vec<OpCase<T>> {
    let geo = ConvGeometry::new(3, 2, 1);
    let tgeo = ConvGeometry::new(4, 2, 1);
    let other = rand_tensor::<T>(&[2, 3], -1.0, 1.0, 50);
    let lin_w = rand_tensor::<T>(&[4, 3], -1.0, 1.0, 51);
    let lin_x = rand_tensor::<T>(&[2, 3], -1.0, 1.0, 52);
    let lin_b = rand_tensor::<T>(&[4], -1.0, 1.0, 53);
    let conv_x = rand_tensor::<T>(&[2, 2, 5, 5], -1.0, 1.0, 54);
    let conv_w = rand_tensor::<T>(&[3, 2, 3, 3], -0.5, 0.5, 55);
    let conv_b = rand_tensor::<T>(&[3], -0.5, 0.5, 56);
    let tx = rand_tensor::<T>(&[2, 3, 3, 3], -1.0, 1.0, 57);
    let tw = rand_tensor::<T>(&[3, 2, 4, 4], -0.5, 0.5, 58);
    let tb = rand_tensor::<T>(&[2], -0.5, 0.5, 59);
    let bn_x = rand_tensor::<T>(&[3, 2, 2, 2], -2.0, 2.0, 60);
    let gamma = rand_tensor::<T>(&[2], 0.5, 1.5, 61);
    let beta = rand_tensor::<T>(&[2], -0.5, 0.5, 62);
    let mask: Vec<T> = [0.0, 1.0 / 0.7, 1.0 / 0.7, 0.0, 1.0 / 0.7, 1.0 / 0.7]
        .iter()
        .map(|&v| T::from_f64_lossy(v))
        .collect();
    let targets: Vec<T> = [1.0, 0.0, 1.0, 0.0, 0.25, 0.75].iter().map(|&v| T::from_f64_lossy(v)).collect();
    let lit = T::from_f64_lossy;
    let eps_bn: T = lit(1e-5);

    macro_rules! case {
        ($name:expr, $x:expr, |$g:ident, $v:ident| $body:expr) => {{
            let f: Box<dyn Fn(&mut Graph<T>, Var) -> Result<Var>> = Box::new(move |$g: &mut Graph<T>, $v: Var| {
                let y = $body;
                project($g, y, 7)
            });
            ($name, $x, f)
        }};
    }
    let (o1, o2, o3) = (other.clone(), other.clone(), other.clone());
    let (lw1, lx2, lx3, lw3) = (lin_w.clone(), lin_x.clone(), lin_x.clone(), lin_w.clone());
    let (lb1, lb2) = (lin_b.clone(), lin_b.clone());
    let (cw1, cx2, cx3, cw3, cb1, cb2) = (
        conv_w.clone(),
        conv_x.clone(),
        conv_x.clone(),
        conv_w.clone(),
        conv_b.clone(),
        conv_b.clone(),
    );
    let (tw1, tx2, tx3, tw3, tb1, tb2) = (tw.clone(), tx.clone(), tx.clone(), tw.clone(), tb.clone(), tb.clone());
    let (ga1, be1, bx2, be2, bx3, ga3) = (
        gamma.clone(),
        beta.clone(),
        bn_x.clone(),
        beta.clone(),
        bn_x.clone(),
        gamma.clone(),
    );
    let (ga4, be4) = (gamma.clone(), beta.clone());
    let run_mean = vec![lit(0.1), lit(-0.2)];
    let run_var = vec![lit(0.8), lit(1.3)];
    let (t1, t2) = (targets.clone(), targets.clone());
    let m1 = mask.clone();

    vec![
        case!("add", rand_tensor(&[2, 3], -1.0, 1.0, 1), |g, v| {
            let c = g.constant(o1.clone());
            g.add(v, c)?
        }),
        case!("sub", rand_tensor(&[2, 3], -1.0, 1.0, 2), |g, v| {
            let c = g.constant(o2.clone());
            g.sub(c, v)?
        }),
        case!("mul", rand_tensor(&[2, 3], -1.0, 1.0, 3), |g, v| {
            let c = g.constant(o3.clone());
            let a = g.mul(v, c)?;
            g.mul(a, v)?
        }),
        case!("neg", rand_tensor(&[2, 3], -1.0, 1.0, 4), |g, v| g.neg(v)),
        case!("scale", rand_tensor(&[2, 3], -1.0, 1.0, 5), |g, v| g.scale(v, lit(-2.5))),
        case!("add_scalar", rand_tensor(&[2, 3], -1.0, 1.0, 6), |g, v| {
            let s = g.add_scalar(v, lit(0.75));
            g.mul(s, s)?
        }),
        case!("reshape", rand_tensor(&[2, 3], -1.0, 1.0, 7), |g, v| g.reshape(v, [3, 2])?),
        case!("sum", rand_tensor(&[2, 3], -1.0, 1.0, 8), |g, v| {
            let sq = g.mul(v, v)?;
            g.sum(sq)
        }),
        case!("mean", rand_tensor(&[2, 3], -1.0, 1.0, 9), |g, v| {
            let sq = g.mul(v, v)?;
            g.mean(sq)
        }),
        case!("relu", away_from_zero(&[3, 4], 10), |g, v| g.relu(v)),
        case!("leaky_relu", away_from_zero(&[3, 4], 11), |g, v| g.leaky_relu(v, lit(0.2))),
        case!("tanh", rand_tensor(&[3, 4], -2.0, 2.0, 12), |g, v| g.tanh(v)),
        case!("sigmoid", rand_tensor(&[3, 4], -3.0, 3.0, 13), |g, v| g.sigmoid(v)),
        case!("linear/x", lin_x.clone(), |g, v| {
            let (w, b) = (g.constant(lw1.clone()), g.constant(lb1.clone()));
            g.linear(v, w, Some(b))?
        }),
        case!("linear/w", lin_w.clone(), |g, v| {
            let (x, b) = (g.constant(lx2.clone()), g.constant(lb2.clone()));
            g.linear(x, v, Some(b))?
        }),
        case!("linear/b", lin_b.clone(), |g, v| {
            let (x, w) = (g.constant(lx3.clone()), g.constant(lw3.clone()));
            g.linear(x, w, Some(v))?
        }),
        case!("conv2d/x", conv_x.clone(), |g, v| {
            let (w, b) = (g.constant(cw1.clone()), g.constant(cb1.clone()));
            g.conv2d(v, w, Some(b), geo)?
        }),
        case!("conv2d/w", conv_w.clone(), |g, v| {
            let (x, b) = (g.constant(cx2.clone()), g.constant(cb2.clone()));
            g.conv2d(x, v, Some(b), geo)?
        }),
        case!("conv2d/b", conv_b.clone(), |g, v| {
            let (x, w) = (g.constant(cx3.clone()), g.constant(cw3.clone()));
            g.conv2d(x, w, Some(v), geo)?
        }),
        case!("conv_transpose2d/x", tx.clone(), |g, v| {
            let (w, b) = (g.constant(tw1.clone()), g.constant(tb1.clone()));
            g.conv_transpose2d(v, w, Some(b), tgeo)?
        }),
        case!("conv_transpose2d/w", tw.clone(), |g, v| {
            let (x, b) = (g.constant(tx2.clone()), g.constant(tb2.clone()));
            g.conv_transpose2d(x, v, Some(b), tgeo)?
        }),
        case!("conv_transpose2d/b", tb.clone(), |g, v| {
            let (x, w) = (g.constant(tx3.clone()), g.constant(tw3.clone()));
            g.conv_transpose2d(x, w, Some(v), tgeo)?
        }),
        case!("batch_norm2d/x", bn_x.clone(), |g, v| {
            let (ga, be) = (g.constant(ga1.clone()), g.constant(be1.clone()));
            g.batch_norm2d(v, ga, be, NormStats::Batch { eps: eps_bn })?.0
        }),
        case!("batch_norm2d/gamma", gamma.clone(), |g, v| {
            let (x, be) = (g.constant(bx2.clone()), g.constant(be2.clone()));
            g.batch_norm2d(x, v, be, NormStats::Batch { eps: eps_bn })?.0
        }),
        case!("batch_norm2d/beta", beta.clone(), |g, v| {
            let (x, ga) = (g.constant(bx3.clone()), g.constant(ga3.clone()));
            g.batch_norm2d(x, ga, v, NormStats::Batch { eps: eps_bn })?.0
        }),
        case!("batch_norm2d/running", bn_x.clone(), |g, v| {
            let (ga, be) = (g.constant(ga4.clone()), g.constant(be4.clone()));
            let stats = NormStats::Running {
                mean: &run_mean,
                var: &run_var,
                eps: eps_bn,
            };
            g.batch_norm2d(v, ga, be, stats)?.0
        }),
        case!("channel_mask", rand_tensor(&[2, 3, 2, 2], -1.0, 1.0, 14), |g, v| {
            g.channel_mask(v, m1.clone())?
        }),
        (
            "bce",
            rand_tensor(&[6], 0.05, 0.95, 15),
            Box::new(move |g: &mut Graph<T>, v: Var| g.bce(v, &t1)),
        ),
        (
            "bce_with_logits",
            rand_tensor(&[6], -4.0, 4.0, 16),
            Box::new(move |g: &mut Graph<T>, v: Var| g.bce_with_logits(v, &t2)),
        ),
    ]
}

pub fn tape_gradient<T: Element>(f: &dyn Fn(&mut Graph<T>, Var) -> Result<Var>, x: &Tensor<T>) -> Vec<f64> {
    let leaf = x.clone().with_requires_grad(true);
    let mut g = Graph::new();
    let v = g.leaf(&leaf);
    let out = f(&mut g, v).unwrap();
    let grads = g.backward(out).unwrap();
    grads.get(v).unwrap().iter().map(|v| v.as_f64()).collect()
}

/// Worst relative error of every op case at f64, differenced in f64.
pub fn op_errors_f64() -> Vec<(&'static str, f64)> {
    let eps = CheckOptions::f64().eps;
    op_cases::<f64>()
        .into_iter()
        .map(|(name, x, f)| (name, finite_diff_check(&*f, &x, eps).unwrap()))
        .collect()
}

/// The f32 tape gradient of every op case against central differences of
/// the same function evaluated in f64. Differencing in f32 itself is
/// dominated by roundoff, which measures the oracle rather than the
/// gradient.
pub fn op_errors_f32() -> Vec<(&'static str, f64)> {
    let eps = CheckOptions::f64().eps;
    op_cases::<f32>()
        .into_iter()
        .zip(op_cases::<f64>())
        .map(|((name, x32, f32_), (_, x64, f64_))| {
            assert_eq!(x32.cast::<f64>(), x64, "{name}: cases differ beyond precision");
            let analytic = tape_gradient(&*f32_, &x32);
            let coords: Vec<usize> = (0..x64.numel()).collect();
            let numeric = central_differences(
                |probe| {
                    let mut g = Graph::new();
                    let v = g.constant(probe.clone());
                    let out = f64_(&mut g, v)?;
                    Ok(g.value(out).item()?)
                },
                &x64,
                &coords,
                eps,
            )
            .unwrap();
            (name, max_relative_error(&analytic, &numeric, CheckOptions::f32().floor))
        })
        .collect()
}

/// Evaluates a model loss with a freshly seeded RNG so that dropout masks
/// are identical across evaluations.
pub struct EndToEnd<T> {
    pub gen: Model<T>,
    pub disc: Model<T>,
    pub real: Tensor<T>,
    pub z: Tensor<T>,
    pub fake: Tensor<T>,
}

pub const MASK_SEED: u64 = 4242;

impl<T: Element> EndToEnd<T> {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hyper = LayerHyper::default();
        let gen = build_generator::<T>(8, &hyper, &mut rng).unwrap();
        let disc = build_discriminator::<T>(8, &hyper, &mut rng).unwrap();
        let real = rand_tensor::<T>(&[4, 3, 32, 32], -1.0, 1.0, 90);
        let fake = rand_tensor::<T>(&[4, 3, 32, 32], -1.0, 1.0, 91);
        let z = sample_noise::<T>(4, 100, &mut rng).unwrap();
        Self {
            gen,
            disc,
            real,
            z,
            fake,
        }
    }

    pub fn d_loss(&mut self, batching: DiscBatching, want_grads: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(MASK_SEED);
        let mut g = Graph::new();
        let pass = discriminator_objective(&mut g, &mut self.disc, &self.real, &self.fake, batching, &mut rng).unwrap();
        if want_grads {
            let grads = g.backward(pass.loss).unwrap();
            self.disc.zero_grad();
            for b in &pass.bounds {
                self.disc.accumulate_grads(&grads, b).unwrap();
            }
        }
        g.value(pass.loss).item().unwrap().as_f64()
    }

    pub fn g_loss(&mut self, kind: GeneratorLoss, want_grads: bool) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(MASK_SEED);
        let mut g = Graph::new();
        let pass = generator_objective(&mut g, &mut self.gen, &mut self.disc, &self.z, kind, &mut rng).unwrap();
        if want_grads {
            let grads = g.backward(pass.loss).unwrap();
            self.gen.zero_grad();
            self.gen.accumulate_grads(&grads, &pass.bound).unwrap();
        }
        g.value(pass.loss).item().unwrap().as_f64()
    }
}

pub fn model_of<T>(e: &mut EndToEnd<T>, on_generator: bool) -> &mut Model<T> {
    if on_generator {
        &mut e.gen
    } else {
        &mut e.disc
    }
}

impl EndToEnd<f32> {
    pub fn to_f64(&self) -> EndToEnd<f64> {
        EndToEnd {
            gen: self.gen.cast(),
            disc: self.disc.cast(),
            real: self.real.cast(),
            z: self.z.cast(),
            fake: self.fake.cast(),
        }
    }
}

pub fn set_param<T: Element>(e: &mut EndToEnd<T>, on_generator: bool, k: usize, i: usize, v: T) {
    model_of(e, on_generator).parameters_mut().nth(k).unwrap().data_mut()[i] = v;
}

pub type LossFn<T> = dyn Fn(&mut EndToEnd<T>, bool) -> f64;

/// Tape gradient of every parameter tensor of the selected model.
pub fn tape_gradients<T: Element>(e: &mut EndToEnd<T>, on_generator: bool, loss: &LossFn<T>) -> Vec<(String, Vec<f64>)> {
    loss(e, true);
    model_of(e, on_generator)
        .parameters()
        .map(|(name, t)| {
            let g = t.grad().expect("every parameter receives a gradient");
            (name, g.iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

/// Compares `analytic` with central differences taken on `e` at the
/// `per_tensor` largest-gradient coordinates of every parameter tensor.
/// Returns the worst relative error, where it occurred and the number of
/// coordinates checked.
pub fn compare_with_differences<U: Element>(
    analytic: &[(String, Vec<f64>)],
    e: &mut EndToEnd<U>,
    on_generator: bool,
    loss: &LossFn<U>,
    opts: &CheckOptions,
    per_tensor: usize,
) -> (f64, String, usize) {
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (k, (name, grad)) in analytic.iter().enumerate() {
        for i in largest_coords(grad, Some(per_tensor)) {
            let orig = model_of(e, on_generator).parameters().nth(k).unwrap().1.data()[i];
            let up = orig + U::from_f64_lossy(opts.eps);
            let down = orig - U::from_f64_lossy(opts.eps);
            set_param(e, on_generator, k, i, up);
            let f_up = loss(e, false);
            set_param(e, on_generator, k, i, down);
            let f_down = loss(e, false);
            set_param(e, on_generator, k, i, orig);
            let numeric = (f_up - f_down) / (up - down).as_f64();
            let err = max_relative_error(&[grad[i]], &[numeric], opts.floor);
            checked += 1;
            if err > worst.0 {
                worst = (err, format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", grad[i]));
            }
        }
    }
    (worst.0, worst.1, checked)
}

pub fn expected_coords(analytic: &[(String, Vec<f64>)], per_tensor: usize) -> usize {
    analytic.iter().map(|(_, g)| g.len().min(per_tensor)).sum()
}

pub const PER_TENSOR: usize = 3;

/// One end-to-end comparison: which loss, the worst relative error and
/// where it occurred.
pub struct EndToEndResult {
    pub label: String,
    pub error: f64,
    pub at: String,
    pub coords: usize,
}

/// Scale-8 discriminator (both batchings) and generator (both objectives)
/// losses in f64, every parameter tensor.
pub fn end_to_end_f64() -> Vec<EndToEndResult> {
    let mut out = Vec::new();
    for batching in [DiscBatching::Split, DiscBatching::Combined] {
        let mut e2e = EndToEnd::<f64>::new();
        let loss = move |e: &mut EndToEnd<f64>, w| e.d_loss(batching, w);
        let analytic = tape_gradients(&mut e2e, false, &loss);
        assert_eq!(analytic.len(), e2e.disc.parameters().count());
        let (error, at, coords) =
            compare_with_differences(&analytic, &mut e2e, false, &loss, &CheckOptions::f64(), PER_TENSOR);
        assert_eq!(coords, expected_coords(&analytic, PER_TENSOR));
        out.push(EndToEndResult {
            label: format!("D {batching:?} f64"),
            error,
            at,
            coords,
        });
    }
    for kind in [GeneratorLoss::NonSaturating, GeneratorLoss::Saturating] {
        let mut e2e = EndToEnd::<f64>::new();
        let loss = move |e: &mut EndToEnd<f64>, w| e.g_loss(kind, w);
        let analytic = tape_gradients(&mut e2e, true, &loss);
        let (error, at, coords) =
            compare_with_differences(&analytic, &mut e2e, true, &loss, &CheckOptions::f64(), PER_TENSOR);
        assert_eq!(coords, expected_coords(&analytic, PER_TENSOR));
        out.push(EndToEndResult {
            label: format!("G {kind:?} f64"),
            error,
            at,
            coords,
        });
    }
    out
}

/// f32 tape gradients against differences of the identical model cast to
/// f64, for the same reason as [`op_errors_f32`].
pub fn end_to_end_f32() -> Vec<EndToEndResult> {
    let mut e32 = EndToEnd::<f32>::new();
    let mut e64 = e32.to_f64();
    // f64 step, f32 floor: the analytic side carries f32 roundoff
    let opts = CheckOptions {
        floor: CheckOptions::f32().floor,
        ..CheckOptions::f64()
    };
    let d32 = |e: &mut EndToEnd<f32>, w| e.d_loss(DiscBatching::Split, w);
    let d64 = |e: &mut EndToEnd<f64>, w| e.d_loss(DiscBatching::Split, w);
    let analytic = tape_gradients(&mut e32, false, &d32);
    let (error, at, coords) = compare_with_differences(&analytic, &mut e64, false, &d64, &opts, PER_TENSOR);
    let d = EndToEndResult {
        label: "D Split f32".into(),
        error,
        at,
        coords,
    };
    let g32 = |e: &mut EndToEnd<f32>, w| e.g_loss(GeneratorLoss::NonSaturating, w);
    let g64 = |e: &mut EndToEnd<f64>, w| e.g_loss(GeneratorLoss::NonSaturating, w);
    let analytic = tape_gradients(&mut e32, true, &g32);
    let (error, at, coords) = compare_with_differences(&analytic, &mut e64, true, &g64, &opts, PER_TENSOR);
    let g = EndToEndResult {
        label: "G NonSaturating f32".into(),
        error,
        at,
        coords,
    };
    vec![d, g]
}
