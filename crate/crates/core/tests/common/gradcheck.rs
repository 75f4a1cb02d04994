//! Central finite-difference gradient checks for every layer kind.

use hdl_core::tensor::{Element, Graph, LayerSpec, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PERTURBATION: f64 = 1e-3;

pub const LAYER_KINDS: [&str; 8] = [
    "conv2d",
    "batchnorm2d",
    "relu",
    "maxpool2x2",
    "flatten",
    "linear",
    "softmax",
    "logsoftmax",
];

/// A differentiable function of several input tensors, rebuilt on a fresh
/// graph for every evaluation.
pub struct Case<T: Element> {
    pub inputs: Vec<Tensor<T>>,
    pub build: Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>,
}

fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(lo..hi)))
}

/// Values whose magnitude stays away from zero so ReLU never sits on its
/// kink within one perturbation.
fn away_from_zero<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        T::lit(if rng.random_bool(0.5) { v } else { -v })
    })
}

/// Distinct values on a 0.02 grid, shuffled, so every pooling window has a
/// unique maximum by a margin far above the perturbation.
fn distinct<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.02 - n as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals.into_iter().map(T::lit).collect()).unwrap()
}

/// Random instance of one layer kind; shapes vary with the seed.
pub fn layer_case<T: Element>(kind: &str, seed: u64) -> Case<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3usize);
    let c = rng.random_range(1..=3usize);
    let h = rng.random_range(3..=6usize);
    let w = rng.random_range(3..=6usize);
    match kind {
        "conv2d" => {
            let out = rng.random_range(1..=3usize);
            let k = rng.random_range(1..=3usize).min(h).min(w);
            let stride = rng.random_range(1..=2usize);
            let padding = rng.random_range(0..=1usize);
            Case {
                inputs: vec![
                    uniform(&mut rng, &[n, c, h, w], -1.0, 1.0),
                    uniform(&mut rng, &[out, c, k, k], -1.0, 1.0),
                    uniform(&mut rng, &[out], -1.0, 1.0),
                ],
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, padding)),
            }
        }
        "batchnorm2d" => {
            let n = n.max(2);
            Case {
                inputs: vec![
                    uniform(&mut rng, &[n, c, h, w], -2.0, 2.0),
                    uniform(&mut rng, &[c], 0.5, 1.5),
                    uniform(&mut rng, &[c], -0.5, 0.5),
                ],
                build: Box::new(|g, v| g.batch_norm(v[0], v[1], v[2], 1e-5, None).map(|r| r.0)),
            }
        }
        "relu" => Case {
            inputs: vec![away_from_zero(&mut rng, &[n, c, h, w])],
            build: Box::new(|g, v| g.relu(v[0])),
        },
        "maxpool2x2" => Case {
            inputs: vec![distinct(&mut rng, &[n, c, h, w])],
            build: Box::new(|g, v| g.maxpool2x2(v[0])),
        },
        "flatten" => Case {
            inputs: vec![uniform(&mut rng, &[n, c, h, w], -1.0, 1.0)],
            build: Box::new(|g, v| g.flatten(v[0])),
        },
        "linear" => {
            let (fin, fout) = (rng.random_range(1..=8usize), rng.random_range(1..=6usize));
            Case {
                inputs: vec![
                    uniform(&mut rng, &[n, fin], -1.0, 1.0),
                    uniform(&mut rng, &[fout, fin], -1.0, 1.0),
                    uniform(&mut rng, &[fout], -1.0, 1.0),
                ],
                build: Box::new(|g, v| g.linear(v[0], v[1], v[2])),
            }
        }
        "softmax" => Case {
            inputs: vec![uniform(&mut rng, &[n, c + 2], -2.0, 2.0)],
            build: Box::new(|g, v| g.softmax(v[0])),
        },
        "logsoftmax" => Case {
            inputs: vec![uniform(&mut rng, &[n, c + 2], -2.0, 2.0)],
            build: Box::new(|g, v| g.log_softmax(v[0])),
        },
        other => panic!("unknown layer kind {other}"),
    }
}

/// The graph helpers the two training losses are assembled from.
pub fn loss_case<T: Element>(kind: &str, seed: u64) -> Case<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        "nll_loss" => {
            let (n, c) = (rng.random_range(1..=4usize), rng.random_range(2..=6usize));
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            Case {
                inputs: vec![uniform(&mut rng, &[n, c], -2.0, 2.0)],
                build: Box::new(move |g, v| {
                    let lp = g.log_softmax(v[0])?;
                    g.nll_loss(lp, &targets)
                }),
            }
        }
        "prototype_distance" => {
            let (classes, shots, q, d) = (3, 2, 4, rng.random_range(2..=5usize));
            let groups: Vec<Vec<usize>> = (0..classes).map(|k| (k * shots..(k + 1) * shots).collect()).collect();
            Case {
                inputs: vec![
                    uniform(&mut rng, &[classes * shots, d], -1.0, 1.0),
                    uniform(&mut rng, &[q, d], -1.0, 1.0),
                ],
                build: Box::new(move |g, v| {
                    let protos = g.group_means(v[0], &groups)?;
                    let dist = g.sq_dist(v[1], protos)?;
                    g.scale(dist, T::lit(-0.5))
                }),
            }
        }
        "td_loss" => {
            let (n, f, k, c) = (rng.random_range(1..=4usize), 5, 3, 10);
            let cols: Vec<Vec<usize>> = (0..n).map(|_| vec![rng.random_range(0..8), 8 + rng.random_range(0..2)]).collect();
            let target: Vec<T> = (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
            let rows: Vec<usize> = (0..n).rev().collect();
            Case {
                inputs: vec![
                    uniform(&mut rng, &[n, f], -1.0, 1.0),
                    uniform(&mut rng, &[n, k], 0.0, 1.0),
                    uniform(&mut rng, &[c, f + k], -0.5, 0.5),
                    uniform(&mut rng, &[c], -0.5, 0.5),
                ],
                build: Box::new(move |g, v| {
                    let joined = g.concat_cols(v[0], v[1])?;
                    let q = g.linear(joined, v[2], v[3])?;
                    let picked = g.select_rows(q, &rows)?;
                    let q = g.gather_sum(picked, &cols)?;
                    g.mse_loss(q, &target)
                }),
            }
        }
        other => panic!("unknown loss kind {other}"),
    }
}

pub const LOSS_KINDS: [&str; 3] = ["nll_loss", "prototype_distance", "td_loss"];

/// Worst norm-wise relative error `||analytic - fd|| / (||fd|| + 1e-8)` over
/// the inputs of `case`, for the scalar `sum(r * f(inputs))` with fixed
/// random weights `r`.
pub fn relative_error<T: Element>(case: &Case<T>, seed: u64) -> f64 {
    let weights: std::cell::RefCell<Option<Tensor<T>>> = Default::default();
    let eval = |inputs: &[Tensor<T>], grads: bool| -> (f64, Vec<Tensor<T>>) {
        let mut g = Graph::<T>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let y = (case.build)(&mut g, &vars).expect("forward");
        let shape = g.value(y).shape().to_vec();
        let r = weights
            .borrow_mut()
            .get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                uniform(&mut rng, &shape, -1.0, 1.0)
            })
            .clone();
        let rv = g.constant(r);
        let prod = g.mul(y, rv).expect("mul");
        let loss = g.sum(prod).expect("sum");
        let value = g.value(loss).data()[0].as_f64();
        if !grads {
            return (value, vec![]);
        }
        g.backward(loss).expect("backward");
        let gs = vars.iter().map(|&v| g.grad(v).expect("gradient")).collect();
        (value, gs)
    };
    let (_, analytic) = eval(&case.inputs, true);
    let mut worst = 0.0f64;
    for (slot, grad) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        for i in 0..case.inputs[slot].numel() {
            let mut plus = case.inputs.clone();
            plus[slot].data_mut()[i] += T::lit(PERTURBATION);
            let mut minus = case.inputs.clone();
            minus[slot].data_mut()[i] -= T::lit(PERTURBATION);
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * PERTURBATION);
            let a = grad.data()[i].as_f64();
            diff2 += (a - fd).powi(2);
            fd2 += fd * fd;
        }
        worst = worst.max(diff2.sqrt() / (fd2.sqrt() + 1e-8));
    }
    worst
}

/// Runs `instances` random cases of `kind` and returns the worst error.
pub fn worst_error<T: Element>(kind: &str, instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let case = if LAYER_KINDS.contains(&kind) {
                layer_case::<T>(kind, seed)
            } else {
                loss_case::<T>(kind, seed)
            };
            relative_error(&case, seed)
        })
        .fold(0.0, f64::max)
}

/// Keeps the layer list honest: every spec variant has a checked kind.
pub fn covers_every_layer_spec() -> bool {
    let all = [
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        },
        LayerSpec::batch_norm(1),
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Linear {
            in_features: 1,
            out_features: 1,
        },
        LayerSpec::Softmax,
        LayerSpec::LogSoftmax,
    ];
    all.iter().all(|s| LAYER_KINDS.contains(&s.kind()))
}
