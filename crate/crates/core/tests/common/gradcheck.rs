//! Finite-difference oracles for the tape primitives, the composed model and
//! the meta-gradient.

use metatta_core::data::{Stream, SupportSet};
use metatta_core::meta::{inner_loop, meta_gradient, outer_loss};
use metatta_core::model::{ConvNet, ConvNetSpec, Group, ParamBundle};
use metatta_core::tensor::{Conv2dOpts, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fixtures::micro_setup;
use super::{central_diff, rel_err, uniform};

type Build = fn(&mut Tape<f64>, &[Var]) -> Var;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    build: Build,
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", shapes: vec![vec![3, 4], vec![4, 2]], build: |t, v| t.matmul(v[0], v[1]).unwrap() },
        Case {
            name: "linear",
            shapes: vec![vec![3, 4], vec![5, 4], vec![5]],
            build: |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap(),
        },
        Case {
            name: "conv2d same",
            shapes: vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
            build: |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dOpts { stride: 1, padding: 1 }).unwrap(),
        },
        Case {
            name: "conv2d strided",
            shapes: vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3]],
            build: |t, v| t.conv2d(v[0], v[1], None, Conv2dOpts { stride: 2, padding: 0 }).unwrap(),
        },
        Case { name: "relu", shapes: vec![vec![2, 6]], build: |t, v| t.relu(v[0]).unwrap() },
        Case { name: "max_pool2d", shapes: vec![vec![1, 2, 4, 5]], build: |t, v| t.max_pool2d(v[0], 2).unwrap() },
        Case {
            name: "group_norm",
            shapes: vec![vec![2, 4, 3, 3], vec![4], vec![4]],
            build: |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap(),
        },
        Case { name: "softmax", shapes: vec![vec![3, 4]], build: |t, v| t.softmax(v[0]).unwrap() },
        Case { name: "log_softmax", shapes: vec![vec![3, 4]], build: |t, v| t.log_softmax(v[0]).unwrap() },
        Case { name: "cross_entropy", shapes: vec![vec![3, 4]], build: |t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap() },
        Case { name: "softmax_entropy", shapes: vec![vec![3, 4]], build: |t, v| t.softmax_entropy(v[0]).unwrap() },
        Case { name: "add", shapes: vec![vec![2, 3], vec![2, 3]], build: |t, v| t.add(v[0], v[1]).unwrap() },
        Case { name: "sub", shapes: vec![vec![2, 3], vec![2, 3]], build: |t, v| t.sub(v[0], v[1]).unwrap() },
        Case { name: "mul", shapes: vec![vec![2, 3], vec![2, 3]], build: |t, v| t.mul(v[0], v[1]).unwrap() },
        Case { name: "scale", shapes: vec![vec![4]], build: |t, v| t.scale(v[0], -1.7).unwrap() },
        Case { name: "exp", shapes: vec![vec![4]], build: |t, v| t.exp(v[0]).unwrap() },
        Case { name: "sum", shapes: vec![vec![2, 2]], build: |t, v| t.sum(v[0]).unwrap() },
        Case { name: "mean", shapes: vec![vec![5]], build: |t, v| t.mean(v[0]).unwrap() },
        Case { name: "flatten", shapes: vec![vec![2, 2, 3]], build: |t, v| t.flatten(v[0]).unwrap() },
    ]
}

/// Scalar objective `Σ r ⊙ op(inputs)` and its analytic gradient w.r.t. all inputs.
fn objective(case: &Case, inputs: &[Vec<f64>], weights: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = case
        .shapes
        .iter()
        .zip(inputs)
        .map(|(s, d)| tape.leaf(&Tensor::from_f64(s.clone(), d).unwrap().with_requires_grad(true)).unwrap())
        .collect();
    let out = (case.build)(&mut tape, &vars);
    let n = tape.value(out).len();
    let r = tape.constant(&Tensor::from_f64(tape.shape(out).to_vec(), &weights[..n]).unwrap()).unwrap();
    let prod = tape.mul(out, r).unwrap();
    let loss = tape.sum(prod).unwrap();
    let value = tape.item(loss);
    if !with_grad {
        return (value, vec![]);
    }
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .flat_map(|(v, d)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();
    (value, g)
}

pub fn check_primitives(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut worst = Vec::new();
    for case in cases() {
        let mut max_err: f64 = 0.0;
        for seed in 0..seeds {
            let inputs: Vec<Vec<f64>> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| uniform(seed * 31 + i as u64, s.iter().product(), -1.0, 1.0))
                .collect();
            let weights = uniform(seed + 1000, 256, -1.0, 1.0);
            let (_, analytic) = objective(&case, &inputs, &weights, true);
            let sizes: Vec<usize> = inputs.iter().map(Vec::len).collect();
            let flat: Vec<f64> = inputs.concat();
            let f = |x: &[f64]| {
                let mut split = Vec::new();
                let mut off = 0;
                for &n in &sizes {
                    split.push(x[off..off + n].to_vec());
                    off += n;
                }
                objective(&case, &split, &weights, false).0
            };
            let numeric = central_diff(f, &flat, 1e-5);
            max_err = max_err.max(rel_err(&analytic, &numeric));
        }
        worst.push((case.name, max_err));
    }
    worst
}

pub fn tiny_spec() -> ConvNetSpec {
    ConvNetSpec {
        in_channels: 2,
        image_size: 8,
        width: 2,
        kernel: 3,
        hidden: 3,
        num_classes: 3,
        gn_groups: 2,
        gn_eps: 1e-5,
    }
}

/// Supervised + rotation loss of the whole network as a function of all parameters.
pub fn model_loss<S: Scalar>(net: &ConvNet, p: &ParamBundle<S>, x: &Tensor<S>, labels: &[usize], grad: bool) -> (f64, Vec<f64>) {
    let mut tape = Tape::<S>::new();
    let groups: &[Group] = if grad { &Group::ALL } else { &[] };
    let b = p.bind(&mut tape, groups).unwrap();
    let l1 = net.sup_loss(&mut tape, &b, x, labels).unwrap();
    let l2 = net.ssl_loss(&mut tape, &b, x).unwrap();
    let l = tape.add(l1, l2).unwrap();
    let value = tape.item(l).to_f64();
    if !grad {
        return (value, vec![]);
    }
    let grads = tape.backward(l).unwrap();
    let g = p.collect_grads(&b, &grads, &Group::ALL).unwrap();
    (value, g.iter().map(|v| v.to_f64()).collect())
}

pub fn check_model<S: Scalar>(seeds: u64, h: f64) -> f64 {
    let net = ConvNet::new(tiny_spec()).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let p: ParamBundle<S> = net.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let x = Tensor::<S>::from_f64(vec![2, 2, 8, 8], &uniform(seed + 7, 256, 0.0, 1.0)).unwrap();
        let labels = [seed as usize % 3, (seed as usize + 1) % 3];
        let (_, analytic) = model_loss(&net, &p, &x, &labels, true);
        let theta: Vec<f64> = p.flatten(&Group::ALL).iter().map(|v| v.to_f64()).collect();
        // The oracle evaluates in f64 at the working-precision point.
        let p64: ParamBundle<f64> = p.cast();
        let x64: Tensor<f64> = x.cast();
        let f = |t: &[f64]| {
            let mut q = p64.clone();
            q.unflatten(&Group::ALL, t).unwrap();
            model_loss(&net, &q, &x64, &labels, false).0
        };
        let numeric = central_diff(f, &theta, h);
        let e = rel_err(&analytic, &numeric);
        worst = worst.max(e);
    }
    worst
}

/// End-to-end objective `θ_0 ↦ 𝓛_out(inner_loop(θ_0))`.
fn pipeline(net: &ConvNet, p: &ParamBundle<f64>, inner: &Stream, sup: &SupportSet, alpha: f64, t: &[f64]) -> f64 {
    let mut q = p.clone();
    q.unflatten(&Group::ALL, t).unwrap();
    let (ql, _) = inner_loop(net, &q, inner, alpha).unwrap();
    outer_loss(net, &ql, sup).unwrap()
}

/// Exact meta-gradient against central differences of the pipeline with two
/// inner steps. Returns the worst relative error and the number of seeds on
/// which the first-order gradient is off by more than 1e-2.
pub fn check_meta_gradient(seeds: u64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut separated = 0;
    for s in 0..seeds {
        let (net, mut p, inner, sup) = micro_setup(10 + s, 2, 1, 1);
        assert!(p.num_params() <= 100);
        assert_eq!(inner.len(), 2);
        // zero biases put ReLU inputs exactly on the kink; move off it
        let jitter: Vec<f64> = p.flatten(&Group::ALL).iter().zip(uniform(s, p.num_params(), -0.1, 0.1)).map(|(a, b)| a + b).collect();
        p.unflatten(&Group::ALL, &jitter).unwrap();
        let alpha = 0.5;
        let (pl, traj) = inner_loop(&net, &p, &inner, alpha).unwrap();
        let (_, exact) = meta_gradient(&net, &p, &pl, &traj, &sup, false).unwrap();
        let (_, first) = meta_gradient(&net, &p, &pl, &traj, &sup, true).unwrap();
        let theta = p.flatten(&Group::ALL);
        let numeric = central_diff(|t| pipeline(&net, &p, &inner, &sup, alpha, t), &theta, 1e-5);
        worst = worst.max(rel_err(&exact, &numeric));
        if rel_err(&first, &numeric) > 1e-2 {
            separated += 1;
        }
    }
    (worst, separated)
}

/// Whether exact and first-order meta-gradients agree bitwise at α = 0.
pub fn zero_alpha_modes_agree(s: u64) -> bool {
    let (net, p, inner, sup) = micro_setup(s, 2, 1, 1);
    let (pl, traj) = inner_loop(&net, &p, &inner, 0.0).unwrap();
    let (_, exact) = meta_gradient(&net, &p, &pl, &traj, &sup, false).unwrap();
    let (_, first) = meta_gradient(&net, &p, &pl, &traj, &sup, true).unwrap();
    exact.iter().zip(&first).all(|(a, b)| a.to_bits() == b.to_bits())
}
