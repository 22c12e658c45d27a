//! Tape gradients against central finite differences on random instances.
//! Each group returns the worst norm-wise relative error per op.

use bullettrain::autodiff::{ConvGeometry, Tape, Var};
use bullettrain::losses::{cross_entropy_var, jsd_var, trades_var};
use bullettrain::model::{Architecture, Classifier, LayerSpec};
use bullettrain::tensor::Tensor;
use bullettrain::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 100;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values away from the ReLU kink so differences stay on one side.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape, -1.0, 1.0).map(|x| if x.abs() < 0.05 { x + 0.1 } else { x })
}

/// Reduces any output to a scalar with fixed random weights so every
/// Jacobian entry contributes.
fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    if out.shape().iter().product::<usize>() == 1 && out.shape().len() <= 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &out.shape(), -1.0, 1.0));
    Ok(out.mul(w)?.sum())
}

fn value(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars).unwrap();
    project(&tape, out, seed).unwrap().value().data()[0]
}

/// Norm-wise relative error between tape and numeric gradients over all inputs.
fn relative_error(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars).unwrap();
    let root = project(&tape, out, seed).unwrap();
    let grads = tape.backward(root).unwrap();
    let mut analytic = Vec::new();
    for v in &vars {
        analytic.extend_from_slice(grads.wrt(*v).unwrap().data());
    }
    let mut numeric = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            numeric.push((value(&plus, build, seed) - value(&minus, build, seed)) / (2.0 * H));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

pub type Report = Vec<(String, f64)>;

fn check(report: &mut Report, name: &str, gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build) {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let inputs = gen(&mut rng);
        worst = worst.max(relative_error(&inputs, build, 1000 + i));
    }
    report.push((name.to_string(), worst));
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(2..6))
}

pub fn elementwise_ops() -> Report {
    let mut r = Report::new();
    let pair = |rng: &mut ChaCha8Rng| {
        let (m, k) = dims(rng);
        vec![random(rng, &[m, k], -2.0, 2.0), random(rng, &[m, k], -2.0, 2.0)]
    };
    check(&mut r, "add", pair, &|_, v| v[0].add(v[1]));
    check(&mut r, "sub", pair, &|_, v| v[0].sub(v[1]));
    check(&mut r, "mul", pair, &|_, v| v[0].mul(v[1]));
    check(&mut r, "mul self", pair, &|_, v| v[0].mul(v[0]));
    check(&mut r, "scale", pair, &|_, v| Ok(v[0].scale(-1.7)));
    check(
        &mut r,
        "relu",
        |rng| {
            let (m, k) = dims(rng);
            vec![off_kink(rng, &[m, k])]
        },
        &|_, v| Ok(v[0].relu()),
    );
    check(
        &mut r,
        "log_floor",
        |rng| {
            let (m, k) = dims(rng);
            vec![random(rng, &[m, k], 0.1, 2.0)]
        },
        &|_, v| Ok(v[0].log_floor(1e-12)),
    );
    r
}

pub fn linear_ops() -> Report {
    let mut r = Report::new();
    check(
        &mut r,
        "matmul",
        |rng| {
            let (m, k) = dims(rng);
            let n = rng.random_range(1..5);
            vec![random(rng, &[m, k], -1.0, 1.0), random(rng, &[k, n], -1.0, 1.0)]
        },
        &|_, v| v[0].matmul(v[1]),
    );
    check(
        &mut r,
        "add_row",
        |rng| {
            let (m, k) = dims(rng);
            vec![random(rng, &[m, k], -1.0, 1.0), random(rng, &[k], -1.0, 1.0)]
        },
        &|_, v| v[0].add_row(v[1]),
    );
    r
}

pub fn softmax_family() -> Report {
    let mut r = Report::new();
    let logits = |rng: &mut ChaCha8Rng| {
        let (m, k) = dims(rng);
        vec![random(rng, &[m, k], -3.0, 3.0)]
    };
    check(&mut r, "softmax", logits, &|_, v| Ok(v[0].softmax()));
    check(&mut r, "log_softmax", logits, &|_, v| Ok(v[0].log_softmax()));
    r
}

pub fn reductions_and_indexing() -> Report {
    let mut r = Report::new();
    let one = |rng: &mut ChaCha8Rng| {
        let (m, k) = dims(rng);
        vec![random(rng, &[m, k], -2.0, 2.0)]
    };
    check(&mut r, "sum", one, &|_, v| Ok(v[0].sum()));
    check(&mut r, "mean", one, &|_, v| Ok(v[0].mean()));
    check(&mut r, "row_sum", one, &|_, v| Ok(v[0].row_sum()));
    check(&mut r, "reshape", one, &|_, v| {
        let n = v[0].shape().iter().product();
        v[0].reshape(vec![n])
    });
    check(&mut r, "pick", one, &|_, v| {
        let [m, k] = v[0].shape()[..] else { unreachable!() };
        let idx: Vec<usize> = (0..m).map(|i| (i * 7 + 3) % k).collect();
        v[0].pick(&idx)
    });
    check(&mut r, "gather_rows", one, &|_, v| {
        let m = v[0].shape()[0];
        let rows: Vec<usize> = (0..m + 2).map(|i| (i * 5 + 1) % m).collect();
        v[0].gather_rows(&rows)
    });
    check(&mut r, "assemble_rows", one, &|tape, v| {
        let m = v[0].shape()[0];
        let a = v[0].scale(2.0);
        let b = v[0].relu();
        let perm: Vec<usize> = (0..m).rev().collect();
        let left = a.gather_rows(&perm[..m / 2].iter().map(|&r| m - 1 - r).collect::<Vec<_>>())?;
        let right = b.gather_rows(&perm[m / 2..].iter().map(|&r| m - 1 - r).collect::<Vec<_>>())?;
        tape.assemble_rows(&[(left, perm[..m / 2].to_vec()), (right, perm[m / 2..].to_vec())], m)
    });
    r
}

pub fn conv2d() -> Report {
    let mut worst = 0.0f64;
    let geom_for = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvGeometry {
            channels: rng.random_range(1..3),
            height: rng.random_range(3..6),
            width: rng.random_range(3..6),
            filters: rng.random_range(1..4),
            kernel: rng.random_range(1..4),
            stride: rng.random_range(1..3),
            padding: rng.random_range(0..2),
        }
    };
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(50_000 + i);
        let mut g = geom_for(i);
        g.kernel = g.kernel.min(g.height + 2 * g.padding).min(g.width + 2 * g.padding);
        let m = rng.random_range(1..3);
        let inputs = vec![
            random(&mut rng, &[m, g.input_len()], -1.0, 1.0),
            random(&mut rng, &[g.filters, g.patch_len()], -1.0, 1.0),
            random(&mut rng, &[g.filters], -1.0, 1.0),
        ];
        let build: &Build = &move |_, v| v[0].conv2d(v[1], v[2], g);
        worst = worst.max(relative_error(&inputs, build, i));
    }
    vec![("conv2d".into(), worst)]
}

/// Gradient of a full forward pass with respect to every parameter and the
/// input. Parameters are drawn fresh, biases included: zero biases put dead
/// rows exactly on the ReLU kink.
fn check_model(name: &str, arch: Architecture, batch: usize) -> Report {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let model = Classifier::<f64>::zeros(arch.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(70_000 + i);
        let mut inputs = vec![random(&mut rng, &[batch, model.input_dim()], -1.0, 1.0)];
        for p in model.parameters() {
            inputs.push(random(&mut rng, p.shape(), -1.0, 1.0));
        }
        let a = arch.clone();
        let build: &Build = &move |_, v| {
            let m = Classifier::<f64>::zeros(a.clone())?;
            m.forward_on_tape(v[0], &v[1..])
        };
        worst = worst.max(relative_error(&inputs, build, i));
    }
    vec![(name.into(), worst)]
}

pub fn mlp_forward() -> Report {
    check_model("mlp forward", Architecture::mlp(&[3, 5, 4, 3]), 3)
}

pub fn conv_forward() -> Report {
    let arch = Architecture {
        input: vec![1, 5, 5],
        layers: vec![
            LayerSpec::Conv {
                filters: 2,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Relu,
            LayerSpec::Dense { units: 3 },
        ],
    };
    check_model("convnet forward", arch, 2)
}

fn labels_for(m: usize, k: usize) -> Vec<usize> {
    (0..m).map(|i| (i * 3 + 1) % k).collect()
}

pub fn losses() -> Report {
    let mut r = Report::new();
    let two = |rng: &mut ChaCha8Rng| {
        let (m, k) = dims(rng);
        vec![random(rng, &[m, k], -3.0, 3.0), random(rng, &[m, k], -3.0, 3.0)]
    };
    let three = |rng: &mut ChaCha8Rng| {
        let (m, k) = dims(rng);
        (0..3).map(|_| random(rng, &[m, k], -3.0, 3.0)).collect()
    };
    check(&mut r, "cross entropy", two, &|_, v| {
        let [m, k] = v[0].shape()[..] else { unreachable!() };
        cross_entropy_var(v[0], &labels_for(m, k))
    });
    check(&mut r, "trades", two, &|_, v| {
        let [m, k] = v[0].shape()[..] else { unreachable!() };
        trades_var(v[0], v[1], &labels_for(m, k), 6.0)
    });
    check(&mut r, "jsd", three, &|_, v| jsd_var(v[0], v[1], v[2]));
    r
}

pub fn all() -> Report {
    [
        elementwise_ops(),
        linear_ops(),
        softmax_family(),
        reductions_and_indexing(),
        conv2d(),
        mlp_forward(),
        conv_forward(),
        losses(),
    ]
    .concat()
}
