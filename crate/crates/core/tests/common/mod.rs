#![allow(dead_code)]

use chexopt::model::{cross_entropy, Mode, ModelError, Network, NetworkProfile};
use chexopt::rng::{substream, Stream};
use chexopt::tensor::BatchNormMode;
use chexopt::{Graph, Tensor, TensorError, Var};
use rand::Rng as _;
use std::sync::Arc;

pub type Program = Box<dyn Fn(&mut Graph, Var) -> Result<Var, TensorError> + Sync>;

/// One gradient-check case: a scalar program and the point to check it at.
pub struct GradCase {
    pub name: &'static str,
    pub input: Tensor,
    pub program: Program,
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = substream(seed, Stream::Data, &[]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var, TensorError> {
    let r = g.constant(random(&g.shape(out).to_vec(), seed ^ 0x5eed));
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn case(name: &'static str, input: Tensor, program: impl Fn(&mut Graph, Var) -> Result<Var, TensorError> + Sync + 'static) -> GradCase {
    GradCase {
        name,
        input,
        program: Box::new(program),
    }
}

/// Every differentiable op, alone and composed, plus the desk network loss.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = vec![
        case("add-broadcast-row", random(&[3, 4], 1), |g, x| {
            let b = g.constant(random(&[4], 2));
            let y = g.add(x, b)?;
            project(g, y, 1)
        }),
        case("mul-self", random(&[2, 5], 3), |g, x| {
            let y = g.mul(x, x)?;
            project(g, y, 3)
        }),
        case("mul-constant", random(&[6], 4), |g, x| {
            let c = g.constant(random(&[6], 5));
            let y = g.mul(c, x)?;
            project(g, y, 4)
        }),
        case("matmul-left", random(&[3, 4], 6), |g, x| {
            let w = g.constant(random(&[4, 5], 7));
            let y = g.matmul(x, w)?;
            project(g, y, 6)
        }),
        case("matmul-right", random(&[4, 5], 8), |g, x| {
            let a = g.constant(random(&[3, 4], 9));
            let y = g.matmul(a, x)?;
            project(g, y, 8)
        }),
        case("silu", random(&[2, 3, 4], 10), |g, x| {
            let y = g.silu(x)?;
            project(g, y, 10)
        }),
        case("sigmoid", random(&[7], 11), |g, x| {
            let y = g.sigmoid(x)?;
            project(g, y, 11)
        }),
        case("conv3x3-input", random(&[2, 3, 6, 6], 12), |g, x| {
            let w = g.constant(random(&[4, 3, 3, 3], 13));
            let y = g.conv2d(x, w, 1)?;
            project(g, y, 12)
        }),
        case("conv3x3-stride2-input", random(&[1, 2, 7, 7], 14), |g, x| {
            let w = g.constant(random(&[3, 2, 3, 3], 15));
            let y = g.conv2d(x, w, 2)?;
            project(g, y, 14)
        }),
        case("conv3x3-weight", random(&[4, 3, 3, 3], 16), |g, w| {
            let x = g.constant(random(&[2, 3, 5, 5], 17));
            let y = g.conv2d(x, w, 1)?;
            project(g, y, 16)
        }),
        case("conv1x1-input", random(&[2, 4, 5, 5], 18), |g, x| {
            let w = g.constant(random(&[3, 4, 1, 1], 19));
            let y = g.conv2d(x, w, 1)?;
            project(g, y, 18)
        }),
        case("conv1x1-stride2-weight", random(&[3, 4, 1, 1], 20), |g, w| {
            let x = g.constant(random(&[1, 4, 6, 6], 21));
            let y = g.conv2d(x, w, 2)?;
            project(g, y, 20)
        }),
        case("depthwise-input", random(&[2, 3, 6, 6], 22), |g, x| {
            let w = g.constant(random(&[3, 1, 3, 3], 23));
            let y = g.depthwise_conv2d(x, w, 1)?;
            project(g, y, 22)
        }),
        case("depthwise-stride2-input", random(&[1, 4, 7, 7], 24), |g, x| {
            let w = g.constant(random(&[4, 1, 3, 3], 25));
            let y = g.depthwise_conv2d(x, w, 2)?;
            project(g, y, 24)
        }),
        case("depthwise-weight", random(&[3, 1, 3, 3], 26), |g, w| {
            let x = g.constant(random(&[2, 3, 5, 5], 27));
            let y = g.depthwise_conv2d(x, w, 1)?;
            project(g, y, 26)
        }),
        case("batchnorm-train-input", random(&[3, 2, 3, 3], 28), |g, x| {
            let gamma = g.constant(random(&[2], 29));
            let beta = g.constant(random(&[2], 30));
            let (y, _) = g.batchnorm(x, gamma, beta, BatchNormMode::Train, 1e-3)?;
            project(g, y, 28)
        }),
        case("batchnorm-train-scale", random(&[3], 31), |g, gamma| {
            let x = g.constant(random(&[4, 3, 2, 2], 32));
            let beta = g.constant(random(&[3], 33));
            let (y, _) = g.batchnorm(x, gamma, beta, BatchNormMode::Train, 1e-3)?;
            project(g, y, 31)
        }),
        case("batchnorm-eval-input", random(&[2, 3, 2, 2], 34), |g, x| {
            let gamma = g.constant(random(&[3], 35));
            let beta = g.constant(random(&[3], 36));
            let mode = BatchNormMode::Eval {
                running_mean: &[0.1, -0.2, 0.3],
                running_var: &[0.5, 1.5, 2.0],
            };
            let (y, _) = g.batchnorm(x, gamma, beta, mode, 1e-3)?;
            project(g, y, 34)
        }),
        case("global-avg-pool", random(&[2, 3, 4, 4], 37), |g, x| {
            let y = g.global_avg_pool(x)?;
            project(g, y, 37)
        }),
        case("reshape-mean", random(&[2, 6], 38), |g, x| {
            let y = g.reshape(x, &[3, 4])?;
            let y = g.mul(y, y)?;
            g.mean(y)
        }),
        case("scale", random(&[5], 39), |g, x| {
            let y = g.scale(x, -2.5)?;
            project(g, y, 39)
        }),
        case("log-softmax", random(&[3, 5], 40), |g, x| {
            let y = g.log_softmax(x)?;
            project(g, y, 40)
        }),
        case("cross-entropy", random(&[4, 5], 41), |g, x| {
            cross_entropy(g, x, &[0, 3, 4, 1]).map_err(model_err)
        }),
        case("composed-conv-bn-silu-pool", random(&[2, 2, 5, 5], 42), |g, x| {
            let w = g.constant(random(&[3, 2, 3, 3], 43));
            let y = g.conv2d(x, w, 2)?;
            let gamma = g.constant(Tensor::full(&[3], 1.0));
            let beta = g.constant(Tensor::zeros(&[3]));
            let (y, _) = g.batchnorm(y, gamma, beta, BatchNormMode::Train, 1e-3)?;
            let y = g.silu(y)?;
            let y = g.global_avg_pool(y)?;
            project(g, y, 42)
        }),
    ];
    cases.extend(desk_cases());
    cases
}

/// End-to-end cross-entropy of the desk network: w.r.t. two parameter
/// tensors and, through a fixed random projection, along 16 input directions.
fn desk_cases() -> Vec<GradCase> {
    const DIRS: usize = 16;
    let labels = [0usize, 3];
    let base = random(&[2, 3, 64, 64], 50).scale_for_test();
    let net = Arc::new(Network::build(&NetworkProfile::desk(), 7).unwrap());
    let param_index = |name: &str| net.params().iter().position(|p| p.name == name).unwrap();

    let mut out = Vec::new();
    for (name, mode) in [("desk-loss-input-directions", Mode::Train), ("desk-loss-input-directions-eval", Mode::Eval)] {
        let n = net.clone();
        let base = base.clone();
        let dirs = random(&[DIRS, base.len()], 51);
        out.push(case(name, Tensor::zeros(&[1, DIRS]), move |g, coef| {
            let d = g.constant(dirs.clone());
            let delta = g.matmul(coef, d)?;
            let delta = g.reshape(delta, base.shape())?;
            let b = g.constant(base.clone());
            let x = g.add(b, delta)?;
            let vars = n.bind(g, false);
            let o = n.forward(g, x, &vars, mode).map_err(model_err)?;
            cross_entropy(g, o.logits, &labels).map_err(model_err)
        }));
    }
    for name in ["stem.conv.weight", "head.weight"] {
        let idx = param_index(name);
        let n = net.clone();
        let base = base.clone();
        out.push(case(
            if idx == 0 { "desk-loss-stem-weight" } else { "desk-loss-head-weight" },
            net.params().tensor(idx).clone(),
            move |g, w| {
                let mut vars = n.bind(g, false);
                vars.set(idx, w);
                let x = g.constant(base.clone());
                let o = n.forward(g, x, &vars, Mode::Train).map_err(model_err)?;
                cross_entropy(g, o.logits, &labels).map_err(model_err)
            },
        ));
    }
    out
}

trait ScaleForTest {
    fn scale_for_test(self) -> Self;
}

impl ScaleForTest for Tensor {
    /// Inputs in `[0, 1]`, like normalized pixels.
    fn scale_for_test(self) -> Self {
        let shape = self.shape().to_vec();
        Tensor::new(&shape, self.into_data().into_iter().map(|v| 0.5 + 0.5 * v).collect()).unwrap()
    }
}
