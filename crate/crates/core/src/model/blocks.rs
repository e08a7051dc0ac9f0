//! Convolution + batch-norm units and the two inverted-bottleneck block families.

use crate::rng::Rng;
use crate::tensor::{BatchNormMode, BatchStats, Graph, Tensor, Var};

use super::params::{he_init, zero_bias, Bindings, ParamKind, ParamStore};
use super::ModelError;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-3;

/// Running statistics of one batch-norm layer, used in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`, with unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats) {
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, m) in self.mean.iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.var.iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * correction;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state shared by all layers.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub vars: &'a Bindings,
    pub mode: Mode,
    pub running: &'a [BnRunning],
    /// Batch statistics gathered in training mode, keyed by running-stat index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, vars: &'a Bindings, mode: Mode, running: &'a [BnRunning]) -> Self {
        Self {
            g,
            vars,
            mode,
            running,
            batch_stats: Vec::new(),
        }
    }
}

/// Registers parameters and running statistics while layers are built.
pub struct LayerBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub running: &'a mut Vec<BnRunning>,
    pub rng: &'a mut Rng,
}

impl LayerBuilder<'_> {
    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        depthwise: bool,
        act: bool,
    ) -> ConvBn {
        let (shape, fan_in) = if depthwise {
            ([cout, 1, k, k], k * k)
        } else {
            ([cout, cin, k, k], cin * k * k)
        };
        let weight = self
            .store
            .push(format!("{name}.conv.weight"), ParamKind::Weight, he_init(&shape, fan_in, self.rng));
        let gamma = self
            .store
            .push(format!("{name}.bn.weight"), ParamKind::NormScale, Tensor::full(&[cout], 1.0));
        let beta = self
            .store
            .push(format!("{name}.bn.bias"), ParamKind::NormShift, Tensor::zeros(&[cout]));
        self.running.push(BnRunning::new(cout));
        ConvBn {
            weight,
            gamma,
            beta,
            bn: self.running.len() - 1,
            stride,
            depthwise,
            act,
            out_channels: cout,
        }
    }

    pub fn se(&mut self, name: &str, channels: usize, ratio: f64) -> Result<SeBlock, ModelError> {
        let hidden = se_hidden_channels(channels, ratio)?;
        let reduce_w = self.store.push(
            format!("{name}.se.reduce.weight"),
            ParamKind::Weight,
            he_init(&[channels, hidden], channels, self.rng),
        );
        let reduce_b = self
            .store
            .push(format!("{name}.se.reduce.bias"), ParamKind::Bias, zero_bias(hidden));
        let expand_w = self.store.push(
            format!("{name}.se.expand.weight"),
            ParamKind::Weight,
            he_init(&[hidden, channels], hidden, self.rng),
        );
        let expand_b = self
            .store
            .push(format!("{name}.se.expand.bias"), ParamKind::Bias, zero_bias(channels));
        Ok(SeBlock {
            reduce_w,
            reduce_b,
            expand_w,
            expand_b,
            hidden,
        })
    }
}

/// Convolution (no bias) → batch norm → optional SiLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub weight: usize,
    pub gamma: usize,
    pub beta: usize,
    pub bn: usize,
    pub stride: usize,
    pub depthwise: bool,
    pub act: bool,
    pub out_channels: usize,
}

impl ConvBn {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var, ModelError> {
        let w = ctx.vars.var(self.weight);
        let y = if self.depthwise {
            ctx.g.depthwise_conv2d(x, w, self.stride)?
        } else {
            ctx.g.conv2d(x, w, self.stride)?
        };
        let (gamma, beta) = (ctx.vars.var(self.gamma), ctx.vars.var(self.beta));
        let (y, stats) = match ctx.mode {
            Mode::Train => ctx.g.batchnorm(y, gamma, beta, BatchNormMode::Train, BN_EPS)?,
            Mode::Eval => {
                let r = &ctx.running[self.bn];
                ctx.g.batchnorm(
                    y,
                    gamma,
                    beta,
                    BatchNormMode::Eval {
                        running_mean: &r.mean,
                        running_var: &r.var,
                    },
                    BN_EPS,
                )?
            }
        };
        if let Some(s) = stats {
            ctx.batch_stats.push((self.bn, s));
        }
        Ok(if self.act { ctx.g.silu(y)? } else { y })
    }
}

/// Hidden width of the excitation bottleneck: `⌈ratio·C⌉`, at least 1.
pub fn se_hidden_channels(channels: usize, ratio: f64) -> Result<usize, ModelError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(ModelError::InvalidSeRatio(ratio));
    }
    Ok(((ratio * channels as f64).ceil() as usize).max(1))
}

/// Squeeze-and-excitation parameters (store indices).
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub reduce_w: usize,
    pub reduce_b: usize,
    pub expand_w: usize,
    pub expand_b: usize,
    pub hidden: usize,
}

/// Graph variables of an SE gate.
#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    /// `C × hidden`
    pub reduce_w: Var,
    pub reduce_b: Var,
    /// `hidden × C`
    pub expand_w: Var,
    pub expand_b: Var,
}

impl SeBlock {
    pub fn vars(&self, b: &Bindings) -> SeVars {
        SeVars {
            reduce_w: b.var(self.reduce_w),
            reduce_b: b.var(self.reduce_b),
            expand_w: b.var(self.expand_w),
            expand_b: b.var(self.expand_b),
        }
    }
}

/// Channel recalibration: global-average squeeze, SiLU bottleneck, sigmoid
/// gate, and per-channel rescaling of `x`.
pub fn se_block(g: &mut Graph, x: Var, p: &SeVars) -> Result<Var, ModelError> {
    let (n, c) = match g.shape(x) {
        &[n, c, _, _] => (n, c),
        s => {
            return Err(ModelError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: crate::tensor::OpKind::GlobalAvgPool,
                detail: format!("se_block expects N×C×H×W, got {s:?}"),
            }))
        }
    };
    let squeezed = g.global_avg_pool(x)?;
    let h = g.matmul(squeezed, p.reduce_w)?;
    let h = g.add(h, p.reduce_b)?;
    let h = g.silu(h)?;
    let e = g.matmul(h, p.expand_w)?;
    let e = g.add(e, p.expand_b)?;
    let gate = g.sigmoid(e)?;
    let gate = g.reshape(gate, &[n, c, 1, 1])?;
    Ok(g.mul(x, gate)?)
}

/// Fused inverted bottleneck: a 3×3 convolution does the expansion.
#[derive(Debug, Clone)]
pub struct FusedMbConv {
    pub expand: ConvBn,
    pub project: Option<ConvBn>,
    pub skip: bool,
}

impl FusedMbConv {
    pub fn build(
        b: &mut LayerBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        expansion: usize,
        stride: usize,
    ) -> Result<Self, ModelError> {
        let skip = stride == 1 && cin == cout;
        match expansion {
            1 => Ok(Self {
                expand: b.conv_bn(&format!("{name}.fused"), cin, cout, 3, stride, false, true),
                project: None,
                skip,
            }),
            4 => {
                let mid = cin * expansion;
                Ok(Self {
                    expand: b.conv_bn(&format!("{name}.expand"), cin, mid, 3, stride, false, true),
                    project: Some(b.conv_bn(&format!("{name}.project"), mid, cout, 1, 1, false, false)),
                    skip,
                })
            }
            e => Err(ModelError::InvalidExpansion {
                kind: "fused-mbconv",
                expansion: e,
            }),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var, ModelError> {
        let mut y = self.expand.forward(ctx, x)?;
        if let Some(p) = &self.project {
            y = p.forward(ctx, y)?;
        }
        Ok(if self.skip { ctx.g.add(x, y)? } else { y })
    }
}

/// Inverted bottleneck: 1×1 expand, 3×3 depthwise, optional SE, 1×1 project.
#[derive(Debug, Clone)]
pub struct MbConv {
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub se: Option<SeBlock>,
    pub project: ConvBn,
    pub skip: bool,
}

impl MbConv {
    pub fn build(
        b: &mut LayerBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        expansion: usize,
        stride: usize,
        se_ratio: f64,
    ) -> Result<Self, ModelError> {
        if !matches!(expansion, 4 | 6) {
            return Err(ModelError::InvalidExpansion {
                kind: "mbconv",
                expansion,
            });
        }
        let mid = cin * expansion;
        let expand = b.conv_bn(&format!("{name}.expand"), cin, mid, 1, 1, false, true);
        let depthwise = b.conv_bn(&format!("{name}.dw"), mid, mid, 3, stride, true, true);
        let se = if se_ratio > 0.0 {
            Some(b.se(name, mid, se_ratio)?)
        } else {
            None
        };
        let project = b.conv_bn(&format!("{name}.project"), mid, cout, 1, 1, false, false);
        Ok(Self {
            expand,
            depthwise,
            se,
            project,
            skip: stride == 1 && cin == cout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var, ModelError> {
        let y = self.expand.forward(ctx, x)?;
        let mut y = self.depthwise.forward(ctx, y)?;
        if let Some(se) = &self.se {
            let v = se.vars(ctx.vars);
            y = se_block(ctx.g, y, &v)?;
        }
        let y = self.project.forward(ctx, y)?;
        Ok(if self.skip { ctx.g.add(x, y)? } else { y })
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Fused(FusedMbConv),
    Mb(MbConv),
}

impl Block {
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var, ModelError> {
        match self {
            Block::Fused(b) => b.forward(ctx, x),
            Block::Mb(b) => b.forward(ctx, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use rand::Rng as _;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, Stream::Data, &[]);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn se_setup(c: usize, ratio: f64, fill: Option<(f64, f64)>, seed: u64) -> (Graph, Var, SeVars, Vec<Tensor>) {
        let hidden = se_hidden_channels(c, ratio).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&[2, c, 3, 3], seed));
        let ts = match fill {
            Some((w, b)) => vec![
                Tensor::full(&[c, hidden], w),
                Tensor::full(&[hidden], b),
                Tensor::full(&[hidden, c], w),
                Tensor::full(&[c], b),
            ],
            None => vec![
                random_tensor(&[c, hidden], seed + 1),
                random_tensor(&[hidden], seed + 2),
                random_tensor(&[hidden, c], seed + 3),
                random_tensor(&[c], seed + 4),
            ],
        };
        let v = SeVars {
            reduce_w: g.constant(ts[0].clone()),
            reduce_b: g.constant(ts[1].clone()),
            expand_w: g.constant(ts[2].clone()),
            expand_b: g.constant(ts[3].clone()),
        };
        (g, x, v, ts)
    }

    #[test]
    fn se_zero_weights_halve_input() {
        let (mut g, x, v, _) = se_setup(4, 0.25, Some((0.0, 0.0)), 1);
        let y = se_block(&mut g, x, &v).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn se_saturated_gate_passes_input() {
        let (mut g, x, v, _) = se_setup(4, 0.25, Some((0.0, 100.0)), 2);
        let y = se_block(&mut g, x, &v).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn se_matches_straight_line_oracle() {
        let c = 8;
        let (mut g, x, v, ts) = se_setup(c, 0.25, None, 5);
        let y = se_block(&mut g, x, &v).unwrap();
        let xs = g.value(x).data().to_vec();
        let hidden = 2;
        for n in 0..2 {
            let pooled: Vec<f64> = (0..c)
                .map(|ch| xs[(n * c + ch) * 9..(n * c + ch + 1) * 9].iter().sum::<f64>() / 9.0)
                .collect();
            let mut h = vec![0.0; hidden];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = ts[1].data()[j];
                for (ch, p) in pooled.iter().enumerate() {
                    s += p * ts[0].data()[ch * hidden + j];
                }
                *hj = s * sig(s);
            }
            for ch in 0..c {
                let mut e = ts[3].data()[ch];
                for (j, hj) in h.iter().enumerate() {
                    e += hj * ts[2].data()[j * c + ch];
                }
                let gate = sig(e);
                assert!(gate > 0.0 && gate < 1.0);
                for k in 0..9 {
                    let idx = (n * c + ch) * 9 + k;
                    assert!((g.value(y).data()[idx] - gate * xs[idx]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn se_ratio_validation() {
        assert!(se_hidden_channels(8, 0.0).is_err());
        assert!(se_hidden_channels(8, 1.5).is_err());
        assert_eq!(se_hidden_channels(6, 0.25).unwrap(), 2);
        assert_eq!(se_hidden_channels(2, 0.25).unwrap(), 1);
    }

    struct Harness {
        store: ParamStore,
        running: Vec<BnRunning>,
    }

    impl Harness {
        fn new() -> Self {
            Self {
                store: ParamStore::new(),
                running: Vec::new(),
            }
        }

        fn builder<'a>(&'a mut self, rng: &'a mut Rng) -> LayerBuilder<'a> {
            LayerBuilder {
                store: &mut self.store,
                running: &mut self.running,
                rng,
            }
        }

        fn zero_weights(&mut self) {
            for p in self.store.iter_mut() {
                if p.kind == ParamKind::Weight {
                    p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }

        fn run(&self, block: &Block, x: &Tensor, mode: Mode) -> Tensor {
            let mut g = Graph::new();
            let vars = self.store.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let mut ctx = Ctx::new(&mut g, &vars, mode, &self.running);
            let y = block.forward(&mut ctx, xv).unwrap();
            g.value(y).clone()
        }
    }

    #[test]
    fn zeroed_branches_are_identity() {
        let x = random_tensor(&[2, 8, 6, 6], 9);
        for mode in [Mode::Train, Mode::Eval] {
            for expansion in [1, 4] {
                let mut h = Harness::new();
                let mut rng = substream(0, Stream::Init, &[]);
                let b = Block::Fused(FusedMbConv::build(&mut h.builder(&mut rng), "f", 8, 8, expansion, 1).unwrap());
                h.zero_weights();
                assert_eq!(h.run(&b, &x, mode).data(), x.data());
            }
            for (expansion, ratio) in [(4, 0.25), (6, 0.0)] {
                let mut h = Harness::new();
                let mut rng = substream(0, Stream::Init, &[]);
                let b = Block::Mb(MbConv::build(&mut h.builder(&mut rng), "m", 8, 8, expansion, 1, ratio).unwrap());
                h.zero_weights();
                assert_eq!(h.run(&b, &x, mode).data(), x.data());
            }
        }
    }

    #[test]
    fn fused_stride_two_halves_spatial() {
        let mut h = Harness::new();
        let mut rng = substream(0, Stream::Init, &[]);
        let b = Block::Fused(FusedMbConv::build(&mut h.builder(&mut rng), "f", 3, 6, 4, 2).unwrap());
        let y = h.run(&b, &random_tensor(&[1, 3, 8, 8], 1), Mode::Train);
        assert_eq!(y.shape(), &[1, 6, 4, 4]);
    }

    #[test]
    fn fused_identity_kernel_matches_elementwise_oracle() {
        // One channel, centre-tap kernel, eval-mode norm with default running
        // stats: y = x + silu(x / sqrt(1 + eps)) because the skip path is active.
        let mut h = Harness::new();
        let mut rng = substream(0, Stream::Init, &[]);
        let fused = FusedMbConv::build(&mut h.builder(&mut rng), "f", 1, 1, 1, 1).unwrap();
        let w = h.store.tensor_mut(fused.expand.weight);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.data_mut()[4] = 1.0;
        let x = random_tensor(&[1, 1, 5, 5], 4);
        let y = h.run(&Block::Fused(fused), &x, Mode::Eval);
        let inv = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, &v) in y.data().iter().zip(x.data()) {
            let z = v * inv;
            assert!((a - (v + z * sig(z))).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_expansions_rejected() {
        let mut h = Harness::new();
        let mut rng = substream(0, Stream::Init, &[]);
        assert!(FusedMbConv::build(&mut h.builder(&mut rng), "f", 4, 4, 6, 1).is_err());
        assert!(MbConv::build(&mut h.builder(&mut rng), "m", 4, 4, 1, 1, 0.25).is_err());
    }

    #[test]
    fn se_ratio_zero_equals_block_without_gate() {
        // With ratio 0 no SE parameters exist and the graph goes straight from
        // depthwise to projection.
        let mut h = Harness::new();
        let mut rng = substream(0, Stream::Init, &[]);
        let mb = MbConv::build(&mut h.builder(&mut rng), "m", 4, 8, 4, 2, 0.0).unwrap();
        assert!(mb.se.is_none());
        let x = random_tensor(&[1, 4, 6, 6], 3);
        let y = h.run(&Block::Mb(mb.clone()), &x, Mode::Eval);
        let mut g = Graph::new();
        let vars = h.store.bind(&mut g, false);
        let xv = g.constant(x);
        let mut ctx = Ctx::new(&mut g, &vars, Mode::Eval, &h.running);
        let a = mb.expand.forward(&mut ctx, xv).unwrap();
        let a = mb.depthwise.forward(&mut ctx, a).unwrap();
        let a = mb.project.forward(&mut ctx, a).unwrap();
        assert_eq!(g.value(a).data(), y.data());
        assert_eq!(y.shape(), &[1, 8, 3, 3]);
    }
}
