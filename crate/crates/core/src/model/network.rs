use crate::rng::{substream, Stream};
use crate::tensor::{BatchStats, Graph, Var};

use super::blocks::{Block, BnRunning, ConvBn, Ctx, FusedMbConv, LayerBuilder, MbConv, Mode};
use super::params::{he_init, zero_bias, Bindings, ParamKind, ParamStore};
use super::profile::{BlockKind, NetworkProfile};
use super::ModelError;

/// Single fully connected layer from the pooled feature vector to class logits.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// `feature_dim × num_classes`
    pub weight: usize,
    /// `num_classes`
    pub bias: usize,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Block>,
}

/// Result of one forward pass.
pub struct NetworkOutput {
    /// `N × feature_dim`
    pub features: Var,
    /// `N × num_classes`
    pub logits: Var,
    /// Output shape after each stage (stem, blocks..., aggregation before pooling).
    pub stage_shapes: Vec<Vec<usize>>,
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone)]
pub struct Network {
    profile: NetworkProfile,
    params: ParamStore,
    running: Vec<BnRunning>,
    stem: ConvBn,
    stages: Vec<Stage>,
    top: ConvBn,
    head: ClassifierHead,
}

impl Network {
    /// Builds and He-initializes a network; identical seeds give identical parameters.
    pub fn build(profile: &NetworkProfile, seed: u64) -> Result<Self, ModelError> {
        profile.validate()?;
        profile.spatial_trace(profile.input_size)?;
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut rng = substream(seed, Stream::Init, &[]);
        let mut b = LayerBuilder {
            store: &mut params,
            running: &mut running,
            rng: &mut rng,
        };

        let stem_spec = &profile.stages[0];
        let stem = b.conv_bn("stem", 3, stem_spec.out_channels, 3, stem_spec.stride, false, true);
        let mut cin = stem_spec.out_channels;
        let last = profile.stages.len() - 1;
        let mut stages = Vec::new();
        for (si, spec) in profile.stages.iter().enumerate().take(last).skip(1) {
            let mut blocks = Vec::with_capacity(spec.layers);
            for li in 0..spec.layers {
                let name = format!("stage{si}.{li}");
                let stride = spec.layer_stride(li);
                let block = match spec.block_kind {
                    BlockKind::FusedMbconv => {
                        Block::Fused(FusedMbConv::build(&mut b, &name, cin, spec.out_channels, spec.expansion, stride)?)
                    }
                    BlockKind::Mbconv => Block::Mb(MbConv::build(
                        &mut b,
                        &name,
                        cin,
                        spec.out_channels,
                        spec.expansion,
                        stride,
                        spec.se_ratio,
                    )?),
                    other => unreachable!("validated profile has {other:?} only at the ends"),
                };
                blocks.push(block);
                cin = spec.out_channels;
            }
            stages.push(Stage { blocks });
        }
        let top_spec = &profile.stages[last];
        let top = b.conv_bn("top", cin, top_spec.out_channels, 1, top_spec.stride, false, true);
        let weight = b.store.push(
            "head.weight",
            ParamKind::Weight,
            he_init(&[profile.feature_dim, profile.num_classes], profile.feature_dim, b.rng),
        );
        let bias = b.store.push("head.bias", ParamKind::Bias, zero_bias(profile.num_classes));

        Ok(Self {
            profile: profile.clone(),
            params,
            running,
            stem,
            stages,
            top,
            head: ClassifierHead { weight, bias },
        })
    }

    pub fn profile(&self) -> &NetworkProfile {
        &self.profile
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn running_stats(&self) -> &[BnRunning] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [BnRunning] {
        &mut self.running
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bindings {
        self.params.bind(g, trainable)
    }

    /// Forward pass of an `N×3×S×S` input through the bound parameters.
    ///
    /// In [`Mode::Train`] batch norm uses batch statistics, which are returned
    /// rather than applied; see [`Network::commit_batch_stats`].
    pub fn forward(&self, g: &mut Graph, input: Var, vars: &Bindings, mode: Mode) -> Result<NetworkOutput, ModelError> {
        match g.shape(input) {
            &[_, 3, h, w] if h >= 1 && w >= 1 => {}
            s => {
                return Err(ModelError::InputShape(format!("expected N×3×H×W input, got {s:?}")));
            }
        }
        let mut ctx = Ctx::new(g, vars, mode, &self.running);
        let mut shapes = Vec::with_capacity(self.profile.stages.len());
        let mut x = self.stem.forward(&mut ctx, input)?;
        shapes.push(ctx.g.shape(x).to_vec());
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(&mut ctx, x)?;
            }
            shapes.push(ctx.g.shape(x).to_vec());
        }
        let x = self.top.forward(&mut ctx, x)?;
        shapes.push(ctx.g.shape(x).to_vec());
        let features = ctx.g.global_avg_pool(x)?;
        let logits = ctx.g.matmul(features, vars.var(self.head.weight))?;
        let logits = ctx.g.add(logits, vars.var(self.head.bias))?;
        Ok(NetworkOutput {
            features,
            logits,
            stage_shapes: shapes,
            batch_stats: ctx.batch_stats,
        })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn commit_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (idx, s) in stats {
            self.running[*idx].update(s);
        }
    }
}
