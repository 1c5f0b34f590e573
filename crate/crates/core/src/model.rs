//! The full network: fusion blocks of a convolutional stream and an SPT
//! stream, followed by a distribution head over the age bins.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agedist::NUM_BINS;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm3d, Conv3d, Linear};
use crate::params::{Ctx, Init, Mode, ParamStore};
use crate::spt::{Spt, SptConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoCnn,
    NoTransformer,
}

impl Ablation {
    pub fn has_cnn(self) -> bool {
        self != Ablation::NoCnn
    }

    pub fn has_transformer(self) -> bool {
        self != Ablation::NoTransformer
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCnn => "no_cnn",
            Ablation::NoTransformer => "no_transformer",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_cnn" => Ok(Ablation::NoCnn),
            "no_transformer" => Ok(Ablation::NoTransformer),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?}, expected full, no_cnn or no_transformer"
            ))),
        }
    }
}

/// One fusion block: a two-stage CNN and an SPT whose outputs are
/// concatenated along channels, local first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub llb_channels: [usize; 2],
    /// Patch edge of each SPT part.
    pub patches: [usize; 3],
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub spt_channels: usize,
}

impl FusionConfig {
    pub fn spt_config(
        &self,
        input_channels: usize,
        ffn_ratio: usize,
        pos_embed: bool,
    ) -> SptConfig {
        let mut cfg = SptConfig::uniform(
            input_channels,
            self.patches,
            self.embed_dim,
            self.depth,
            self.heads,
            self.spt_channels,
            ffn_ratio,
        );
        for part in &mut cfg.parts {
            part.pos_embed = pos_embed;
        }
        cfg
    }

    fn out_channels(&self, ablation: Ablation) -> usize {
        let local = if ablation.has_cnn() {
            self.llb_channels[1]
        } else {
            0
        };
        let global = if ablation.has_transformer() {
            self.spt_channels
        } else {
            0
        };
        local + global
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input extents `[D, H, W]`; the channel count is always 1.
    pub input_shape: [usize; 3],
    pub blocks: Vec<FusionConfig>,
    pub label_bins: usize,
    pub ablation: Ablation,
    /// Conv -> ReLU -> BN when true, Conv -> BN -> ReLU otherwise.
    pub relu_before_bn: bool,
    pub ffn_ratio: usize,
    pub pos_embed: bool,
}

impl ModelConfig {
    fn two_blocks(input_shape: [usize; 3]) -> Self {
        ModelConfig {
            input_shape,
            blocks: vec![
                FusionConfig {
                    llb_channels: [16, 32],
                    patches: [8, 8, 4],
                    embed_dim: 32,
                    depth: 2,
                    heads: 4,
                    spt_channels: 8,
                },
                FusionConfig {
                    llb_channels: [64, 128],
                    patches: [2, 2, 1],
                    embed_dim: 64,
                    depth: 2,
                    heads: 4,
                    spt_channels: 32,
                },
            ],
            label_bins: NUM_BINS,
            ablation: Ablation::Full,
            relu_before_bn: true,
            ffn_ratio: 4,
            pos_embed: true,
        }
    }

    /// 96 x 112 x 96 input.
    pub fn full_scale() -> Self {
        Self::two_blocks([96, 112, 96])
    }

    /// 32 x 48 x 32 input.
    pub fn desk() -> Self {
        Self::two_blocks([32, 48, 32])
    }

    /// Single small block on an 8^3 input, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input_shape: [8, 8, 8],
            blocks: vec![FusionConfig {
                llb_channels: [2, 3],
                patches: [2, 2, 2],
                embed_dim: 8,
                depth: 1,
                heads: 2,
                spt_channels: 2,
            }],
            label_bins: NUM_BINS,
            ablation: Ablation::Full,
            relu_before_bn: true,
            ffn_ratio: 2,
            pos_embed: true,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Checks every divisibility constraint and returns the `[C, D, H, W]`
    /// output of each fusion block.
    pub fn validate(&self) -> Result<Vec<[usize; 4]>> {
        if self.blocks.is_empty() {
            return Err(Error::Config(
                "at least one fusion block is required".into(),
            ));
        }
        if self.label_bins != NUM_BINS {
            return Err(Error::Config(format!(
                "label_bins must be {NUM_BINS} for ages 14..=97, got {}",
                self.label_bins
            )));
        }
        let factor = 4usize.pow(self.blocks.len() as u32);
        if let Some(&e) = self
            .input_shape
            .iter()
            .find(|&&e| e == 0 || e % factor != 0)
        {
            return Err(Error::Config(format!(
                "input extent {e} is not divisible by {factor} (each of the {} fusion blocks pools by 4)",
                self.blocks.len()
            )));
        }
        let mut dims = self.input_shape;
        let mut channels = 1;
        let mut chain = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if dims.iter().any(|&e| e == 0 || e % 4 != 0) {
                return Err(Error::Config(format!(
                    "fusion block {i}: input extents {dims:?} are not all divisible by 4"
                )));
            }
            if block.llb_channels.contains(&0) || block.spt_channels == 0 {
                return Err(Error::Config(format!(
                    "fusion block {i}: channel counts must be positive"
                )));
            }
            if self.ablation.has_transformer() {
                let spt = block.spt_config(channels, self.ffn_ratio, self.pos_embed);
                spt.output_dims(dims)
                    .map_err(|e| Error::Config(format!("fusion block {i}: {e}")))?;
                if block.heads == 0 || block.embed_dim % block.heads != 0 {
                    return Err(Error::Config(format!(
                        "fusion block {i}: embed dim {} is not divisible by {} heads",
                        block.embed_dim, block.heads
                    )));
                }
            }
            dims = dims.map(|e| e / 4);
            channels = block.out_channels(self.ablation);
            chain.push([channels, dims[0], dims[1], dims[2]]);
        }
        Ok(chain)
    }

    pub fn head_channels(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.out_channels(self.ablation))
            .unwrap_or(0)
    }
}

/// Conv -> ReLU -> BN -> MaxPool (or Conv -> BN -> ReLU -> MaxPool).
#[derive(Clone, Debug)]
pub struct CnnBlock {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
    pub relu_before_bn: bool,
}

impl CnnBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        relu_before_bn: bool,
    ) -> Self {
        CnnBlock {
            conv: Conv3d::new(
                store,
                init,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
            ),
            bn: BatchNorm3d::new(store, &format!("{name}.bn"), out_channels),
            relu_before_bn,
        }
    }

    pub fn num_params(in_channels: usize, out_channels: usize) -> usize {
        Conv3d::num_params(in_channels, out_channels) + BatchNorm3d::num_params(out_channels)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let h = if self.relu_before_bn {
            let h = ctx.tape.relu(h)?;
            self.bn.forward(ctx, h)?
        } else {
            let h = self.bn.forward(ctx, h)?;
            ctx.tape.relu(h)?
        };
        ctx.tape.maxpool3d(h)
    }
}

/// Two CNN blocks.
#[derive(Clone, Debug)]
pub struct LocalBlock {
    pub stages: [CnnBlock; 2],
}

impl LocalBlock {
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.stages[0].forward(ctx, x)?;
        self.stages[1].forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub local: Option<LocalBlock>,
    pub global: Option<Spt>,
}

impl FusionBlock {
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let local = self.local.as_ref().map(|l| l.forward(ctx, x)).transpose()?;
        let global = self
            .global
            .as_ref()
            .map(|g| g.forward(ctx, x))
            .transpose()?;
        match (local, global) {
            (Some(l), Some(g)) => aggregate(ctx.tape, l, g),
            (Some(l), None) => Ok(l),
            (None, Some(g)) => Ok(g),
            (None, None) => Err(Error::Config("fusion block has no stream".into())),
        }
    }
}

/// Channel concatenation, local first.
pub fn aggregate<T: Element>(tape: &mut Tape<T>, local: Var, global: Var) -> Result<Var> {
    let (ls, gs) = (tape.shape(local), tape.shape(global));
    if ls.len() != 5 || gs.len() != 5 || ls[0] != gs[0] || ls[2..] != gs[2..] {
        return Err(Error::dim(format!(
            "aggregate: local {ls:?} and global {gs:?} disagree on batch or spatial extents"
        )));
    }
    tape.concat(&[local, global], 1)
}

/// GAP -> FC -> softmax.
#[derive(Clone, Debug)]
pub struct Head {
    pub fc: Linear,
}

impl Head {
    pub fn logits<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(x)?;
        self.fc.forward(ctx, pooled)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let logits = self.logits(ctx, x)?;
        ctx.tape.softmax(logits)
    }
}

/// Network structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gldn {
    pub config: ModelConfig,
    pub blocks: Vec<FusionBlock>,
    pub head: Head,
}

impl Gldn {
    /// Builds the network and its seeded initial parameters.
    pub fn build<T: Element>(config: &ModelConfig, seed: u64) -> Result<(Gldn, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        let mut dims = config.input_shape;
        let mut channels = 1;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, bc) in config.blocks.iter().enumerate() {
            let name = format!("block{i}");
            let local = config.ablation.has_cnn().then(|| {
                let [c1, c2] = bc.llb_channels;
                LocalBlock {
                    stages: [
                        CnnBlock::new(
                            &mut store,
                            &mut init,
                            &format!("{name}.llb0"),
                            channels,
                            c1,
                            config.relu_before_bn,
                        ),
                        CnnBlock::new(
                            &mut store,
                            &mut init,
                            &format!("{name}.llb1"),
                            c1,
                            c2,
                            config.relu_before_bn,
                        ),
                    ],
                }
            });
            let global = if config.ablation.has_transformer() {
                let spt = bc.spt_config(channels, config.ffn_ratio, config.pos_embed);
                Some(Spt::new(
                    &mut store,
                    &mut init,
                    &format!("{name}.spt"),
                    &spt,
                    dims,
                )?)
            } else {
                None
            };
            blocks.push(FusionBlock { local, global });
            dims = dims.map(|e| e / 4);
            channels = bc.out_channels(config.ablation);
        }
        let head = Head {
            fc: Linear::new(
                &mut store,
                &mut init,
                "head.fc",
                channels,
                config.label_bins,
                true,
            ),
        };
        Ok((
            Gldn {
                config: config.clone(),
                blocks,
                head,
            },
            store,
        ))
    }

    /// Closed-form parameter count for `config`.
    pub fn num_params(config: &ModelConfig) -> Result<usize> {
        config.validate()?;
        let mut dims = config.input_shape;
        let mut channels = 1;
        let mut total = 0;
        for bc in &config.blocks {
            if config.ablation.has_cnn() {
                let [c1, c2] = bc.llb_channels;
                total += CnnBlock::num_params(channels, c1) + CnnBlock::num_params(c1, c2);
            }
            if config.ablation.has_transformer() {
                let spt = bc.spt_config(channels, config.ffn_ratio, config.pos_embed);
                total += Spt::num_params(&spt, dims)?;
            }
            dims = dims.map(|e| e / 4);
            channels = bc.out_channels(config.ablation);
        }
        Ok(total + Linear::num_params(channels, config.label_bins, true))
    }

    /// Output of every fusion block, `[B, C, D, H, W] -> [B, C', D/4, H/4, W/4]`.
    pub fn features<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let shape = ctx.tape.shape(x);
        let [d, h, w] = self.config.input_shape;
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [d, h, w] {
            return Err(Error::dim(format!(
                "model expects [B, 1, {d}, {h}, {w}], got {shape:?}"
            )));
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
            out.push(h);
        }
        Ok(out)
    }

    /// `[B, 1, D, H, W] -> [B, label_bins]` probabilities.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let feats = self.features(ctx, x)?;
        let last = *feats.last().expect("at least one block");
        self.head.forward(ctx, last)
    }

    /// Eval-mode probabilities for a batch, outside any training tape.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &bound, store, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let out = self.forward(&mut ctx, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn conv_params(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| b.local.as_ref())
            .flat_map(|l| l.stages.iter())
            .map(|s| Conv3d::num_params(s.conv.in_channels, s.conv.out_channels))
            .sum()
    }

    pub fn attention_params(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| b.global.as_ref())
            .flat_map(|g| g.parts.iter())
            .flat_map(|p| p.layers.iter())
            .map(|l| crate::layers::MultiHeadAttention::num_params(l.attn.dim))
            .sum()
    }
}

/// Named intermediate shapes of a configuration, input first.
pub fn shape_chain(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let blocks = config.validate()?;
    let [d, h, w] = config.input_shape;
    let mut chain = vec![("input".to_string(), vec![1, d, h, w])];
    for (i, s) in blocks.iter().enumerate() {
        chain.push((format!("fusion-{}", i + 1), s.to_vec()));
    }
    chain.push(("pooled".into(), vec![config.head_channels()]));
    chain.push(("distribution".into(), vec![config.label_bins]));
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;

    fn forward_shape(config: &ModelConfig, batch: usize) -> Vec<Vec<usize>> {
        let (net, store) = Gldn::build::<f32>(config, 1).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &bound, &store, Mode::Train);
        let [d, h, w] = config.input_shape;
        let x = ctx
            .tape
            .constant(Tensor::from_fn(&[batch, 1, d, h, w], |i| {
                ((i * 7919) % 13) as f32 / 13.0
            }));
        let feats = net.features(&mut ctx, x).unwrap();
        let mut shapes: Vec<Vec<usize>> =
            feats.iter().map(|&f| ctx.tape.shape(f).to_vec()).collect();
        let out = net.head.forward(&mut ctx, *feats.last().unwrap()).unwrap();
        shapes.push(ctx.tape.shape(out).to_vec());
        shapes
    }

    #[test]
    fn desk_shape_chain() {
        let shapes = forward_shape(&ModelConfig::desk(), 2);
        assert_eq!(shapes[0], [2, 40, 8, 12, 8]);
        assert_eq!(shapes[1], [2, 160, 2, 3, 2]);
        assert_eq!(shapes[2], [2, 84]);
    }

    #[test]
    fn ablations_change_channels() {
        let no_cnn = ModelConfig::desk().with_ablation(Ablation::NoCnn);
        assert_eq!(
            no_cnn.validate().unwrap(),
            vec![[8, 8, 12, 8], [32, 2, 3, 2]]
        );
        let no_tr = ModelConfig::desk().with_ablation(Ablation::NoTransformer);
        assert_eq!(
            no_tr.validate().unwrap(),
            vec![[32, 8, 12, 8], [128, 2, 3, 2]]
        );
        let (net, _) = Gldn::build::<f32>(&no_cnn, 0).unwrap();
        assert_eq!(net.conv_params(), 0);
        let (net, _) = Gldn::build::<f32>(&no_tr, 0).unwrap();
        assert_eq!(net.attention_params(), 0);
    }

    #[test]
    fn build_rejects_indivisible_input() {
        let mut cfg = ModelConfig::desk();
        cfg.input_shape = [30, 48, 32];
        assert!(matches!(Gldn::build::<f32>(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = ModelConfig::desk();
        cfg.blocks[0].patches = [8, 8, 8];
        let err = Gldn::build::<f32>(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("part 2"), "{err}");
    }

    #[test]
    fn parameter_count_matches_store() {
        for cfg in [
            ModelConfig::desk(),
            ModelConfig::tiny(),
            ModelConfig::desk().with_ablation(Ablation::NoCnn),
        ] {
            let (_, store) = Gldn::build::<f32>(&cfg, 3).unwrap();
            assert_eq!(store.num_params(), Gldn::num_params(&cfg).unwrap());
        }
    }

    #[test]
    fn ablation_parses() {
        assert_eq!("no_cnn".parse::<Ablation>().unwrap(), Ablation::NoCnn);
        assert!("cnn".parse::<Ablation>().is_err());
    }
}
