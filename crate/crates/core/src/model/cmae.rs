//! Siamese online/target video transformer with pixel and optional feature decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{run_blocks, Block, LayerNorm, Linear, Mlp};
use super::params::{Ctx, ParamId, ParamStore};
use super::tokens::{sinusoidal_positions, MaskPlan, TubeGeometry};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub tube: usize,
    pub patch: usize,
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub d_proj: usize,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub feature_decoder_depth: usize,
    pub use_feature_decoder: bool,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 1,
            height: 32,
            width: 32,
            tube: 2,
            patch: 8,
            d_model: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            d_proj: 64,
            decoder_width: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            feature_decoder_depth: 1,
            use_feature_decoder: false,
            num_classes: 4,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn geometry(&self) -> TubeGeometry {
        TubeGeometry {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
            tube: self.tube,
            patch: self.patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry().validate()?;
        let positive = [
            self.d_model,
            self.depth,
            self.heads,
            self.mlp_ratio,
            self.d_proj,
            self.decoder_width,
            self.decoder_heads,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidConfig("model widths, depth and heads must be positive".into()));
        }
        if self.d_model % self.heads != 0 || self.decoder_width % self.decoder_heads != 0 {
            return Err(Error::InvalidConfig("widths must be divisible by head counts".into()));
        }
        if self.d_model < 6 {
            return Err(Error::InvalidConfig("d_model must be at least 6 for 3-D positions".into()));
        }
        Ok(())
    }
}

pub const ONLINE: &str = "online.";
pub const TARGET: &str = "target.";
pub const MASK_TOKEN: &str = "mask_token";
pub const PIXEL_DECODER: &str = "pixel_decoder.";
pub const FEATURE_DECODER: &str = "feature_decoder.";
pub const ONLINE_PROJ: &str = "online_proj.";
pub const PREDICTOR: &str = "predictor.";
pub const TARGET_PROJ: &str = "target_proj.";
pub const CLASSIFIER: &str = "classifier.";

/// Tube embedding, transformer blocks and final norm.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d_in = cfg.geometry().token_dim();
        Self {
            embed: Linear::new(store, &format!("{prefix}embed"), d_in, cfg.d_model, rng),
            blocks: (0..cfg.depth)
                .map(|i| Block::new(store, &format!("{prefix}blocks.{i}"), cfg.d_model, cfg.heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{prefix}norm"), cfg.d_model),
        }
    }

    /// `tokens: [B·n, D_in]`, `pos: [B·n, D]` → `[B·n, D]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, tokens: Var, pos: Var, batch: usize) -> Result<Var> {
        let x = self.embed.forward(ctx, tokens)?;
        let x = ctx.tape.add(x, pos)?;
        let x = run_blocks(&self.blocks, ctx, x, batch)?;
        self.norm.forward(ctx, x)
    }
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

/// Online encoder `F_s`, momentum encoder `F_t`, decoders and heads.
#[derive(Debug, Clone)]
pub struct CmaeModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub online: Encoder,
    pub target: Encoder,
    pub mask_token: ParamId,
    pub pixel_decoder: PixelDecoder,
    pub feature_decoder: Option<Vec<Block>>,
    pub online_proj: Mlp,
    pub predictor: Mlp,
    pub target_proj: Mlp,
    pub classifier: Linear,
    positions: Tensor<T>,
}

fn stack_rows<T: Scalar>(parts: impl Iterator<Item = Tensor<T>>) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = parts.collect();
    let width = parts.first().map(|p| p.shape()[1]).unwrap_or(1);
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let mut data = Vec::with_capacity(rows * width);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(vec![rows, width], data)?)
}

impl<T: Scalar> CmaeModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let geo = cfg.geometry();
        let d = cfg.d_model;

        let online = Encoder::new(&mut store, ONLINE, &cfg, &mut rng);
        let mask_token = store.add(MASK_TOKEN, Tensor::normal(vec![d], 0.02, &mut rng));
        let pixel_decoder = PixelDecoder {
            embed: Linear::new(&mut store, &format!("{PIXEL_DECODER}embed"), d, cfg.decoder_width, &mut rng),
            blocks: (0..cfg.decoder_depth)
                .map(|i| {
                    Block::new(
                        &mut store,
                        &format!("{PIXEL_DECODER}blocks.{i}"),
                        cfg.decoder_width,
                        cfg.decoder_heads,
                        cfg.mlp_ratio,
                        &mut rng,
                    )
                })
                .collect(),
            norm: LayerNorm::new(&mut store, &format!("{PIXEL_DECODER}norm"), cfg.decoder_width),
            head: Linear::new(&mut store, &format!("{PIXEL_DECODER}head"), cfg.decoder_width, geo.token_dim(), &mut rng),
        };
        let feature_decoder = cfg.use_feature_decoder.then(|| {
            (0..cfg.feature_decoder_depth)
                .map(|i| Block::new(&mut store, &format!("{FEATURE_DECODER}blocks.{i}"), d, cfg.heads, cfg.mlp_ratio, &mut rng))
                .collect()
        });
        let hidden = 2 * cfg.d_proj;
        let online_proj = Mlp::new(&mut store, ONLINE_PROJ.trim_end_matches('.'), d, hidden, cfg.d_proj, &mut rng);
        let predictor = Mlp::new(&mut store, PREDICTOR.trim_end_matches('.'), cfg.d_proj, hidden, cfg.d_proj, &mut rng);
        let classifier = Linear::new(&mut store, CLASSIFIER.trim_end_matches('.'), d, cfg.num_classes, &mut rng);

        // Target branch starts as an exact copy of the online branch.
        let target = Encoder::new(&mut store, TARGET, &cfg, &mut rng);
        let target_proj = Mlp::new(&mut store, TARGET_PROJ.trim_end_matches('.'), d, hidden, cfg.d_proj, &mut rng);
        let mut model = Self {
            positions: sinusoidal_positions(geo.grid(), d),
            cfg,
            params: store,
            online,
            target,
            mask_token,
            pixel_decoder,
            feature_decoder,
            online_proj,
            predictor,
            target_proj,
            classifier,
        };
        for (src, dst) in model.ema_pairs() {
            let value = model.params.get(src).clone();
            model.params.set(dst, value)?;
        }
        Ok(model)
    }

    pub fn num_tokens(&self) -> usize {
        self.cfg.geometry().num_tokens()
    }

    pub fn token_dim(&self) -> usize {
        self.cfg.geometry().token_dim()
    }

    /// Fixed positional embeddings, one row per raster position.
    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    /// `(online, target)` parameter pairs kept in sync by EMA.
    pub fn ema_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.params
            .iter()
            .filter_map(|(id, name, _)| {
                let twin = if let Some(rest) = name.strip_prefix(ONLINE) {
                    format!("{TARGET}{rest}")
                } else if let Some(rest) = name.strip_prefix(ONLINE_PROJ) {
                    format!("{TARGET_PROJ}{rest}")
                } else {
                    return None;
                };
                self.params.id(&twin).map(|t| (id, t))
            })
            .collect()
    }

    /// Parameters updated by gradient during pretraining.
    pub fn pretrain_trainable(&self) -> Vec<ParamId> {
        self.params
            .select(&[ONLINE, MASK_TOKEN, PIXEL_DECODER, FEATURE_DECODER, ONLINE_PROJ, PREDICTOR])
    }

    /// Momentum-branch parameters (never gradient-updated).
    pub fn target_params(&self) -> Vec<ParamId> {
        self.params.select(&[TARGET, TARGET_PROJ])
    }

    /// Parameters trained during finetuning; only the classifier for a linear probe.
    pub fn finetune_trainable(&self, linear_probe: bool) -> Vec<ParamId> {
        if linear_probe {
            self.params.select(&[CLASSIFIER])
        } else {
            self.params.select(&[ONLINE, CLASSIFIER])
        }
    }

    fn check_plans(&self, tokens: &[Tensor<T>], plans: &[MaskPlan]) -> Result<(usize, usize)> {
        let n = self.num_tokens();
        if tokens.is_empty() || tokens.len() != plans.len() {
            return Err(Error::InvalidConfig(format!(
                "{} token sequences but {} mask plans",
                tokens.len(),
                plans.len()
            )));
        }
        let n_vis = plans[0].visible.len();
        for (t, p) in tokens.iter().zip(plans) {
            if t.shape() != [n, self.token_dim()] {
                return Err(Error::InvalidConfig(format!(
                    "token sequence shape {:?}, expected [{n}, {}]",
                    t.shape(),
                    self.token_dim()
                )));
            }
            if p.len() != n || p.visible.len() != n_vis {
                return Err(Error::InvalidConfig("mask plans must cover N tokens with equal visible counts".into()));
            }
        }
        Ok((n_vis, n - n_vis))
    }

    /// Online encoder over the visible tokens of each sequence: `[B·|visible|, D]`.
    ///
    /// Masked tokens are dropped before anything is recorded on the tape.
    pub fn encode_online(&self, ctx: &mut Ctx<'_, T>, tokens: &[Tensor<T>], plans: &[MaskPlan]) -> Result<Var> {
        self.check_plans(tokens, plans)?;
        let vis = stack_rows(tokens.iter().zip(plans).map(|(t, p)| t.select_rows(&p.visible).expect("plan indices checked")))?;
        let pos = stack_rows(plans.iter().map(|p| self.positions.select_rows(&p.visible).expect("plan indices checked")))?;
        let vis = ctx.constant(vis);
        let pos = ctx.constant(pos);
        self.online.forward(ctx, vis, pos, tokens.len())
    }

    /// Online encoder over every token (finetuning/evaluation): `[B·N, D]`.
    pub fn encode_online_full(&self, ctx: &mut Ctx<'_, T>, tokens: &[Tensor<T>]) -> Result<Var> {
        self.encode_full(&self.online, ctx, tokens)
    }

    fn encode_full(&self, enc: &Encoder, ctx: &mut Ctx<'_, T>, tokens: &[Tensor<T>]) -> Result<Var> {
        let plans = vec![MaskPlan::all_visible(self.num_tokens()); tokens.len()];
        self.check_plans(tokens, &plans)?;
        let x = ctx.constant(stack_rows(tokens.iter().cloned())?);
        let pos = ctx.constant(stack_rows(std::iter::repeat(self.positions.clone()).take(tokens.len()))?);
        enc.forward(ctx, x, pos, tokens.len())
    }

    /// Mean over the `n` rows of each of `batch` sequences: `[B·n, D]` → `[B, D]`.
    pub fn mean_pool(&self, ctx: &mut Ctx<'_, T>, x: Var, batch: usize) -> Result<Var> {
        let [rows, d] = *ctx.tape.shape(x) else {
            return Err(Error::InvalidConfig("mean_pool expects [rows, d]".into()));
        };
        let x = ctx.tape.reshape(x, &[batch, rows / batch, d])?;
        Ok(ctx.tape.mean_axis(x, 1)?)
    }

    /// Mean-pooled momentum-encoder features `z_t`, `[B, D]`, computed on a
    /// separate gradient-free tape.
    pub fn encode_target(&self, tokens: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut ctx = Ctx::frozen(&self.params);
        let z = self.encode_full(&self.target, &mut ctx, tokens)?;
        let z = self.mean_pool(&mut ctx, z, tokens.len())?;
        Ok(ctx.value(z).clone())
    }

    /// Target projection `z_t^p`, `[B, D_proj]`, without gradient.
    pub fn target_projection(&self, tokens: &[Tensor<T>]) -> Result<Tensor<T>> {
        let z = self.encode_target(tokens)?;
        let mut ctx = Ctx::frozen(&self.params);
        let z = ctx.constant(z);
        let p = self.target_proj.forward(&mut ctx, z)?;
        Ok(ctx.value(p).clone())
    }

    /// Places encoder outputs at visible positions and `mask_token + position`
    /// at masked positions, in raster order: `[B·N, D]`.
    pub fn assemble_full_sequence(&self, ctx: &mut Ctx<'_, T>, z_vis: Var, plans: &[MaskPlan]) -> Result<Var> {
        let batch = plans.len();
        let n = self.num_tokens();
        let d = self.cfg.d_model;
        let n_vis = plans[0].visible.len();
        let n_mask = n - n_vis;
        if ctx.tape.shape(z_vis) != [batch * n_vis, d] {
            return Err(Error::InvalidConfig(format!(
                "visible features {:?} do not match {batch} plans with {n_vis} visible tokens",
                ctx.tape.shape(z_vis)
            )));
        }
        if n_mask == 0 {
            let order: Vec<usize> = plans
                .iter()
                .enumerate()
                .flat_map(|(b, p)| {
                    let mut inv = vec![0; n];
                    for (r, &i) in p.visible.iter().enumerate() {
                        inv[i] = b * n_vis + r;
                    }
                    inv
                })
                .collect();
            return Ok(ctx.tape.gather_rows(z_vis, &order)?);
        }
        let mask = ctx.p(self.mask_token);
        let mask = ctx.tape.reshape(mask, &[1, d])?;
        let mask_rows = ctx.tape.gather_rows(mask, &vec![0; batch * n_mask])?;
        let pos = stack_rows(plans.iter().map(|p| self.positions.select_rows(&p.masked).expect("plan indices")))?;
        let pos = ctx.constant(pos);
        let mask_rows = ctx.tape.add(mask_rows, pos)?;
        let all = ctx.tape.concat(&[z_vis, mask_rows], 0)?;
        let mut order = vec![0; batch * n];
        for (b, p) in plans.iter().enumerate() {
            for (r, &i) in p.visible.iter().enumerate() {
                order[b * n + i] = b * n_vis + r;
            }
            for (r, &i) in p.masked.iter().enumerate() {
                order[b * n + i] = batch * n_vis + b * n_mask + r;
            }
        }
        Ok(ctx.tape.gather_rows(all, &order)?)
    }

    /// Pixel decoder predictions for every token: `[B·N, D_in]`.
    pub fn pixel_decode_all(&self, ctx: &mut Ctx<'_, T>, full: Var, batch: usize) -> Result<Var> {
        let dec = &self.pixel_decoder;
        let x = dec.embed.forward(ctx, full)?;
        let x = run_blocks(&dec.blocks, ctx, x, batch)?;
        let x = dec.norm.forward(ctx, x)?;
        dec.head.forward(ctx, x)
    }

    /// Predictions at masked positions only, `[B·|masked|, D_in]` in plan order.
    pub fn pixel_decode(&self, ctx: &mut Ctx<'_, T>, full: Var, plans: &[MaskPlan]) -> Result<Var> {
        let all = self.pixel_decode_all(ctx, full, plans.len())?;
        let n = self.num_tokens();
        let rows: Vec<usize> = plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.masked.iter().map(move |&i| b * n + i))
            .collect();
        Ok(ctx.tape.gather_rows(all, &rows)?)
    }

    /// `y_s`: mean of the feature decoder over all N positions when enabled,
    /// otherwise the mean of the visible encoder outputs. `[B, D]`.
    pub fn contrastive_feature(&self, ctx: &mut Ctx<'_, T>, z_vis: Var, plans: &[MaskPlan]) -> Result<Var> {
        let batch = plans.len();
        match &self.feature_decoder {
            Some(blocks) => {
                let full = self.assemble_full_sequence(ctx, z_vis, plans)?;
                let y = run_blocks(blocks, ctx, full, batch)?;
                self.mean_pool(ctx, y, batch)
            }
            None => self.mean_pool(ctx, z_vis, batch),
        }
    }

    /// Online projection followed by prediction: `y_s^p`, `[B, D_proj]`.
    pub fn project_online(&self, ctx: &mut Ctx<'_, T>, y_s: Var) -> Result<Var> {
        let p = self.online_proj.forward(ctx, y_s)?;
        self.predictor.forward(ctx, p)
    }

    /// Classification logits from the mean-pooled full online encoding.
    pub fn classify(&self, ctx: &mut Ctx<'_, T>, tokens: &[Tensor<T>]) -> Result<Var> {
        let z = self.encode_online_full(ctx, tokens)?;
        let z = self.mean_pool(ctx, z, tokens.len())?;
        self.classifier.forward(ctx, z)
    }

    /// Re-initializes the classifier head from `seed`.
    pub fn reset_classifier(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = (self.cfg.d_model, self.cfg.num_classes);
        let bound = (6.0 / (d + c) as f64).sqrt();
        self.params
            .set(self.classifier.weight, Tensor::uniform(vec![d, c], bound, &mut rng))?;
        self.params.set(self.classifier.bias, Tensor::zeros(vec![c]))
    }
}
