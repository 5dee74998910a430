//! Toy hierarchical vision model built from the Lipschitz-bounded
//! components: patch embedding, stages of blocks (conv -> attention with
//! norm+weighted residual -> FFN with norm+weighted residual), patch merging
//! between stages, global average pooling, and a linear classifier head.
//!
//! The default residual form wraps the norm around the residual sum,
//! `x' = Norm(x + DropPath(α ⊙ f(x)))`; a config switch moves the norm onto
//! the branch input instead (`x' = x + DropPath(α ⊙ f(Norm(x)))`).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    dot_product_attention, dot_product_attention_vjp, multi_head_scsa, multi_head_scsa_vjp,
    DotAttnState, MhaState, ScsaParams,
};
use crate::autodiff::FdTarget;
use crate::error::{Error, Result};
use crate::init::{init_depthwise, init_weight, xavier_init, InitKind};
use crate::layers::activation::{activation, activation_derivative, ActKind};
use crate::layers::conv::{
    depthwise_forward, depthwise_vjp, patch_conv_forward, patch_conv_vjp, pointwise_forward,
    pointwise_vjp, ConvBlockParams, DEPTHWISE_KSIZE,
};
use crate::layers::norm::{center_norm, center_norm_vjp, layer_norm, layer_norm_vjp, NormParams};
use crate::layers::residual::WrsParams;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"LIPS";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// FFN hidden width multiplier.
pub const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    CenterNorm,
    LayerNorm,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    Scsa,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `x' = Norm(x + DropPath(α ⊙ f(x)))`
    #[default]
    PostResidual,
    /// `x' = x + DropPath(α ⊙ f(Norm(x)))`
    PreBranch,
}

/// Residual weight policy: `auto` is `1 / (total blocks)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaPolicy {
    Auto,
    Fixed(f64),
}

impl Serialize for AlphaPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AlphaPolicy::Auto => s.serialize_str("auto"),
            AlphaPolicy::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Name(String),
            Value(f64),
        }
        match Repr::deserialize(d)? {
            Repr::Name(s) if s == "auto" => Ok(AlphaPolicy::Auto),
            Repr::Name(s) => Err(serde::de::Error::custom(format!(
                "alpha_policy must be \"auto\" or a number, got {s:?}"
            ))),
            Repr::Value(v) => Ok(AlphaPolicy::Fixed(v)),
        }
    }
}

/// Model configuration. Unknown JSON keys are rejected so bound-relevant
/// scalars cannot be silently misspelled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    pub stage_depths: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub alpha_policy: AlphaPolicy,
    pub droppath_p: f64,
    pub norm_kind: NormKind,
    pub attn_kind: AttnKind,
    pub init_kind: InitKind,
    pub tau: f64,
    pub nu: f64,
    pub eps: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub n_classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub norm_placement: NormPlacement,
    /// Freeze γ/β/α/ν/τ during training so a certificate computed at the
    /// checkpoint stays valid through training.
    #[serde(default)]
    pub freeze_scalars: bool,
}

impl ModelConfig {
    /// The stability-first toy configuration: 32x32x3 images, 4x4 patches,
    /// four stages [1,1,2,1] with channels doubling per stage.
    pub fn toy() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            stage_depths: vec![1, 1, 2, 1],
            channels: vec![16, 32, 64, 128],
            heads: vec![1, 2, 4, 4],
            alpha_policy: AlphaPolicy::Auto,
            droppath_p: 0.1,
            norm_kind: NormKind::CenterNorm,
            attn_kind: AttnKind::Scsa,
            init_kind: InitKind::Spectral,
            tau: crate::attention::DEFAULT_TAU,
            nu: crate::attention::DEFAULT_NU,
            eps: crate::attention::DEFAULT_EPS,
            image_size: 32,
            patch_size: 4,
            n_classes: 10,
            seed: 42,
            norm_placement: NormPlacement::PostResidual,
            freeze_scalars: false,
        }
    }

    /// The unstable baseline: LayerNorm plus dot-product attention.
    pub fn baseline() -> Self {
        Self {
            norm_kind: NormKind::LayerNorm,
            attn_kind: AttnKind::Dot,
            init_kind: InitKind::Xavier,
            ..Self::toy()
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    /// Residual weight per the policy: `1/ΣM_s` under `auto`.
    pub fn alpha_value(&self) -> f64 {
        match self.alpha_policy {
            AlphaPolicy::Auto => 1.0 / self.total_blocks().max(1) as f64,
            AlphaPolicy::Fixed(v) => v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let s = self.stages();
        if s == 0 {
            return fail("at least one stage required".into());
        }
        if self.channels.len() != s || self.heads.len() != s {
            return fail(format!(
                "channels ({}) and heads ({}) must match stage count {s}",
                self.channels.len(),
                self.heads.len()
            ));
        }
        for i in 0..s {
            if self.channels[i] == 0 {
                return fail(format!("stage {i} has zero channels"));
            }
            if i + 1 < s && self.channels[i + 1] != 2 * self.channels[i] {
                return fail(format!(
                    "channels must double between stages: stage {i} has {}, stage {} has {}",
                    self.channels[i],
                    i + 1,
                    self.channels[i + 1]
                ));
            }
            if self.heads[i] == 0 || self.channels[i] % self.heads[i] != 0 {
                return fail(format!(
                    "stage {i}: heads {} must divide channels {}",
                    self.heads[i], self.channels[i]
                ));
            }
        }
        if self.total_blocks() == 0 && matches!(self.alpha_policy, AlphaPolicy::Auto) {
            // Degenerate but allowed: alpha is never used.
        }
        if self.patch_size == 0 {
            return fail("patch_size must be >= 1".into());
        }
        let stride = self.patch_size * (1usize << (s - 1));
        if self.image_size == 0 || self.image_size % stride != 0 {
            return fail(format!(
                "image_size {} must be divisible by patch_size * 2^(S-1) = {stride}",
                self.image_size
            ));
        }
        if self.n_classes < 2 {
            return fail("n_classes must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.droppath_p) {
            return fail(format!("droppath_p {} out of [0,1]", self.droppath_p));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be > 0, got {}", self.eps));
        }
        if self.nu < 0.0 || self.tau < 0.0 {
            return fail("nu and tau must be nonnegative".into());
        }
        if let AlphaPolicy::Fixed(v) = self.alpha_policy {
            if v < 0.0 {
                return fail(format!("fixed alpha must be nonnegative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LipsBlock {
    pub conv: ConvBlockParams,
    pub attn_heads: Vec<ScsaParams>,
    pub w_out: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_w2: Tensor,
    pub norm_attn: NormParams,
    pub norm_ffn: NormParams,
    pub wrs_attn: WrsParams,
    pub wrs_ffn: WrsParams,
}

#[derive(Debug, Clone)]
pub struct Stage {
    /// Stride-2 2x2 merge conv into this stage (absent for stage 0).
    pub merge: Option<Tensor>,
    pub blocks: Vec<LipsBlock>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Patch embedding: non-overlapped `patch x patch` conv, stride = patch.
    pub patch_embed: Tensor,
    pub stages: Vec<Stage>,
    /// Classifier head over pooled features, `[C_last, n_classes]`.
    pub head: Tensor,
}

/// Build and initialize a model per the config.
pub fn build_model(config: &ModelConfig, rng: &mut RngStream) -> Result<Model> {
    config.validate()?;
    let kind = config.init_kind;
    let s = config.stages();
    let alpha = config.alpha_value();
    let p = config.patch_size;

    let patch_embed = init_weight(kind, &[p * p * 3, config.channels[0]], rng)?;
    let mut stages = Vec::with_capacity(s);
    for si in 0..s {
        let c = config.channels[si];
        let merge = if si == 0 {
            None
        } else {
            Some(init_weight(kind, &[2 * 2 * config.channels[si - 1], c], rng)?)
        };
        let mut blocks = Vec::with_capacity(config.stage_depths[si]);
        for _ in 0..config.stage_depths[si] {
            let heads = config.heads[si];
            let dh = c / heads;
            let attn_heads = (0..heads)
                .map(|_| ScsaParams {
                    // Q/K/V rows are re-normalized inside the attention, so
                    // these stay Xavier regardless of init kind (trunc-normal
                    // kind keeps its own draw for the ablation axis).
                    wq: match kind {
                        InitKind::TruncNormal => crate::init::trunc_normal_default(&[c, dh], rng),
                        _ => xavier_init(&[c, dh], rng),
                    },
                    wk: match kind {
                        InitKind::TruncNormal => crate::init::trunc_normal_default(&[c, dh], rng),
                        _ => xavier_init(&[c, dh], rng),
                    },
                    wv: match kind {
                        InitKind::TruncNormal => crate::init::trunc_normal_default(&[c, dh], rng),
                        _ => xavier_init(&[c, dh], rng),
                    },
                    nu: config.nu,
                    tau: config.tau,
                    eps: config.eps,
                })
                .collect();
            blocks.push(LipsBlock {
                conv: ConvBlockParams {
                    depthwise: init_depthwise(kind, c, DEPTHWISE_KSIZE, rng)?,
                    pointwise: init_weight(kind, &[c, c], rng)?,
                },
                attn_heads,
                w_out: init_weight(kind, &[c, c], rng)?,
                ffn_w1: init_weight(kind, &[c, FFN_EXPANSION * c], rng)?,
                ffn_w2: init_weight(kind, &[FFN_EXPANSION * c, c], rng)?,
                norm_attn: NormParams::identity(c),
                norm_ffn: NormParams::identity(c),
                wrs_attn: WrsParams::uniform(alpha, c, config.droppath_p),
                wrs_ffn: WrsParams::uniform(alpha, c, config.droppath_p),
            });
        }
        stages.push(Stage { merge, blocks });
    }
    let head = init_weight(kind, &[*config.channels.last().unwrap(), config.n_classes], rng)?;
    Ok(Model {
        config: config.clone(),
        patch_embed,
        stages,
        head,
    })
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

enum AttnCache {
    Scsa(MhaState),
    Dot { states: Vec<DotAttnState>, concat: Tensor },
}

struct SubCache {
    /// Input tokens to the sub-module.
    x: Tensor,
    /// Input actually fed to the branch (normed under PreBranch).
    branch_in: Tensor,
    branch: BranchCache,
    branch_out: Tensor,
    dropped: bool,
    /// Residual sum (pre final norm), kept for PostResidual backward.
    r: Tensor,
}

enum BranchCache {
    Attn(AttnCache),
    Ffn { hidden_pre: Tensor, hidden: Tensor },
}

struct BlockCache {
    grid_in: Tensor,
    conv_mid: Tensor,
    attn: SubCache,
    ffn: SubCache,
}

pub struct ModelCache {
    /// Per stage: merge input (if any) and per-block caches.
    stages: Vec<(Option<Tensor>, Vec<BlockCache>)>,
    pooled: Vec<f64>,
    pre_pool: Tensor,
}

pub struct ForwardResult {
    pub logits: Vec<f64>,
    pub max_act: f64,
    pub cache: Option<ModelCache>,
}

impl Model {
    fn norm_forward(&self, x: &Tensor, params: &NormParams) -> Result<Tensor> {
        match self.config.norm_kind {
            NormKind::CenterNorm => center_norm(x, params),
            // Guarded so the instability demo observes the blow-up instead
            // of aborting on an exact zero-variance row.
            NormKind::LayerNorm => layer_norm(x, params, true),
            NormKind::None => Ok(x.clone()),
        }
    }

    fn norm_vjp(
        &self,
        x: &Tensor,
        params: &NormParams,
        g: &Tensor,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        match self.config.norm_kind {
            NormKind::CenterNorm => center_norm_vjp(x, params, g),
            NormKind::LayerNorm => layer_norm_vjp(x, params, g, true),
            NormKind::None => Ok((g.clone(), vec![0.0; params.dim()], vec![0.0; params.dim()])),
        }
    }

    fn attn_forward(&self, block: &LipsBlock, tokens: &Tensor) -> Result<(Tensor, AttnCache)> {
        match self.config.attn_kind {
            AttnKind::Scsa => {
                let (out, state) = multi_head_scsa(tokens, &block.attn_heads, &block.w_out)?;
                Ok((out, AttnCache::Scsa(state)))
            }
            AttnKind::Dot => {
                let n = tokens.rows();
                let c = tokens.cols();
                let mut concat = Tensor::zeros(&[n, c]);
                let mut states = Vec::with_capacity(block.attn_heads.len());
                let mut offset = 0;
                for head in &block.attn_heads {
                    let dh = head.head_dim();
                    let (out, st) = dot_product_attention(tokens, &head.wq, &head.wk, &head.wv)?;
                    for i in 0..n {
                        concat.data_mut()[i * c + offset..i * c + offset + dh]
                            .copy_from_slice(out.row(i));
                    }
                    states.push(st);
                    offset += dh;
                }
                let out = concat.matmul(&block.w_out)?;
                Ok((out, AttnCache::Dot { states, concat }))
            }
        }
    }

    fn ffn_forward(&self, block: &LipsBlock, tokens: &Tensor) -> Result<(Tensor, BranchCache)> {
        let hidden_pre = tokens.matmul(&block.ffn_w1)?;
        let hidden = activation(ActKind::Gelu, &hidden_pre);
        let out = hidden.matmul(&block.ffn_w2)?;
        Ok((out, BranchCache::Ffn { hidden_pre, hidden }))
    }

    fn sub_module_forward(
        &self,
        block: &LipsBlock,
        tokens: &Tensor,
        is_attn: bool,
        training: bool,
        rng: &mut RngStream,
        max_act: &mut f64,
    ) -> Result<(Tensor, SubCache)> {
        let (norm, wrs) = if is_attn {
            (&block.norm_attn, &block.wrs_attn)
        } else {
            (&block.norm_ffn, &block.wrs_ffn)
        };
        let branch_in = match self.config.norm_placement {
            NormPlacement::PostResidual => tokens.clone(),
            NormPlacement::PreBranch => self.norm_forward(tokens, norm)?,
        };
        let (branch_out, branch) = if is_attn {
            let (out, cache) = self.attn_forward(block, &branch_in)?;
            (out, BranchCache::Attn(cache))
        } else {
            self.ffn_forward(block, &branch_in)?
        };
        *max_act = max_act.max(branch_out.max_abs());
        let dropped = training && rng.uniform() < wrs.drop_prob;
        let r = if dropped {
            tokens.clone()
        } else {
            let mut r = tokens.clone();
            let c = wrs.alpha.len();
            for (row_r, row_b) in r.data_mut().chunks_mut(c).zip(branch_out.data().chunks(c)) {
                for j in 0..c {
                    row_r[j] += wrs.alpha[j] * row_b[j];
                }
            }
            r
        };
        let out = match self.config.norm_placement {
            NormPlacement::PostResidual => self.norm_forward(&r, norm)?,
            NormPlacement::PreBranch => r.clone(),
        };
        *max_act = max_act.max(out.max_abs());
        Ok((
            out,
            SubCache {
                x: tokens.clone(),
                branch_in,
                branch,
                branch_out,
                dropped,
                r,
            },
        ))
    }

    fn block_forward(
        &self,
        block: &LipsBlock,
        grid: &Tensor,
        training: bool,
        rng: &mut RngStream,
        max_act: &mut f64,
    ) -> Result<(Tensor, BlockCache)> {
        let (h, w, c) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
        let conv_mid = depthwise_forward(grid, &block.conv.depthwise)?;
        let conv_out = pointwise_forward(&conv_mid, &block.conv.pointwise)?;
        *max_act = max_act.max(conv_out.max_abs());
        let tokens = conv_out.reshape(&[h * w, c])?;
        let (t1, attn) = self.sub_module_forward(block, &tokens, true, training, rng, max_act)?;
        let (t2, ffn) = self.sub_module_forward(block, &t1, false, training, rng, max_act)?;
        Ok((
            t2.reshape(&[h, w, c])?,
            BlockCache {
                grid_in: grid.clone(),
                conv_mid,
                attn,
                ffn,
            },
        ))
    }

    /// Forward pass over one image `[H, W, 3]`. `training` enables DropPath
    /// (stochastic, driven by `rng`); the cache is populated only when
    /// `want_cache` so the eval path stays allocation-light.
    pub fn forward(
        &self,
        image: &Tensor,
        training: bool,
        rng: &mut RngStream,
        want_cache: bool,
    ) -> Result<ForwardResult> {
        let sz = self.config.image_size;
        if image.shape() != [sz, sz, 3] {
            return Err(Error::ShapeMismatch {
                op: "Model::forward",
                expected: format!("[{sz}, {sz}, 3]"),
                got: format!("{:?}", image.shape()),
            });
        }
        let mut max_act = image.max_abs();
        let mut cur = patch_conv_forward(image, &self.patch_embed, self.config.patch_size)?;
        max_act = max_act.max(cur.max_abs());
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let merge_in = if let Some(m) = &stage.merge {
                let input = cur.clone();
                cur = patch_conv_forward(&cur, m, 2)?;
                max_act = max_act.max(cur.max_abs());
                Some(input)
            } else {
                None
            };
            let mut block_caches = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (next, cache) = self.block_forward(block, &cur, training, rng, &mut max_act)?;
                cur = next;
                if want_cache {
                    block_caches.push(cache);
                }
            }
            stage_caches.push((merge_in, block_caches));
        }
        // Global average pool over positions.
        let (h, w, c) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
        let n = h * w;
        let mut pooled = vec![0.0; c];
        for pos in 0..n {
            for ch in 0..c {
                pooled[ch] += cur.data()[pos * c + ch];
            }
        }
        for v in &mut pooled {
            *v /= n as f64;
        }
        let logits = self.head.matvec_t(&pooled);
        max_act = max_act.max(logits.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let cache = want_cache.then_some(ModelCache {
            stages: stage_caches,
            pooled: pooled.clone(),
            pre_pool: cur,
        });
        Ok(ForwardResult {
            logits,
            max_act,
            cache,
        })
    }

    /// Eval-mode logits.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut rng = RngStream::new(0, 0);
        Ok(self.forward(image, false, &mut rng, false)?.logits)
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Flattened gradients keyed by canonical parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

fn accumulate(map: &mut GradMap, name: &str, grad: &[f64]) {
    match map.get_mut(name) {
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(grad) {
                *a += g;
            }
        }
        None => {
            map.insert(name.to_string(), grad.to_vec());
        }
    }
}

impl Model {
    fn attn_vjp(
        &self,
        block: &LipsBlock,
        branch_in: &Tensor,
        cache: &AttnCache,
        g: &Tensor,
        prefix: &str,
        grads: &mut GradMap,
    ) -> Result<Tensor> {
        match (self.config.attn_kind, cache) {
            (AttnKind::Scsa, AttnCache::Scsa(state)) => {
                let (gx, mha_grads) =
                    multi_head_scsa_vjp(branch_in, &block.attn_heads, &block.w_out, state, g)?;
                for (h, hg) in mha_grads.heads.iter().enumerate() {
                    accumulate(grads, &format!("{prefix}.attn.head{h}.wq"), hg.wq.data());
                    accumulate(grads, &format!("{prefix}.attn.head{h}.wk"), hg.wk.data());
                    accumulate(grads, &format!("{prefix}.attn.head{h}.wv"), hg.wv.data());
                    accumulate(grads, &format!("{prefix}.attn.head{h}.nu"), &[hg.nu]);
                    accumulate(grads, &format!("{prefix}.attn.head{h}.tau"), &[hg.tau]);
                }
                accumulate(grads, &format!("{prefix}.attn.w_out"), mha_grads.w_out.data());
                Ok(gx)
            }
            (AttnKind::Dot, AttnCache::Dot { states, concat }) => {
                let gconcat = g.matmul(&block.w_out.transpose())?;
                let gw_out = concat.transpose().matmul(g)?;
                accumulate(grads, &format!("{prefix}.attn.w_out"), gw_out.data());
                let n = branch_in.rows();
                let c = branch_in.cols();
                let mut gx = Tensor::zeros(&[n, c]);
                let mut offset = 0;
                for (h, (head, st)) in block.attn_heads.iter().zip(states).enumerate() {
                    let dh = head.head_dim();
                    let mut ghead = Tensor::zeros(&[n, dh]);
                    for i in 0..n {
                        ghead
                            .row_mut(i)
                            .copy_from_slice(&gconcat.data()[i * c + offset..i * c + offset + dh]);
                    }
                    let (gxi, hg) = dot_product_attention_vjp(
                        branch_in, &head.wq, &head.wk, &head.wv, st, &ghead,
                    )?;
                    gx.add_scaled(&gxi, 1.0);
                    accumulate(grads, &format!("{prefix}.attn.head{h}.wq"), hg.wq.data());
                    accumulate(grads, &format!("{prefix}.attn.head{h}.wk"), hg.wk.data());
                    accumulate(grads, &format!("{prefix}.attn.head{h}.wv"), hg.wv.data());
                    offset += dh;
                }
                Ok(gx)
            }
            _ => unreachable!("cache kind always matches config"),
        }
    }

    fn ffn_vjp(
        &self,
        block: &LipsBlock,
        branch_in: &Tensor,
        cache: &BranchCache,
        g: &Tensor,
        prefix: &str,
        grads: &mut GradMap,
    ) -> Result<Tensor> {
        let BranchCache::Ffn { hidden_pre, hidden } = cache else {
            unreachable!("ffn cache kind");
        };
        let ghidden = g.matmul(&block.ffn_w2.transpose())?;
        let gw2 = hidden.transpose().matmul(g)?;
        let deriv = activation_derivative(ActKind::Gelu, hidden_pre);
        let ghidden_pre = ghidden.zip_map(&deriv, "ffn_vjp", |a, b| a * b)?;
        let gw1 = branch_in.transpose().matmul(&ghidden_pre)?;
        let gx = ghidden_pre.matmul(&block.ffn_w1.transpose())?;
        accumulate(grads, &format!("{prefix}.ffn.w1"), gw1.data());
        accumulate(grads, &format!("{prefix}.ffn.w2"), gw2.data());
        Ok(gx)
    }

    #[allow(clippy::too_many_arguments)]
    fn sub_module_vjp(
        &self,
        block: &LipsBlock,
        cache: &SubCache,
        is_attn: bool,
        g: &Tensor,
        prefix: &str,
        grads: &mut GradMap,
    ) -> Result<Tensor> {
        let (norm, wrs, norm_name, wrs_name) = if is_attn {
            (&block.norm_attn, &block.wrs_attn, "norm_attn", "wrs_attn")
        } else {
            (&block.norm_ffn, &block.wrs_ffn, "norm_ffn", "wrs_ffn")
        };
        // Backward through the trailing norm under PostResidual.
        let gr = match self.config.norm_placement {
            NormPlacement::PostResidual => {
                let (gr, ggamma, gbeta) = self.norm_vjp(&cache.r, norm, g)?;
                accumulate(grads, &format!("{prefix}.{norm_name}.gamma"), &ggamma);
                accumulate(grads, &format!("{prefix}.{norm_name}.beta"), &gbeta);
                gr
            }
            NormPlacement::PreBranch => g.clone(),
        };
        // r = x + α ⊙ branch_out (or just x when dropped).
        let mut gx = gr.clone();
        if !cache.dropped {
            let c = wrs.alpha.len();
            let mut galpha = vec![0.0; c];
            let mut gbranch = Tensor::zeros(cache.branch_out.shape());
            for ((row_g, row_b), row_gb) in gr
                .data()
                .chunks(c)
                .zip(cache.branch_out.data().chunks(c))
                .zip(gbranch.data_mut().chunks_mut(c))
            {
                for j in 0..c {
                    row_gb[j] = wrs.alpha[j] * row_g[j];
                    galpha[j] += row_b[j] * row_g[j];
                }
            }
            accumulate(grads, &format!("{prefix}.{wrs_name}.alpha"), &galpha);
            let gbranch_in = if is_attn {
                let BranchCache::Attn(attn_cache) = &cache.branch else {
                    unreachable!()
                };
                self.attn_vjp(block, &cache.branch_in, attn_cache, &gbranch, prefix, grads)?
            } else {
                self.ffn_vjp(block, &cache.branch_in, &cache.branch, &gbranch, prefix, grads)?
            };
            match self.config.norm_placement {
                NormPlacement::PostResidual => {
                    // branch_in = x.
                    gx.add_scaled(&gbranch_in, 1.0);
                }
                NormPlacement::PreBranch => {
                    let (gxn, ggamma, gbeta) = self.norm_vjp(&cache.x, norm, &gbranch_in)?;
                    accumulate(grads, &format!("{prefix}.{norm_name}.gamma"), &ggamma);
                    accumulate(grads, &format!("{prefix}.{norm_name}.beta"), &gbeta);
                    gx.add_scaled(&gxn, 1.0);
                }
            }
        } else if matches!(self.config.norm_placement, NormPlacement::PostResidual) {
            // Norm params still need zero-filled entries for shape parity.
            accumulate(grads, &format!("{prefix}.{norm_name}.gamma"), &vec![0.0; norm.dim()]);
            accumulate(grads, &format!("{prefix}.{norm_name}.beta"), &vec![0.0; norm.dim()]);
        }
        Ok(gx)
    }

    fn block_vjp(
        &self,
        block: &LipsBlock,
        cache: &BlockCache,
        g: &Tensor,
        prefix: &str,
        grads: &mut GradMap,
    ) -> Result<Tensor> {
        let (h, w, c) = (
            cache.grid_in.shape()[0],
            cache.grid_in.shape()[1],
            cache.grid_in.shape()[2],
        );
        let g_tokens = g.reshape(&[h * w, c])?;
        let g_t1 = self.sub_module_vjp(block, &cache.ffn, false, &g_tokens, prefix, grads)?;
        let g_conv_tokens = self.sub_module_vjp(block, &cache.attn, true, &g_t1, prefix, grads)?;
        let g_conv = g_conv_tokens.reshape(&[h, w, c])?;
        let (g_mid, gpw) = pointwise_vjp(&cache.conv_mid, &block.conv.pointwise, &g_conv)?;
        let (gx, gdw) = depthwise_vjp(&cache.grid_in, &block.conv.depthwise, &g_mid)?;
        accumulate(grads, &format!("{prefix}.conv.pointwise"), gpw.data());
        accumulate(grads, &format!("{prefix}.conv.depthwise"), gdw.data());
        Ok(gx)
    }

    /// Reverse-mode pass from a logit cotangent down to every parameter and
    /// the input image. Requires the cache from a `want_cache` forward.
    pub fn backward(
        &self,
        image: &Tensor,
        cache: &ModelCache,
        glogits: &[f64],
    ) -> Result<(Tensor, GradMap)> {
        let mut grads = GradMap::new();
        // logits = headᵀ pooled
        let c_last = self.head.rows();
        let mut ghead = vec![0.0; self.head.len()];
        let n_classes = self.head.cols();
        for i in 0..c_last {
            for j in 0..n_classes {
                ghead[i * n_classes + j] = cache.pooled[i] * glogits[j];
            }
        }
        accumulate(&mut grads, "head", &ghead);
        let gpooled = self.head.matvec(glogits);
        // pooled = mean over positions.
        let (h, w, c) = (
            cache.pre_pool.shape()[0],
            cache.pre_pool.shape()[1],
            cache.pre_pool.shape()[2],
        );
        let n = h * w;
        let mut gcur = Tensor::zeros(&[h, w, c]);
        for pos in 0..n {
            for ch in 0..c {
                gcur.data_mut()[pos * c + ch] = gpooled[ch] / n as f64;
            }
        }
        // Stages in reverse.
        for (si, stage) in self.stages.iter().enumerate().rev() {
            let (merge_in, block_caches) = &cache.stages[si];
            for (bi, block) in stage.blocks.iter().enumerate().rev() {
                let prefix = format!("stage{si}.block{bi}");
                gcur = self.block_vjp(block, &block_caches[bi], &gcur, &prefix, &mut grads)?;
            }
            if let (Some(m), Some(input)) = (&stage.merge, merge_in) {
                let (gx, gw) = patch_conv_vjp(input, m, 2, &gcur)?;
                accumulate(&mut grads, &format!("stage{si}.merge"), gw.data());
                gcur = gx;
            }
        }
        let (gimage, gpatch) = patch_conv_vjp(image, &self.patch_embed, self.config.patch_size, &gcur)?;
        accumulate(&mut grads, "patch_embed", gpatch.data());
        Ok((gimage, grads))
    }
}

// ---------------------------------------------------------------------------
// Parameter traversal, weight file format
// ---------------------------------------------------------------------------

/// What a parameter is, for optimizer policy: weight matrices get weight
/// decay; gains (γ, β, α) and scalars (ν, τ) do not, and scalars train in
/// log space to stay positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gain,
    PositiveScalar,
}

impl Model {
    /// Visit every trainable parameter in canonical order with its name and
    /// mutable storage.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], ParamKind)) {
        f("patch_embed", self.patch_embed.data_mut(), ParamKind::Weight);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            if let Some(m) = &mut stage.merge {
                f(&format!("stage{si}.merge"), m.data_mut(), ParamKind::Weight);
            }
            for (bi, block) in stage.blocks.iter_mut().enumerate() {
                let p = format!("stage{si}.block{bi}");
                f(&format!("{p}.conv.depthwise"), block.conv.depthwise.data_mut(), ParamKind::Weight);
                f(&format!("{p}.conv.pointwise"), block.conv.pointwise.data_mut(), ParamKind::Weight);
                for (hi, head) in block.attn_heads.iter_mut().enumerate() {
                    f(&format!("{p}.attn.head{hi}.wq"), head.wq.data_mut(), ParamKind::Weight);
                    f(&format!("{p}.attn.head{hi}.wk"), head.wk.data_mut(), ParamKind::Weight);
                    f(&format!("{p}.attn.head{hi}.wv"), head.wv.data_mut(), ParamKind::Weight);
                    f(
                        &format!("{p}.attn.head{hi}.nu"),
                        std::slice::from_mut(&mut head.nu),
                        ParamKind::PositiveScalar,
                    );
                    f(
                        &format!("{p}.attn.head{hi}.tau"),
                        std::slice::from_mut(&mut head.tau),
                        ParamKind::PositiveScalar,
                    );
                }
                f(&format!("{p}.attn.w_out"), block.w_out.data_mut(), ParamKind::Weight);
                f(&format!("{p}.ffn.w1"), block.ffn_w1.data_mut(), ParamKind::Weight);
                f(&format!("{p}.ffn.w2"), block.ffn_w2.data_mut(), ParamKind::Weight);
                f(&format!("{p}.norm_attn.gamma"), &mut block.norm_attn.gamma, ParamKind::Gain);
                f(&format!("{p}.norm_attn.beta"), &mut block.norm_attn.beta, ParamKind::Gain);
                f(&format!("{p}.norm_ffn.gamma"), &mut block.norm_ffn.gamma, ParamKind::Gain);
                f(&format!("{p}.norm_ffn.beta"), &mut block.norm_ffn.beta, ParamKind::Gain);
                f(&format!("{p}.wrs_attn.alpha"), &mut block.wrs_attn.alpha, ParamKind::Gain);
                f(&format!("{p}.wrs_ffn.alpha"), &mut block.wrs_ffn.alpha, ParamKind::Gain);
            }
        }
        f("head", self.head.data_mut(), ParamKind::Weight);
    }

    /// Read-only traversal with logical shapes (for serialization and
    /// parameter counting).
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64], Vec<usize>, ParamKind)) {
        f(
            "patch_embed",
            self.patch_embed.data(),
            self.patch_embed.shape().to_vec(),
            ParamKind::Weight,
        );
        for (si, stage) in self.stages.iter().enumerate() {
            if let Some(m) = &stage.merge {
                f(&format!("stage{si}.merge"), m.data(), m.shape().to_vec(), ParamKind::Weight);
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                let p = format!("stage{si}.block{bi}");
                f(
                    &format!("{p}.conv.depthwise"),
                    block.conv.depthwise.data(),
                    block.conv.depthwise.shape().to_vec(),
                    ParamKind::Weight,
                );
                f(
                    &format!("{p}.conv.pointwise"),
                    block.conv.pointwise.data(),
                    block.conv.pointwise.shape().to_vec(),
                    ParamKind::Weight,
                );
                for (hi, head) in block.attn_heads.iter().enumerate() {
                    f(&format!("{p}.attn.head{hi}.wq"), head.wq.data(), head.wq.shape().to_vec(), ParamKind::Weight);
                    f(&format!("{p}.attn.head{hi}.wk"), head.wk.data(), head.wk.shape().to_vec(), ParamKind::Weight);
                    f(&format!("{p}.attn.head{hi}.wv"), head.wv.data(), head.wv.shape().to_vec(), ParamKind::Weight);
                    f(&format!("{p}.attn.head{hi}.nu"), std::slice::from_ref(&head.nu), vec![1], ParamKind::PositiveScalar);
                    f(&format!("{p}.attn.head{hi}.tau"), std::slice::from_ref(&head.tau), vec![1], ParamKind::PositiveScalar);
                }
                f(&format!("{p}.attn.w_out"), block.w_out.data(), block.w_out.shape().to_vec(), ParamKind::Weight);
                f(&format!("{p}.ffn.w1"), block.ffn_w1.data(), block.ffn_w1.shape().to_vec(), ParamKind::Weight);
                f(&format!("{p}.ffn.w2"), block.ffn_w2.data(), block.ffn_w2.shape().to_vec(), ParamKind::Weight);
                let c = block.norm_attn.dim();
                f(&format!("{p}.norm_attn.gamma"), &block.norm_attn.gamma, vec![c], ParamKind::Gain);
                f(&format!("{p}.norm_attn.beta"), &block.norm_attn.beta, vec![c], ParamKind::Gain);
                f(&format!("{p}.norm_ffn.gamma"), &block.norm_ffn.gamma, vec![c], ParamKind::Gain);
                f(&format!("{p}.norm_ffn.beta"), &block.norm_ffn.beta, vec![c], ParamKind::Gain);
                f(&format!("{p}.wrs_attn.alpha"), &block.wrs_attn.alpha, vec![c], ParamKind::Gain);
                f(&format!("{p}.wrs_ffn.alpha"), &block.wrs_ffn.alpha, vec![c], ParamKind::Gain);
            }
        }
        f("head", self.head.data(), self.head.shape().to_vec(), ParamKind::Weight);
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, data, _, _| count += data.len());
        count
    }

    /// Write all weights in the binary format: magic `LIPS`, u32 LE format
    /// version, u32 LE tensor count, then per tensor: u32 LE name length,
    /// UTF-8 name, u32 LE rank, u64 LE extents, f64 LE data.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        self.visit_params(&mut |name, data, shape, _| {
            entries.push((name.to_string(), shape, data.to_vec()));
        });
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, data) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    /// Load weights written by [`save_weights`] into a model of the same
    /// architecture.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::WeightFormat("unexpected end of file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != WEIGHT_MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != WEIGHT_FORMAT_VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut table: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::WeightFormat("non-UTF-8 tensor name".into()))?;
            let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut len = 1usize;
            for _ in 0..rank {
                let e = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
                len = len.saturating_mul(e);
            }
            let raw = take(&mut pos, len * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.insert(name, data);
        }
        let mut missing = Vec::new();
        self.visit_params_mut(&mut |name, data, _| match table.get(name) {
            Some(values) if values.len() == data.len() => data.copy_from_slice(values),
            Some(values) => missing.push(format!(
                "{name}: length {} in file, {} expected",
                values.len(),
                data.len()
            )),
            None => missing.push(format!("{name}: absent")),
        });
        if !missing.is_empty() {
            return Err(Error::WeightFormat(missing.join("; ")));
        }
        Ok(())
    }
}

/// Gradient-check target for a specific model over concatenated
/// `[image, parameters]` coordinates. The output is the logit vector; the
/// VJP runs the full analytic backward pass.
pub fn fd_target_for_model(model: &Model, rng: &mut RngStream) -> Result<FdTarget<'static>> {
    let sz = model.config.image_size;
    let image = rng.normal_tensor(&[sz, sz, 3]);
    let n_image = image.len();

    // Flatten parameters once to establish the coordinate layout.
    let flatten = |m: &Model| -> Vec<f64> {
        let mut flat = Vec::new();
        m.visit_params(&mut |_, data, _, _| flat.extend_from_slice(data));
        flat
    };
    let unflatten = |m: &mut Model, coords: &[f64]| {
        let mut offset = 0;
        m.visit_params_mut(&mut |_, data, _| {
            data.copy_from_slice(&coords[offset..offset + data.len()]);
            offset += data.len();
        });
    };
    let mut x0 = image.data().to_vec();
    x0.extend(flatten(model));

    let model_f = model.clone();
    let model_v = model.clone();
    let f = move |coords: &[f64]| -> Result<Vec<f64>> {
        let mut m = model_f.clone();
        unflatten(&mut m, &coords[n_image..]);
        let img = Tensor::new(&[sz, sz, 3], coords[..n_image].to_vec())?;
        m.logits(&img)
    };
    let vjp = move |coords: &[f64], g: &[f64]| -> Result<Vec<f64>> {
        let mut m = model_v.clone();
        unflatten(&mut m, &coords[n_image..]);
        let img = Tensor::new(&[sz, sz, 3], coords[..n_image].to_vec())?;
        let mut rng = RngStream::new(0, 0);
        let result = m.forward(&img, false, &mut rng, true)?;
        let cache = result.cache.unwrap();
        let (gimage, grads) = m.backward(&img, &cache, g)?;
        let mut out = gimage.data().to_vec();
        // Gradients follow the same canonical order as the flattening.
        m.visit_params(&mut |name, data, _, _| match grads.get(name) {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(0.0).take(data.len())),
        });
        Ok(out)
    };
    Ok(FdTarget {
        name: "model/logits".into(),
        f: Box::new(f),
        vjp: Box::new(vjp),
        x0,
    })
}

/// Full-model gradient-check target using a `[1,0,0,0]`-depth toy model so
/// directional probes stay cheap (backs `gradcheck --module model`).
pub fn gradcheck_targets(rng: &mut RngStream) -> Result<Vec<FdTarget<'static>>> {
    let config = ModelConfig {
        stage_depths: vec![1, 0, 0, 0],
        droppath_p: 0.0,
        ..ModelConfig::toy()
    };
    let model = build_model(&config, rng)?;
    Ok(vec![fd_target_for_model(&model, rng)?])
}
