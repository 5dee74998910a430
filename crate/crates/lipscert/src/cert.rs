//! The certification core: closed-form Lipschitz upper bounds for the
//! attention and network components, empirical lower-bound estimation, and
//! whole-model certification.
//!
//! Bound formulas (per-head attention, `D` = head dimension, `N` = tokens):
//!
//! ```text
//! Lip_inf <= N²√D ντ ε^(-1/2) ‖W^K‖_inf + N√D ντ ε^(-1/2) ‖W^Q‖_inf
//!            + 2N ν ε^(-1/2) ‖W^Vᵀ‖_inf
//! Lip_2   <= 2N(N-1) ντ ε^(-1/2) ‖W^K‖_2 + 2(N-1) ντ ε^(-1/2) ‖W^Q‖_2
//!            + 2N ν ε^(-1/2) ‖W^Vᵀ‖_2
//! ```
//!
//! A network of residual blocks obeys
//! `Lip(F) <= Π_s Π_m (1 + α_{s,m} Lip(f_{s,m}))`, which collapses to
//! `(1 + κ/M)^M <= e^κ` when every `α = 1/M`. DropPath shrinks each factor
//! to 1 with probability `p`.
//!
//! Empirical estimates are lower bounds by construction (pair ratios and
//! finite-difference Jacobian norms), so certification checks one-sided
//! dominance: `empirical <= theoretical`, with any violation signalling an
//! implementation bug rather than a loose bound.

use serde::{Deserialize, Serialize};

use crate::attention::ScsaParams;
use crate::autodiff::{finite_diff_check, GradCheckReport};
use crate::error::{Error, Result};
use crate::model::{fd_target_for_model, AttnKind, Model, ModelConfig, NormKind, NormPlacement};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PNorm {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Inf,
}

impl PNorm {
    pub fn name(self) -> &'static str {
        match self {
            PNorm::Two => "2",
            PNorm::Inf => "inf",
        }
    }
}

/// Vector p-norm of a tensor's flattened entries: Frobenius for p=2,
/// max-abs for p=inf.
pub fn flat_norm(t: &Tensor, p: PNorm) -> f64 {
    match p {
        PNorm::Two => t.frobenius_norm(),
        PNorm::Inf => t.max_abs(),
    }
}

/// Induced operator norm of an explicit matrix.
pub fn operator_norm(m: &Tensor, p: PNorm) -> f64 {
    match p {
        PNorm::Two => m.spectral_norm(500, 1e-11).value,
        PNorm::Inf => m.inf_norm(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundTerm {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermCombine {
    Sum,
    Product,
}

/// A p-norm-tagged Lipschitz upper bound with a named breakdown of the
/// summands or factors it was assembled from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzBound {
    pub p_norm: PNorm,
    pub value: f64,
    pub combine: TermCombine,
    pub terms: Vec<BoundTerm>,
    pub assumptions: Vec<String>,
}

impl LipschitzBound {
    pub fn sum(p_norm: PNorm, terms: Vec<BoundTerm>, assumptions: Vec<String>) -> Self {
        let value = terms.iter().map(|t| t.value).sum();
        Self {
            p_norm,
            value,
            combine: TermCombine::Sum,
            terms,
            assumptions,
        }
    }

    pub fn product(p_norm: PNorm, terms: Vec<BoundTerm>, assumptions: Vec<String>) -> Self {
        let value = terms.iter().map(|t| t.value).product();
        Self {
            p_norm,
            value,
            combine: TermCombine::Product,
            terms,
            assumptions,
        }
    }
}

fn term(name: impl Into<String>, value: f64) -> BoundTerm {
    BoundTerm {
        name: name.into(),
        value,
    }
}

// ---------------------------------------------------------------------------
// Attention bounds
// ---------------------------------------------------------------------------

/// Lip_inf upper bound for one SCSA head over `n` tokens.
pub fn scsa_bound_inf(params: &ScsaParams, n: usize) -> LipschitzBound {
    let nf = n as f64;
    let d = params.head_dim() as f64;
    let root_d = d.sqrt();
    let inv_root_eps = 1.0 / params.eps.sqrt();
    let nu = params.nu;
    let tau = params.tau;
    let wk = params.wk.inf_norm();
    let wq = params.wq.inf_norm();
    let wvt = params.wv.transpose().inf_norm();
    LipschitzBound::sum(
        PNorm::Inf,
        vec![
            term("N^2 sqrt(D) nu tau eps^-1/2 |W_K|_inf", nf * nf * root_d * nu * tau * inv_root_eps * wk),
            term("N sqrt(D) nu tau eps^-1/2 |W_Q|_inf", nf * root_d * nu * tau * inv_root_eps * wq),
            term("2 N nu eps^-1/2 |W_V^T|_inf", 2.0 * nf * nu * inv_root_eps * wvt),
        ],
        vec!["single head; D is the post-projection head dimension".into()],
    )
}

/// Lip_2 upper bound for one SCSA head over `n` tokens.
pub fn scsa_bound_2(params: &ScsaParams, n: usize) -> LipschitzBound {
    let nf = n as f64;
    let inv_root_eps = 1.0 / params.eps.sqrt();
    let nu = params.nu;
    let tau = params.tau;
    let wk = params.wk.spectral_norm(500, 1e-11).value;
    let wq = params.wq.spectral_norm(500, 1e-11).value;
    // |W^Vᵀ|_2 = |W^V|_2.
    let wv = params.wv.spectral_norm(500, 1e-11).value;
    LipschitzBound::sum(
        PNorm::Two,
        vec![
            term("2 N (N-1) nu tau eps^-1/2 |W_K|_2", 2.0 * nf * (nf - 1.0) * nu * tau * inv_root_eps * wk),
            term("2 (N-1) nu tau eps^-1/2 |W_Q|_2", 2.0 * (nf - 1.0) * nu * tau * inv_root_eps * wq),
            term("2 N nu eps^-1/2 |W_V^T|_2", 2.0 * nf * nu * inv_root_eps * wv),
        ],
        vec!["single head; D is the post-projection head dimension".into()],
    )
}

pub fn scsa_bound(params: &ScsaParams, n: usize, p: PNorm) -> LipschitzBound {
    match p {
        PNorm::Two => scsa_bound_2(params, n),
        PNorm::Inf => scsa_bound_inf(params, n),
    }
}

/// Multi-head bound: heads concatenate (constants add), the concatenation is
/// scaled by `1/K`, and the output projection multiplies on top.
pub fn multi_head_bound(heads: &[ScsaParams], w_out: &Tensor, n: usize, p: PNorm) -> LipschitzBound {
    let k = heads.len() as f64;
    let head_sum: f64 = heads.iter().map(|h| scsa_bound(h, n, p).value).sum();
    let proj = affine_bound(w_out, p).value;
    LipschitzBound::product(
        p,
        vec![
            term("1/K", 1.0 / k),
            term("sum of per-head bounds", head_sum),
            term("|W_out| as applied", proj),
        ],
        vec!["head concatenation bounded by the sum of head constants".into()],
    )
}

// ---------------------------------------------------------------------------
// Affine bound
// ---------------------------------------------------------------------------

/// Lipschitz constant of the affine map `x ↦ Wᵀx`: the largest singular
/// value for p=2, the max absolute row sum of the applied operator `Wᵀ` for
/// p=inf.
pub fn affine_bound(w: &Tensor, p: PNorm) -> LipschitzBound {
    let value = match p {
        PNorm::Two => w.spectral_norm(500, 1e-11).value,
        PNorm::Inf => w.transpose().inf_norm(),
    };
    LipschitzBound::sum(p, vec![term("operator norm", value)], Vec::new())
}

// ---------------------------------------------------------------------------
// Network bounds (residual product form and DropPath refinement)
// ---------------------------------------------------------------------------

/// Per-residual-block inputs for the network bound: stage layout, residual
/// weights, and branch Lipschitz constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkBoundInputs {
    /// Residual blocks per stage, `M_s`.
    pub stage_blocks: Vec<usize>,
    /// Residual weight per block (flattened across stages).
    pub alpha: Vec<f64>,
    /// Branch Lipschitz constant per block.
    pub lip_f: Vec<f64>,
    /// DropPath probability shared by all blocks.
    pub droppath_p: f64,
}

impl NetworkBoundInputs {
    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    /// `κ`: the largest branch Lipschitz constant.
    pub fn kappa(&self) -> f64 {
        self.lip_f.iter().fold(0.0, |m, v| m.max(*v))
    }

    fn validate(&self) -> Result<()> {
        let m = self.total_blocks();
        if self.alpha.len() != m || self.lip_f.len() != m {
            return Err(Error::InvalidConfig(format!(
                "alpha ({}) and lip_f ({}) must cover all {m} blocks",
                self.alpha.len(),
                self.lip_f.len()
            )));
        }
        if self.alpha.iter().any(|&a| a < 0.0) {
            return Err(Error::InvalidConfig("alpha entries must be nonnegative".into()));
        }
        if self.lip_f.iter().any(|&l| l < 0.0) {
            return Err(Error::InvalidConfig("lip_f entries must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.droppath_p) {
            return Err(Error::InvalidConfig(format!(
                "droppath_p {} out of [0,1]",
                self.droppath_p
            )));
        }
        Ok(())
    }
}

/// The product bound plus, when `α = 1/ΣM_s` uniformly, the `e^κ`
/// relaxation it is dominated by.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkBound {
    pub bound: LipschitzBound,
    pub exp_kappa: Option<f64>,
}

/// `Lip(F) <= Π_s Π_m (1 + α_{s,m} Lip(f_{s,m}))`.
pub fn network_bound(inputs: &NetworkBoundInputs) -> Result<NetworkBound> {
    inputs.validate()?;
    let terms: Vec<BoundTerm> = inputs
        .alpha
        .iter()
        .zip(&inputs.lip_f)
        .enumerate()
        .map(|(i, (&a, &l))| term(format!("block {i}: 1 + alpha*Lip(f)"), 1.0 + a * l))
        .collect();
    let m = inputs.total_blocks();
    let uniform_auto = m > 0
        && inputs
            .alpha
            .iter()
            .all(|&a| (a - 1.0 / m as f64).abs() <= 1e-12);
    let mut assumptions = Vec::new();
    let exp_kappa = if uniform_auto {
        let e_k = inputs.kappa().exp();
        assumptions.push(format!(
            "alpha = 1/{m} uniformly: product is dominated by exp(kappa) = {e_k}"
        ));
        Some(e_k)
    } else {
        None
    };
    Ok(NetworkBound {
        bound: LipschitzBound::product(PNorm::Two, terms, assumptions),
        exp_kappa,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropPathMode {
    /// Nothing dropped: the plain product bound.
    Worst,
    /// Each factor becomes `1 + (1-p) α Lip(f)`.
    Expected,
    /// One sampled drop mask.
    Sampled,
}

/// DropPath refinement of the network bound.
pub fn droppath_bound(
    inputs: &NetworkBoundInputs,
    mode: DropPathMode,
    rng: Option<&mut RngStream>,
) -> Result<LipschitzBound> {
    inputs.validate()?;
    let p = inputs.droppath_p;
    let factor = |i: usize, kept: f64| -> BoundTerm {
        term(
            format!("block {i}"),
            1.0 + kept * inputs.alpha[i] * inputs.lip_f[i],
        )
    };
    let terms: Vec<BoundTerm> = match mode {
        DropPathMode::Worst => (0..inputs.total_blocks()).map(|i| factor(i, 1.0)).collect(),
        DropPathMode::Expected => (0..inputs.total_blocks())
            .map(|i| factor(i, 1.0 - p))
            .collect(),
        DropPathMode::Sampled => {
            let rng = rng.ok_or_else(|| {
                Error::InvalidConfig("sampled droppath_bound needs an RngStream".into())
            })?;
            (0..inputs.total_blocks())
                .map(|i| {
                    let kept = if rng.uniform() < p { 0.0 } else { 1.0 };
                    factor(i, kept)
                })
                .collect()
        }
    };
    let assumption = match mode {
        DropPathMode::Worst => "worst case: no paths dropped".to_string(),
        DropPathMode::Expected => format!("factorwise expectation at p = {p}"),
        DropPathMode::Sampled => format!("one sampled drop mask at p = {p}"),
    };
    Ok(LipschitzBound::product(PNorm::Two, terms, vec![assumption]))
}

// ---------------------------------------------------------------------------
// Empirical estimation
// ---------------------------------------------------------------------------

/// Empirical Lipschitz lower-bound estimate: the max over global pair
/// ratios, local pair ratios, and finite-difference Jacobian norms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalEstimate {
    pub p_norm: PNorm,
    pub max_pair_ratio: f64,
    pub max_jac_norm: f64,
    pub n_pairs: usize,
    pub n_jac_points: usize,
    pub seed: u64,
    /// Set when the operation produced a non-finite output; the estimate is
    /// then unbounded, which is itself a certification verdict.
    pub diverged: bool,
}

impl EmpiricalEstimate {
    pub fn value(&self) -> f64 {
        if self.diverged {
            f64::INFINITY
        } else {
            self.max_pair_ratio.max(self.max_jac_norm)
        }
    }
}

/// Relative slack for the dominance comparison: empirical estimates carry
/// finite-difference rounding noise (~1e-11), which matters only where the
/// bound is exactly tight (identity maps, pure affine layers). A genuine
/// violation overshoots by orders of magnitude, not by 1e-9.
pub const DOMINANCE_REL_SLACK: f64 = 1e-9;

/// `a <= b` up to the dominance slack.
pub fn dominates(empirical: f64, theoretical: f64) -> bool {
    empirical <= theoretical * (1.0 + DOMINANCE_REL_SLACK) + 1e-12
}

/// Offset of the local-pair displacement, `‖δ‖ = 1e-4`.
const LOCAL_PAIR_RADIUS: f64 = 1e-4;
/// Step for finite-difference Jacobians.
const JAC_FD_STEP: f64 = 1e-5;
/// Jacobians are materialized up to this input dimension; beyond it, each
/// probe point takes directional-derivative norms instead (still a valid
/// lower bound on the operator norm).
const JAC_MATERIALIZE_DIM: usize = 640;
const JAC_FALLBACK_DIRECTIONS: usize = 8;

/// Finite-difference Jacobian operator norm of `f` at a chosen point — the
/// probe behind part (c) of the estimator, exposed for scans that need
/// control over where the Jacobian is taken (e.g. LayerNorm near the
/// constant manifold).
pub fn jacobian_norm_at<F>(f: &F, x: &Tensor, p: PNorm) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let shape = x.shape().to_vec();
    let mut eval = |coords: &[f64]| -> Result<Vec<f64>> {
        let t = Tensor::new(&shape, coords.to_vec())?;
        Ok(f(&t)?.into_data())
    };
    let jac = crate::autodiff::central_diff_jacobian(&mut eval, x.data(), JAC_FD_STEP)?;
    if !jac.all_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(operator_norm(&jac, p))
}

/// Estimate the Lipschitz constant of `f` from below.
///
/// Draws `n_pairs` global pairs from a Normal(0,1)/Normal(0,10) mixture,
/// `n_pairs` local pairs `(x, x+δ)` with `‖δ‖_p = 1e-4`, and
/// `n_jac_points` finite-difference Jacobian operator norms, and returns
/// the largest observed ratio. Every sample index owns its RNG substream,
/// so the result is independent of `threads`.
pub fn empirical_lipschitz<F>(
    f: &F,
    input_shape: &[usize],
    p: PNorm,
    n_pairs: usize,
    n_jac_points: usize,
    seed: u64,
    threads: usize,
) -> Result<EmpiricalEstimate>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if n_pairs < 1 {
        return Err(Error::InvalidConfig("empirical_lipschitz: n_pairs must be >= 1".into()));
    }
    let total = 2 * n_pairs + n_jac_points;
    let threads = threads.clamp(1, total.max(1));

    let worker = |index: usize| -> Result<(f64, bool)> {
        let mut rng = RngStream::new(seed, 0xe571_0000).substream(index as u64);
        let scale = if index % 2 == 0 { 1.0 } else { 10.0 };
        if index < n_pairs {
            // Global pair.
            let x1 = rng.normal_tensor(input_shape).scale(scale);
            let x2 = rng.normal_tensor(input_shape).scale(scale);
            let y1 = f(&x1)?;
            let y2 = f(&x2)?;
            if !y1.all_finite() || !y2.all_finite() {
                return Ok((0.0, true));
            }
            let den = flat_norm(&x1.sub(&x2)?, p);
            if den == 0.0 {
                return Ok((0.0, false));
            }
            Ok((flat_norm(&y1.sub(&y2)?, p) / den, false))
        } else if index < 2 * n_pairs {
            // Local pair: x and x + δ with ‖δ‖_p = LOCAL_PAIR_RADIUS.
            let x = rng.normal_tensor(input_shape).scale(scale);
            let mut delta = rng.normal_tensor(input_shape);
            let dn = flat_norm(&delta, p);
            if dn == 0.0 {
                return Ok((0.0, false));
            }
            delta = delta.scale(LOCAL_PAIR_RADIUS / dn);
            let x2 = x.add(&delta)?;
            let y1 = f(&x)?;
            let y2 = f(&x2)?;
            if !y1.all_finite() || !y2.all_finite() {
                return Ok((0.0, true));
            }
            Ok((flat_norm(&y1.sub(&y2)?, p) / LOCAL_PAIR_RADIUS, false))
        } else {
            // Finite-difference Jacobian operator norm at a random point.
            let x = rng.normal_tensor(input_shape).scale(scale);
            let dim: usize = input_shape.iter().product();
            if dim <= JAC_MATERIALIZE_DIM {
                let mut eval = |coords: &[f64]| -> Result<Vec<f64>> {
                    let t = Tensor::new(input_shape, coords.to_vec())?;
                    Ok(f(&t)?.into_data())
                };
                let jac = crate::autodiff::central_diff_jacobian(&mut eval, x.data(), JAC_FD_STEP)?;
                if !jac.all_finite() {
                    return Ok((0.0, true));
                }
                Ok((operator_norm(&jac, p), false))
            } else {
                // Directional lower bound: max_d ‖(f(x+hd) - f(x-hd))/2h‖.
                let mut best = 0.0f64;
                for _ in 0..JAC_FALLBACK_DIRECTIONS {
                    let mut d = rng.normal_tensor(input_shape);
                    let dn = flat_norm(&d, p);
                    if dn == 0.0 {
                        continue;
                    }
                    d = d.scale(1.0 / dn);
                    let yp = f(&x.add(&d.scale(JAC_FD_STEP))?)?;
                    let ym = f(&x.sub(&d.scale(JAC_FD_STEP))?)?;
                    if !yp.all_finite() || !ym.all_finite() {
                        return Ok((0.0, true));
                    }
                    let slope = flat_norm(&yp.sub(&ym)?, p) / (2.0 * JAC_FD_STEP);
                    best = best.max(slope);
                }
                Ok((best, false))
            }
        }
    };

    // Index-owned substreams make the reduction independent of chunking.
    let results: Vec<Result<(f64, bool)>> = if threads <= 1 {
        (0..total).map(worker).collect()
    } else {
        let chunk = total.div_ceil(threads);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for t in 0..threads {
                let lo = t * chunk;
                let hi = ((t + 1) * chunk).min(total);
                let worker = &worker;
                handles.push(scope.spawn(move || (lo..hi).map(worker).collect::<Vec<_>>()));
            }
            let mut all = Vec::with_capacity(total);
            for h in handles {
                all.extend(h.join().expect("estimator thread panicked"));
            }
            all
        })
    };

    let mut max_pair_ratio = 0.0f64;
    let mut max_jac_norm = 0.0f64;
    let mut diverged = false;
    for (index, r) in results.into_iter().enumerate() {
        let (value, div) = r?;
        diverged |= div;
        if index < 2 * n_pairs {
            max_pair_ratio = max_pair_ratio.max(value);
        } else {
            max_jac_norm = max_jac_norm.max(value);
        }
    }
    Ok(EmpiricalEstimate {
        p_norm: p,
        max_pair_ratio,
        max_jac_norm,
        n_pairs,
        n_jac_points,
        seed,
        diverged,
    })
}

// ---------------------------------------------------------------------------
// Whole-model certification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CertOptions {
    pub pairs: usize,
    pub jac_points: usize,
    pub seed: u64,
    pub norms: Vec<PNorm>,
    pub threads: usize,
}

impl Default for CertOptions {
    fn default() -> Self {
        Self {
            pairs: 1000,
            jac_points: 32,
            seed: 0,
            norms: vec![PNorm::Two, PNorm::Inf],
            threads: 1,
        }
    }
}

/// One named factor of the whole-model product bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerBound {
    pub layer: String,
    pub bound: LipschitzBound,
}

/// Theoretical vs empirical comparison under one norm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBoundReport {
    pub p_norm: PNorm,
    pub layers: Vec<LayerBound>,
    pub theoretical: f64,
    pub empirical: EmpiricalEstimate,
    /// `None` when the empirical estimate diverged.
    pub empirical_value: Option<f64>,
    pub dominance_pass: bool,
}

/// Serializable certification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub bounds: Vec<ModelBoundReport>,
    /// Theorem-2 view over the residual sub-modules only (2 per block).
    pub residual_network_bound: NetworkBound,
    pub gradcheck: GradCheckReport,
    pub pass: bool,
}

/// Per-layer factors of the Lemma-3 product for one norm. Fails on layers
/// with no finite bound.
pub fn model_layer_bounds(model: &Model, p: PNorm) -> Result<Vec<LayerBound>> {
    let config = &model.config;
    match config.norm_kind {
        NormKind::LayerNorm => return Err(Error::NonLipschitz("layer_norm".into())),
        NormKind::CenterNorm | NormKind::None => {}
    }
    if config.attn_kind == AttnKind::Dot {
        return Err(Error::NonLipschitz("dot_product_attention".into()));
    }

    let mut layers = Vec::new();
    let mut push = |name: String, bound: LipschitzBound| layers.push(LayerBound { layer: name, bound });

    push("patch_embed".into(), affine_bound(&model.patch_embed, p));

    let mut res = config.image_size / config.patch_size;
    for (si, stage) in model.stages.iter().enumerate() {
        if let Some(m) = &stage.merge {
            res /= 2;
            push(format!("stage{si}.merge"), affine_bound(m, p));
        }
        let n_tokens = res * res;
        for (bi, block) in stage.blocks.iter().enumerate() {
            let prefix = format!("stage{si}.block{bi}");
            // Depthwise conv: exact per-channel operator matrices,
            // block-diagonal over channels so the norm is the max.
            let c = block.conv.depthwise.shape()[0];
            let k = block.conv.depthwise.shape()[1];
            let mut dw = 0.0f64;
            for ch in 0..c {
                let kernel = &block.conv.depthwise.data()[ch * k * k..(ch + 1) * k * k];
                let op = crate::layers::conv::depthwise_operator_matrix(kernel, k, res, res);
                dw = dw.max(operator_norm(&op, p));
            }
            push(
                format!("{prefix}.conv.depthwise"),
                LipschitzBound::sum(p, vec![term("max channel operator norm", dw)], Vec::new()),
            );
            push(format!("{prefix}.conv.pointwise"), affine_bound(&block.conv.pointwise, p));

            let norm_factor = |params: &crate::layers::norm::NormParams| -> f64 {
                match config.norm_kind {
                    NormKind::CenterNorm => {
                        let d = params.dim() as f64;
                        let gamma_max = params.gamma.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                        match p {
                            PNorm::Two => gamma_max * d / (d - 1.0),
                            // Row sums of diag(γ)(D/(D-1))(I - 11ᵀ/D) are 2|γ_i|.
                            PNorm::Inf => 2.0 * gamma_max,
                        }
                    }
                    NormKind::None => 1.0,
                    NormKind::LayerNorm => unreachable!("rejected above"),
                }
            };

            let attn_lip = multi_head_bound(&block.attn_heads, &block.w_out, n_tokens, p).value;
            let ffn_lip = affine_bound(&block.ffn_w1, p).value
                * crate::layers::activation::activation_lipschitz(
                    crate::layers::activation::ActKind::Gelu,
                )
                * affine_bound(&block.ffn_w2, p).value;

            for (sub, lip, wrs, norm) in [
                ("attn", attn_lip, &block.wrs_attn, &block.norm_attn),
                ("ffn", ffn_lip, &block.wrs_ffn, &block.norm_ffn),
            ] {
                let nf = norm_factor(norm);
                let (factor, detail) = match config.norm_placement {
                    // Norm(x + α f(x)): the norm multiplies the whole block.
                    NormPlacement::PostResidual => (
                        nf * (1.0 + wrs.max_alpha() * lip),
                        vec![
                            term("norm factor", nf),
                            term("1 + max(alpha) * Lip(branch)", 1.0 + wrs.max_alpha() * lip),
                        ],
                    ),
                    // x + α f(Norm(x)): the norm feeds only the branch.
                    NormPlacement::PreBranch => (
                        1.0 + wrs.max_alpha() * nf * lip,
                        vec![term("1 + max(alpha) * norm * Lip(branch)", 1.0 + wrs.max_alpha() * nf * lip)],
                    ),
                };
                push(
                    format!("{prefix}.{sub}"),
                    LipschitzBound {
                        p_norm: p,
                        value: factor,
                        combine: TermCombine::Product,
                        terms: detail,
                        assumptions: vec![format!("branch Lipschitz bound {lip}")],
                    },
                );
            }
        }
    }
    // Global average pool over the final token grid.
    let n_final = (res * res) as f64;
    let pool = match p {
        PNorm::Two => 1.0 / n_final.sqrt(),
        PNorm::Inf => 1.0,
    };
    push("pool".into(), LipschitzBound::sum(p, vec![term("mean over positions", pool)], Vec::new()));
    push("head".into(), affine_bound(&model.head, p));
    Ok(layers)
}

/// Theorem-2 inputs for the model's residual sub-modules (two per block),
/// with branch constants taken under the 2-norm.
pub fn residual_bound_inputs(model: &Model) -> Result<NetworkBoundInputs> {
    let config = &model.config;
    let mut alpha = Vec::new();
    let mut lip_f = Vec::new();
    let mut res = config.image_size / config.patch_size;
    for stage in &model.stages {
        if stage.merge.is_some() {
            res /= 2;
        }
        let n_tokens = res * res;
        for block in &stage.blocks {
            let attn_lip = multi_head_bound(&block.attn_heads, &block.w_out, n_tokens, PNorm::Two).value;
            let ffn_lip = affine_bound(&block.ffn_w1, PNorm::Two).value
                * crate::layers::activation::activation_lipschitz(
                    crate::layers::activation::ActKind::Gelu,
                )
                * affine_bound(&block.ffn_w2, PNorm::Two).value;
            alpha.push(block.wrs_attn.max_alpha());
            lip_f.push(attn_lip);
            alpha.push(block.wrs_ffn.max_alpha());
            lip_f.push(ffn_lip);
        }
    }
    Ok(NetworkBoundInputs {
        stage_blocks: config.stage_depths.iter().map(|d| 2 * d).collect(),
        alpha,
        lip_f,
        droppath_p: config.droppath_p,
    })
}

/// Certify a model: per-layer closed-form bounds composed into the Lemma-3
/// product, checked for dominance against the whole-model empirical
/// estimate, plus a gradient-check summary.
///
/// Returns `Err` for configurations containing a layer with no finite bound
/// (LayerNorm, dot-product attention); dominance or gradcheck failures come
/// back as `pass = false` in the report.
pub fn certify_model(model: &Model, opts: &CertOptions) -> Result<CertReport> {
    let mut bounds = Vec::new();
    for &p in &opts.norms {
        let layers = model_layer_bounds(model, p)?;
        let theoretical: f64 = layers.iter().map(|l| l.bound.value).product();
        let forward = |image: &Tensor| -> Result<Tensor> {
            let logits = model.logits(image)?;
            Tensor::new(&[logits.len()], logits)
        };
        let sz = model.config.image_size;
        let empirical = empirical_lipschitz(
            &forward,
            &[sz, sz, 3],
            p,
            opts.pairs,
            opts.jac_points,
            opts.seed,
            opts.threads,
        )?;
        let empirical_value = (!empirical.diverged).then(|| empirical.value());
        let dominance_pass = dominates(empirical.value(), theoretical);
        bounds.push(ModelBoundReport {
            p_norm: p,
            layers,
            theoretical,
            empirical,
            empirical_value,
            dominance_pass,
        });
    }
    let residual_network_bound = network_bound(&residual_bound_inputs(model)?)?;
    let mut gc_rng = RngStream::new(opts.seed, 0x9c0d);
    let target = fd_target_for_model(model, &mut gc_rng)?;
    let gradcheck = finite_diff_check(target, 1e-5, 1e-4, &mut gc_rng)?;
    let pass = bounds.iter().all(|b| b.dominance_pass) && gradcheck.pass;
    Ok(CertReport {
        schema_version: 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: opts.seed,
        config: model.config.clone(),
        bounds,
        residual_network_bound,
        gradcheck,
        pass,
    })
}
