//! Scaled cosine-similarity attention (SCSA): forward pass, analytic
//! Jacobian, multi-head combination, reverse-mode gradients, and the
//! dot-product baseline used for instability demos.
//!
//! SCSA l2-normalizes each row of the query, key, AND value projections
//! with smoothing `ε`, applies a row softmax to `τ QKᵀ`, and scales the
//! output by `ν`. Normalizing all three projections is what keeps every
//! Jacobian block bounded, so the layer has a closed-form Lipschitz bound.

use crate::error::{Error, Result};
use crate::tensor::{dot, l2, Tensor};

/// Projection weights and scalars for one attention head. Weights are
/// `[D, D_h]` and applied as `xᵀW` per token row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScsaParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Output scale, positive.
    pub nu: f64,
    /// Logit scale, positive.
    pub tau: f64,
    /// Normalization smoothing, strictly positive; keeps the cosine
    /// similarity defined even for zero projections.
    pub eps: f64,
}

/// Default logit scale.
pub const DEFAULT_TAU: f64 = 12.0;
/// Default output scale.
pub const DEFAULT_NU: f64 = 1.0;
/// Default normalization smoothing: small enough not to perturb unit
/// normalization, large enough that `1/√ε` stays comfortably finite in the
/// bound arithmetic.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Full Jacobians are materialized only up to this many input coordinates;
/// larger instances should be checked through vector-Jacobian products.
pub const JACOBIAN_MATERIALIZE_LIMIT: usize = 4096;

impl ScsaParams {
    pub fn head_dim(&self) -> usize {
        self.wq.cols()
    }

    pub fn model_dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if !w.all_finite() {
                return Err(Error::NonFinite(format!("ScsaParams::{name}")));
            }
            if w.shape() != self.wq.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ScsaParams",
                    expected: format!("{:?}", self.wq.shape()),
                    got: format!("{name}: {:?}", w.shape()),
                });
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "eps must be strictly positive, got {}",
                self.eps
            )));
        }
        if self.nu < 0.0 || self.tau < 0.0 {
            return Err(Error::InvalidConfig("nu and tau must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Cached per-forward state: normalized projections, attention matrix, and
/// the raw projections/norms needed to assemble Jacobians and gradients.
#[derive(Debug, Clone)]
pub struct AttentionState {
    /// l2-row-normalized projections, `[N, D_h]`.
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Row-stochastic attention matrix, `[N, N]`.
    pub p: Tensor,
    /// Raw projections `xᵀW`, `[N, D_h]`.
    pub raw_q: Tensor,
    pub raw_k: Tensor,
    pub raw_v: Tensor,
    /// Per-row smoothing denominators `sqrt(‖xᵀW‖² + ε)`.
    pub norm_q: Vec<f64>,
    pub norm_k: Vec<f64>,
    pub norm_v: Vec<f64>,
}

/// Row softmax with max subtraction (exact by shift invariance).
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Jacobian of one softmax row: `diag(p) - pᵀp`.
pub fn softmax_jacobian(p_row: &[f64]) -> Tensor {
    let n = p_row.len();
    Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        if i == j {
            p_row[i] * (1.0 - p_row[i])
        } else {
            -p_row[i] * p_row[j]
        }
    })
}

fn normalized_projection(x: &Tensor, w: &Tensor, eps: f64) -> (Tensor, Tensor, Vec<f64>) {
    let n = x.rows();
    let dh = w.cols();
    let raw = x.matmul(w).expect("projection shapes checked by caller");
    let mut normed = raw.clone();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mut normed.data_mut()[i * dh..(i + 1) * dh];
        let denom = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        for v in row.iter_mut() {
            *v /= denom;
        }
        norms.push(denom);
    }
    (normed, raw, norms)
}

/// SCSA forward: `ν · softmax(τ QKᵀ) V` with l2-row-normalized Q, K, V.
/// Returns the output `[N, D_h]` and the state needed for Jacobian reuse.
pub fn scsa_forward(x: &Tensor, params: &ScsaParams) -> Result<(Tensor, AttentionState)> {
    params.validate()?;
    if x.shape().len() != 2 || x.cols() != params.model_dim() {
        return Err(Error::ShapeMismatch {
            op: "scsa_forward",
            expected: format!("[N, {}]", params.model_dim()),
            got: format!("{:?}", x.shape()),
        });
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("scsa_forward input".into()));
    }
    let n = x.rows();
    let (q, raw_q, norm_q) = normalized_projection(x, &params.wq, params.eps);
    let (k, raw_k, norm_k) = normalized_projection(x, &params.wk, params.eps);
    let (v, raw_v, norm_v) = normalized_projection(x, &params.wv, params.eps);

    let logits = q.matmul(&k.transpose())?.scale(params.tau);
    let mut p = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row = softmax_row(logits.row(i));
        p.row_mut(i).copy_from_slice(&row);
    }
    let out = p.matmul(&v)?.scale(params.nu);
    Ok((
        out,
        AttentionState {
            q,
            k,
            v,
            p,
            raw_q,
            raw_k,
            raw_v,
            norm_q,
            norm_k,
            norm_v,
        },
    ))
}

/// Jacobian of a normalized projection row with respect to its token:
/// `(1/n)(I - aaᵀ/n²) Wᵀ` where `a = Wᵀx` and `n = sqrt(‖a‖² + ε)`.
fn normalized_row_jacobian(w: &Tensor, raw_row: &[f64], norm: f64) -> Tensor {
    let dh = w.cols();
    let d = w.rows();
    let inv = 1.0 / norm;
    let inv3 = inv * inv * inv;
    // (I/n - a aᵀ/n³) Wᵀ; note (aᵀWᵀ)_c = (W a)_c, precomputed once.
    let wa = w.matvec(raw_row);
    let mut jac = Tensor::zeros(&[dh, d]);
    for r in 0..dh {
        let ar = raw_row[r];
        for c in 0..d {
            // (Wᵀ)[r][c] = w[c][r]
            jac.set(r, c, inv * w.get(c, r) - inv3 * ar * wa[c]);
        }
    }
    jac
}

/// Full SCSA Jacobian `[(N·D_h), (N·D)]` assembled from the closed-form
/// blocks
/// `J_ij = ντ Vᵀ P⁽ⁱ⁾ (E_ji Q) K̃_j + δ_ij ντ Vᵀ P⁽ⁱ⁾ K Q̃_i + ν P_ij Ṽ_j`,
/// with `P⁽ⁱ⁾ = diag(P_i:) - P_i:ᵀ P_i:` and `Q̃, K̃, Ṽ` the normalized
/// projection Jacobians.
pub fn scsa_jacobian(x: &Tensor, params: &ScsaParams) -> Result<Tensor> {
    let (_, state) = scsa_forward(x, params)?;
    scsa_jacobian_with_state(x, params, &state)
}

pub fn scsa_jacobian_with_state(
    x: &Tensor,
    params: &ScsaParams,
    state: &AttentionState,
) -> Result<Tensor> {
    let n = x.rows();
    let d = x.cols();
    let dh = params.head_dim();
    if n * d > JACOBIAN_MATERIALIZE_LIMIT {
        return Err(Error::InvalidConfig(format!(
            "refusing to materialize a {}x{} Jacobian (limit {} input coordinates); \
             use VJP probes instead",
            n * dh,
            n * d,
            JACOBIAN_MATERIALIZE_LIMIT
        )));
    }
    let nu = params.nu;
    let tau = params.tau;

    // Per-row normalized-projection Jacobians.
    let q_tilde: Vec<Tensor> = (0..n)
        .map(|i| normalized_row_jacobian(&params.wq, state.raw_q.row(i), state.norm_q[i]))
        .collect();
    let k_tilde: Vec<Tensor> = (0..n)
        .map(|j| normalized_row_jacobian(&params.wk, state.raw_k.row(j), state.norm_k[j]))
        .collect();
    let v_tilde: Vec<Tensor> = (0..n)
        .map(|j| normalized_row_jacobian(&params.wv, state.raw_v.row(j), state.norm_v[j]))
        .collect();

    let mut jac = Tensor::zeros(&[n * dh, n * d]);
    for i in 0..n {
        let p_i = softmax_jacobian(state.p.row(i));
        // Vᵀ P⁽ⁱ⁾ as [D_h, N]: column j is Σ_l v_l P⁽ⁱ⁾[l][j].
        let mut vt_pi = Tensor::zeros(&[dh, n]);
        for j in 0..n {
            for l in 0..n {
                let w = p_i.get(l, j);
                if w == 0.0 {
                    continue;
                }
                for r in 0..dh {
                    let cur = vt_pi.get(r, j);
                    vt_pi.set(r, j, cur + state.v.get(l, r) * w);
                }
            }
        }
        // Vᵀ P⁽ⁱ⁾ K: [D_h, D_h], used only for the diagonal block.
        let vt_pi_k = vt_pi.matmul(&state.k)?;
        for j in 0..n {
            let mut block = Tensor::zeros(&[dh, d]);
            // ν P_ij Ṽ_j
            block.add_scaled(&v_tilde[j], nu * state.p.get(i, j));
            // ντ (Vᵀ P⁽ⁱ⁾ e_j)(q_iᵀ K̃_j): outer product of u and r.
            let qi = state.q.row(i);
            let r_vec: Vec<f64> = (0..d)
                .map(|c| {
                    let mut acc = 0.0;
                    for s in 0..dh {
                        acc += qi[s] * k_tilde[j].get(s, c);
                    }
                    acc
                })
                .collect();
            for rr in 0..dh {
                let u = vt_pi.get(rr, j) * nu * tau;
                if u == 0.0 {
                    continue;
                }
                for cc in 0..d {
                    let cur = block.get(rr, cc);
                    block.set(rr, cc, cur + u * r_vec[cc]);
                }
            }
            // δ_ij ντ (Vᵀ P⁽ⁱ⁾ K) Q̃_i
            if i == j {
                let extra = vt_pi_k.matmul(&q_tilde[i])?;
                block.add_scaled(&extra, nu * tau);
            }
            for rr in 0..dh {
                for cc in 0..d {
                    jac.set(i * dh + rr, j * d + cc, block.get(rr, cc));
                }
            }
        }
    }
    Ok(jac)
}

/// Gradients of `scsa_forward` with respect to the input and parameters.
#[derive(Debug, Clone)]
pub struct ScsaGrads {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub nu: f64,
    pub tau: f64,
}

/// Reverse-mode pass through SCSA. `cotangent` has the output shape
/// `[N, D_h]`; returns the input gradient `[N, D]` and parameter gradients.
pub fn scsa_vjp(
    x: &Tensor,
    params: &ScsaParams,
    state: &AttentionState,
    cotangent: &Tensor,
) -> Result<(Tensor, ScsaGrads)> {
    let n = x.rows();
    let d = x.cols();
    let dh = params.head_dim();
    if cotangent.shape() != [n, dh] {
        return Err(Error::ShapeMismatch {
            op: "scsa_vjp",
            expected: format!("[{n}, {dh}]"),
            got: format!("{:?}", cotangent.shape()),
        });
    }
    if !cotangent.all_finite() {
        return Err(Error::NonFinite("scsa_vjp cotangent".into()));
    }
    let nu = params.nu;
    let tau = params.tau;

    // out = ν P V
    let pv = state.p.matmul(&state.v)?;
    let gnu: f64 = pv
        .data()
        .iter()
        .zip(cotangent.data())
        .map(|(a, b)| a * b)
        .sum();
    let gp = cotangent.matmul(&state.v.transpose())?.scale(nu);
    let gv_normed = state.p.transpose().matmul(cotangent)?.scale(nu);

    // Softmax backward per row: gL_i = P⁽ⁱ⁾ gP_i (P⁽ⁱ⁾ symmetric).
    let mut glogits = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let p_row = state.p.row(i);
        let g_row = gp.row(i);
        let pg: f64 = dot(p_row, g_row);
        let out = glogits.row_mut(i);
        for j in 0..n {
            out[j] = p_row[j] * (g_row[j] - pg);
        }
    }
    // logits = τ Q Kᵀ
    let gtau: f64 = {
        let qk = state.q.matmul(&state.k.transpose())?;
        qk.data()
            .iter()
            .zip(glogits.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let gq_normed = glogits.matmul(&state.k)?.scale(tau);
    let gk_normed = glogits.transpose().matmul(&state.q)?.scale(tau);

    // Backward through each row normalization q = a / sqrt(‖a‖² + ε):
    // ga = (g - q (q·g)) / n_row.
    let mut gx = Tensor::zeros(&[n, d]);
    let mut gwq = Tensor::zeros(params.wq.shape());
    let mut gwk = Tensor::zeros(params.wk.shape());
    let mut gwv = Tensor::zeros(params.wv.shape());
    let back_projection = |g_normed: &Tensor,
                               normed: &Tensor,
                               norms: &[f64],
                               w: &Tensor,
                               gw: &mut Tensor,
                               gx: &mut Tensor| {
        for i in 0..n {
            let g = g_normed.row(i);
            let q = normed.row(i);
            let qg = dot(q, g);
            let ga: Vec<f64> = (0..dh).map(|r| (g[r] - q[r] * qg) / norms[i]).collect();
            // a = Wᵀ x_i  =>  gx_i += W ga, gW += x_i gaᵀ
            let gxi = w.matvec(&ga);
            for (o, v) in gx.row_mut(i).iter_mut().zip(&gxi) {
                *o += v;
            }
            let xi = x.row(i);
            for rr in 0..d {
                if xi[rr] == 0.0 {
                    continue;
                }
                for cc in 0..dh {
                    let cur = gw.get(rr, cc);
                    gw.set(rr, cc, cur + xi[rr] * ga[cc]);
                }
            }
        }
    };
    back_projection(&gq_normed, &state.q, &state.norm_q, &params.wq, &mut gwq, &mut gx);
    back_projection(&gk_normed, &state.k, &state.norm_k, &params.wk, &mut gwk, &mut gx);
    back_projection(&gv_normed, &state.v, &state.norm_v, &params.wv, &mut gwv, &mut gx);

    Ok((
        gx,
        ScsaGrads {
            wq: gwq,
            wk: gwk,
            wv: gwv,
            nu: gnu,
            tau: gtau,
        },
    ))
}

/// Multi-head SCSA: concatenate per-head outputs, scale by `1/K`, then apply
/// the output projection (`Y = (1/K) C W_out`).
pub fn multi_head_scsa(
    x: &Tensor,
    heads: &[ScsaParams],
    w_out: &Tensor,
) -> Result<(Tensor, MhaState)> {
    if heads.is_empty() {
        return Err(Error::InvalidConfig("multi_head_scsa needs at least one head".into()));
    }
    let n = x.rows();
    let total: usize = heads.iter().map(|h| h.head_dim()).sum();
    if w_out.rows() != total {
        return Err(Error::ShapeMismatch {
            op: "multi_head_scsa",
            expected: format!("w_out rows {total}"),
            got: format!("{}", w_out.rows()),
        });
    }
    let mut concat = Tensor::zeros(&[n, total]);
    let mut states = Vec::with_capacity(heads.len());
    let mut offset = 0;
    for head in heads {
        let (out, state) = scsa_forward(x, head)?;
        let dh = head.head_dim();
        for i in 0..n {
            concat.data_mut()[i * total + offset..i * total + offset + dh]
                .copy_from_slice(out.row(i));
        }
        states.push(state);
        offset += dh;
    }
    let scale = 1.0 / heads.len() as f64;
    let out = concat.matmul(w_out)?.scale(scale);
    Ok((
        out,
        MhaState {
            concat,
            head_states: states,
        },
    ))
}

/// Cached multi-head state for the backward pass.
#[derive(Debug, Clone)]
pub struct MhaState {
    /// Concatenated head outputs before `1/K` scaling and projection.
    pub concat: Tensor,
    pub head_states: Vec<AttentionState>,
}

pub struct MhaGrads {
    pub heads: Vec<ScsaGrads>,
    pub w_out: Tensor,
}

pub fn multi_head_scsa_vjp(
    x: &Tensor,
    heads: &[ScsaParams],
    w_out: &Tensor,
    state: &MhaState,
    cotangent: &Tensor,
) -> Result<(Tensor, MhaGrads)> {
    let n = x.rows();
    let scale = 1.0 / heads.len() as f64;
    let gconcat = cotangent.matmul(&w_out.transpose())?.scale(scale);
    let gw_out = state.concat.transpose().matmul(cotangent)?.scale(scale);
    let mut gx = Tensor::zeros(x.shape());
    let mut grads = Vec::with_capacity(heads.len());
    let total = state.concat.cols();
    let mut offset = 0;
    for (head, hstate) in heads.iter().zip(&state.head_states) {
        let dh = head.head_dim();
        let mut ghead = Tensor::zeros(&[n, dh]);
        for i in 0..n {
            ghead.row_mut(i).copy_from_slice(
                &gconcat.data()[i * total + offset..i * total + offset + dh],
            );
        }
        let (gxi, ghead_params) = scsa_vjp(x, head, hstate, &ghead)?;
        gx.add_scaled(&gxi, 1.0);
        grads.push(ghead_params);
        offset += dh;
    }
    Ok((
        gx,
        MhaGrads {
            heads: grads,
            w_out: gw_out,
        },
    ))
}

/// Standard dot-product attention `softmax(XW^Q (XW^K)ᵀ / √D_h) XW^V`.
/// Not Lipschitz continuous; kept as the instability baseline.
pub fn dot_product_attention(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<(Tensor, DotAttnState)> {
    let n = x.rows();
    let dh = wq.cols();
    let q = x.matmul(wq)?;
    let k = x.matmul(wk)?;
    let v = x.matmul(wv)?;
    let logits = q.matmul(&k.transpose())?.scale(1.0 / (dh as f64).sqrt());
    let mut p = Tensor::zeros(&[n, n]);
    for i in 0..n {
        p.row_mut(i).copy_from_slice(&softmax_row(logits.row(i)));
    }
    let out = p.matmul(&v)?;
    Ok((out, DotAttnState { q, k, v, p }))
}

#[derive(Debug, Clone)]
pub struct DotAttnState {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub p: Tensor,
}

pub struct DotAttnGrads {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

pub fn dot_product_attention_vjp(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    state: &DotAttnState,
    cotangent: &Tensor,
) -> Result<(Tensor, DotAttnGrads)> {
    let n = x.rows();
    let dh = wq.cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let gp = cotangent.matmul(&state.v.transpose())?;
    let gv = state.p.transpose().matmul(cotangent)?;
    let mut glogits = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let p_row = state.p.row(i);
        let g_row = gp.row(i);
        let pg: f64 = dot(p_row, g_row);
        let out = glogits.row_mut(i);
        for j in 0..n {
            out[j] = p_row[j] * (g_row[j] - pg);
        }
    }
    let gq = glogits.matmul(&state.k)?.scale(scale);
    let gk = glogits.transpose().matmul(&state.q)?.scale(scale);
    let mut gx = gq.matmul(&wq.transpose())?;
    gx.add_scaled(&gk.matmul(&wk.transpose())?, 1.0);
    gx.add_scaled(&gv.matmul(&wv.transpose())?, 1.0);
    let gwq = x.transpose().matmul(&gq)?;
    let gwk = x.transpose().matmul(&gk)?;
    let gwv = x.transpose().matmul(&gv)?;
    Ok((gx, DotAttnGrads { wq: gwq, wk: gwk, wv: gwv }))
}

/// State invariant check used by tests: P rows sum to 1 within 1e-12 with
/// entries in [0,1]; q/k/v rows have l2 norm at most 1.
pub fn check_state_invariants(state: &AttentionState) -> Result<()> {
    let n = state.p.rows();
    for i in 0..n {
        let row = state.p.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::CertFailure(format!("P row {i} sums to {sum}")));
        }
        if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::CertFailure(format!("P row {i} out of [0,1]")));
        }
    }
    for (name, t) in [("q", &state.q), ("k", &state.k), ("v", &state.v)] {
        for i in 0..t.rows() {
            let norm = l2(t.row(i));
            if norm > 1.0 + 1e-12 {
                return Err(Error::CertFailure(format!("{name} row {i} norm {norm} > 1")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_params(rng: &mut RngStream, d: usize, dh: usize, nu: f64, tau: f64, eps: f64) -> ScsaParams {
        ScsaParams {
            wq: rng.normal_tensor(&[d, dh]),
            wk: rng.normal_tensor(&[d, dh]),
            wv: rng.normal_tensor(&[d, dh]),
            nu,
            tau,
            eps,
        }
    }

    #[test]
    fn single_token_output_is_scaled_value_row() {
        let mut rng = RngStream::new(1, 0);
        let params = random_params(&mut rng, 6, 4, 2.5, 9.0, 1e-6);
        let x = rng.normal_tensor(&[1, 6]);
        let (out, state) = scsa_forward(&x, &params).unwrap();
        assert_eq!(state.p.data(), &[1.0]);
        for j in 0..4 {
            assert!((out.get(0, j) - 2.5 * state.v.get(0, j)).abs() <= 1e-14);
        }
    }

    #[test]
    fn zero_tau_gives_uniform_attention() {
        let mut rng = RngStream::new(2, 0);
        let n = 5;
        let params = random_params(&mut rng, 6, 4, 1.0, 0.0, 1e-6);
        let x = rng.normal_tensor(&[n, 6]);
        let (out, state) = scsa_forward(&x, &params).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((state.p.get(i, j) - 1.0 / n as f64).abs() <= 1e-15);
            }
        }
        // Output row = ν * column mean of V.
        for j in 0..4 {
            let mean: f64 = (0..n).map(|i| state.v.get(i, j)).sum::<f64>() / n as f64;
            assert!((out.get(0, j) - mean).abs() <= 1e-14);
        }
    }

    #[test]
    fn output_rows_bounded_by_nu() {
        let mut rng = RngStream::new(3, 0);
        for trial in 0..100 {
            let n = 1 + trial % 7;
            let nu = 0.5 + (trial % 4) as f64;
            let params = random_params(&mut rng, 5, 3, nu, 12.0, 1e-6);
            let x = rng.normal_tensor(&[n, 5]);
            let (out, state) = scsa_forward(&x, &params).unwrap();
            check_state_invariants(&state).unwrap();
            for i in 0..n {
                assert!(l2(out.row(i)) <= nu + 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut rng = RngStream::new(4, 0);
        let params = random_params(&mut rng, 3, 3, 1.0, 12.0, 1e-6);
        let mut x = rng.normal_tensor(&[2, 3]);
        x.data_mut()[0] = f64::NAN;
        assert!(matches!(scsa_forward(&x, &params), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_jacobian_equality_case() {
        let j = softmax_jacobian(&[0.5, 0.5]);
        assert_eq!(j.data(), &[0.25, -0.25, -0.25, 0.25]);
        assert_eq!(j.inf_norm(), 0.5);
    }

    #[test]
    fn softmax_jacobian_deterministic_attention() {
        let j = softmax_jacobian(&[1.0, 0.0]);
        assert!(j.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_jacobian_rows_sum_to_zero() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| 3.0 * rng.normal()).collect();
            let p = softmax_row(&logits);
            let j = softmax_jacobian(&p);
            for i in 0..6 {
                let s: f64 = j.row(i).iter().sum();
                assert!(s.abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn softmax_jacobian_norm_bounds_vs_eigen_oracle() {
        let mut rng = RngStream::new(6, 0);
        for &n in &[2usize, 4, 8] {
            for _ in 0..50 {
                let logits: Vec<f64> = (0..n).map(|_| 4.0 * rng.normal()).collect();
                let p = softmax_row(&logits);
                let j = softmax_jacobian(&p);
                assert!(j.inf_norm() <= 0.5 + 1e-12);
                let lambda = jacobi_max_eigenvalue(&j);
                assert!(lambda <= (n as f64 - 1.0) / n as f64 + 1e-12);
                // Cross-check power iteration against the eigen oracle.
                let s = j.spectral_norm(2000, 1e-13).value;
                assert!((s - lambda).abs() <= 1e-8, "{s} vs {lambda}");
            }
        }
    }

    /// Cyclic Jacobi eigenvalue iteration for symmetric matrices
    /// (independent of the power-iteration implementation).
    fn jacobi_max_eigenvalue(m: &Tensor) -> f64 {
        let n = m.rows();
        let mut a = m.clone();
        for _sweep in 0..60 {
            let mut off = 0.0f64;
            for p in 0..n {
                for q in (p + 1)..n {
                    off = off.max(a.get(p, q).abs());
                }
            }
            if off < 1e-14 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-16 {
                        continue;
                    }
                    let theta = 0.5 * (2.0 * apq).atan2(a.get(p, p) - a.get(q, q));
                    let (c, s) = (theta.cos(), theta.sin());
                    for i in 0..n {
                        let aip = a.get(i, p);
                        let aiq = a.get(i, q);
                        a.set(i, p, c * aip + s * aiq);
                        a.set(i, q, -s * aip + c * aiq);
                    }
                    for i in 0..n {
                        let api = a.get(p, i);
                        let aqi = a.get(q, i);
                        a.set(p, i, c * api + s * aqi);
                        a.set(q, i, -s * api + c * aqi);
                    }
                }
            }
        }
        (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = RngStream::new(7, 0);
        let (n, d) = (4, 8);
        let params = random_params(&mut rng, d, d, 1.0, 12.0, 1e-6);
        let x = rng.normal_tensor(&[n, d]);
        let jac = scsa_jacobian(&x, &params).unwrap();
        let h = 1e-5;
        let mut fd = Tensor::zeros(&[n * d, n * d]);
        for col in 0..n * d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[col] += h;
            xm.data_mut()[col] -= h;
            let (fp, _) = scsa_forward(&xp, &params).unwrap();
            let (fm, _) = scsa_forward(&xm, &params).unwrap();
            for row in 0..n * d {
                fd.set(row, col, (fp.data()[row] - fm.data()[row]) / (2.0 * h));
            }
        }
        let diff = jac.sub(&fd).unwrap().frobenius_norm();
        let rel = diff / fd.frobenius_norm().max(1e-12);
        assert!(rel <= 1e-4, "relative Frobenius error {rel}");
    }

    #[test]
    fn single_token_jacobian_reduces_to_value_jacobian() {
        let mut rng = RngStream::new(8, 0);
        let d = 5;
        let params = random_params(&mut rng, d, d, 1.7, 12.0, 1e-6);
        let x = rng.normal_tensor(&[1, d]);
        let (_, state) = scsa_forward(&x, &params).unwrap();
        let jac = scsa_jacobian_with_state(&x, &params, &state).unwrap();
        let v_tilde = normalized_row_jacobian(&params.wv, state.raw_v.row(0), state.norm_v[0]);
        for r in 0..d {
            for c in 0..d {
                assert!((jac.get(r, c) - 1.7 * v_tilde.get(r, c)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn jacobian_materialization_limit_enforced() {
        let mut rng = RngStream::new(9, 0);
        let params = random_params(&mut rng, 64, 64, 1.0, 12.0, 1e-6);
        let x = rng.normal_tensor(&[65, 64]);
        assert!(scsa_jacobian(&x, &params).is_err());
    }

    #[test]
    fn scale_equivariance_of_normalization() {
        let mut rng = RngStream::new(10, 0);
        let params = random_params(&mut rng, 6, 4, 1.0, 12.0, 1e-12);
        let x = rng.normal_tensor(&[3, 6]);
        let (_, s1) = scsa_forward(&x, &params).unwrap();
        let (_, s2) = scsa_forward(&x.scale(1e3), &params).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((s1.q.get(i, j) - s2.q.get(i, j)).abs() <= 1e-6);
                assert!((s1.k.get(i, j) - s2.k.get(i, j)).abs() <= 1e-6);
                assert!((s1.v.get(i, j) - s2.v.get(i, j)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn multi_head_single_head_is_plain_scsa() {
        let mut rng = RngStream::new(11, 0);
        let d = 6;
        let params = random_params(&mut rng, d, d, 1.0, 12.0, 1e-6);
        let x = rng.normal_tensor(&[4, d]);
        let (single, _) = scsa_forward(&x, &params).unwrap();
        let (multi, _) = multi_head_scsa(&x, &[params], &Tensor::eye(d)).unwrap();
        for (a, b) in multi.data().iter().zip(single.data()) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn two_identical_heads_halve_each_slice() {
        let mut rng = RngStream::new(12, 0);
        let d = 3;
        let params = random_params(&mut rng, d, d, 1.0, 12.0, 1e-6);
        let x = rng.normal_tensor(&[4, d]);
        let (single, _) = scsa_forward(&x, &params).unwrap();
        let heads = vec![params.clone(), params];
        let (multi, _) = multi_head_scsa(&x, &heads, &Tensor::eye(2 * d)).unwrap();
        for i in 0..4 {
            for j in 0..d {
                assert!((multi.get(i, j) - 0.5 * single.get(i, j)).abs() <= 1e-14);
                assert!((multi.get(i, d + j) - 0.5 * single.get(i, j)).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn dot_product_single_token_is_projection() {
        let mut rng = RngStream::new(13, 0);
        let d = 5;
        let (wq, wk, wv) = (
            rng.normal_tensor(&[d, d]),
            rng.normal_tensor(&[d, d]),
            rng.normal_tensor(&[d, d]),
        );
        let x = rng.normal_tensor(&[1, d]);
        let (out, _) = dot_product_attention(&x, &wq, &wk, &wv).unwrap();
        let expect = x.matmul(&wv).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn dot_product_zero_input_is_zero() {
        let mut rng = RngStream::new(14, 0);
        let d = 4;
        let (wq, wk, wv) = (
            rng.normal_tensor(&[d, d]),
            rng.normal_tensor(&[d, d]),
            rng.normal_tensor(&[d, d]),
        );
        let x = Tensor::zeros(&[3, d]);
        let (out, _) = dot_product_attention(&x, &wq, &wk, &wv).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dot_product_matches_naive_oracle() {
        let mut rng = RngStream::new(15, 0);
        let (n, d, dh) = (5, 4, 3);
        let (wq, wk, wv) = (
            rng.normal_tensor(&[d, dh]),
            rng.normal_tensor(&[d, dh]),
            rng.normal_tensor(&[d, dh]),
        );
        let x = rng.normal_tensor(&[n, d]);
        let (out, _) = dot_product_attention(&x, &wq, &wk, &wv).unwrap();
        // Naive per-row oracle.
        let q = x.matmul(&wq).unwrap();
        let k = x.matmul(&wk).unwrap();
        let v = x.matmul(&wv).unwrap();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| dot(q.row(i), k.row(j)) / (dh as f64).sqrt())
                .collect();
            let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - maxv).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += exps[j] / z * v.get(j, c);
                }
                assert!((out.get(i, c) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scsa_vjp_matches_finite_differences() {
        let mut rng = RngStream::new(16, 0);
        let (n, d, dh) = (3, 5, 4);
        let params = random_params(&mut rng, d, dh, 1.3, 12.0, 1e-6);
        let x = rng.normal_tensor(&[n, d]);
        let g = rng.normal_tensor(&[n, dh]);
        let (_, state) = scsa_forward(&x, &params).unwrap();
        let (gx, grads) = scsa_vjp(&x, &params, &state, &g).unwrap();
        let h = 1e-5;
        let loss = |x: &Tensor, p: &ScsaParams| -> f64 {
            let (out, _) = scsa_forward(x, p).unwrap();
            out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &params) - loss(&xm, &params)) / (2.0 * h);
            assert!(rel(gx.data()[idx], fd) <= 1e-4, "input coord {idx}");
        }
        for idx in 0..params.wq.len() {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp.wq.data_mut()[idx] += h;
            pm.wq.data_mut()[idx] -= h;
            let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            assert!(rel(grads.wq.data()[idx], fd) <= 1e-4, "wq coord {idx}");
        }
        // Scalar parameters.
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp.nu += h;
        pm.nu -= h;
        let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
        assert!(rel(grads.nu, fd) <= 1e-6);
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp.tau += h;
        pm.tau -= h;
        let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
        assert!(rel(grads.tau, fd) <= 1e-5);
    }

    #[test]
    fn dot_attention_vjp_matches_finite_differences() {
        let mut rng = RngStream::new(17, 0);
        let (n, d, dh) = (3, 4, 4);
        let (wq, wk, wv) = (
            rng.normal_tensor(&[d, dh]),
            rng.normal_tensor(&[d, dh]),
            rng.normal_tensor(&[d, dh]),
        );
        let x = rng.normal_tensor(&[n, d]);
        let g = rng.normal_tensor(&[n, dh]);
        let (_, state) = dot_product_attention(&x, &wq, &wk, &wv).unwrap();
        let (gx, grads) = dot_product_attention_vjp(&x, &wq, &wk, &wv, &state, &g).unwrap();
        let loss = |x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor| -> f64 {
            let (out, _) = dot_product_attention(x, wq, wk, wv).unwrap();
            out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (loss(&xp, &wq, &wk, &wv) - loss(&xm, &wq, &wk, &wv)) / (2.0 * h);
            assert!(rel(gx.data()[idx], fd) <= 1e-4);
        }
        for idx in 0..wk.len() {
            let mut p = wk.clone();
            let mut m = wk.clone();
            p.data_mut()[idx] += h;
            m.data_mut()[idx] -= h;
            let fd = (loss(&x, &wq, &p, &wv) - loss(&x, &wq, &m, &wv)) / (2.0 * h);
            assert!(rel(grads.wk.data()[idx], fd) <= 1e-4);
        }
    }
}
