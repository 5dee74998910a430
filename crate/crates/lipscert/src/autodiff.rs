//! Finite-difference verification harness for the analytic reverse-mode
//! gradients implemented alongside each layer.
//!
//! Gradients in this crate are hand-written per-layer VJPs composed by an
//! explicit stack of layer applications, so each backward formula is
//! individually checkable: the harness compares a VJP against central
//! differences coordinate by coordinate, switching to random probe
//! directions above 10^4 coordinates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Per-parameter gradients keyed by parameter path, plus the input gradient.
#[derive(Debug, Clone)]
pub struct GradRecord {
    pub input: Tensor,
    pub params: BTreeMap<String, Tensor>,
}

/// Outcome of one finite-difference check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub step: f64,
    pub tol: f64,
    pub pass: bool,
    pub coords_checked: usize,
}

/// Relative error metric used by every check: `|a-b| / max(|a|,|b|,1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Above this many coordinates the harness switches from exhaustive central
/// differences to random probe directions.
pub const EXHAUSTIVE_COORD_LIMIT: usize = 10_000;

const PROBE_DIRECTIONS: usize = 16;
const RANDOM_COTANGENTS: usize = 8;

/// One differentiable target: a forward map over flattened coordinates and
/// its VJP `(x, cotangent) -> grad_x`.
pub struct FdTarget<'a> {
    pub name: String,
    pub f: Box<dyn FnMut(&[f64]) -> Result<Vec<f64>> + 'a>,
    pub vjp: Box<dyn FnMut(&[f64], &[f64]) -> Result<Vec<f64>> + 'a>,
    pub x0: Vec<f64>,
}

/// Central-difference Jacobian of `f` at `x0`, one column per coordinate.
pub fn central_diff_jacobian(
    f: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    x0: &[f64],
    step: f64,
) -> Result<Tensor> {
    let n = x0.len();
    let out_dim = f(x0)?.len();
    let mut jac = Tensor::zeros(&[out_dim, n]);
    let mut xp = x0.to_vec();
    for col in 0..n {
        let orig = xp[col];
        xp[col] = orig + step;
        let fp = f(&xp)?;
        xp[col] = orig - step;
        let fm = f(&xp)?;
        xp[col] = orig;
        for row in 0..out_dim {
            jac.set(row, col, (fp[row] - fm[row]) / (2.0 * step));
        }
    }
    Ok(jac)
}

/// Check a VJP against central differences. Exhaustive over coordinates up
/// to [`EXHAUSTIVE_COORD_LIMIT`], random probe directions beyond that.
pub fn finite_diff_check(
    mut target: FdTarget,
    step: f64,
    tol: f64,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::InvalidConfig("finite_diff_check: step must be > 0".into()));
    }
    let n = target.x0.len();
    let out_dim = (target.f)(&target.x0)?.len();
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;

    if n <= EXHAUSTIVE_COORD_LIMIT {
        // Richardson-extrapolated central differences: (4 D(h/2) - D(h)) / 3
        // cancels the h² truncation term, so the comparison is limited by
        // rounding rather than curvature.
        let jac_h = central_diff_jacobian(target.f.as_mut(), &target.x0, step)?;
        let jac_h2 = central_diff_jacobian(target.f.as_mut(), &target.x0, step / 2.0)?;
        let jac = jac_h2.scale(4.0 / 3.0).sub(&jac_h.scale(1.0 / 3.0))?;
        // Compare VJP contractions against the FD Jacobian, one gradient
        // vector per cotangent (relative error in the Frobenius sense; a
        // per-coordinate quotient would be dominated by FD rounding noise
        // on coordinates whose true gradient is near zero). Small outputs
        // get every basis cotangent, covering each Jacobian row; larger
        // ones get random cotangents.
        let cotangents: Vec<Vec<f64>> = if out_dim <= 32 {
            (0..out_dim)
                .map(|i| {
                    let mut e = vec![0.0; out_dim];
                    e[i] = 1.0;
                    e
                })
                .collect()
        } else {
            (0..RANDOM_COTANGENTS)
                .map(|_| (0..out_dim).map(|_| rng.normal()).collect())
                .collect()
        };
        for g in &cotangents {
            let analytic = (target.vjp)(&target.x0, g)?;
            if analytic.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "finite_diff_check",
                    expected: format!("gradient of length {n}"),
                    got: format!("{}", analytic.len()),
                });
            }
            let mut diff_sq = 0.0;
            let mut an_sq = 0.0;
            let mut fd_sq = 0.0;
            for col in 0..n {
                let mut fd = 0.0;
                for row in 0..out_dim {
                    fd += g[row] * jac.get(row, col);
                }
                diff_sq += (analytic[col] - fd) * (analytic[col] - fd);
                an_sq += analytic[col] * analytic[col];
                fd_sq += fd * fd;
                coords += 1;
            }
            let rel = diff_sq.sqrt() / an_sq.sqrt().max(fd_sq.sqrt()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    } else {
        // Directional probes: compare <vjp(x, g), d> against the central
        // difference of <g, f(x + t d)> at t = 0.
        for _ in 0..PROBE_DIRECTIONS {
            let g: Vec<f64> = (0..out_dim).map(|_| rng.normal()).collect();
            let mut d: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut d {
                *v /= norm;
            }
            let analytic_grad = (target.vjp)(&target.x0, &g)?;
            let analytic: f64 = analytic_grad.iter().zip(&d).map(|(a, b)| a * b).sum();
            let mut directional = |s: f64| -> Result<f64> {
                let mut xp = target.x0.clone();
                let mut xm = target.x0.clone();
                for i in 0..n {
                    xp[i] += s * d[i];
                    xm[i] -= s * d[i];
                }
                let fp = (target.f)(&xp)?;
                let fm = (target.f)(&xm)?;
                let lp: f64 = fp.iter().zip(&g).map(|(a, b)| a * b).sum();
                let lm: f64 = fm.iter().zip(&g).map(|(a, b)| a * b).sum();
                Ok((lp - lm) / (2.0 * s))
            };
            let fd = (4.0 * directional(step / 2.0)? - directional(step)?) / 3.0;
            max_rel = max_rel.max(rel_err(analytic, fd));
            coords += 1;
        }
    }

    Ok(GradCheckReport {
        op: target.name,
        max_rel_err: max_rel,
        step,
        tol,
        pass: max_rel <= tol,
        coords_checked: coords,
    })
}

/// Run a list of targets and fold them into one report (worst error wins).
pub fn finite_diff_check_all(
    targets: Vec<FdTarget>,
    name: &str,
    step: f64,
    tol: f64,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    let mut max_rel = 0.0f64;
    let mut coords = 0;
    for target in targets {
        let r = finite_diff_check(target, step, tol, rng)?;
        max_rel = max_rel.max(r.max_rel_err);
        coords += r.coords_checked;
    }
    Ok(GradCheckReport {
        op: name.to_string(),
        max_rel_err: max_rel,
        step,
        tol,
        pass: max_rel <= tol,
        coords_checked: coords,
    })
}

/// Names accepted by [`registry_check`].
pub const REGISTRY_MODULES: &[&str] = &[
    "affine",
    "centernorm",
    "layernorm",
    "sigmoid",
    "tanh",
    "relu",
    "gelu",
    "wrs",
    "conv",
    "scsa",
    "dot",
    "mha",
    "model",
];

/// Gradient-check registry backing `lipscert gradcheck --module NAME`:
/// builds a seeded random instance of the named operation (`n` tokens or
/// spatial extent, `d` channels) and checks input and parameter gradients.
pub fn registry_check(
    module: &str,
    n: usize,
    d: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed, 0x6ad);
    let mut check_rng = RngStream::new(seed, 0x6ae);
    let targets = build_targets(module, n, d, &mut rng)?;
    finite_diff_check_all(targets, module, step, tol, &mut check_rng)
}

fn build_targets(
    module: &str,
    n: usize,
    d: usize,
    rng: &mut RngStream,
) -> Result<Vec<FdTarget<'static>>> {
    use crate::layers::activation::{activation, activation_derivative, ActKind};
    use crate::layers::conv::{conv_block, depthwise_vjp, pointwise_vjp, ConvBlockParams};
    use crate::layers::norm::{center_norm, center_norm_vjp, layer_norm, layer_norm_vjp, NormParams};
    use crate::layers::residual::{wrs_vjp, WrsParams};

    let d = d.max(2);
    let n = n.max(1);
    let mut targets: Vec<FdTarget<'static>> = Vec::new();

    match module {
        "affine" => {
            let w = rng.normal_tensor(&[d, d]);
            let x = rng.normal_tensor(&[d]);
            {
                let (wf, wv) = (w.clone(), w.clone());
                targets.push(FdTarget {
                    name: "affine/input".into(),
                    f: Box::new(move |xs| Ok(wf.matvec_t(xs))),
                    vjp: Box::new(move |_, g| Ok(wv.matvec(g))),
                    x0: x.data().to_vec(),
                });
            }
            {
                let (xf, xv) = (x.clone(), x);
                let shape = [d, d];
                targets.push(FdTarget {
                    name: "affine/weight".into(),
                    f: Box::new(move |wflat| {
                        Ok(Tensor::new(&shape, wflat.to_vec())?.matvec_t(xf.data()))
                    }),
                    vjp: Box::new(move |_, g| {
                        let mut gw = vec![0.0; d * d];
                        for i in 0..d {
                            for j in 0..d {
                                gw[i * d + j] = xv.data()[i] * g[j];
                            }
                        }
                        Ok(gw)
                    }),
                    x0: w.data().to_vec(),
                });
            }
        }
        "centernorm" | "layernorm" => {
            let layernorm = module == "layernorm";
            let mut params = NormParams::identity(d);
            rng.fill_normal(&mut params.gamma);
            rng.fill_normal(&mut params.beta);
            let x = rng.normal_tensor(&[d]);
            let fwd = move |x: &Tensor, p: &NormParams| -> Result<Tensor> {
                if layernorm {
                    layer_norm(x, p, false)
                } else {
                    center_norm(x, p)
                }
            };
            let bwd = move |x: &Tensor, p: &NormParams, g: &Tensor| {
                if layernorm {
                    layer_norm_vjp(x, p, g, false)
                } else {
                    center_norm_vjp(x, p, g)
                }
            };
            {
                let p = params.clone();
                let pv = params.clone();
                targets.push(FdTarget {
                    name: format!("{module}/input"),
                    f: Box::new(move |xs| Ok(fwd(&Tensor::vector(xs), &p)?.into_data())),
                    vjp: Box::new(move |xs, g| {
                        let (gx, _, _) = bwd(&Tensor::vector(xs), &pv, &Tensor::vector(g))?;
                        Ok(gx.into_data())
                    }),
                    x0: x.data().to_vec(),
                });
            }
            {
                let (x1, x2) = (x.clone(), x.clone());
                let (p1, p2) = (params.clone(), params.clone());
                targets.push(FdTarget {
                    name: format!("{module}/gamma"),
                    f: Box::new(move |gamma| {
                        let mut p = p1.clone();
                        p.gamma = gamma.to_vec();
                        Ok(fwd(&x1, &p)?.into_data())
                    }),
                    vjp: Box::new(move |gamma, g| {
                        let mut p = p2.clone();
                        p.gamma = gamma.to_vec();
                        let (_, ggamma, _) = bwd(&x2, &p, &Tensor::vector(g))?;
                        Ok(ggamma)
                    }),
                    x0: params.gamma.clone(),
                });
            }
            {
                let x1 = x;
                let (p1, p2) = (params.clone(), params.clone());
                let x3 = x1.clone();
                targets.push(FdTarget {
                    name: format!("{module}/beta"),
                    f: Box::new(move |beta| {
                        let mut p = p1.clone();
                        p.beta = beta.to_vec();
                        Ok(fwd(&x1, &p)?.into_data())
                    }),
                    vjp: Box::new(move |beta, g| {
                        let mut p = p2.clone();
                        p.beta = beta.to_vec();
                        let (_, _, gbeta) = bwd(&x3, &p, &Tensor::vector(g))?;
                        Ok(gbeta)
                    }),
                    x0: params.beta,
                });
            }
        }
        "sigmoid" | "tanh" | "relu" | "gelu" => {
            let kind = ActKind::parse(module).unwrap();
            let mut x = rng.normal_tensor(&[d]);
            if kind == ActKind::Relu {
                // Keep a margin away from the kink; the check excludes
                // non-differentiable points by construction.
                for v in x.data_mut() {
                    if v.abs() < 0.1 {
                        *v = 0.1 * v.signum().max(0.0).max(1.0);
                    }
                }
            }
            targets.push(FdTarget {
                name: format!("{module}/input"),
                f: Box::new(move |xs| Ok(activation(kind, &Tensor::vector(xs)).into_data())),
                vjp: Box::new(move |xs, g| {
                    let deriv = activation_derivative(kind, &Tensor::vector(xs));
                    Ok(deriv.data().iter().zip(g).map(|(d, g)| d * g).collect())
                }),
                x0: x.data().to_vec(),
            });
        }
        "wrs" => {
            let x = rng.normal_tensor(&[d]);
            let f_out = rng.normal_tensor(&[d]);
            let mut alpha = vec![0.0; d];
            rng.fill_normal(&mut alpha);
            let params = WrsParams {
                alpha: alpha.clone(),
                drop_prob: 0.0,
            };
            // Kept path only: the dropped path is the identity and is not a
            // differentiability question.
            let apply = |x: &Tensor, f: &Tensor, p: &WrsParams| -> Result<Tensor> {
                let mut out = x.clone();
                for j in 0..x.len() {
                    out.data_mut()[j] += p.alpha[j % p.alpha.len()] * f.data()[j];
                }
                Ok(out)
            };
            {
                let (ff, pf) = (f_out.clone(), params.clone());
                let (fv, pv) = (f_out.clone(), params.clone());
                let xv = x.clone();
                targets.push(FdTarget {
                    name: "wrs/input".into(),
                    f: Box::new(move |xs| Ok(apply(&Tensor::vector(xs), &ff, &pf)?.into_data())),
                    vjp: Box::new(move |_, g| {
                        let (gx, _, _) = wrs_vjp(&xv, &fv, &pv, &Tensor::vector(g))?;
                        Ok(gx.into_data())
                    }),
                    x0: x.data().to_vec(),
                });
            }
            {
                let (xf, pf) = (x.clone(), params.clone());
                let (xv, pv, fv) = (x.clone(), params.clone(), f_out.clone());
                targets.push(FdTarget {
                    name: "wrs/branch".into(),
                    f: Box::new(move |fs| Ok(apply(&xf, &Tensor::vector(fs), &pf)?.into_data())),
                    vjp: Box::new(move |_, g| {
                        let (_, gf, _) = wrs_vjp(&xv, &fv, &pv, &Tensor::vector(g))?;
                        Ok(gf.into_data())
                    }),
                    x0: f_out.data().to_vec(),
                });
            }
            {
                let (xf, ff) = (x.clone(), f_out.clone());
                let (xv, fv) = (x, f_out);
                targets.push(FdTarget {
                    name: "wrs/alpha".into(),
                    f: Box::new(move |al| {
                        let p = WrsParams {
                            alpha: al.to_vec(),
                            drop_prob: 0.0,
                        };
                        Ok(apply(&xf, &ff, &p)?.into_data())
                    }),
                    vjp: Box::new(move |al, g| {
                        let p = WrsParams {
                            alpha: al.to_vec(),
                            drop_prob: 0.0,
                        };
                        let (_, _, galpha) = wrs_vjp(&xv, &fv, &p, &Tensor::vector(g))?;
                        Ok(galpha)
                    }),
                    x0: alpha,
                });
            }
        }
        "conv" => {
            let (h, w) = (n.clamp(3, 5), n.clamp(3, 5));
            let c = d.min(4);
            let x = rng.normal_tensor(&[h, w, c]);
            let params = ConvBlockParams {
                depthwise: rng.normal_tensor(&[c, 7, 7]),
                pointwise: rng.normal_tensor(&[c, c]),
            };
            {
                let (pf, pv) = (params.clone(), params.clone());
                let shape = [h, w, c];
                let xv = x.clone();
                targets.push(FdTarget {
                    name: "conv/input".into(),
                    f: Box::new(move |xs| {
                        Ok(conv_block(&Tensor::new(&shape, xs.to_vec())?, &pf)?.into_data())
                    }),
                    vjp: Box::new(move |_, g| {
                        // Backward through pointwise then depthwise.
                        let mid = crate::layers::conv::depthwise_forward(&xv, &pv.depthwise)?;
                        let gt = Tensor::new(&[h, w, c], g.to_vec())?;
                        let (gmid, _) = pointwise_vjp(&mid, &pv.pointwise, &gt)?;
                        let (gx, _) = depthwise_vjp(&xv, &pv.depthwise, &gmid)?;
                        Ok(gx.into_data())
                    }),
                    x0: x.data().to_vec(),
                });
            }
            {
                let (xf, pf) = (x.clone(), params.clone());
                let (xv, pv) = (x.clone(), params.clone());
                let kshape = [c, 7, 7];
                targets.push(FdTarget {
                    name: "conv/depthwise".into(),
                    f: Box::new(move |ks| {
                        let p = ConvBlockParams {
                            depthwise: Tensor::new(&kshape, ks.to_vec())?,
                            pointwise: pf.pointwise.clone(),
                        };
                        Ok(conv_block(&xf, &p)?.into_data())
                    }),
                    vjp: Box::new(move |ks, g| {
                        let kt = Tensor::new(&kshape, ks.to_vec())?;
                        let mid = crate::layers::conv::depthwise_forward(&xv, &kt)?;
                        let gt = Tensor::new(&[h, w, c], g.to_vec())?;
                        let (gmid, _) = pointwise_vjp(&mid, &pv.pointwise, &gt)?;
                        let (_, gk) = depthwise_vjp(&xv, &kt, &gmid)?;
                        Ok(gk.into_data())
                    }),
                    x0: params.depthwise.data().to_vec(),
                });
            }
            {
                let (xf, pf) = (x.clone(), params.clone());
                let (xv, pv) = (x, params.clone());
                targets.push(FdTarget {
                    name: "conv/pointwise".into(),
                    f: Box::new(move |ws| {
                        let p = ConvBlockParams {
                            depthwise: pf.depthwise.clone(),
                            pointwise: Tensor::new(&[c, c], ws.to_vec())?,
                        };
                        Ok(conv_block(&xf, &p)?.into_data())
                    }),
                    vjp: Box::new(move |ws, g| {
                        let wt = Tensor::new(&[c, c], ws.to_vec())?;
                        let mid = crate::layers::conv::depthwise_forward(&xv, &pv.depthwise)?;
                        let gt = Tensor::new(&[h, w, c], g.to_vec())?;
                        let (_, gw) = pointwise_vjp(&mid, &wt, &gt)?;
                        Ok(gw.into_data())
                    }),
                    x0: params.pointwise.data().to_vec(),
                });
            }
        }
        "scsa" => {
            targets.extend(scsa_targets(n, d, rng)?);
        }
        "dot" => {
            targets.extend(dot_targets(n, d, rng)?);
        }
        "mha" => {
            targets.extend(mha_targets(n, d, rng)?);
        }
        "model" => {
            targets.extend(crate::model::gradcheck_targets(rng)?);
        }
        _ => {
            return Err(Error::InvalidConfig(format!("unknown module: {module}")));
        }
    }
    Ok(targets)
}

fn scsa_targets(n: usize, d: usize, rng: &mut RngStream) -> Result<Vec<FdTarget<'static>>> {
    use crate::attention::{scsa_forward, scsa_vjp, ScsaParams};

    let params = ScsaParams {
        wq: rng.normal_tensor(&[d, d]),
        wk: rng.normal_tensor(&[d, d]),
        wv: rng.normal_tensor(&[d, d]),
        nu: 1.0,
        tau: 12.0,
        eps: 1e-6,
    };
    let x = rng.normal_tensor(&[n, d]);
    let mut targets = Vec::new();
    {
        let (pf, pv) = (params.clone(), params.clone());
        targets.push(FdTarget {
            name: "scsa/input".into(),
            f: Box::new(move |xs| {
                let xt = Tensor::new(&[n, d], xs.to_vec())?;
                Ok(scsa_forward(&xt, &pf)?.0.into_data())
            }),
            vjp: Box::new(move |xs, g| {
                let xt = Tensor::new(&[n, d], xs.to_vec())?;
                let (_, state) = scsa_forward(&xt, &pv)?;
                let gt = Tensor::new(&[n, d], g.to_vec())?;
                let (gx, _) = scsa_vjp(&xt, &pv, &state, &gt)?;
                Ok(gx.into_data())
            }),
            x0: x.data().to_vec(),
        });
    }
    for which in ["wq", "wk", "wv"] {
        let (pf, pv) = (params.clone(), params.clone());
        let (xf, xv) = (x.clone(), x.clone());
        let w0 = match which {
            "wq" => params.wq.data().to_vec(),
            "wk" => params.wk.data().to_vec(),
            _ => params.wv.data().to_vec(),
        };
        let set = move |p: &ScsaParams, ws: &[f64]| -> Result<ScsaParams> {
            let mut p = p.clone();
            let t = Tensor::new(&[d, d], ws.to_vec())?;
            match which {
                "wq" => p.wq = t,
                "wk" => p.wk = t,
                _ => p.wv = t,
            }
            Ok(p)
        };
        targets.push(FdTarget {
            name: format!("scsa/{which}"),
            f: Box::new(move |ws| {
                let p = set(&pf, ws)?;
                Ok(scsa_forward(&xf, &p)?.0.into_data())
            }),
            vjp: Box::new(move |ws, g| {
                let p = set(&pv, ws)?;
                let (_, state) = scsa_forward(&xv, &p)?;
                let gt = Tensor::new(&[n, d], g.to_vec())?;
                let (_, grads) = scsa_vjp(&xv, &p, &state, &gt)?;
                Ok(match which {
                    "wq" => grads.wq.into_data(),
                    "wk" => grads.wk.into_data(),
                    _ => grads.wv.into_data(),
                })
            }),
            x0: w0,
        });
    }
    // Scalars ν and τ as one-coordinate targets.
    for which in ["nu", "tau"] {
        let (pf, pv) = (params.clone(), params.clone());
        let (xf, xv) = (x.clone(), x.clone());
        let v0 = if which == "nu" { params.nu } else { params.tau };
        targets.push(FdTarget {
            name: format!("scsa/{which}"),
            f: Box::new(move |s| {
                let mut p = pf.clone();
                if which == "nu" {
                    p.nu = s[0];
                } else {
                    p.tau = s[0];
                }
                Ok(scsa_forward(&xf, &p)?.0.into_data())
            }),
            vjp: Box::new(move |s, g| {
                let mut p = pv.clone();
                if which == "nu" {
                    p.nu = s[0];
                } else {
                    p.tau = s[0];
                }
                let (_, state) = scsa_forward(&xv, &p)?;
                let gt = Tensor::new(&[n, d], g.to_vec())?;
                let (_, grads) = scsa_vjp(&xv, &p, &state, &gt)?;
                Ok(vec![if which == "nu" { grads.nu } else { grads.tau }])
            }),
            x0: vec![v0],
        });
    }
    Ok(targets)
}

fn dot_targets(n: usize, d: usize, rng: &mut RngStream) -> Result<Vec<FdTarget<'static>>> {
    use crate::attention::{dot_product_attention, dot_product_attention_vjp};

    let wq = rng.normal_tensor(&[d, d]);
    let wk = rng.normal_tensor(&[d, d]);
    let wv = rng.normal_tensor(&[d, d]);
    let x = rng.normal_tensor(&[n, d]);
    let mut targets = Vec::new();
    {
        let (q, k, v) = (wq.clone(), wk.clone(), wv.clone());
        let (q2, k2, v2) = (wq.clone(), wk.clone(), wv.clone());
        targets.push(FdTarget {
            name: "dot/input".into(),
            f: Box::new(move |xs| {
                let xt = Tensor::new(&[n, d], xs.to_vec())?;
                Ok(dot_product_attention(&xt, &q, &k, &v)?.0.into_data())
            }),
            vjp: Box::new(move |xs, g| {
                let xt = Tensor::new(&[n, d], xs.to_vec())?;
                let (_, state) = dot_product_attention(&xt, &q2, &k2, &v2)?;
                let gt = Tensor::new(&[n, d], g.to_vec())?;
                let (gx, _) = dot_product_attention_vjp(&xt, &q2, &k2, &v2, &state, &gt)?;
                Ok(gx.into_data())
            }),
            x0: x.data().to_vec(),
        });
    }
    for (idx, which) in ["wq", "wk", "wv"].into_iter().enumerate() {
        let (q, k, v) = (wq.clone(), wk.clone(), wv.clone());
        let (q2, k2, v2) = (wq.clone(), wk.clone(), wv.clone());
        let (xf, xv) = (x.clone(), x.clone());
        let w0 = [&wq, &wk, &wv][idx].data().to_vec();
        targets.push(FdTarget {
            name: format!("dot/{which}"),
            f: Box::new(move |ws| {
                let t = Tensor::new(&[d, d], ws.to_vec())?;
                let (q, k, v) = match which {
                    "wq" => (&t, &k, &v),
                    "wk" => (&q, &t, &v),
                    _ => (&q, &k, &t),
                };
                Ok(dot_product_attention(&xf, q, k, v)?.0.into_data())
            }),
            vjp: Box::new(move |ws, g| {
                let t = Tensor::new(&[d, d], ws.to_vec())?;
                let (q, k, v) = match which {
                    "wq" => (&t, &k2, &v2),
                    "wk" => (&q2, &t, &v2),
                    _ => (&q2, &k2, &t),
                };
                let (_, state) = dot_product_attention(&xv, q, k, v)?;
                let gt = Tensor::new(&[n, d], g.to_vec())?;
                let (_, grads) = dot_product_attention_vjp(&xv, q, k, v, &state, &gt)?;
                Ok(match which {
                    "wq" => grads.wq.into_data(),
                    "wk" => grads.wk.into_data(),
                    _ => grads.wv.into_data(),
                })
            }),
            x0: w0,
        });
    }
    Ok(targets)
}

fn mha_targets(n: usize, d: usize, rng: &mut RngStream) -> Result<Vec<FdTarget<'static>>> {
    use crate::attention::{multi_head_scsa, multi_head_scsa_vjp, ScsaParams};

    let dh = (d / 2).max(1);
    let model_d = 2 * dh;
    let mk_head = |rng: &mut RngStream| ScsaParams {
        wq: rng.normal_tensor(&[model_d, dh]),
        wk: rng.normal_tensor(&[model_d, dh]),
        wv: rng.normal_tensor(&[model_d, dh]),
        nu: 1.0,
        tau: 12.0,
        eps: 1e-6,
    };
    let heads = vec![mk_head(rng), mk_head(rng)];
    let w_out = rng.normal_tensor(&[model_d, model_d]);
    let x = rng.normal_tensor(&[n, model_d]);
    let mut targets = Vec::new();
    {
        let (hf, wf) = (heads.clone(), w_out.clone());
        let (hv, wv) = (heads.clone(), w_out.clone());
        targets.push(FdTarget {
            name: "mha/input".into(),
            f: Box::new(move |xs| {
                let xt = Tensor::new(&[n, model_d], xs.to_vec())?;
                Ok(multi_head_scsa(&xt, &hf, &wf)?.0.into_data())
            }),
            vjp: Box::new(move |xs, g| {
                let xt = Tensor::new(&[n, model_d], xs.to_vec())?;
                let (_, state) = multi_head_scsa(&xt, &hv, &wv)?;
                let gt = Tensor::new(&[n, model_d], g.to_vec())?;
                let (gx, _) = multi_head_scsa_vjp(&xt, &hv, &wv, &state, &gt)?;
                Ok(gx.into_data())
            }),
            x0: x.data().to_vec(),
        });
    }
    {
        let (hf, hv) = (heads.clone(), heads);
        let (xf, xv) = (x.clone(), x);
        let w0 = w_out.data().to_vec();
        targets.push(FdTarget {
            name: "mha/w_out".into(),
            f: Box::new(move |ws| {
                let wt = Tensor::new(&[model_d, model_d], ws.to_vec())?;
                Ok(multi_head_scsa(&xf, &hf, &wt)?.0.into_data())
            }),
            vjp: Box::new(move |ws, g| {
                let wt = Tensor::new(&[model_d, model_d], ws.to_vec())?;
                let (_, state) = multi_head_scsa(&xv, &hv, &wt)?;
                let gt = Tensor::new(&[n, model_d], g.to_vec())?;
                let (_, grads) = multi_head_scsa_vjp(&xv, &hv, &wt, &state, &gt)?;
                Ok(grads.w_out.into_data())
            }),
            x0: w0,
        });
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_error_is_quadratically_small() {
        // Central differences are exact (up to rounding) on a linear map.
        let mut rng = RngStream::new(1, 0);
        let w = rng.normal_tensor(&[6, 6]);
        let (wf, wv) = (w.clone(), w);
        let x0: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let target = FdTarget {
            name: "linear".into(),
            f: Box::new(move |x| Ok(wf.matvec_t(x))),
            vjp: Box::new(move |_, g| Ok(wv.matvec(g))),
            x0,
        };
        let mut check_rng = RngStream::new(1, 1);
        let report = finite_diff_check(target, 1e-5, 1e-9, &mut check_rng).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn registry_affine_and_norms_pass() {
        for module in ["affine", "centernorm", "layernorm"] {
            let r = registry_check(module, 4, 6, 1e-5, 1e-6, 3).unwrap();
            assert!(r.pass, "{module}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn registry_activations_pass_away_from_kinks() {
        for module in ["sigmoid", "tanh", "relu", "gelu"] {
            let r = registry_check(module, 1, 16, 1e-5, 1e-6, 5).unwrap();
            assert!(r.pass, "{module}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn registry_wrs_and_conv_pass() {
        for module in ["wrs", "conv"] {
            let r = registry_check(module, 4, 4, 1e-5, 1e-5, 7).unwrap();
            assert!(r.pass, "{module}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn registry_attention_passes_at_1e4() {
        for module in ["scsa", "dot", "mha"] {
            let r = registry_check(module, 4, 8, 1e-5, 1e-4, 11).unwrap();
            assert!(r.pass, "{module}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn unknown_module_rejected() {
        assert!(registry_check("nope", 2, 2, 1e-5, 1e-4, 0).is_err());
    }

    #[test]
    fn centernorm_passes_tight_tolerance() {
        let r = registry_check("centernorm", 1, 8, 1e-5, 1e-6, 13).unwrap();
        assert!(r.pass, "{}", r.max_rel_err);
    }

    #[test]
    fn vjp_linearity_in_the_cotangent() {
        use crate::attention::{scsa_forward, scsa_vjp, ScsaParams};
        let mut rng = RngStream::new(2, 0);
        let (n, d) = (3, 4);
        let params = ScsaParams {
            wq: rng.normal_tensor(&[d, d]),
            wk: rng.normal_tensor(&[d, d]),
            wv: rng.normal_tensor(&[d, d]),
            nu: 1.0,
            tau: 12.0,
            eps: 1e-6,
        };
        let x = rng.normal_tensor(&[n, d]);
        let (_, state) = scsa_forward(&x, &params).unwrap();
        let g1 = rng.normal_tensor(&[n, d]);
        let g2 = rng.normal_tensor(&[n, d]);
        let (a, b) = (0.7, -2.3);
        let combo = g1.scale(a).add(&g2.scale(b)).unwrap();
        let (gx_combo, _) = scsa_vjp(&x, &params, &state, &combo).unwrap();
        let (gx1, _) = scsa_vjp(&x, &params, &state, &g1).unwrap();
        let (gx2, _) = scsa_vjp(&x, &params, &state, &g2).unwrap();
        let expect = gx1.scale(a).add(&gx2.scale(b)).unwrap();
        for (u, v) in gx_combo.data().iter().zip(expect.data()) {
            assert!((u - v).abs() <= 1e-10, "{u} vs {v}");
        }
    }

    #[test]
    fn directional_probe_path_used_above_limit() {
        // 10_001 coordinates forces the probe branch; a linear map checks
        // exactly.
        let n = EXHAUSTIVE_COORD_LIMIT + 1;
        let coeffs: Vec<f64> = (0..n).map(|i| (i % 13) as f64 * 0.1 - 0.5).collect();
        let (cf, cv) = (coeffs.clone(), coeffs);
        let target = FdTarget {
            name: "bigdot".into(),
            f: Box::new(move |x| {
                Ok(vec![x.iter().zip(&cf).map(|(a, b)| a * b).sum()])
            }),
            vjp: Box::new(move |_, g| Ok(cv.iter().map(|c| c * g[0]).collect())),
            x0: vec![0.25; n],
        };
        let mut rng = RngStream::new(3, 0);
        let report = finite_diff_check(target, 1e-5, 1e-4, &mut rng).unwrap();
        assert!(report.pass, "{}", report.max_rel_err);
        assert_eq!(report.coords_checked, 16);
    }
}
