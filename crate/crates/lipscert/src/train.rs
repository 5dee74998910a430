//! Warmup-free training loop: AdamW with decoupled weight decay, cosine
//! learning-rate decay to zero, label-smoothed cross-entropy, per-step
//! metrics, and the ablation sweep driver.
//!
//! Divergence handling mirrors how runs are judged: any NaN/Inf in the loss
//! or gradients flags the run permanently and aborts it; a run whose final
//! loss never escapes 5% of the initial loss is "Not converge".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::SynthDataset;
use crate::error::{Error, Result};
use crate::model::{AlphaPolicy, AttnKind, Model, ModelConfig, NormKind, ParamKind};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Eval-accuracy checkpoint cadence (also taken at the final step).
    pub eval_every: usize,
    /// Clamp γ/β to the enforcement range after each step.
    pub enforce_clamp: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-3,
            schedule: Schedule::Cosine,
            warmup_steps: 0,
            weight_decay: 0.05,
            batch_size: 64,
            label_smoothing: 0.1,
            eval_every: 500,
            enforce_clamp: false,
        }
    }
}

/// Per-step training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub max_act: f64,
    pub grad_norm: f64,
    pub nan_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Converged,
    NotConverge,
    Diverged,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Converged => "Converged",
            Verdict::NotConverge => "Not converge",
            Verdict::Diverged => "Diverged",
        }
    }
}

/// Append-only training metrics; once the NaN flag is set it stays set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub rows: Vec<MetricsRow>,
    pub eval_checkpoints: Vec<(usize, f64)>,
    pub final_train_accuracy: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub verdict: Verdict,
    pub diverged: bool,
}

impl TrainMetrics {
    /// CSV with header `step,loss,max_act,grad_norm,nan_flag`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,max_act,grad_norm,nan_flag\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step,
                r.loss,
                r.max_act,
                r.grad_norm,
                if r.nan_flag { 1 } else { 0 }
            ));
        }
        out
    }
}

/// Label-smoothed cross-entropy over logits; returns the loss and its
/// gradient with respect to the logits (`softmax - target`).
pub fn cross_entropy_smoothed(logits: &[f64], label: usize, smoothing: f64) -> (f64, Vec<f64>) {
    let c = logits.len();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = z.ln() + max;
    let mut loss = 0.0;
    let mut grad = vec![0.0; c];
    for j in 0..c {
        let target = if j == label {
            1.0 - smoothing + smoothing / c as f64
        } else {
            smoothing / c as f64
        };
        let log_p = logits[j] - log_z;
        loss -= target * log_p;
        grad[j] = exps[j] / z - target;
    }
    (loss, grad)
}

/// Learning rate at `step`: linear warmup to `lr`, then the schedule
/// (cosine decays to zero at `total`).
pub fn lr_at(step: usize, total: usize, lr: f64, schedule: Schedule, warmup: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => lr,
        Schedule::Cosine => {
            let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
            lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// AdamW with decoupled weight decay. Positive scalars (ν, τ) are updated
/// in log space so positivity is structural; gains and scalars skip decay.
struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Vec<f64>>, lr: f64, freeze_scalars: bool) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (beta1, beta2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m_state, v_state) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |name, data, kind| {
            let Some(grad) = grads.get(name) else {
                return;
            };
            if freeze_scalars && kind != ParamKind::Weight {
                return;
            }
            let m = m_state.entry(name.to_string()).or_insert_with(|| vec![0.0; data.len()]);
            let v = v_state.entry(name.to_string()).or_insert_with(|| vec![0.0; data.len()]);
            match kind {
                ParamKind::PositiveScalar => {
                    // θ = ln p; g_θ = g_p · p.
                    let p = data[0];
                    let g = grad[0] * p;
                    m[0] = beta1 * m[0] + (1.0 - beta1) * g;
                    v[0] = beta2 * v[0] + (1.0 - beta2) * g * g;
                    let update = (m[0] / bc1) / ((v[0] / bc2).sqrt() + eps);
                    data[0] = (p.ln() - lr * update).exp();
                }
                _ => {
                    let decay = if kind == ParamKind::Weight { wd } else { 0.0 };
                    for i in 0..data.len() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                        data[i] -= lr * (update + decay * data[i]);
                    }
                }
            }
        });
    }
}

/// Classification accuracy of the model over a split.
pub fn accuracy(model: &Model, data: &SynthDataset, idx: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for &i in idx {
        let logits = model.logits(&data.images[i])?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if pred == data.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / idx.len().max(1) as f64)
}

/// Run the training loop. Metrics are recorded every step; the run aborts
/// (flagged Diverged) on the first non-finite loss or gradient.
pub fn train(
    model: &mut Model,
    data: &SynthDataset,
    opts: &TrainOptions,
    rng: &mut RngStream,
) -> Result<TrainMetrics> {
    if opts.steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    if data.n_classes != model.config.n_classes || data.image_size != model.config.image_size {
        return Err(Error::InvalidConfig(format!(
            "dataset ({} classes, {}px) does not match model ({} classes, {}px)",
            data.n_classes, data.image_size, model.config.n_classes, model.config.image_size
        )));
    }
    let mut optimizer = AdamW::new(opts.weight_decay);
    let mut rows: Vec<MetricsRow> = Vec::with_capacity(opts.steps);
    let mut eval_checkpoints = Vec::new();
    let mut diverged = false;
    let mut initial_loss = f64::NAN;
    let freeze = model.config.freeze_scalars;

    for step in 0..opts.steps {
        let mut batch_grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_acc = 0.0;
        let mut max_act = 0.0f64;
        let mut nan_flag = false;
        for _ in 0..opts.batch_size {
            let idx = data.train_idx[rng.below(data.train_idx.len())];
            let image = &data.images[idx];
            let result = model.forward(image, true, rng, true)?;
            max_act = max_act.max(result.max_act);
            let (loss, glogits) =
                cross_entropy_smoothed(&result.logits, data.labels[idx], opts.label_smoothing);
            loss_acc += loss;
            if !loss.is_finite() {
                nan_flag = true;
                break;
            }
            let cache = result.cache.expect("training forward keeps its cache");
            let (_, grads) = model.backward(image, &cache, &glogits)?;
            for (name, g) in grads {
                match batch_grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => {
                        batch_grads.insert(name, g);
                    }
                }
            }
        }
        let loss = loss_acc / opts.batch_size as f64;
        let scale = 1.0 / opts.batch_size as f64;
        let mut grad_sq = 0.0;
        for g in batch_grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
                grad_sq += *v * *v;
            }
        }
        let grad_norm = grad_sq.sqrt();
        nan_flag = nan_flag || !loss.is_finite() || !grad_norm.is_finite() || !max_act.is_finite();
        if step == 0 {
            initial_loss = loss;
        }
        rows.push(MetricsRow {
            step,
            loss,
            max_act,
            grad_norm,
            nan_flag,
        });
        if nan_flag || (loss.is_finite() && initial_loss.is_finite() && loss > 10.0 * initial_loss)
        {
            diverged = true;
            break;
        }
        let lr = lr_at(step, opts.steps, opts.lr, opts.schedule, opts.warmup_steps);
        optimizer.step(model, &batch_grads, lr, freeze);
        if opts.enforce_clamp {
            for stage in &mut model.stages {
                for block in &mut stage.blocks {
                    block.norm_attn.clamp_in_place();
                    block.norm_ffn.clamp_in_place();
                }
            }
        }
        if opts.eval_every > 0 && (step + 1) % opts.eval_every == 0 && step + 1 < opts.steps {
            eval_checkpoints.push((step + 1, accuracy(model, data, &data.eval_idx)?));
        }
    }

    let (final_train_accuracy, final_eval_accuracy) = if diverged {
        (None, None)
    } else {
        let eval_acc = accuracy(model, data, &data.eval_idx)?;
        eval_checkpoints.push((rows.last().map(|r| r.step + 1).unwrap_or(0), eval_acc));
        (
            Some(accuracy(model, data, &data.train_idx)?),
            Some(eval_acc),
        )
    };

    let verdict = if diverged {
        Verdict::Diverged
    } else {
        let tail = rows.len().min(100);
        let tail_mean: f64 =
            rows[rows.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64;
        if tail_mean >= 0.95 * initial_loss {
            Verdict::NotConverge
        } else {
            Verdict::Converged
        }
    };
    Ok(TrainMetrics {
        rows,
        eval_checkpoints,
        final_train_accuracy,
        final_eval_accuracy,
        verdict,
        diverged,
    })
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Norm,
    Attn,
    Alpha,
    DropPath,
    Warmup,
    Init,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "norm" => Some(Self::Norm),
            "attn" => Some(Self::Attn),
            "alpha" => Some(Self::Alpha),
            "droppath" => Some(Self::DropPath),
            "warmup" => Some(Self::Warmup),
            "init" => Some(Self::Init),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Norm => "norm",
            Self::Attn => "attn",
            Self::Alpha => "alpha",
            Self::DropPath => "droppath",
            Self::Warmup => "warmup",
            Self::Init => "init",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub verdict: String,
    pub final_loss: f64,
    pub final_eval_accuracy: Option<f64>,
    pub nan: bool,
    pub steps_completed: usize,
}

/// Apply one ablation value to a config/train-options pair.
fn apply_axis(
    axis: AblationAxis,
    value: &str,
    config: &mut ModelConfig,
    opts: &mut TrainOptions,
) -> Result<()> {
    let bad = |what: &str| Error::InvalidConfig(format!("invalid {what} value: {value}"));
    match axis {
        AblationAxis::Norm => {
            config.norm_kind = match value {
                "centernorm" => NormKind::CenterNorm,
                "layernorm" => NormKind::LayerNorm,
                "none" => NormKind::None,
                _ => return Err(bad("norm")),
            };
        }
        AblationAxis::Attn => {
            config.attn_kind = match value {
                "scsa" => AttnKind::Scsa,
                "dot" => AttnKind::Dot,
                _ => return Err(bad("attn")),
            };
        }
        AblationAxis::Alpha => {
            let v: f64 = value.parse().map_err(|_| bad("alpha"))?;
            config.alpha_policy = AlphaPolicy::Fixed(v);
        }
        AblationAxis::DropPath => {
            let v: f64 = value.parse().map_err(|_| bad("droppath"))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(bad("droppath"));
            }
            config.droppath_p = v;
        }
        AblationAxis::Warmup => {
            opts.warmup_steps = value.parse().map_err(|_| bad("warmup"))?;
        }
        AblationAxis::Init => {
            config.init_kind = serde_json::from_value(serde_json::Value::String(value.into()))
                .map_err(|_| bad("init"))?;
        }
    }
    Ok(())
}

/// Train one run per value along the axis and summarize each with the
/// ablation verdict vocabulary.
pub fn ablation_sweep(
    axis: AblationAxis,
    base_config: &ModelConfig,
    values: &[String],
    base_opts: &TrainOptions,
    data: &SynthDataset,
) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("ablation values must be nonempty".into()));
    }
    let mut table = Vec::with_capacity(values.len());
    for value in values {
        let mut config = base_config.clone();
        let mut opts = base_opts.clone();
        apply_axis(axis, value, &mut config, &mut opts)?;
        config.validate()?;
        let mut build_rng = RngStream::new(config.seed, 0xb01d);
        let mut model = crate::model::build_model(&config, &mut build_rng)?;
        let mut train_rng = RngStream::new(config.seed, 0x7a1b);
        let metrics = train(&mut model, data, &opts, &mut train_rng)?;
        table.push(AblationRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            verdict: metrics.verdict.as_str().to_string(),
            final_loss: metrics.rows.last().map(|r| r.loss).unwrap_or(f64::NAN),
            final_eval_accuracy: metrics.final_eval_accuracy,
            nan: metrics.diverged,
            steps_completed: metrics.rows.len(),
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_dataset;
    use crate::model::build_model;

    fn small_config() -> ModelConfig {
        ModelConfig {
            stage_depths: vec![1, 1],
            channels: vec![8, 16],
            heads: vec![1, 2],
            image_size: 8,
            patch_size: 2,
            n_classes: 4,
            droppath_p: 0.0,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let (_, grad) = cross_entropy_smoothed(&logits, 2, 0.1);
        let h = 1e-6;
        for j in 0..4 {
            let mut lp = logits;
            let mut lm = logits;
            lp[j] += h;
            lm[j] -= h;
            let fd = (cross_entropy_smoothed(&lp, 2, 0.1).0 - cross_entropy_smoothed(&lm, 2, 0.1).0)
                / (2.0 * h);
            assert!((grad[j] - fd).abs() <= 1e-8);
        }
        // Gradient sums to zero (softmax minus a distribution).
        let s: f64 = grad.iter().sum();
        assert!(s.abs() <= 1e-12);
    }

    #[test]
    fn lr_schedule_shapes() {
        // Cosine decays to zero; warmup ramps linearly.
        assert_eq!(lr_at(0, 100, 1.0, Schedule::Constant, 0), 1.0);
        let start = lr_at(0, 100, 1.0, Schedule::Cosine, 0);
        assert!((start - 1.0).abs() < 1e-3);
        let end = lr_at(99, 100, 1.0, Schedule::Cosine, 0);
        assert!(end < 0.001);
        assert!((lr_at(0, 100, 1.0, Schedule::Cosine, 10) - 0.1).abs() <= 1e-12);
        assert!((lr_at(9, 100, 1.0, Schedule::Cosine, 10) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let config = small_config();
        let mut rng = RngStream::new(config.seed, 0);
        let mut model = build_model(&config, &mut rng).unwrap();
        let data = synth_dataset(4, 8, 8, 0.3, &mut RngStream::new(1, 0)).unwrap();
        let opts = TrainOptions {
            steps: 5,
            lr: 0.0,
            batch_size: 4,
            schedule: Schedule::Constant,
            eval_every: 0,
            ..TrainOptions::default()
        };
        // Deterministic batches need a fixed stream; loss varies only by
        // batch composition, so compare against a rerun, not row-to-row.
        let m1 = train(&mut model, &data, &opts, &mut RngStream::new(5, 5)).unwrap();
        let mut model2 = build_model(&config, &mut RngStream::new(config.seed, 0)).unwrap();
        let m2 = train(&mut model2, &data, &opts, &mut RngStream::new(5, 5)).unwrap();
        for (a, b) in m1.rows.iter().zip(&m2.rows) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        // With lr = 0 and no droppath the model never changes; identical
        // batches would give identical losses. Verify weights unchanged.
        let mut w1 = Vec::new();
        model.visit_params(&mut |_, d, _, _| w1.extend_from_slice(d));
        let mut w0 = Vec::new();
        build_model(&config, &mut RngStream::new(config.seed, 0))
            .unwrap()
            .visit_params(&mut |_, d, _, _| w0.extend_from_slice(d));
        assert_eq!(w0, w1);
    }

    #[test]
    fn single_step_on_one_sample_reduces_its_loss() {
        let config = small_config();
        let mut rng = RngStream::new(config.seed, 1);
        let mut model = build_model(&config, &mut rng).unwrap();
        let data = synth_dataset(4, 2, 8, 0.1, &mut RngStream::new(2, 0)).unwrap();
        let image = &data.images[data.train_idx[0]];
        let label = data.labels[data.train_idx[0]];
        let before = cross_entropy_smoothed(&model.logits(image).unwrap(), label, 0.1).0;
        // One optimizer step on exactly that sample.
        let mut fwd_rng = RngStream::new(0, 0);
        let result = model.forward(image, false, &mut fwd_rng, true).unwrap();
        let (_, glogits) = cross_entropy_smoothed(&result.logits, label, 0.1);
        let (_, grads) = model.backward(image, &result.cache.unwrap(), &glogits).unwrap();
        let mut opt = AdamW::new(0.0);
        opt.step(&mut model, &grads, 1e-3, false);
        let after = cross_entropy_smoothed(&model.logits(image).unwrap(), label, 0.1).0;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn training_deterministic_given_seed() {
        let config = small_config();
        let data = synth_dataset(4, 8, 8, 0.3, &mut RngStream::new(3, 0)).unwrap();
        let opts = TrainOptions {
            steps: 8,
            batch_size: 4,
            eval_every: 0,
            ..TrainOptions::default()
        };
        let run = |seed: u64| -> Vec<u64> {
            let mut model = build_model(&config, &mut RngStream::new(config.seed, 0)).unwrap();
            let mut rng = RngStream::new(seed, 0);
            train(&mut model, &data, &opts, &mut rng)
                .unwrap()
                .rows
                .iter()
                .map(|r| r.loss.to_bits())
                .collect()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn csv_format_is_stable() {
        let metrics = TrainMetrics {
            rows: vec![
                MetricsRow {
                    step: 0,
                    loss: 2.5,
                    max_act: 1.25,
                    grad_norm: 0.5,
                    nan_flag: false,
                },
                MetricsRow {
                    step: 1,
                    loss: f64::NAN,
                    max_act: 3.0,
                    grad_norm: f64::INFINITY,
                    nan_flag: true,
                },
            ],
            eval_checkpoints: vec![],
            final_train_accuracy: None,
            final_eval_accuracy: None,
            verdict: Verdict::Diverged,
            diverged: true,
        };
        let csv = metrics.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,loss,max_act,grad_norm,nan_flag");
        assert_eq!(lines.next().unwrap(), "0,2.5,1.25,0.5,0");
        assert_eq!(lines.next().unwrap(), "1,NaN,3,inf,1");
    }

    #[test]
    fn ablation_sweep_reports_one_row_per_value() {
        let config = small_config();
        let data = synth_dataset(4, 8, 8, 0.3, &mut RngStream::new(4, 0)).unwrap();
        let opts = TrainOptions {
            steps: 4,
            batch_size: 4,
            eval_every: 0,
            ..TrainOptions::default()
        };
        let rows = ablation_sweep(
            AblationAxis::DropPath,
            &config,
            &["0".into(), "0.1".into()],
            &opts,
            &data,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.axis == "droppath"));
        // Invalid axis value rejected.
        assert!(ablation_sweep(
            AblationAxis::Alpha,
            &config,
            &["zebra".into()],
            &opts,
            &data
        )
        .is_err());
    }

    #[test]
    fn steps_zero_rejected() {
        let config = small_config();
        let mut model = build_model(&config, &mut RngStream::new(0, 0)).unwrap();
        let data = synth_dataset(4, 4, 8, 0.1, &mut RngStream::new(0, 1)).unwrap();
        let opts = TrainOptions {
            steps: 0,
            ..TrainOptions::default()
        };
        assert!(train(&mut model, &data, &opts, &mut RngStream::new(0, 2)).is_err());
    }
}
