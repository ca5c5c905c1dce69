//! Batch sampling, the optimization loop, and the component-ablation runner.
//!
//! Each step samples anchor/positive pairs plus a shared negative pool,
//! encodes every batch video once, tightens the variational critics for a
//! configurable number of inner steps, then applies one adaptive-moment
//! update to the encoder heads on the full objective. Everything is
//! deterministic in the configured seed: batch composition, critic
//! shuffles, and parameter initialization all derive per-step streams from
//! it, so identical (corpus, config, seed) triples produce bit-identical
//! checkpoints and logs.
//!
//! The contrastive loss runs on the unit-normalized concatenation of the
//! sub-features (gradients flow through the normalization); the KL and MI
//! terms see the raw embeddings.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{pair_views, Corpus};
use crate::heads::{
    init_params, mlp_backward, mlp_forward, CondGaussView, HeadParams, MlpCache, ModelConfig,
};
use crate::losses::{
    disentangle_kl, info_nce, mi_cont_lower, mi_cont_upper, mi_label_lower, mi_label_upper,
    mi_loss, total_loss, CondGaussGrads, LossBreakdown, MiTerms, MiWeights,
};
use crate::mat::{affine, affine_backward, dot, l2_norm, Mat};
use crate::{derive_seed, DmiError, Result};

/// One of the component-removal rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AblationVariant {
    /// Aux head only: contrastive loss on z_s, label-MI term on z_s.
    RemoveDisentangleModule,
    /// Sub-heads only: contrastive + KL objective, no MI terms.
    RemoveAuxModule,
    /// Full architecture, KL weight forced to zero (still logged).
    RemoveDisentangleLoss,
    /// Full architecture, MI objective forced to zero, critics frozen.
    RemoveMiLoss,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::RemoveDisentangleModule,
        AblationVariant::RemoveAuxModule,
        AblationVariant::RemoveDisentangleLoss,
        AblationVariant::RemoveMiLoss,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::RemoveDisentangleModule => "remove_disentangle_module",
            AblationVariant::RemoveAuxModule => "remove_aux_module",
            AblationVariant::RemoveDisentangleLoss => "remove_disentangle_loss",
            AblationVariant::RemoveMiLoss => "remove_mi_loss",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = DmiError;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| DmiError::UnknownVariant(s.to_string()))
    }
}

/// Full training recipe: architecture plus optimization hyperparameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    /// Anchor pairs drawn per step.
    pub batch_anchors: usize,
    /// Shared negative pool size per step.
    pub negatives_per_step: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub critic_steps_per_encoder_step: usize,
    pub seed: u64,
    pub ablation: Option<AblationVariant>,
    /// Adds the positive to the contrastive denominator (standard form).
    pub include_positive_in_denominator: bool,
    pub mi_weights: MiWeights,
}

impl TrainConfig {
    /// Defaults around a given architecture: 300 epochs, 64:2048
    /// anchor/negative ratio, adaptive moments (0.9, 0.999) at 1e-3.
    pub fn new(model: ModelConfig) -> TrainConfig {
        TrainConfig {
            model,
            epochs: 300,
            batch_anchors: 64,
            negatives_per_step: 2048,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            critic_steps_per_encoder_step: 1,
            seed: 0,
            ablation: None,
            include_positive_in_denominator: false,
            mi_weights: MiWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_anchors == 0 {
            return Err(DmiError::ConfigError("batch_anchors must be >= 1".into()));
        }
        if self.negatives_per_step == 0 {
            return Err(DmiError::ConfigError("negatives_per_step must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(DmiError::ConfigError("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DmiError::ConfigError("learning_rate must be > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(DmiError::ConfigError(format!("{name} must be in [0, 1)")));
            }
        }
        if self.critic_steps_per_encoder_step == 0 {
            return Err(DmiError::ConfigError(
                "critic_steps_per_encoder_step must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Applies one `key = value` assignment using the flat config-file key
/// names (TrainConfig and ModelConfig field names).
pub fn apply_config_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| {
            DmiError::ConfigError(format!("invalid value {value:?} for key {key}"))
        })
    }
    match key {
        "d" => cfg.model.d = parse(key, value)?,
        "k" => cfg.model.k = parse(key, value)?,
        "d_z" => cfg.model.d_z = parse(key, value)?,
        "d_s" => cfg.model.d_s = parse(key, value)?,
        "hidden" => cfg.model.hidden = parse(key, value)?,
        "tau" => cfg.model.tau = parse(key, value)?,
        "tau_mi" => cfg.model.tau_mi = parse(key, value)?,
        "alpha" => cfg.model.alpha = parse(key, value)?,
        "kl_cap" => cfg.model.kl_cap = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_anchors" => cfg.batch_anchors = parse(key, value)?,
        "negatives_per_step" => cfg.negatives_per_step = parse(key, value)?,
        "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "beta1" => cfg.beta1 = parse(key, value)?,
        "beta2" => cfg.beta2 = parse(key, value)?,
        "critic_steps_per_encoder_step" => {
            cfg.critic_steps_per_encoder_step = parse(key, value)?
        }
        "seed" => cfg.seed = parse(key, value)?,
        "ablation" => {
            cfg.ablation = if value == "none" {
                None
            } else {
                Some(value.parse()?)
            }
        }
        "include_positive_in_denominator" => {
            cfg.include_positive_in_denominator = parse(key, value)?
        }
        "mi_w_y_zs" => cfg.mi_weights.y_zs = parse(key, value)?,
        "mi_w_zs_z" => cfg.mi_weights.zs_z = parse(key, value)?,
        "mi_w_y_zi" => cfg.mi_weights.y_zi = parse(key, value)?,
        "mi_w_zi_zs" => cfg.mi_weights.zi_zs = parse(key, value)?,
        _ => return Err(DmiError::ConfigError(format!("unknown config key {key}"))),
    }
    Ok(())
}

/// Parses flat `key = value` config text ('#' starts a comment) on top of
/// the given base config.
pub fn parse_config_text(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            DmiError::ConfigError(format!("config line {}: expected key=value", lineno + 1))
        })?;
        apply_config_kv(&mut cfg, key.trim(), value.trim())?;
    }
    Ok(cfg)
}

/// Reads a config file (flat key=value text) on top of the base config.
pub fn load_config(path: &Path, base: TrainConfig) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DmiError::MissingFile(format!("{}: {e}", path.display())))?;
    parse_config_text(&text, base)
}

/// One step's sampled video roles, by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    pub anchors: Vec<String>,
    /// One labeled similar partner per anchor.
    pub positives: Vec<String>,
    /// Shared negative pool, disjoint from the step's anchors/positives.
    pub negatives: Vec<String>,
}

/// Draws anchors (labeled similar pairs, without replacement, clamped to
/// the pair count) and negatives (without replacement from the unlabeled
/// and dissimilar-labeled ids minus this step's anchors/positives, clamped
/// to the pool size). Deterministic in `step_seed`.
pub fn sample_batch(corpus: &Corpus, cfg: &TrainConfig, step_seed: u64) -> Result<TrainingBatch> {
    let views = pair_views(corpus);
    if views.positive_pairs.is_empty() {
        return Err(DmiError::InsufficientPositives(
            "corpus has no labeled similar pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
    let n_anchor = cfg.batch_anchors.min(views.positive_pairs.len());
    let picks = rand::seq::index::sample(&mut rng, views.positive_pairs.len(), n_anchor);
    let mut anchors = Vec::with_capacity(n_anchor);
    let mut positives = Vec::with_capacity(n_anchor);
    let mut taken: BTreeSet<&str> = BTreeSet::new();
    for idx in picks.iter() {
        let (a, b) = views.positive_pairs[idx];
        anchors.push(a.to_string());
        positives.push(b.to_string());
        taken.insert(a);
        taken.insert(b);
    }
    // Negative pool: unlabeled plus members of dissimilar pairs, minus the
    // step's anchors/positives. Sorted for determinism.
    let mut pool: BTreeSet<&str> = views.unlabeled_ids.iter().map(|s| s.as_str()).collect();
    for (a, b) in &views.dissimilar_pairs {
        pool.insert(a);
        pool.insert(b);
    }
    let pool: Vec<&str> = pool.difference(&taken).copied().collect();
    if pool.is_empty() {
        return Err(DmiError::InsufficientNegatives(
            "negative pool is empty after excluding the step's anchors and positives".into(),
        ));
    }
    let n_neg = cfg.negatives_per_step.min(pool.len());
    let picks = rand::seq::index::sample(&mut rng, pool.len(), n_neg);
    let negatives: Vec<String> = picks.iter().map(|i| pool[i].to_string()).collect();
    Ok(TrainingBatch { anchors, positives, negatives })
}

/// One CSV log row; field order matches the file header.
#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub info_nce: f64,
    pub kl_term: f64,
    pub mi_y_zs: f64,
    pub mi_zs_z: f64,
    pub mi_y_zi_sum: f64,
    pub mi_zi_zs_sum: f64,
    pub l_decouple: f64,
    pub l_mi: f64,
    pub l_total: f64,
}

/// Per-step loss log of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| {
                DmiError::ConfigError(format!("log serialization failed: {e}"))
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adaptive-moment optimizer over selected ranges of a flat buffer.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    ranges: Vec<std::ops::Range<usize>>,
}

const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(
        total: usize,
        ranges: Vec<std::ops::Range<usize>>,
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) -> Adam {
        Adam { m: vec![0.0; total], v: vec![0.0; total], t: 0, lr, beta1, beta2, ranges }
    }

    /// One descent step on `params` along `grads`, touching only the
    /// configured ranges.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for r in &self.ranges {
            for i in r.clone() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i] / bc1;
                let vh = self.v[i] / bc2;
                params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Which loss components and embeddings a variant trains.
#[derive(Debug, Clone, Copy)]
struct VariantPlan {
    use_sub: bool,
    use_aux: bool,
    /// Contrastive embedding: concatenated sub-features (false) or z_s (true).
    contrast_on_aux: bool,
    /// Weight of the KL term inside l_total.
    kl_weight: f64,
    /// Whether the KL term is computed and logged at all.
    compute_kl: bool,
    mi_y_zs: bool,
    mi_zs_z: bool,
    mi_y_zi: bool,
    mi_zi_zs: bool,
}

impl VariantPlan {
    fn of(cfg: &TrainConfig) -> VariantPlan {
        let alpha = cfg.model.alpha;
        match cfg.ablation {
            None => VariantPlan {
                use_sub: true,
                use_aux: true,
                contrast_on_aux: false,
                kl_weight: alpha,
                compute_kl: true,
                mi_y_zs: true,
                mi_zs_z: true,
                mi_y_zi: true,
                mi_zi_zs: true,
            },
            Some(AblationVariant::RemoveDisentangleModule) => VariantPlan {
                use_sub: false,
                use_aux: true,
                contrast_on_aux: true,
                kl_weight: 0.0,
                compute_kl: false,
                mi_y_zs: true,
                mi_zs_z: false,
                mi_y_zi: false,
                mi_zi_zs: false,
            },
            Some(AblationVariant::RemoveAuxModule) => VariantPlan {
                use_sub: true,
                use_aux: false,
                contrast_on_aux: false,
                kl_weight: alpha,
                compute_kl: true,
                mi_y_zs: false,
                mi_zs_z: false,
                mi_y_zi: false,
                mi_zi_zs: false,
            },
            Some(AblationVariant::RemoveDisentangleLoss) => VariantPlan {
                use_sub: true,
                use_aux: true,
                contrast_on_aux: false,
                kl_weight: 0.0,
                compute_kl: true,
                mi_y_zs: true,
                mi_zs_z: true,
                mi_y_zi: true,
                mi_zi_zs: true,
            },
            Some(AblationVariant::RemoveMiLoss) => VariantPlan {
                use_sub: true,
                use_aux: true,
                contrast_on_aux: false,
                kl_weight: alpha,
                compute_kl: true,
                mi_y_zs: false,
                mi_zs_z: false,
                mi_y_zi: false,
                mi_zi_zs: false,
            },
        }
    }

    fn any_mi(&self) -> bool {
        self.mi_y_zs || self.mi_zs_z || self.mi_y_zi || self.mi_zi_zs
    }
}

/// Encoded batch: per-video head outputs with caches for backprop.
struct EncodedBatch {
    /// [video][head] forward caches for the sub-heads (empty if unused).
    sub_caches: Vec<Vec<MlpCache>>,
    /// [video] forward caches for the aux head (empty if unused).
    aux_caches: Vec<MlpCache>,
    /// Concatenated sub-features per video.
    v: Vec<Vec<f64>>,
    /// Contrastive embedding per video (normalized v or normalized z_s).
    u: Vec<Vec<f64>>,
    /// Norm that produced each `u`.
    unorm: Vec<f64>,
}

const V_NORM_FLOOR: f64 = 1e-12;

fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = l2_norm(x).max(V_NORM_FLOOR);
    (x.iter().map(|v| v / n).collect(), n)
}

/// Pulls a normalized-space gradient back to the raw vector:
/// d/dx (x/|x|) applied to `du`.
fn normalization_backward(du: &[f64], u: &[f64], norm: f64, dx: &mut [f64]) {
    let proj = dot(du, u);
    for c in 0..du.len() {
        dx[c] += (du[c] - proj * u[c]) / norm;
    }
}

fn encode_batch(
    params: &HeadParams,
    features: &[&[f64]],
    plan: &VariantPlan,
) -> EncodedBatch {
    let cfg = &params.cfg;
    let n = features.len();
    let mut sub_caches = Vec::with_capacity(n);
    let mut aux_caches = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut unorm = Vec::with_capacity(n);
    for &x in features {
        let mut heads = Vec::with_capacity(if plan.use_sub { cfg.k } else { 0 });
        let mut vx = Vec::with_capacity(if plan.use_sub { cfg.v_dim() } else { 0 });
        if plan.use_sub {
            for i in 0..cfg.k {
                let cache = mlp_forward(&params.sub_head(i), x);
                vx.extend_from_slice(&cache.out);
                heads.push(cache);
            }
        }
        if plan.use_aux {
            aux_caches.push(mlp_forward(&params.aux_head(), x));
        }
        let (ux, nx) = if plan.contrast_on_aux {
            normalize(&aux_caches.last().expect("aux in use").out)
        } else {
            normalize(&vx)
        };
        sub_caches.push(heads);
        v.push(vx);
        u.push(ux);
        unorm.push(nx);
    }
    EncodedBatch { sub_caches, aux_caches, v, u, unorm }
}

/// Mean conditional log-likelihood of the decoder on matched rows plus its
/// ascent gradients; the maximum-likelihood signal that tightens the
/// continuous upper bound.
fn decoder_loglik(za: &Mat, zb: &Mat, dec: &CondGaussView) -> (f64, CondGaussGrads) {
    let n = za.rows;
    let d = dec.out_dim;
    let inv_var: Vec<f64> = dec.logvar.iter().map(|s| (-s).exp()).collect();
    let const_term: f64 = dec
        .logvar
        .iter()
        .map(|s| -0.5 * (1.8378770664093453 + s))
        .sum();
    let mut value = 0.0;
    let mut grads = CondGaussGrads {
        w: vec![0.0; dec.w.len()],
        b: vec![0.0; d],
        logvar: vec![0.0; d],
    };
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let m = affine(dec.w, dec.b, za.row(i), d, dec.in_dim);
        let mut dm = vec![0.0; d];
        for c in 0..d {
            let r = zb.get(i, c) - m[c];
            value += scale * (-0.5 * r * r * inv_var[c]);
            dm[c] = scale * r * inv_var[c];
            grads.logvar[c] += scale * (-0.5 + 0.5 * r * r * inv_var[c]);
        }
        affine_backward(dec.w, za.row(i), &dm, dec.in_dim, &mut grads.w, &mut grads.b, None);
    }
    (value + const_term, grads)
}

/// Copies rows of per-video vectors into a matrix in index order.
fn gather(rows: &[Vec<f64>], idx: &[usize], cols: usize) -> Mat {
    let mut m = Mat::zeros(idx.len(), cols);
    for (r, &i) in idx.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&rows[i]);
    }
    m
}

struct StepOutcome {
    breakdown: LossBreakdown,
}

/// Runs a full training job and returns the final parameters and the
/// per-step loss log.
pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<(HeadParams, TrainLog)> {
    cfg.validate()?;
    if corpus.d != cfg.model.d {
        return Err(DmiError::DimensionMismatch(format!(
            "corpus features have dim {}, model expects {}",
            corpus.d, cfg.model.d
        )));
    }
    let plan = VariantPlan::of(cfg);
    let mut params = init_params(&cfg.model, derive_seed(cfg.seed, 0))?;
    let layout = params.layout.clone();
    let mut encoder_adam = Adam::new(
        layout.total,
        layout.encoder_ranges(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
    );
    let mut critic_adam = Adam::new(
        layout.total,
        layout.critic_ranges(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
    );

    // Pooled features and the id -> index map are fixed for the whole run.
    let pooled = corpus.pooled();
    let index: std::collections::HashMap<&str, usize> = pooled
        .iter()
        .enumerate()
        .map(|(i, f)| (f.video_id.as_str(), i))
        .collect();
    let n_pairs = pair_views(corpus).positive_pairs.len();
    if n_pairs == 0 {
        return Err(DmiError::InsufficientPositives(
            "corpus has no labeled similar pairs".into(),
        ));
    }
    let steps_per_epoch = n_pairs.div_ceil(cfg.batch_anchors);

    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    let mut best_epoch_avg = f64::INFINITY;
    let mut stale_epochs = 0usize;

    'epochs: for epoch in 1..=cfg.epochs as u64 {
        let mut epoch_total = 0.0;
        for _ in 0..steps_per_epoch {
            step += 1;
            let outcome = run_step(corpus, cfg, &plan, &mut params, &pooled, &index,
                &mut encoder_adam, &mut critic_adam, derive_seed(cfg.seed, step))?;
            let b = &outcome.breakdown;
            if !b.is_finite() {
                return Err(DmiError::NonFiniteLoss(format!(
                    "step {step}: info_nce={} kl_term={} l_mi={} l_total={}",
                    b.info_nce, b.kl_term, b.l_mi, b.l_total
                )));
            }
            epoch_total += b.l_total;
            log.rows.push(LogRow {
                step,
                epoch,
                info_nce: b.info_nce,
                kl_term: b.kl_term,
                mi_y_zs: b.mi_y_zs,
                mi_zs_z: b.mi_zs_z,
                mi_y_zi_sum: b.mi_y_zi_sum(),
                mi_zi_zs_sum: b.mi_zi_zs_sum(),
                l_decouple: b.l_decouple,
                l_mi: b.l_mi,
                l_total: b.l_total,
            });
        }
        // Early stop: best epoch-average l_total must improve by at least
        // 1e-5 within any 10 consecutive epochs.
        let avg = epoch_total / steps_per_epoch as f64;
        if best_epoch_avg - avg >= 1e-5 {
            best_epoch_avg = avg;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= 10 {
                break 'epochs;
            }
        }
    }
    Ok((params, log))
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    corpus: &Corpus,
    cfg: &TrainConfig,
    plan: &VariantPlan,
    params: &mut HeadParams,
    pooled: &[crate::corpus::VideoFeature],
    index: &std::collections::HashMap<&str, usize>,
    encoder_adam: &mut Adam,
    critic_adam: &mut Adam,
    step_seed: u64,
) -> Result<StepOutcome> {
    let model = &cfg.model;
    let batch = sample_batch(corpus, cfg, step_seed)?;
    debug_assert!(
        batch.negatives.iter().all(|n| {
            !batch.anchors.contains(n) && !batch.positives.contains(n)
        }),
        "negative pool intersects the step's anchors/positives"
    );
    let n_a = batch.anchors.len();
    let n_n = batch.negatives.len();

    // Batch video order: anchors, positives, negatives.
    let mut feat_refs: Vec<&[f64]> = Vec::with_capacity(2 * n_a + n_n);
    let lookup = |id: &str| -> usize { *index.get(id).expect("sampled id exists") };
    let anchor_idx: Vec<usize> = (0..n_a).collect();
    let pos_idx: Vec<usize> = (n_a..2 * n_a).collect();
    let neg_idx: Vec<usize> = (2 * n_a..2 * n_a + n_n).collect();
    for id in batch.anchors.iter().chain(&batch.positives).chain(&batch.negatives) {
        feat_refs.push(&pooled[lookup(id)].values);
    }
    let enc = encode_batch(params, &feat_refs, plan);
    let n_batch = feat_refs.len();

    // One seeded dissimilar partner per anchor for the label critics.
    let mut pick_rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, 1));
    let label_negs: Vec<usize> = (0..n_a)
        .map(|_| neg_idx[pick_rng.gen_range(0..n_n)])
        .collect();
    // Label-MI pair batch: (anchor, positive, 1) then (anchor, negative, 0).
    let label_a_idx: Vec<usize> = anchor_idx.iter().chain(&anchor_idx).copied().collect();
    let label_b_idx: Vec<usize> = pos_idx.iter().chain(&label_negs).copied().collect();
    let labels: Vec<bool> = (0..2 * n_a).map(|i| i < n_a).collect();
    // Continuous-MI batch: anchors then positives.
    let cont_idx: Vec<usize> = anchor_idx.iter().chain(&pos_idx).copied().collect();

    let sub_rows = |head: usize, idx: &[usize]| -> Mat {
        let mut m = Mat::zeros(idx.len(), model.d_z);
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&enc.sub_caches[i][head].out);
        }
        m
    };
    let aux_rows = |idx: &[usize]| -> Mat {
        let mut m = Mat::zeros(idx.len(), model.d_s);
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&enc.aux_caches[i].out);
        }
        m
    };

    // ---- critic phase: tighten every active bound on fixed embeddings ----
    if plan.any_mi() {
        for _ in 0..cfg.critic_steps_per_encoder_step {
            let mut gbuf = vec![0.0; params.layout.total];
            if plan.mi_y_zs {
                let a = aux_rows(&label_a_idx);
                let b = aux_rows(&label_b_idx);
                let out = mi_label_lower(&a, &b, &labels, &params.aux_critic())?;
                let off = &params.layout.aux_critic;
                write_neg(&mut gbuf[off.w1.clone()], &out.grad_critic.w1);
                write_neg(&mut gbuf[off.b1.clone()], &out.grad_critic.b1);
                write_neg(&mut gbuf[off.w2.clone()], &out.grad_critic.w2);
                write_neg(&mut gbuf[off.b2.clone()], &out.grad_critic.b2);
            }
            if plan.mi_y_zi {
                for i in 0..model.k {
                    let a = sub_rows(i, &label_a_idx);
                    let b = sub_rows(i, &label_b_idx);
                    // The sub critics also fit by conditional likelihood;
                    // only the estimator read out differs.
                    let out = mi_label_lower(&a, &b, &labels, &params.sub_critic(i))?;
                    let off = &params.layout.sub_critics[i];
                    write_neg(&mut gbuf[off.w1.clone()], &out.grad_critic.w1);
                    write_neg(&mut gbuf[off.b1.clone()], &out.grad_critic.b1);
                    write_neg(&mut gbuf[off.w2.clone()], &out.grad_critic.w2);
                    write_neg(&mut gbuf[off.b2.clone()], &out.grad_critic.b2);
                }
            }
            if plan.mi_zs_z {
                let za = gather(&enc.v, &cont_idx, model.v_dim());
                let zb = aux_rows(&cont_idx);
                let (_, g) = decoder_loglik(&za, &zb, &params.decoder());
                let off = &params.layout.decoder;
                write_neg(&mut gbuf[off.w.clone()], &g.w);
                write_neg(&mut gbuf[off.b.clone()], &g.b);
                write_neg(&mut gbuf[off.logvar.clone()], &g.logvar);
            }
            if plan.mi_zi_zs {
                let zb = aux_rows(&cont_idx);
                for i in 0..model.k {
                    let za = sub_rows(i, &cont_idx);
                    let out = mi_cont_lower(&za, &zb, &params.projection(i), model.tau_mi)?;
                    let off = &params.layout.projections[i];
                    write_neg(&mut gbuf[off.aw.clone()], &out.grad_proj.aw);
                    write_neg(&mut gbuf[off.ab.clone()], &out.grad_proj.ab);
                    write_neg(&mut gbuf[off.bw.clone()], &out.grad_proj.bw);
                    write_neg(&mut gbuf[off.bb.clone()], &out.grad_proj.bb);
                }
            }
            critic_adam.step(&mut params.data, &gbuf);
        }
    }

    // ---- loss phase: full objective and one encoder update ---------------

    // Gradients per video, accumulated per embedding space.
    let mut du = vec![vec![0.0; enc.u[0].len()]; n_batch];
    let mut dv_raw = if plan.use_sub {
        vec![vec![0.0; model.v_dim()]; n_batch]
    } else {
        Vec::new()
    };
    let mut dsub = if plan.use_sub {
        vec![vec![vec![0.0; model.d_z]; model.k]; n_batch]
    } else {
        Vec::new()
    };
    let mut daux = if plan.use_aux {
        vec![vec![0.0; model.d_s]; n_batch]
    } else {
        Vec::new()
    };

    // Contrastive term: mean over anchors, shared negative pool.
    let neg_refs: Vec<&[f64]> = neg_idx.iter().map(|&i| enc.u[i].as_slice()).collect();
    let mut info_mean = 0.0;
    let w_anchor = 1.0 / n_a as f64;
    for a in 0..n_a {
        let out = info_nce(
            &enc.u[anchor_idx[a]],
            &enc.u[pos_idx[a]],
            &neg_refs,
            model.tau,
            cfg.include_positive_in_denominator,
        )?;
        info_mean += out.loss * w_anchor;
        axpy_into(&mut du[anchor_idx[a]], w_anchor, &out.grad_v);
        axpy_into(&mut du[pos_idx[a]], w_anchor, &out.grad_pos);
        for (j, g) in out.grad_negs.iter().enumerate() {
            axpy_into(&mut du[neg_idx[j]], w_anchor, g);
        }
    }

    // KL term over the full step batch, one sub-feature batch per head.
    let mut kl_value = 0.0;
    if plan.compute_kl {
        let all_idx: Vec<usize> = (0..n_batch).collect();
        let batches: Vec<Mat> = (0..model.k).map(|i| sub_rows(i, &all_idx)).collect();
        let out = disentangle_kl(&batches, model.kl_cap)?;
        kl_value = out.kl_term;
        if plan.kl_weight != 0.0 {
            for (i, g) in out.grads.iter().enumerate() {
                for (r, &vid) in all_idx.iter().enumerate() {
                    axpy_into(&mut dsub[vid][i], -plan.kl_weight, g.row(r));
                }
            }
        }
    }

    // MI terms at their mi_loss coefficients.
    let mut terms = MiTerms::zero(model.k);
    let (_, coeffs) = mi_loss(&terms, &cfg.mi_weights);
    if plan.mi_y_zs {
        let a = aux_rows(&label_a_idx);
        let b = aux_rows(&label_b_idx);
        let out = mi_label_lower(&a, &b, &labels, &params.aux_critic())?;
        terms.y_zs = out.value;
        scatter_rows(&mut daux, &label_a_idx, &out.grad_a, coeffs.y_zs);
        scatter_rows(&mut daux, &label_b_idx, &out.grad_b, coeffs.y_zs);
    }
    if plan.mi_zs_z {
        let za = gather(&enc.v, &cont_idx, model.v_dim());
        let zb = aux_rows(&cont_idx);
        let out = mi_cont_upper(&za, &zb, &params.decoder())?;
        // Minimized estimate of a nonnegative MI: saturate at 0 from below
        // (same device as kl_cap, opposite rail). Everything under the rail
        // is estimator error, and chasing it is an unbounded side channel:
        // the encoder controls both arguments, so it can anti-align them
        // against the current decoder without limit.
        terms.zs_z = out.value.max(0.0);
        if out.value > 0.0 {
            scatter_rows(&mut dv_raw, &cont_idx, &out.grad_za, coeffs.zs_z);
            scatter_rows(&mut daux, &cont_idx, &out.grad_zb, coeffs.zs_z);
        }
    }
    if plan.mi_y_zi {
        for i in 0..model.k {
            let a = sub_rows(i, &label_a_idx);
            let b = sub_rows(i, &label_b_idx);
            let shuffle_seed = derive_seed(step_seed, 2 + i as u64);
            let out = mi_label_upper(&a, &b, &labels, &params.sub_critic(i), shuffle_seed)?;
            // Same zero rail as the zs_z term: negative label-MI estimates
            // carry no information worth descending into.
            terms.y_zi[i] = out.value.max(0.0);
            if out.value > 0.0 {
                scatter_sub_rows(&mut dsub, i, &label_a_idx, &out.grad_a, coeffs.y_zi);
                scatter_sub_rows(&mut dsub, i, &label_b_idx, &out.grad_b, coeffs.y_zi);
            }
        }
    }
    if plan.mi_zi_zs {
        let zb = aux_rows(&cont_idx);
        for i in 0..model.k {
            let za = sub_rows(i, &cont_idx);
            let out = mi_cont_lower(&za, &zb, &params.projection(i), model.tau_mi)?;
            terms.zi_zs[i] = out.value;
            scatter_sub_rows(&mut dsub, i, &cont_idx, &out.grad_za, coeffs.zi_zs);
            scatter_rows(&mut daux, &cont_idx, &out.grad_zb, coeffs.zi_zs);
        }
    }

    let breakdown = total_loss(info_mean, kl_value, &terms, &cfg.mi_weights, plan.kl_weight);

    // Backprop: normalized-space gradients to the contrastive source, then
    // every per-head gradient through its perceptron.
    let mut gbuf = vec![0.0; params.layout.total];
    for vid in 0..n_batch {
        if plan.contrast_on_aux {
            normalization_backward(&du[vid], &enc.u[vid], enc.unorm[vid], &mut daux[vid]);
        } else {
            let mut dv = vec![0.0; model.v_dim()];
            normalization_backward(&du[vid], &enc.u[vid], enc.unorm[vid], &mut dv);
            if !dv_raw.is_empty() {
                axpy_into(&mut dv, 1.0, &dv_raw[vid]);
            }
            for i in 0..model.k {
                axpy_into(&mut dsub[vid][i], 1.0, &dv[i * model.d_z..(i + 1) * model.d_z]);
            }
        }
        if plan.use_sub {
            for i in 0..model.k {
                if dsub[vid][i].iter().any(|g| *g != 0.0) {
                    mlp_backward(
                        &params.sub_head(i),
                        feat_refs[vid],
                        &enc.sub_caches[vid][i],
                        &dsub[vid][i],
                        &params.layout.sub_heads[i].clone(),
                        &mut gbuf,
                        None,
                    );
                }
            }
        }
        if plan.use_aux && daux[vid].iter().any(|g| *g != 0.0) {
            mlp_backward(
                &params.aux_head(),
                feat_refs[vid],
                &enc.aux_caches[vid],
                &daux[vid],
                &params.layout.aux_head.clone(),
                &mut gbuf,
                None,
            );
        }
    }
    encoder_adam.step(&mut params.data, &gbuf);

    Ok(StepOutcome { breakdown })
}

fn write_neg(dst: &mut [f64], ascent: &[f64]) {
    for (d, g) in dst.iter_mut().zip(ascent) {
        *d = -g;
    }
}

fn axpy_into(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Adds `scale *` each matrix row into the per-video aux gradient slots.
fn scatter_rows(dst: &mut [Vec<f64>], idx: &[usize], rows: &Mat, scale: f64) {
    for (r, &vid) in idx.iter().enumerate() {
        axpy_into(&mut dst[vid], scale, rows.row(r));
    }
}

/// Adds `scale *` each matrix row into per-video sub-head gradient slots.
fn scatter_sub_rows(
    dst: &mut [Vec<Vec<f64>>],
    head: usize,
    idx: &[usize],
    rows: &Mat,
    scale: f64,
) {
    for (r, &vid) in idx.iter().enumerate() {
        axpy_into(&mut dst[vid][head], scale, rows.row(r));
    }
}

/// Metrics of one ablation (or full-model) training run.
#[derive(Debug, Clone, Serialize)]
pub struct AblationMetrics {
    pub variant: String,
    pub top100_map: f64,
    pub topinf_map: f64,
}

/// Retrieval embedding used when evaluating a given training variant.
pub fn retrieval_variant(ablation: Option<AblationVariant>) -> crate::eval::EmbeddingVariant {
    match ablation {
        Some(AblationVariant::RemoveDisentangleModule) => crate::eval::EmbeddingVariant::Aux,
        Some(AblationVariant::RemoveAuxModule) => crate::eval::EmbeddingVariant::V,
        _ => crate::eval::EmbeddingVariant::Global,
    }
}

/// Trains the requested variant and reports its retrieval quality on the
/// variant's own embedding (z_s for the aux-only model, v for the sub-only
/// model, the global embedding otherwise).
pub fn run_ablation(
    corpus: &Corpus,
    cfg: &TrainConfig,
    variant: AblationVariant,
) -> Result<AblationMetrics> {
    let mut cfg = *cfg;
    cfg.ablation = Some(variant);
    let (params, _) = train(corpus, &cfg)?;
    let emb = retrieval_variant(Some(variant));
    // One pass scores both cutoffs; the k argument only shapes per-query APs.
    let report = crate::eval::evaluate_retrieval(&params, corpus, emb, None)?;
    Ok(AblationMetrics {
        variant: variant.name().to_string(),
        top100_map: report.top100_map,
        topinf_map: report.topinf_map,
    })
}
