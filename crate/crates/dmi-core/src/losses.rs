//! Training objectives with forward values and analytic gradients.
//!
//! Every operation returns its scalar value together with gradients for
//! each differentiable input, so the trainer composes them without any
//! autodiff machinery and the tests can hold each gradient against a
//! central-difference oracle (the crate's central correctness property).
//!
//! The contrastive loss follows the asymmetric form whose denominator sums
//! the negatives only; a flag switches to the standard variant that
//! includes the positive. The disentanglement term is a capped sum of
//! pairwise diagonal-Gaussian KLs over the sub-feature batch statistics;
//! saturated pairs contribute their cap and no gradient. Four mutual
//! information estimators feed the combined MI objective: a
//! Barber-Agakov lower bound and a shuffle-contrast upper bound for the
//! label terms, and a conditional-Gaussian contrastive upper bound and an
//! NCE-style cosine lower bound for the continuous terms.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::heads::{mlp_backward_parts, mlp_forward, CondGaussView, MlpView, ProjView};
use crate::mat::{dot, l2_norm, log_sum_exp, sigmoid, softplus, Mat};
use crate::numerics::VAR_FLOOR;
use crate::{DmiError, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Every logged component of one optimization step.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub info_nce: f64,
    pub kl_term: f64,
    pub mi_y_zs: f64,
    pub mi_zs_z: f64,
    pub mi_y_zi: Vec<f64>,
    pub mi_zi_zs: Vec<f64>,
    pub l_decouple: f64,
    pub l_mi: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn mi_y_zi_sum(&self) -> f64 {
        self.mi_y_zi.iter().sum()
    }

    pub fn mi_zi_zs_sum(&self) -> f64 {
        self.mi_zi_zs.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        let scalars = [
            self.info_nce,
            self.kl_term,
            self.mi_y_zs,
            self.mi_zs_z,
            self.l_decouple,
            self.l_mi,
            self.l_total,
        ];
        scalars.iter().all(|x| x.is_finite())
            && self.mi_y_zi.iter().all(|x| x.is_finite())
            && self.mi_zi_zs.iter().all(|x| x.is_finite())
    }
}

/// Contrastive loss value and its input gradients.
#[derive(Debug, Clone)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_v: Vec<f64>,
    pub grad_pos: Vec<f64>,
    pub grad_negs: Vec<Vec<f64>>,
}

/// One-anchor contrastive loss over raw dot products at temperature `tau`.
///
/// With `include_positive = false` (the default form):
/// `loss = -(v . v_pos)/tau + logsumexp_j((v . neg_j)/tau)`.
/// With `include_positive = true` the positive joins the logsumexp, giving
/// the familiar softmax cross-entropy that is bounded below by 0.
pub fn info_nce(
    v: &[f64],
    v_pos: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    include_positive: bool,
) -> Result<InfoNce> {
    if negatives.is_empty() {
        return Err(DmiError::NoNegatives);
    }
    let d = v.len();
    if v_pos.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(DmiError::LengthMismatch(
            "info_nce vectors must share one length".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(DmiError::ConfigError("tau must be > 0".into()));
    }
    let pos_logit = dot(v, v_pos) / tau;
    let neg_logits: Vec<f64> = negatives.iter().map(|n| dot(v, n) / tau).collect();

    let mut grad_v = vec![0.0; d];
    let grad_pos;
    let mut grad_negs = vec![vec![0.0; d]; negatives.len()];
    let loss;
    if include_positive {
        let mut all = Vec::with_capacity(neg_logits.len() + 1);
        all.push(pos_logit);
        all.extend_from_slice(&neg_logits);
        let lse = log_sum_exp(&all);
        loss = -pos_logit + lse;
        // d loss / d logit = softmax - onehot(positive)
        let w: Vec<f64> = all.iter().map(|l| (l - lse).exp()).collect();
        let dpos = (w[0] - 1.0) / tau;
        grad_pos = v.iter().map(|x| dpos * x).collect();
        crate::mat::axpy(dpos, v_pos, &mut grad_v);
        for (j, neg) in negatives.iter().enumerate() {
            let dneg = w[j + 1] / tau;
            crate::mat::axpy(dneg, neg, &mut grad_v);
            for c in 0..d {
                grad_negs[j][c] = dneg * v[c];
            }
        }
    } else {
        let lse = log_sum_exp(&neg_logits);
        loss = -pos_logit + lse;
        let dpos = -1.0 / tau;
        grad_pos = v.iter().map(|x| dpos * x).collect();
        crate::mat::axpy(dpos, v_pos, &mut grad_v);
        for (j, neg) in negatives.iter().enumerate() {
            let dneg = (neg_logits[j] - lse).exp() / tau;
            crate::mat::axpy(dneg, neg, &mut grad_v);
            for c in 0..d {
                grad_negs[j][c] = dneg * v[c];
            }
        }
    }
    Ok(InfoNce { loss, grad_v, grad_pos, grad_negs })
}

/// Capped pairwise-KL disentanglement term and per-batch gradients.
#[derive(Debug, Clone)]
pub struct DisentangleKl {
    pub kl_term: f64,
    /// One gradient matrix per sub-feature batch, same shapes as the inputs.
    pub grads: Vec<Mat>,
}

struct BatchStats {
    mean: Vec<f64>,
    raw_var: Vec<f64>,
    var: Vec<f64>,
    n: usize,
}

fn batch_stats(batch: &Mat) -> Result<BatchStats> {
    let n = batch.rows;
    if n < 2 {
        return Err(DmiError::BatchTooSmall(format!(
            "disentangle_kl needs at least 2 rows per batch, got {n}"
        )));
    }
    let m = batch.cols;
    let mut mean = vec![0.0; m];
    for row in batch.iter_rows() {
        for (acc, x) in mean.iter_mut().zip(row) {
            *acc += x;
        }
    }
    for acc in &mut mean {
        *acc /= n as f64;
    }
    let mut raw_var = vec![0.0; m];
    for row in batch.iter_rows() {
        for c in 0..m {
            let d = row[c] - mean[c];
            raw_var[c] += d * d;
        }
    }
    for v in &mut raw_var {
        *v /= n as f64;
    }
    let var = raw_var.iter().map(|v| v.max(VAR_FLOOR)).collect();
    Ok(BatchStats { mean, raw_var, var, n })
}

/// Sum over unordered head pairs (i < j) of `min(KL(P_i || P_j), kl_cap)`
/// where `P_i` is the diagonal Gaussian fit to batch i. Saturated pairs add
/// the cap and no gradient. Gradients flow through both the mean and the
/// (unfloored) population variance of each batch.
pub fn disentangle_kl(sub_batches: &[Mat], kl_cap: f64) -> Result<DisentangleKl> {
    let k = sub_batches.len();
    if k == 0 {
        return Err(DmiError::BatchTooSmall("no sub-feature batches".into()));
    }
    let m = sub_batches[0].cols;
    if sub_batches.iter().any(|b| b.cols != m) {
        return Err(DmiError::LengthMismatch(
            "sub-feature batches must share one width".into(),
        ));
    }
    let stats: Vec<BatchStats> = sub_batches
        .iter()
        .map(batch_stats)
        .collect::<Result<_>>()?;
    let mut grads: Vec<Mat> = sub_batches
        .iter()
        .map(|b| Mat::zeros(b.rows, b.cols))
        .collect();
    let mut kl_term = 0.0;

    for i in 0..k {
        for j in (i + 1)..k {
            let (sa, sb) = (&stats[i], &stats[j]);
            let mut kl = 0.0;
            for c in 0..m {
                let dm = sb.mean[c] - sa.mean[c];
                kl += 0.5 * (sb.var[c] / sa.var[c]).ln()
                    + (sa.var[c] + dm * dm) / (2.0 * sb.var[c])
                    - 0.5;
            }
            if kl >= kl_cap {
                kl_term += kl_cap;
                continue; // saturated: no gradient
            }
            kl_term += kl;
            for c in 0..m {
                let dm = sb.mean[c] - sa.mean[c];
                let (va, vb) = (sa.var[c], sb.var[c]);
                let d_mu_a = -dm / vb;
                let d_mu_b = dm / vb;
                let d_va = -0.5 / va + 0.5 / vb;
                let d_vb = 0.5 / vb - (va + dm * dm) / (2.0 * vb * vb);
                // Chain into batch entries; floored dims have no variance
                // gradient.
                let var_a_live = sa.raw_var[c] > VAR_FLOOR;
                let var_b_live = sb.raw_var[c] > VAR_FLOOR;
                let na = sa.n as f64;
                for r in 0..sa.n {
                    let x = sub_batches[i].get(r, c);
                    let mut g = d_mu_a / na;
                    if var_a_live {
                        g += d_va * 2.0 * (x - sa.mean[c]) / na;
                    }
                    grads[i].data[r * m + c] += g;
                }
                let nb = sb.n as f64;
                for r in 0..sb.n {
                    let x = sub_batches[j].get(r, c);
                    let mut g = d_mu_b / nb;
                    if var_b_live {
                        g += d_vb * 2.0 * (x - sb.mean[c]) / nb;
                    }
                    grads[j].data[r * m + c] += g;
                }
            }
        }
    }
    Ok(DisentangleKl { kl_term, grads })
}

/// Gradients of one pair critic's parameters.
#[derive(Debug, Clone)]
pub struct PairCriticGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PairCriticGrads {
    fn zeros(critic: &MlpView) -> Self {
        PairCriticGrads {
            w1: vec![0.0; critic.w1.len()],
            b1: vec![0.0; critic.b1.len()],
            w2: vec![0.0; critic.w2.len()],
            b2: vec![0.0; critic.b2.len()],
        }
    }
}

/// Label-MI estimate with gradients for both embedding sides and the critic.
#[derive(Debug, Clone)]
pub struct LabelMi {
    pub value: f64,
    pub grad_a: Mat,
    pub grad_b: Mat,
    pub grad_critic: PairCriticGrads,
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Interaction feature of one pair: `[|a - b| || a * b]`.
fn pair_feature(a: &[f64], b: &[f64]) -> Vec<f64> {
    let m = a.len();
    let mut phi = Vec::with_capacity(2 * m);
    for c in 0..m {
        phi.push((a[c] - b[c]).abs());
    }
    for c in 0..m {
        phi.push(a[c] * b[c]);
    }
    phi
}

fn pair_feature_backward(a: &[f64], b: &[f64], dphi: &[f64], da: &mut [f64], db: &mut [f64]) {
    let m = a.len();
    for c in 0..m {
        let s = sign0(a[c] - b[c]);
        da[c] += dphi[c] * s + dphi[m + c] * b[c];
        db[c] += -dphi[c] * s + dphi[m + c] * a[c];
    }
}

fn check_pair_inputs(
    a: &Mat,
    b: &Mat,
    labels: &[bool],
    critic: &MlpView,
    op: &str,
) -> Result<usize> {
    let n = a.rows;
    if n == 0 {
        return Err(DmiError::EmptyInput(format!("{op} received no pairs")));
    }
    if b.rows != n || b.cols != a.cols {
        return Err(DmiError::LengthMismatch(format!(
            "{op} pair sides have shapes {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if labels.len() != n {
        return Err(DmiError::LengthMismatch(format!(
            "{op} got {n} pairs but {} labels",
            labels.len()
        )));
    }
    if critic.in_dim != 2 * a.cols || critic.out_dim != 1 {
        return Err(DmiError::LengthMismatch(format!(
            "{op} critic expects input {} and one output, pairs give {}",
            critic.in_dim,
            2 * a.cols
        )));
    }
    Ok(n)
}

fn log_q(y: bool, t: f64) -> f64 {
    if y {
        -softplus(-t)
    } else {
        -softplus(t)
    }
}

fn empirical_entropy(labels: &[bool]) -> f64 {
    let n = labels.len() as f64;
    let p = labels.iter().filter(|y| **y).count() as f64 / n;
    if p == 0.0 || p == 1.0 {
        0.0
    } else {
        -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
    }
}

/// Shared forward/backward scaffold for the label-MI bounds: forwards every
/// pair through the critic, lets `value_and_dts` turn logits into a value
/// and per-pair logit gradients, and chains those back to the inputs.
fn label_mi_with<F>(a: &Mat, b: &Mat, critic: &MlpView, value_and_dts: F) -> LabelMi
where
    F: FnOnce(&[f64]) -> (f64, Vec<f64>),
{
    let n = a.rows;
    let mut phis = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let phi = pair_feature(a.row(i), b.row(i));
        let cache = mlp_forward(critic, &phi);
        ts.push(cache.out[0]);
        phis.push(phi);
        caches.push(cache);
    }
    let (value, dts) = value_and_dts(&ts);
    let mut grad_a = Mat::zeros(n, a.cols);
    let mut grad_b = Mat::zeros(n, b.cols);
    let mut grad_critic = PairCriticGrads::zeros(critic);
    for i in 0..n {
        let dt = dts[i];
        if dt == 0.0 {
            continue;
        }
        let mut dphi = vec![0.0; critic.in_dim];
        mlp_backward_parts(
            critic,
            &phis[i],
            &caches[i],
            &[dt],
            &mut grad_critic.w1,
            &mut grad_critic.b1,
            &mut grad_critic.w2,
            &mut grad_critic.b2,
            Some(&mut dphi),
        );
        pair_feature_backward(a.row(i), b.row(i), &dphi, grad_a.row_mut(i), grad_b.row_mut(i));
    }
    LabelMi { value, grad_a, grad_b, grad_critic }
}

/// Variational lower bound on the label information carried by the pairs:
/// empirical label entropy plus the mean critic log-likelihood. Never
/// exceeds the label entropy since log-likelihoods are non-positive.
pub fn mi_label_lower(a: &Mat, b: &Mat, labels: &[bool], critic: &MlpView) -> Result<LabelMi> {
    let n = check_pair_inputs(a, b, labels, critic, "mi_label_lower")?;
    Ok(label_mi_with(a, b, critic, |ts| {
        let h = empirical_entropy(labels);
        let mut value = h;
        let mut dts = Vec::with_capacity(n);
        for i in 0..n {
            value += log_q(labels[i], ts[i]) / n as f64;
            let y = if labels[i] { 1.0 } else { 0.0 };
            dts.push((y - sigmoid(ts[i])) / n as f64);
        }
        (value, dts)
    }))
}

/// Contrastive-likelihood upper bound on the label information: the mean
/// critic log-likelihood under the true pairing minus the mean under a
/// seeded label shuffle. Zero exactly when the critic ignores its input.
pub fn mi_label_upper(
    a: &Mat,
    b: &Mat,
    labels: &[bool],
    critic: &MlpView,
    shuffle_seed: u64,
) -> Result<LabelMi> {
    let n = check_pair_inputs(a, b, labels, critic, "mi_label_upper")?;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    perm.shuffle(&mut rng);
    Ok(label_mi_with(a, b, critic, |ts| {
        let mut value = 0.0;
        let mut dts = Vec::with_capacity(n);
        for i in 0..n {
            let joint = log_q(labels[i], ts[i]);
            let marginal = log_q(labels[perm[i]], ts[i]);
            value += (joint - marginal) / n as f64;
            // Sigmoid terms cancel between the two likelihoods.
            let y = if labels[i] { 1.0 } else { 0.0 };
            let ys = if labels[perm[i]] { 1.0 } else { 0.0 };
            dts.push((y - ys) / n as f64);
        }
        (value, dts)
    }))
}

/// Decoder-parameter gradients of the continuous upper bound.
#[derive(Debug, Clone)]
pub struct CondGaussGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Continuous-MI upper estimate with gradients for both batches and the
/// decoder.
#[derive(Debug, Clone)]
pub struct ContMiUpper {
    pub value: f64,
    pub grad_za: Mat,
    pub grad_zb: Mat,
    pub grad_decoder: CondGaussGrads,
}

/// Contrastive conditional-Gaussian estimate of I(za; zb):
///
/// `mean_i [ log q(zb_i|za_i) - log mean_j q(zb_i|za_j) ]`
///
/// evaluated as `mean_i [L_ii - logsumexp_j L_ij] + ln n` with
/// `L_ij = log q(zb_i | za_j)`. The product-of-marginals term averages the
/// decoder likelihood over all conditioning rows inside the log, which
/// keeps the estimate finite and calibrated; a decoder that ignores its
/// input yields exactly 0.
pub fn mi_cont_upper(za: &Mat, zb: &Mat, dec: &CondGaussView) -> Result<ContMiUpper> {
    let n = za.rows;
    if n == 0 {
        return Err(DmiError::BatchTooSmall("mi_cont_upper needs at least 1 row".into()));
    }
    if zb.rows != n {
        return Err(DmiError::LengthMismatch(format!(
            "mi_cont_upper batches have {n} vs {} rows",
            zb.rows
        )));
    }
    if za.cols != dec.in_dim || zb.cols != dec.out_dim {
        return Err(DmiError::LengthMismatch(format!(
            "mi_cont_upper decoder is {}->{}, batches are {}->{}",
            dec.in_dim, dec.out_dim, za.cols, zb.cols
        )));
    }
    let d = dec.out_dim;
    let inv_var: Vec<f64> = dec.logvar.iter().map(|s| (-s).exp()).collect();
    let const_term: f64 = dec.logvar.iter().map(|s| -0.5 * (LN_2PI + s)).sum();

    // Decoder means per conditioning row.
    let mut means = Mat::zeros(n, d);
    for j in 0..n {
        let m = crate::mat::affine(dec.w, dec.b, za.row(j), d, dec.in_dim);
        means.row_mut(j).copy_from_slice(&m);
    }
    // L[i][j] = log q(zb_i | za_j)
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        let zbi = zb.row(i);
        for j in 0..n {
            let mj = means.row(j);
            let mut q = 0.0;
            for c in 0..d {
                let r = zbi[c] - mj[c];
                q -= 0.5 * r * r * inv_var[c];
            }
            l.set(i, j, const_term + q);
        }
    }
    let mut value = (n as f64).ln();
    let mut grad_za = Mat::zeros(n, za.cols);
    let mut grad_zb = Mat::zeros(n, d);
    let mut dmeans = Mat::zeros(n, d);
    let mut grad_decoder = CondGaussGrads {
        w: vec![0.0; dec.w.len()],
        b: vec![0.0; d],
        logvar: vec![0.0; d],
    };
    let mut flat_rows = true;
    for i in 0..n {
        let row = l.row(i);
        flat_rows = flat_rows && row.iter().all(|&x| x == row[0]);
        let lse = log_sum_exp(row);
        value += (row[i] - lse) / n as f64;
        let zbi = zb.row(i);
        for j in 0..n {
            let p = (row[j] - lse).exp();
            let coeff = ((if i == j { 1.0 } else { 0.0 }) - p) / n as f64;
            if coeff == 0.0 {
                continue;
            }
            let mj = means.row(j);
            for c in 0..d {
                let r = zbi[c] - mj[c];
                let rv = r * inv_var[c];
                grad_zb.data[i * d + c] -= coeff * rv;
                dmeans.data[j * d + c] += coeff * rv;
                grad_decoder.logvar[c] += coeff * (-0.5 + 0.5 * r * rv);
            }
        }
    }
    // A decoder that ignores its input makes every likelihood row constant
    // and the estimate is 0 by construction; snap the value so the promise
    // holds bitwise instead of up to summation dust.
    if flat_rows {
        value = 0.0;
    }
    // Chain mean gradients through the affine decoder.
    for j in 0..n {
        crate::mat::affine_backward(
            dec.w,
            za.row(j),
            dmeans.row(j),
            dec.in_dim,
            &mut grad_decoder.w,
            &mut grad_decoder.b,
            Some(grad_za.row_mut(j)),
        );
    }
    Ok(ContMiUpper { value, grad_za, grad_zb, grad_decoder })
}

/// Projection-parameter gradients of the contrastive lower bound.
#[derive(Debug, Clone)]
pub struct ProjGrads {
    pub aw: Vec<f64>,
    pub ab: Vec<f64>,
    pub bw: Vec<f64>,
    pub bb: Vec<f64>,
}

/// Continuous-MI lower estimate with gradients for both batches and the
/// projection parameters.
#[derive(Debug, Clone)]
pub struct ContMiLower {
    pub value: f64,
    pub grad_za: Mat,
    pub grad_zb: Mat,
    pub grad_proj: ProjGrads,
}

// Cosine norms are floored here to keep the similarity defined for
// degenerate projected vectors; the floor only binds on measure-zero
// inputs.
const NORM_FLOOR: f64 = 1e-12;

/// NCE-style lower bound on I(za; zb):
///
/// `mean_i [ sim(za_i, zb_i)/tau_mi - logsumexp_j sim(za_i, zb_j)/tau_mi ] + ln n`
///
/// with `sim` the cosine of the two affine projections. A single-row batch
/// or a constant similarity gives exactly 0.
pub fn mi_cont_lower(za: &Mat, zb: &Mat, proj: &ProjView, tau_mi: f64) -> Result<ContMiLower> {
    let n = za.rows;
    if n == 0 {
        return Err(DmiError::BatchTooSmall("mi_cont_lower needs at least 1 row".into()));
    }
    if zb.rows != n {
        return Err(DmiError::LengthMismatch(format!(
            "mi_cont_lower batches have {n} vs {} rows",
            zb.rows
        )));
    }
    if za.cols != proj.a_in || zb.cols != proj.b_in {
        return Err(DmiError::LengthMismatch(format!(
            "mi_cont_lower projection expects {}x{}, batches are {}x{}",
            proj.a_in, proj.b_in, za.cols, zb.cols
        )));
    }
    if !(tau_mi > 0.0) {
        return Err(DmiError::ConfigError("tau_mi must be > 0".into()));
    }
    let p = proj.p;
    let mut ga = Mat::zeros(n, p);
    let mut gb = Mat::zeros(n, p);
    let mut na = vec![0.0; n];
    let mut nb = vec![0.0; n];
    for i in 0..n {
        let g = crate::mat::affine(proj.aw, proj.ab, za.row(i), p, proj.a_in);
        na[i] = l2_norm(&g).max(NORM_FLOOR);
        ga.row_mut(i).copy_from_slice(&g);
        let g = crate::mat::affine(proj.bw, proj.bb, zb.row(i), p, proj.b_in);
        nb[i] = l2_norm(&g).max(NORM_FLOOR);
        gb.row_mut(i).copy_from_slice(&g);
    }
    let mut sims = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sims.set(i, j, dot(ga.row(i), gb.row(j)) / (na[i] * nb[j]));
        }
    }
    let mut value = (n as f64).ln();
    let mut dga = Mat::zeros(n, p);
    let mut dgb = Mat::zeros(n, p);
    let mut logits = vec![0.0; n];
    let mut flat_rows = true;
    for i in 0..n {
        for j in 0..n {
            logits[j] = sims.get(i, j) / tau_mi;
        }
        flat_rows = flat_rows && logits.iter().all(|&x| x == logits[0]);
        let lse = log_sum_exp(&logits);
        value += (logits[i] - lse) / n as f64;
        for j in 0..n {
            let pij = (logits[j] - lse).exp();
            let ds = ((if i == j { 1.0 } else { 0.0 }) - pij) / (n as f64 * tau_mi);
            if ds == 0.0 {
                continue;
            }
            let s = sims.get(i, j);
            let denom = na[i] * nb[j];
            for c in 0..p {
                dga.data[i * p + c] += ds * (gb.get(j, c) / denom - s * ga.get(i, c) / (na[i] * na[i]));
                dgb.data[j * p + c] += ds * (ga.get(i, c) / denom - s * gb.get(j, c) / (nb[j] * nb[j]));
            }
        }
    }
    let mut grad_za = Mat::zeros(n, za.cols);
    let mut grad_zb = Mat::zeros(n, zb.cols);
    let mut grad_proj = ProjGrads {
        aw: vec![0.0; proj.aw.len()],
        ab: vec![0.0; p],
        bw: vec![0.0; proj.bw.len()],
        bb: vec![0.0; p],
    };
    for i in 0..n {
        crate::mat::affine_backward(
            proj.aw,
            za.row(i),
            dga.row(i),
            proj.a_in,
            &mut grad_proj.aw,
            &mut grad_proj.ab,
            Some(grad_za.row_mut(i)),
        );
        crate::mat::affine_backward(
            proj.bw,
            zb.row(i),
            dgb.row(i),
            proj.b_in,
            &mut grad_proj.bw,
            &mut grad_proj.bb,
            Some(grad_zb.row_mut(i)),
        );
    }
    // Constant similarity rows carry no pairing signal and the estimate is
    // 0 by construction; snap the value so the promise holds bitwise.
    if flat_rows {
        value = 0.0;
    }
    Ok(ContMiLower { value, grad_za, grad_zb, grad_proj })
}

/// The four MI estimates of one step, in loss order.
#[derive(Debug, Clone)]
pub struct MiTerms {
    pub y_zs: f64,
    pub zs_z: f64,
    pub y_zi: Vec<f64>,
    pub zi_zs: Vec<f64>,
}

impl MiTerms {
    pub fn zero(k: usize) -> MiTerms {
        MiTerms { y_zs: 0.0, zs_z: 0.0, y_zi: vec![0.0; k], zi_zs: vec![0.0; k] }
    }
}

/// Per-term weights of the MI objective. All 1 reproduces the unweighted
/// combination.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MiWeights {
    pub y_zs: f64,
    pub zs_z: f64,
    pub y_zi: f64,
    pub zi_zs: f64,
}

impl Default for MiWeights {
    fn default() -> Self {
        MiWeights { y_zs: 1.0, zs_z: 1.0, y_zi: 1.0, zi_zs: 1.0 }
    }
}

/// Derivative of the combined MI objective with respect to each term,
/// i.e. the signed weight each estimator's gradient is scaled by.
#[derive(Debug, Clone, Copy)]
pub struct MiCoeffs {
    pub y_zs: f64,
    pub zs_z: f64,
    pub y_zi: f64,
    pub zi_zs: f64,
}

/// Combined MI objective:
///
/// `l_mi = -[w1 I(y;z_s) - w2 I(z_s;z)] + sum_i [w3 I(y;z_i) - w4 I(z_i;z_s)]`
///
/// Lower bounds sit where the sign rewards increase, upper bounds where it
/// rewards decrease, so optimizing the bound moves the true quantity the
/// intended way.
pub fn mi_loss(terms: &MiTerms, w: &MiWeights) -> (f64, MiCoeffs) {
    let l_mi = -(w.y_zs * terms.y_zs - w.zs_z * terms.zs_z)
        + terms.y_zi.iter().map(|c| w.y_zi * c).sum::<f64>()
        - terms.zi_zs.iter().map(|d| w.zi_zs * d).sum::<f64>();
    let coeffs = MiCoeffs {
        y_zs: -w.y_zs,
        zs_z: w.zs_z,
        y_zi: w.y_zi,
        zi_zs: -w.zi_zs,
    };
    (l_mi, coeffs)
}

/// Assembles the full breakdown: `l_decouple = info_nce - alpha * kl_term`
/// and `l_total = l_decouple + l_mi`.
pub fn total_loss(
    info_nce: f64,
    kl_term: f64,
    terms: &MiTerms,
    w: &MiWeights,
    alpha: f64,
) -> LossBreakdown {
    let (l_mi, _) = mi_loss(terms, w);
    let l_decouple = info_nce - alpha * kl_term;
    LossBreakdown {
        info_nce,
        kl_term,
        mi_y_zs: terms.y_zs,
        mi_zs_z: terms.zs_z,
        mi_y_zi: terms.y_zi.clone(),
        mi_zi_zs: terms.zi_zs.clone(),
        l_decouple,
        l_mi,
        l_total: l_decouple + l_mi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, gaussian_mi_true, gaussian_moments, kl_diag_gauss, GaussianStats};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(r: &mut ChaCha8Rng) -> f64 {
        r.sample(StandardNormal)
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| randn(r)).collect()
    }

    fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: rand_vec(r, rows * cols) }
    }

    // ---- info_nce -------------------------------------------------------

    #[test]
    fn uniform_logits_give_ln_n() {
        // v orthogonal to everything: all dots zero.
        let v = vec![1.0, 0.0];
        let pos = vec![0.0, 0.0];
        let negs: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![0.0, -1.0]];
        let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
        let out = info_nce(&v, &pos, &refs, 1.0, false).unwrap();
        assert_relative_eq!(out.loss, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_negative_closed_form() {
        // s+ = 1, s- = 0, tau = 1 -> loss = (s- - s+)/tau = -1.
        let v = vec![1.0, 0.0];
        let pos = vec![1.0, 0.0];
        let neg = vec![0.0, 1.0];
        let refs: Vec<&[f64]> = vec![&neg];
        let out = info_nce(&v, &pos, &refs, 1.0, false).unwrap();
        assert_relative_eq!(out.loss, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_direct_formula_oracle() {
        let mut r = rng(7);
        let d = 9;
        let v = rand_vec(&mut r, d);
        let pos = rand_vec(&mut r, d);
        let negs: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut r, d)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
        let tau = 0.07;
        let out = info_nce(&v, &pos, &refs, tau, false).unwrap();
        // Direct arithmetic, no max subtraction.
        let direct = -dot(&v, &pos) / tau
            + negs
                .iter()
                .map(|n| (dot(&v, n) / tau).exp())
                .sum::<f64>()
                .ln();
        assert_relative_eq!(out.loss, direct, epsilon = 1e-10);
    }

    #[test]
    fn standard_variant_includes_the_positive() {
        let mut r = rng(8);
        let d = 6;
        let v = rand_vec(&mut r, d);
        let pos = rand_vec(&mut r, d);
        let negs: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut r, d)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
        let tau = 0.3;
        let out = info_nce(&v, &pos, &refs, tau, true).unwrap();
        let sp = dot(&v, &pos) / tau;
        let mut z = sp.exp();
        for n in &negs {
            z += (dot(&v, n) / tau).exp();
        }
        assert_relative_eq!(out.loss, -sp + z.ln(), epsilon = 1e-10);
        // Bounded below by zero, unlike the default form.
        assert!(out.loss >= 0.0);
    }

    #[test]
    fn no_negatives_is_an_error() {
        let v = vec![1.0];
        assert!(matches!(
            info_nce(&v, &v, &[], 1.0, false),
            Err(DmiError::NoNegatives)
        ));
    }

    proptest! {
        // Adding a constant to every dot product leaves the loss unchanged.
        // Realized by appending one coordinate: v gains 1, the others gain c.
        #[test]
        fn shift_invariance_through_appended_coordinate(
            seed in 0u64..300,
            c in -3.0f64..3.0,
            include_pos in proptest::bool::ANY,
        ) {
            let mut r = rng(seed);
            let d = 5;
            let v = rand_vec(&mut r, d);
            let pos = rand_vec(&mut r, d);
            let negs: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(&mut r, d)).collect();
            let refs: Vec<&[f64]> = negs.iter().map(|n| n.as_slice()).collect();
            let base = info_nce(&v, &pos, &refs, 0.7, include_pos).unwrap().loss;

            let mut v2 = v.clone();
            v2.push(1.0);
            let mut pos2 = pos.clone();
            pos2.push(c);
            let negs2: Vec<Vec<f64>> = negs
                .iter()
                .map(|n| {
                    let mut n2 = n.clone();
                    n2.push(c);
                    n2
                })
                .collect();
            let refs2: Vec<&[f64]> = negs2.iter().map(|n| n.as_slice()).collect();
            let shifted = info_nce(&v2, &pos2, &refs2, 0.7, include_pos).unwrap().loss;
            prop_assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
        }
    }

    // ---- disentangle_kl --------------------------------------------------

    #[test]
    fn single_head_has_no_pairs() {
        let b = Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let out = disentangle_kl(&[b], 10.0).unwrap();
        assert_eq!(out.kl_term, 0.0);
        assert!(out.grads[0].data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn identical_batches_have_zero_kl() {
        let b = Mat::from_rows(&[vec![0.3, -1.0], vec![1.2, 0.4], vec![-0.5, 0.9]]);
        let out = disentangle_kl(&[b.clone(), b], 10.0).unwrap();
        assert_relative_eq!(out.kl_term, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn uncapped_term_matches_composed_pairwise_kls() {
        let mut r = rng(31);
        let batches: Vec<Mat> = (0..3).map(|_| rand_mat(&mut r, 6, 4)).collect();
        let out = disentangle_kl(&batches, f64::INFINITY).unwrap();
        let stats: Vec<GaussianStats> = batches
            .iter()
            .map(|b| gaussian_moments(b).unwrap())
            .collect();
        let mut expect = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                expect += kl_diag_gauss(&stats[i], &stats[j]).unwrap();
            }
        }
        assert_relative_eq!(out.kl_term, expect, epsilon = 1e-10);
    }

    #[test]
    fn saturated_pairs_cap_the_value_and_silence_the_gradient() {
        // Two far-apart batches: KL far above the cap.
        let a = Mat::from_rows(&[vec![0.0], vec![0.1]]);
        let b = Mat::from_rows(&[vec![100.0], vec![100.1]]);
        let out = disentangle_kl(&[a, b], 5.0).unwrap();
        assert_eq!(out.kl_term, 5.0);
        for g in &out.grads {
            assert!(g.data.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn kl_term_respects_bounds() {
        let mut r = rng(17);
        let batches: Vec<Mat> = (0..4).map(|_| rand_mat(&mut r, 5, 3)).collect();
        let cap = 2.0;
        let out = disentangle_kl(&batches, cap).unwrap();
        assert!(out.kl_term >= 0.0);
        assert!(out.kl_term <= cap * 6.0 + 1e-12, "4 heads -> 6 pairs");
    }

    #[test]
    fn tiny_batches_are_rejected() {
        let b = Mat::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(
            disentangle_kl(&[b], 10.0),
            Err(DmiError::BatchTooSmall(_))
        ));
        assert!(matches!(
            disentangle_kl(&[], 10.0),
            Err(DmiError::BatchTooSmall(_))
        ));
    }

    // ---- label-MI bounds -------------------------------------------------

    /// Hand-built critic with one useful hidden unit that reads a chosen
    /// input coordinate: t = scale * phi[coord] + offset.
    fn linear_readout_critic(
        in_dim: usize,
        coord: usize,
        scale: f64,
        offset: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let hidden = 2;
        let mut w1 = vec![0.0; hidden * in_dim];
        w1[coord] = 1.0; // unit 0 reads phi[coord]
        let b1 = vec![0.0; hidden];
        let w2 = vec![scale, 0.0];
        let b2 = vec![offset];
        (w1, b1, w2, b2)
    }

    fn critic_view<'a>(
        parts: &'a (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
        in_dim: usize,
    ) -> MlpView<'a> {
        MlpView {
            w1: &parts.0,
            b1: &parts.1,
            w2: &parts.2,
            b2: &parts.3,
            in_dim,
            hidden: parts.1.len(),
            out_dim: 1,
        }
    }

    #[test]
    fn uninformative_critic_scores_entropy_minus_ln2() {
        // Critic with all-zero params outputs t = 0, so q = 0.5 always.
        let parts = (vec![0.0; 16], vec![0.0; 2], vec![0.0; 2], vec![0.0]);
        let critic = critic_view(&parts, 8);
        let a = Mat::from_rows(&[vec![1.0; 4], vec![2.0; 4], vec![3.0; 4]]);
        let b = Mat::from_rows(&[vec![0.0; 4], vec![1.0; 4], vec![5.0; 4]]);
        let labels = [true, false, true];
        let out = mi_label_lower(&a, &b, &labels, &critic).unwrap();
        let h = empirical_entropy(&labels);
        assert_relative_eq!(out.value, h - 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn hand_set_probabilities_match_hand_arithmetic() {
        // Pairs built so phi's product block first coordinate is 1 or 0,
        // and a critic mapping that to logit(0.9) or logit(0.1).
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let m = 2;
        // phi = [|a-b| (2), a*b (2)]; coordinate 2 is a_0*b_0.
        let scale = logit(0.9) - logit(0.1);
        let parts = linear_readout_critic(2 * m, 2, scale, logit(0.1));
        let critic = critic_view(&parts, 2 * m);
        let one = vec![1.0, 0.0];
        let zero = vec![0.0, 0.0];
        let a = Mat::from_rows(&[one.clone(), one.clone(), zero.clone(), zero.clone()]);
        let b = a.clone();
        let labels = [true, true, false, false];
        let out = mi_label_lower(&a, &b, &labels, &critic).unwrap();
        // probs sigma(t): {0.9, 0.9, 0.1, 0.1}; log q(y): ln 0.9 each.
        let expect = 2f64.ln() + 0.9f64.ln();
        assert_relative_eq!(out.value, expect, epsilon = 1e-9);
        assert_relative_eq!(out.value, 0.58778, epsilon = 1e-5);
    }

    #[test]
    fn lower_bound_never_exceeds_label_entropy() {
        let mut r = rng(41);
        let a = rand_mat(&mut r, 12, 3);
        let b = rand_mat(&mut r, 12, 3);
        let labels: Vec<bool> = (0..12).map(|_| r.gen_bool(0.5)).collect();
        let parts = (
            rand_vec(&mut r, 4 * 6),
            rand_vec(&mut r, 4),
            rand_vec(&mut r, 4),
            rand_vec(&mut r, 1),
        );
        let critic = critic_view(&parts, 6);
        let out = mi_label_lower(&a, &b, &labels, &critic).unwrap();
        assert!(out.value <= empirical_entropy(&labels) + 1e-12);
    }

    /// Plain Adam ascent on the critic parameters of a label bound.
    fn fit_pair_critic(
        a: &Mat,
        b: &Mat,
        labels: &[bool],
        parts: &mut (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
        iters: usize,
        lr: f64,
    ) {
        let in_dim = 2 * a.cols;
        let total = parts.0.len() + parts.1.len() + parts.2.len() + parts.3.len();
        let mut m = vec![0.0; total];
        let mut v = vec![0.0; total];
        for t in 1..=iters {
            let out = {
                let critic = critic_view(parts, in_dim);
                mi_label_lower(a, b, labels, &critic).unwrap()
            };
            let g = &out.grad_critic;
            let flat: Vec<f64> = g
                .w1
                .iter()
                .chain(&g.b1)
                .chain(&g.w2)
                .chain(&g.b2)
                .cloned()
                .collect();
            let mut idx = 0;
            let mut apply = |p: &mut Vec<f64>| {
                for x in p.iter_mut() {
                    let grad = flat[idx];
                    m[idx] = 0.9 * m[idx] + 0.1 * grad;
                    v[idx] = 0.999 * v[idx] + 0.001 * grad * grad;
                    let mh = m[idx] / (1.0 - 0.9f64.powi(t as i32));
                    let vh = v[idx] / (1.0 - 0.999f64.powi(t as i32));
                    // Ascent on the bound value.
                    *x += lr * mh / (vh.sqrt() + 1e-8);
                    idx += 1;
                }
            };
            apply(&mut parts.0);
            apply(&mut parts.1);
            apply(&mut parts.2);
            apply(&mut parts.3);
        }
    }

    fn random_parts(r: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = 1.0 / (in_dim as f64).sqrt();
        (
            (0..hidden * in_dim).map(|_| s * randn(r)).collect(),
            vec![0.0; hidden],
            (0..hidden).map(|_| randn(r) / (hidden as f64).sqrt()).collect(),
            vec![0.0; 1],
        )
    }

    #[test]
    fn fitted_critic_approaches_entropy_on_separable_pairs() {
        // Similar pairs are exact duplicates, dissimilar pairs independent;
        // the |a-b| block separates them perfectly.
        let mut r = rng(51);
        let n = 10_000;
        let m = 4;
        let mut rows_a = Vec::with_capacity(n);
        let mut rows_b = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let a = rand_vec(&mut r, m);
            let y = i % 2 == 0;
            let b = if y { a.clone() } else { rand_vec(&mut r, m) };
            rows_a.push(a);
            rows_b.push(b);
            labels.push(y);
        }
        let a = Mat::from_rows(&rows_a);
        let b = Mat::from_rows(&rows_b);
        let mut parts = random_parts(&mut r, 2 * m, 8);
        fit_pair_critic(&a, &b, &labels, &mut parts, 400, 0.05);
        let critic = critic_view(&parts, 2 * m);
        let out = mi_label_lower(&a, &b, &labels, &critic).unwrap();
        let h = empirical_entropy(&labels);
        assert!(out.value <= h + 1e-12);
        assert!(
            out.value > h - 0.05,
            "fitted bound {} should be within 0.05 of H(y) {}",
            out.value,
            h
        );
    }

    #[test]
    fn upper_bound_is_zero_for_input_blind_critics_and_constant_labels() {
        let mut r = rng(61);
        let a = rand_mat(&mut r, 10, 3);
        let b = rand_mat(&mut r, 10, 3);
        let labels: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        // Zero first layer: t = b2 regardless of input.
        let parts = (vec![0.0; 4 * 6], vec![0.0; 4], vec![0.0; 4], vec![0.7]);
        let critic = critic_view(&parts, 6);
        let out = mi_label_upper(&a, &b, &labels, &critic, 9).unwrap();
        assert_relative_eq!(out.value, 0.0, epsilon = 1e-12);

        // Constant labels: any critic, shuffle changes nothing.
        let mut rparts = random_parts(&mut r, 6, 4);
        rparts.3[0] = 0.3;
        let critic = critic_view(&rparts, 6);
        let constant = vec![true; 10];
        let out = mi_label_upper(&a, &b, &constant, &critic, 5).unwrap();
        assert_relative_eq!(out.value, 0.0, epsilon = 1e-12);
    }

    fn binary_entropy(p: f64) -> f64 {
        if p == 0.0 || p == 1.0 {
            0.0
        } else {
            -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
        }
    }

    #[test]
    fn upper_bound_calibrates_on_noisy_sign_labels() {
        // Label = sign of the first product coordinate, flipped with
        // probability 0.3. True MI = ln 2 - H_b(0.3); the fitted
        // conditional-likelihood bound overshoots by the mean
        // KL(p(y) || p(y|z)), which stays inside the 0.15 window.
        let mut r = rng(71);
        let n = 10_000;
        let m = 2;
        let flip = 0.3;
        let mut rows_a = Vec::with_capacity(n);
        let mut rows_b = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rand_vec(&mut r, m);
            let b = rand_vec(&mut r, m);
            let clean = a[0] * b[0] > 0.0;
            let y = if r.gen_bool(flip) { !clean } else { clean };
            rows_a.push(a);
            rows_b.push(b);
            labels.push(y);
        }
        let a = Mat::from_rows(&rows_a);
        let b = Mat::from_rows(&rows_b);
        let mut parts = random_parts(&mut r, 2 * m, 8);
        fit_pair_critic(&a, &b, &labels, &mut parts, 400, 0.05);
        let critic = critic_view(&parts, 2 * m);
        let out = mi_label_upper(&a, &b, &labels, &critic, 33).unwrap();
        let truth = 2f64.ln() - binary_entropy(flip);
        assert!(
            (out.value - truth).abs() <= 0.15,
            "estimate {} vs truth {truth}",
            out.value
        );
    }

    #[test]
    fn upper_bound_stays_small_when_labels_are_shuffled_noise() {
        let mut r = rng(81);
        let n = 10_000;
        let m = 3;
        let a = rand_mat(&mut r, n, m);
        let b = rand_mat(&mut r, n, m);
        // Labels independent of everything.
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        let mut parts = random_parts(&mut r, 2 * m, 8);
        fit_pair_critic(&a, &b, &labels, &mut parts, 200, 0.05);
        let critic = critic_view(&parts, 2 * m);
        let out = mi_label_upper(&a, &b, &labels, &critic, 17).unwrap();
        assert!(out.value.abs() <= 0.05, "independent labels gave {}", out.value);
    }

    #[test]
    fn lower_bound_identity_with_cross_entropy() {
        // By construction the bound equals H(y) - CE; verify the identity.
        let mut r = rng(91);
        let a = rand_mat(&mut r, 20, 3);
        let b = rand_mat(&mut r, 20, 3);
        let labels: Vec<bool> = (0..20).map(|_| r.gen_bool(0.4)).collect();
        let parts = random_parts(&mut r, 6, 4);
        let critic = critic_view(&parts, 6);
        let out = mi_label_lower(&a, &b, &labels, &critic).unwrap();
        let mut ce = 0.0;
        for i in 0..20 {
            let phi = pair_feature(a.row(i), b.row(i));
            let t = mlp_forward(&critic, &phi).out[0];
            ce -= log_q(labels[i], t) / 20.0;
        }
        assert_relative_eq!(out.value, empirical_entropy(&labels) - ce, epsilon = 1e-12);
    }

    #[test]
    fn label_ops_reject_empty_input() {
        let parts = (vec![0.0; 16], vec![0.0; 2], vec![0.0; 2], vec![0.0]);
        let critic = critic_view(&parts, 8);
        let empty = Mat::zeros(0, 4);
        assert!(matches!(
            mi_label_lower(&empty, &empty, &[], &critic),
            Err(DmiError::EmptyInput(_))
        ));
        assert!(matches!(
            mi_label_upper(&empty, &empty, &[], &critic, 0),
            Err(DmiError::EmptyInput(_))
        ));
    }

    // ---- continuous-MI bounds ---------------------------------------------

    fn gauss_pair_batch(r: &mut ChaCha8Rng, n: usize, rho: f64) -> (Mat, Mat) {
        let mut za = Mat::zeros(n, 1);
        let mut zb = Mat::zeros(n, 1);
        let noise = (1.0 - rho * rho).sqrt();
        for i in 0..n {
            let x = randn(r);
            za.set(i, 0, x);
            zb.set(i, 0, rho * x + noise * randn(r));
        }
        (za, zb)
    }

    /// Exact maximum-likelihood fit of the scalar linear-Gaussian decoder.
    fn fit_scalar_decoder(za: &Mat, zb: &Mat, logvar_floor: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = za.rows as f64;
        let ma: f64 = za.data.iter().sum::<f64>() / n;
        let mb: f64 = zb.data.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var = 0.0;
        for i in 0..za.rows {
            cov += (za.get(i, 0) - ma) * (zb.get(i, 0) - mb);
            var += (za.get(i, 0) - ma) * (za.get(i, 0) - ma);
        }
        let w = cov / var;
        let b = mb - w * ma;
        let mut resid = 0.0;
        for i in 0..za.rows {
            let r = zb.get(i, 0) - (w * za.get(i, 0) + b);
            resid += r * r;
        }
        let logvar = (resid / n).ln().max(logvar_floor);
        (vec![w], vec![b], vec![logvar])
    }

    fn decoder_view<'a>(parts: &'a (Vec<f64>, Vec<f64>, Vec<f64>)) -> CondGaussView<'a> {
        CondGaussView {
            w: &parts.0,
            b: &parts.1,
            logvar: &parts.2,
            in_dim: 1,
            out_dim: 1,
        }
    }

    #[test]
    fn input_blind_decoder_gives_exactly_zero() {
        let mut r = rng(101);
        let za = rand_mat(&mut r, 8, 2);
        let zb = rand_mat(&mut r, 8, 3);
        // Zero weight matrix: the mean ignores za entirely.
        let parts = (vec![0.0; 6], vec![0.2, -0.1, 0.4], vec![0.1, 0.0, -0.3]);
        let dec = CondGaussView { w: &parts.0, b: &parts.1, logvar: &parts.2, in_dim: 2, out_dim: 3 };
        let out = mi_cont_upper(&za, &zb, &dec).unwrap();
        assert_relative_eq!(out.value, 0.0, epsilon = 1e-12);
        assert!(out.grad_za.data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn upper_estimate_grows_with_decoder_fit_on_identical_batches() {
        let mut r = rng(111);
        let n = 1000;
        let za = rand_mat(&mut r, n, 1);
        let zb = za.clone();
        let loose = (vec![1.0], vec![0.0], vec![0.0]);
        let tight = (vec![1.0], vec![0.0], vec![-6.0]);
        let v_loose = mi_cont_upper(&za, &zb, &decoder_view(&loose)).unwrap().value;
        let v_tight = mi_cont_upper(&za, &zb, &decoder_view(&tight)).unwrap().value;
        assert!(v_loose >= -0.02);
        assert!(v_tight >= -0.02);
        assert!(v_tight > v_loose, "sharper decoder must raise the estimate");
    }

    #[test]
    fn upper_estimate_calibrates_on_gaussian_pairs() {
        let mut r = rng(121);
        let (za, zb) = gauss_pair_batch(&mut r, 10_000, 0.8);
        let parts = fit_scalar_decoder(&za, &zb, -30.0);
        let out = mi_cont_upper(&za, &zb, &decoder_view(&parts)).unwrap();
        let truth = gaussian_mi_true(&[0.8]).unwrap();
        assert!(
            (out.value - truth).abs() <= 0.15,
            "estimate {} vs truth {truth}",
            out.value
        );
    }

    #[test]
    fn cont_bounds_reject_empty_and_mismatched_batches() {
        let parts = (vec![0.0], vec![0.0], vec![0.0]);
        let dec = decoder_view(&parts);
        let empty = Mat::zeros(0, 1);
        assert!(matches!(
            mi_cont_upper(&empty, &empty, &dec),
            Err(DmiError::BatchTooSmall(_))
        ));
        let a = Mat::zeros(3, 1);
        let b = Mat::zeros(4, 1);
        assert!(matches!(
            mi_cont_upper(&a, &b, &dec),
            Err(DmiError::LengthMismatch(_))
        ));
    }

    fn proj_view<'a>(
        parts: &'a (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
        a_in: usize,
        b_in: usize,
        p: usize,
    ) -> ProjView<'a> {
        ProjView {
            aw: &parts.0,
            ab: &parts.1,
            bw: &parts.2,
            bb: &parts.3,
            a_in,
            b_in,
            p,
        }
    }

    #[test]
    fn lower_bound_is_exactly_zero_for_single_pairs() {
        let mut r = rng(131);
        let za = rand_mat(&mut r, 1, 2);
        let zb = rand_mat(&mut r, 1, 3);
        let parts = (
            rand_vec(&mut r, 2 * 2),
            rand_vec(&mut r, 2),
            rand_vec(&mut r, 2 * 3),
            rand_vec(&mut r, 2),
        );
        let out = mi_cont_lower(&za, &zb, &proj_view(&parts, 2, 3, 2), 0.5).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_za.data.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn lower_bound_near_zero_for_independent_batches() {
        let mut r = rng(141);
        let za = rand_mat(&mut r, 1000, 2);
        let zb = rand_mat(&mut r, 1000, 2);
        let parts = (
            rand_vec(&mut r, 2 * 2),
            rand_vec(&mut r, 2),
            rand_vec(&mut r, 2 * 2),
            rand_vec(&mut r, 2),
        );
        let out = mi_cont_lower(&za, &zb, &proj_view(&parts, 2, 2, 2), 0.5).unwrap();
        assert!(out.value <= 0.05, "independent batches gave {}", out.value);
    }

    /// Adam ascent of the projection parameters on minibatch slices.
    fn fit_projection(
        za: &Mat,
        zb: &Mat,
        parts: &mut (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
        p: usize,
        tau_mi: f64,
        iters: usize,
        lr: f64,
        batch: usize,
    ) {
        let n = za.rows;
        let total = parts.0.len() + parts.1.len() + parts.2.len() + parts.3.len();
        let mut m = vec![0.0; total];
        let mut v = vec![0.0; total];
        for t in 1..=iters {
            let start = (t * batch) % n.max(1);
            let take = batch.min(n);
            let mut sub_a = Mat::zeros(take, za.cols);
            let mut sub_b = Mat::zeros(take, zb.cols);
            for i in 0..take {
                let src = (start + i) % n;
                sub_a.row_mut(i).copy_from_slice(za.row(src));
                sub_b.row_mut(i).copy_from_slice(zb.row(src));
            }
            let out = {
                let view = proj_view(parts, za.cols, zb.cols, p);
                mi_cont_lower(&sub_a, &sub_b, &view, tau_mi).unwrap()
            };
            let g = out.grad_proj;
            let flat: Vec<f64> = g
                .aw
                .iter()
                .chain(&g.ab)
                .chain(&g.bw)
                .chain(&g.bb)
                .cloned()
                .collect();
            let mut idx = 0;
            let mut apply = |pvec: &mut Vec<f64>| {
                for x in pvec.iter_mut() {
                    let grad = flat[idx];
                    m[idx] = 0.9 * m[idx] + 0.1 * grad;
                    v[idx] = 0.999 * v[idx] + 0.001 * grad * grad;
                    let mh = m[idx] / (1.0 - 0.9f64.powi(t as i32));
                    let vh = v[idx] / (1.0 - 0.999f64.powi(t as i32));
                    *x += lr * mh / (vh.sqrt() + 1e-8);
                    idx += 1;
                }
            };
            apply(&mut parts.0);
            apply(&mut parts.1);
            apply(&mut parts.2);
            apply(&mut parts.3);
        }
    }

    #[test]
    fn lower_bound_calibrates_on_gaussian_pairs() {
        let mut r = rng(151);
        let (za, zb) = gauss_pair_batch(&mut r, 10_000, 0.8);
        let p = 2;
        let mut parts = (
            rand_vec(&mut r, p),
            rand_vec(&mut r, p),
            rand_vec(&mut r, p),
            rand_vec(&mut r, p),
        );
        fit_projection(&za, &zb, &mut parts, p, 0.5, 300, 0.02, 256);
        let out = mi_cont_lower(&za, &zb, &proj_view(&parts, 1, 1, p), 0.5).unwrap();
        let truth = gaussian_mi_true(&[0.8]).unwrap();
        assert!(out.value <= truth + 0.05, "lower bound {} above truth {truth}", out.value);
        assert!(out.value >= 0.25, "fitted lower bound too loose: {}", out.value);
    }

    #[test]
    fn sandwich_property_after_fitting() {
        let mut r = rng(161);
        let (za, zb) = gauss_pair_batch(&mut r, 2000, 0.8);
        let dec = fit_scalar_decoder(&za, &zb, -30.0);
        let upper = mi_cont_upper(&za, &zb, &decoder_view(&dec)).unwrap().value;
        let p = 2;
        let mut parts = (
            rand_vec(&mut r, p),
            rand_vec(&mut r, p),
            rand_vec(&mut r, p),
            rand_vec(&mut r, p),
        );
        fit_projection(&za, &zb, &mut parts, p, 0.5, 300, 0.02, 256);
        let lower = mi_cont_lower(&za, &zb, &proj_view(&parts, 1, 1, p), 0.5).unwrap().value;
        assert!(
            upper >= lower - 0.1,
            "sandwich violated: upper {upper} vs lower {lower}"
        );
    }

    // ---- mi_loss / total_loss ---------------------------------------------

    #[test]
    fn mi_loss_sign_pattern_arithmetic() {
        let terms = MiTerms {
            y_zs: 0.5,
            zs_z: 0.2,
            y_zi: vec![0.1, 0.1],
            zi_zs: vec![0.3, 0.3],
        };
        let (l_mi, coeffs) = mi_loss(&terms, &MiWeights::default());
        assert_relative_eq!(l_mi, -0.7, epsilon = 1e-12);
        assert_eq!(coeffs.y_zs, -1.0);
        assert_eq!(coeffs.zs_z, 1.0);
        assert_eq!(coeffs.y_zi, 1.0);
        assert_eq!(coeffs.zi_zs, -1.0);

        let zero = MiTerms::zero(3);
        assert_eq!(mi_loss(&zero, &MiWeights::default()).0, 0.0);
    }

    #[test]
    fn mi_loss_matches_independent_arithmetic() {
        let mut r = rng(171);
        for _ in 0..20 {
            let k = 3;
            let terms = MiTerms {
                y_zs: randn(&mut r),
                zs_z: randn(&mut r),
                y_zi: rand_vec(&mut r, k),
                zi_zs: rand_vec(&mut r, k),
            };
            let w = MiWeights {
                y_zs: r.gen_range(0.0..2.0),
                zs_z: r.gen_range(0.0..2.0),
                y_zi: r.gen_range(0.0..2.0),
                zi_zs: r.gen_range(0.0..2.0),
            };
            let (l_mi, _) = mi_loss(&terms, &w);
            let mut expect = -(w.y_zs * terms.y_zs - w.zs_z * terms.zs_z);
            for i in 0..k {
                expect += w.y_zi * terms.y_zi[i] - w.zi_zs * terms.zi_zs[i];
            }
            assert_relative_eq!(l_mi, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut terms = MiTerms::zero(1);
        terms.y_zs = -0.3; // makes l_mi = 0.3
        let b = total_loss(1.0, 2.0, &terms, &MiWeights::default(), 0.1);
        assert_relative_eq!(b.l_decouple, 0.8, epsilon = 1e-12);
        assert_relative_eq!(b.l_mi, 0.3, epsilon = 1e-12);
        assert_relative_eq!(b.l_total, 1.1, epsilon = 1e-12);

        let b0 = total_loss(1.7, 5.0, &MiTerms::zero(2), &MiWeights::default(), 0.0);
        assert_eq!(b0.l_decouple, 1.7, "alpha = 0 removes the KL term");
        assert!(b0.is_finite());
    }

    // ---- gradient checks (the central correctness property) ---------------

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], what: &str) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() <= 1e-4 * scale,
                "{what}[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn info_nce_gradients_match_finite_differences() {
        for include_pos in [false, true] {
            let mut r = rng(200 + include_pos as u64);
            let d = 5;
            let n_neg = 3;
            // theta = [v || pos || negs]
            let theta: Vec<f64> = rand_vec(&mut r, d * (2 + n_neg));
            let eval = |th: &[f64]| {
                let v = &th[0..d];
                let pos = &th[d..2 * d];
                let negs: Vec<&[f64]> = (0..n_neg)
                    .map(|j| &th[(2 + j) * d..(3 + j) * d])
                    .collect();
                info_nce(v, pos, &negs, 0.3, include_pos).unwrap()
            };
            let out = eval(&theta);
            let mut analytic = Vec::new();
            analytic.extend_from_slice(&out.grad_v);
            analytic.extend_from_slice(&out.grad_pos);
            for g in &out.grad_negs {
                analytic.extend_from_slice(g);
            }
            let numeric = finite_diff_grad(|th| eval(th).loss, &theta, 1e-6).unwrap();
            assert_grad_close(&analytic, &numeric, "info_nce");
        }
    }

    #[test]
    fn disentangle_kl_gradients_match_finite_differences() {
        let mut r = rng(210);
        let (k, n, m) = (3, 5, 4);
        let theta: Vec<f64> = rand_vec(&mut r, k * n * m);
        let eval = |th: &[f64]| {
            let batches: Vec<Mat> = (0..k)
                .map(|i| Mat {
                    rows: n,
                    cols: m,
                    data: th[i * n * m..(i + 1) * n * m].to_vec(),
                })
                .collect();
            disentangle_kl(&batches, 10.0).unwrap()
        };
        let out = eval(&theta);
        let mut analytic = Vec::new();
        for g in &out.grads {
            analytic.extend_from_slice(&g.data);
        }
        let numeric = finite_diff_grad(|th| eval(th).kl_term, &theta, 1e-6).unwrap();
        assert_grad_close(&analytic, &numeric, "disentangle_kl");
    }

    /// Rejects instances whose rectifier inputs or |a-b| kinks sit within
    /// `margin` of zero, where central differences would straddle the kink.
    fn label_instance_is_smooth(a: &Mat, b: &Mat, critic: &MlpView, margin: f64) -> bool {
        for i in 0..a.rows {
            for c in 0..a.cols {
                if (a.row(i)[c] - b.row(i)[c]).abs() < margin {
                    return false;
                }
            }
            let phi = pair_feature(a.row(i), b.row(i));
            let cache = mlp_forward(critic, &phi);
            if cache.pre.iter().any(|p| p.abs() < margin) {
                return false;
            }
        }
        true
    }

    #[test]
    fn label_mi_gradients_match_finite_differences() {
        let (n, m, ch) = (6, 4, 5);
        let sizes = [n * m, n * m, ch * 2 * m, ch, ch, 1];
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let mut seed = 220;
        'outer: for _attempt in 0..50 {
            seed += 1;
            let mut r = rng(seed);
            let total: usize = sizes.iter().sum();
            let theta = rand_vec(&mut r, total);
            let unpack = |th: &[f64]| {
                let mut off = 0;
                let mut slices = Vec::new();
                for s in sizes {
                    slices.push(th[off..off + s].to_vec());
                    off += s;
                }
                slices
            };
            let eval_lower = |th: &[f64]| {
                let s = unpack(th);
                let a = Mat { rows: n, cols: m, data: s[0].clone() };
                let b = Mat { rows: n, cols: m, data: s[1].clone() };
                let critic = MlpView {
                    w1: &s[2],
                    b1: &s[3],
                    w2: &s[4],
                    b2: &s[5],
                    in_dim: 2 * m,
                    hidden: ch,
                    out_dim: 1,
                };
                mi_label_lower(&a, &b, &labels, &critic).unwrap()
            };
            // Smoothness guard for the finite-difference oracle.
            {
                let s = unpack(&theta);
                let a = Mat { rows: n, cols: m, data: s[0].clone() };
                let b = Mat { rows: n, cols: m, data: s[1].clone() };
                let critic = MlpView {
                    w1: &s[2],
                    b1: &s[3],
                    w2: &s[4],
                    b2: &s[5],
                    in_dim: 2 * m,
                    hidden: ch,
                    out_dim: 1,
                };
                if !label_instance_is_smooth(&a, &b, &critic, 1e-3) {
                    continue 'outer;
                }
            }
            for upper in [false, true] {
                let eval_any = |th: &[f64]| {
                    if upper {
                        let s = unpack(th);
                        let a = Mat { rows: n, cols: m, data: s[0].clone() };
                        let b = Mat { rows: n, cols: m, data: s[1].clone() };
                        let critic = MlpView {
                            w1: &s[2],
                            b1: &s[3],
                            w2: &s[4],
                            b2: &s[5],
                            in_dim: 2 * m,
                            hidden: ch,
                            out_dim: 1,
                        };
                        mi_label_upper(&a, &b, &labels, &critic, 42).unwrap()
                    } else {
                        eval_lower(th)
                    }
                };
                let out = eval_any(&theta);
                let mut analytic = Vec::new();
                analytic.extend_from_slice(&out.grad_a.data);
                analytic.extend_from_slice(&out.grad_b.data);
                analytic.extend_from_slice(&out.grad_critic.w1);
                analytic.extend_from_slice(&out.grad_critic.b1);
                analytic.extend_from_slice(&out.grad_critic.w2);
                analytic.extend_from_slice(&out.grad_critic.b2);
                let numeric = finite_diff_grad(|th| eval_any(th).value, &theta, 1e-6).unwrap();
                assert_grad_close(&analytic, &numeric, if upper { "mi_label_upper" } else { "mi_label_lower" });
            }
            return;
        }
        panic!("no smooth instance found for the label-MI gradient check");
    }

    #[test]
    fn mi_cont_upper_gradients_match_finite_differences() {
        let mut r = rng(230);
        let (n, da, db) = (5, 4, 3);
        let sizes = [n * da, n * db, db * da, db, db];
        let total: usize = sizes.iter().sum();
        let theta = rand_vec(&mut r, total);
        let eval = |th: &[f64]| {
            let mut off = 0;
            let mut s = Vec::new();
            for len in sizes {
                s.push(th[off..off + len].to_vec());
                off += len;
            }
            let za = Mat { rows: n, cols: da, data: s[0].clone() };
            let zb = Mat { rows: n, cols: db, data: s[1].clone() };
            let dec = CondGaussView { w: &s[2], b: &s[3], logvar: &s[4], in_dim: da, out_dim: db };
            mi_cont_upper(&za, &zb, &dec).unwrap()
        };
        let out = eval(&theta);
        let mut analytic = Vec::new();
        analytic.extend_from_slice(&out.grad_za.data);
        analytic.extend_from_slice(&out.grad_zb.data);
        analytic.extend_from_slice(&out.grad_decoder.w);
        analytic.extend_from_slice(&out.grad_decoder.b);
        analytic.extend_from_slice(&out.grad_decoder.logvar);
        let numeric = finite_diff_grad(|th| eval(th).value, &theta, 1e-6).unwrap();
        assert_grad_close(&analytic, &numeric, "mi_cont_upper");
    }

    #[test]
    fn mi_cont_lower_gradients_match_finite_differences() {
        let mut r = rng(240);
        let (n, da, db, p) = (5, 3, 4, 3);
        let sizes = [n * da, n * db, p * da, p, p * db, p];
        let total: usize = sizes.iter().sum();
        let theta = rand_vec(&mut r, total);
        let eval = |th: &[f64]| {
            let mut off = 0;
            let mut s = Vec::new();
            for len in sizes {
                s.push(th[off..off + len].to_vec());
                off += len;
            }
            let za = Mat { rows: n, cols: da, data: s[0].clone() };
            let zb = Mat { rows: n, cols: db, data: s[1].clone() };
            let proj = ProjView {
                aw: &s[2],
                ab: &s[3],
                bw: &s[4],
                bb: &s[5],
                a_in: da,
                b_in: db,
                p,
            };
            mi_cont_lower(&za, &zb, &proj, 0.5).unwrap()
        };
        let out = eval(&theta);
        let mut analytic = Vec::new();
        analytic.extend_from_slice(&out.grad_za.data);
        analytic.extend_from_slice(&out.grad_zb.data);
        analytic.extend_from_slice(&out.grad_proj.aw);
        analytic.extend_from_slice(&out.grad_proj.ab);
        analytic.extend_from_slice(&out.grad_proj.bw);
        analytic.extend_from_slice(&out.grad_proj.bb);
        let numeric = finite_diff_grad(|th| eval(th).value, &theta, 1e-6).unwrap();
        assert_grad_close(&analytic, &numeric, "mi_cont_lower");
    }
}
