//! Batch-hard triplet, classification and search-aware multi-index losses.
//!
//! Relaxed forms work on codes in `[-1, +1]` and return gradients with
//! respect to their inputs. At hinge kinks and ties in max/min the first
//! attaining index is used and a hinge at exactly zero has zero gradient.

use std::ops::Deref;

use crate::codes::{hamming_distance, BinaryCode};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::table_construction::{KeyLayout, Strategy, TableKeySet};
use crate::trainer::{Batch, HashModel, Params};

/// A tanh-relaxed code, every entry in `[-1, +1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedCode(Vec<f64>);

impl RelaxedCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::param(format!(
                "relaxed code entry {index} = {value} lies outside [-1, 1]"
            )));
        }
        Ok(RelaxedCode(values))
    }

    pub fn from_binary(code: &BinaryCode) -> Self {
        RelaxedCode((0..code.len()).map(|j| if code.bit(j) { 1.0 } else { -1.0 }).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for RelaxedCode {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A loss value together with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<G> {
    pub value: f64,
    pub grad: G,
}

/// Loss with a gradient per `[sample][branch or table][bit]`.
pub type NestedLoss = LossValue<Vec<Vec<Vec<f64>>>>;

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `(r - <u, v>) / 2`; equals the Hamming distance on `{-1,+1}` inputs.
pub fn relaxed_hamming(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    Ok((u.len() as f64 - dot(u, v)) / 2.0)
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

/// Hardest positive and negative for one anchor.
#[derive(Clone, Copy, Debug)]
struct Mined {
    anchor: usize,
    positive: usize,
    negative: usize,
}

struct Mining {
    value: f64,
    valid_anchors: usize,
    triplets: Vec<Mined>,
    /// Smallest distance from a hinge or a max/min decision to a tie.
    kink_gap: f64,
}

fn mine_batch_hard(n: usize, labels: &[u32], alpha: f64, dist: impl Fn(usize, usize) -> f64) -> Result<Mining> {
    let mut triplets = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut valid = 0;
    let mut kink_gap = f64::INFINITY;
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        let mut pos_runner_up = f64::NEG_INFINITY;
        let mut neg_runner_up = f64::INFINITY;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(a, j);
            if labels[j] == labels[a] {
                match pos {
                    Some((_, best)) if d <= best => pos_runner_up = pos_runner_up.max(d),
                    Some((_, best)) => {
                        pos_runner_up = pos_runner_up.max(best);
                        pos = Some((j, d));
                    }
                    None => pos = Some((j, d)),
                }
            } else {
                match neg {
                    Some((_, best)) if d >= best => neg_runner_up = neg_runner_up.min(d),
                    Some((_, best)) => {
                        neg_runner_up = neg_runner_up.min(best);
                        neg = Some((j, d));
                    }
                    None => neg = Some((j, d)),
                }
            }
        }
        let (Some((p, dp)), Some((q, dn))) = (pos, neg) else {
            continue;
        };
        valid += 1;
        let hinge = alpha + dp - dn;
        kink_gap = kink_gap
            .min(hinge.abs())
            .min(dp - pos_runner_up)
            .min(neg_runner_up - dn);
        if hinge > 0.0 {
            total += hinge;
            triplets.push(Mined {
                anchor: a,
                positive: p,
                negative: q,
            });
        }
    }
    if valid == 0 {
        return Err(Error::NoValidAnchor);
    }
    Ok(Mining {
        value: total / valid as f64,
        valid_anchors: valid,
        triplets,
        kink_gap,
    })
}

fn check_batch<T: AsRef<[f64]>>(codes: &[T], labels: &[u32]) -> Result<usize> {
    if codes.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} codes but {} labels",
            codes.len(),
            labels.len()
        )));
    }
    let r = codes.first().map(|c| c.as_ref().len()).unwrap_or(0);
    if let Some(bad) = codes.iter().find(|c| c.as_ref().len() != r) {
        return Err(Error::LengthMismatch(r, bad.as_ref().len()));
    }
    Ok(r)
}

impl AsRef<[f64]> for RelaxedCode {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn triplet_relaxed<T: AsRef<[f64]>>(
    codes: &[T],
    labels: &[u32],
    alpha: f64,
) -> Result<(LossValue<Vec<Vec<f64>>>, f64)> {
    let r = check_batch(codes, labels)?;
    let n = codes.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (r as f64 - dot(codes[i].as_ref(), codes[j].as_ref())) / 2.0;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mining = mine_batch_hard(n, labels, alpha, |i, j| dist[i * n + j])?;
    let scale = 1.0 / mining.valid_anchors as f64;
    let mut grad = vec![vec![0.0; r]; n];
    for t in &mining.triplets {
        let (a, p, q) = (t.anchor, t.positive, t.negative);
        // d D(u, v) / du = -v / 2
        axpy(&mut grad[a], -0.5 * scale, codes[p].as_ref());
        axpy(&mut grad[p], -0.5 * scale, codes[a].as_ref());
        axpy(&mut grad[a], 0.5 * scale, codes[q].as_ref());
        axpy(&mut grad[q], 0.5 * scale, codes[a].as_ref());
    }
    Ok((
        LossValue {
            value: mining.value,
            grad,
        },
        mining.kink_gap,
    ))
}

/// Batch-hard triplet loss over one branch, averaged over anchors that have
/// both a positive and a negative in the batch.
pub fn triplet_loss_batch_hard(codes: &[RelaxedCode], labels: &[u32], alpha: f64) -> Result<LossValue<Vec<Vec<f64>>>> {
    triplet_relaxed(codes, labels, alpha).map(|(v, _)| v)
}

/// Batch-hard triplet loss on binary codes with integer Hamming distances.
pub fn triplet_loss_exact(codes: &[BinaryCode], labels: &[u32], alpha: f64) -> Result<f64> {
    if codes.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} codes but {} labels",
            codes.len(),
            labels.len()
        )));
    }
    for c in codes {
        hamming_distance(c, &codes[0])?;
    }
    let mining = mine_batch_hard(codes.len(), labels, alpha, |i, j| {
        f64::from(hamming_distance(&codes[i], &codes[j]).expect("lengths checked"))
    })?;
    Ok(mining.value)
}

/// Sum of per-branch batch-hard losses; `codes[i][b]` is branch `b` of sample `i`.
pub fn total_triplet_loss(codes: &[Vec<RelaxedCode>], labels: &[u32], alpha: f64) -> Result<NestedLoss> {
    total_triplet(codes, labels, alpha).map(|(v, _)| v)
}

fn total_triplet<T: AsRef<[f64]>>(codes: &[Vec<T>], labels: &[u32], alpha: f64) -> Result<(NestedLoss, f64)> {
    let branches = codes.first().map(Vec::len).unwrap_or(0);
    if branches == 0 || codes.iter().any(|c| c.len() != branches) {
        return Err(Error::Dimension(
            "every sample needs the same non-zero number of branches".into(),
        ));
    }
    let mut grad: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(branches); codes.len()];
    let mut value = 0.0;
    let mut gap = f64::INFINITY;
    for b in 0..branches {
        let column: Vec<&[f64]> = codes.iter().map(|c| c[b].as_ref()).collect();
        let (lv, g) = triplet_relaxed(&column, labels, alpha)?;
        value += lv.value;
        gap = gap.min(g);
        for (dst, src) in grad.iter_mut().zip(lv.grad) {
            dst.push(src);
        }
    }
    Ok((LossValue { value, grad }, gap))
}

/// Sum over branches of the mean softmax cross-entropy of `heads[b](features[i][b])`
/// against `labels[i]`. The gradient holds one buffer per head.
pub fn classification_loss(
    features: &[Vec<Vec<f64>>],
    labels: &[u32],
    heads: &[Linear],
) -> Result<LossValue<Vec<Linear>>> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len() as f64;
    let mut grad: Vec<Linear> = heads.iter().map(|h| Linear::zeros(h.outputs, h.inputs)).collect();
    let mut value = 0.0;
    for (row, &label) in features.iter().zip(labels) {
        if row.len() != heads.len() {
            return Err(Error::Dimension(format!(
                "sample has {} branch features for {} heads",
                row.len(),
                heads.len()
            )));
        }
        for ((f, head), g) in row.iter().zip(heads).zip(grad.iter_mut()) {
            let label = label as usize;
            if label >= head.outputs {
                return Err(Error::Dimension(format!(
                    "label {label} outside the {} classes of the head",
                    head.outputs
                )));
            }
            let logits = head.forward(f)?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let log_norm = max + sum.ln();
            value += (log_norm - logits[label]) / n;
            let mut d: Vec<f64> = logits.iter().map(|z| (z - log_norm).exp() / n).collect();
            d[label] -= 1.0 / n;
            g.accumulate(f, &d);
        }
    }
    Ok(LossValue { value, grad })
}

fn check_keys<T: AsRef<[f64]>>(keys: &[Vec<T>]) -> Result<Vec<usize>> {
    let first = keys.first().ok_or_else(|| Error::param("empty batch"))?;
    let lens: Vec<usize> = first.iter().map(|k| k.as_ref().len()).collect();
    if lens.is_empty() {
        return Err(Error::param("at least one table key per sample is required"));
    }
    for sample in keys {
        if sample.len() != lens.len() {
            return Err(Error::Dimension(format!(
                "samples disagree on table count ({} vs {})",
                lens.len(),
                sample.len()
            )));
        }
        for (k, &len) in sample.iter().zip(&lens) {
            if k.as_ref().len() != len {
                return Err(Error::LengthMismatch(len, k.as_ref().len()));
            }
        }
    }
    Ok(lens)
}

fn sami_relaxed<T: AsRef<[f64]>>(keys: &[Vec<T>]) -> Result<(NestedLoss, f64)> {
    let lens = check_keys(keys)?;
    let n = keys.len();
    let m = lens.len();
    let mut grad: Vec<Vec<Vec<f64>>> = keys
        .iter()
        .map(|s| s.iter().map(|k| vec![0.0; k.as_ref().len()]).collect())
        .collect();
    if m < 2 {
        return Ok((LossValue { value: 0.0, grad }, f64::INFINITY));
    }
    let scale = 1.0 / ((n * n) as f64 * (m - 1) as f64);
    let mut total = 0.0;
    let mut gap = f64::INFINITY;
    let mut theta = vec![0.0; m];
    for i in 0..n {
        for j in 0..n {
            for (l, th) in theta.iter_mut().enumerate() {
                *th = (lens[l] as f64 - dot(keys[i][l].as_ref(), keys[j][l].as_ref())) / 2.0;
            }
            for l in 0..m - 1 {
                let diff = theta[l + 1] - theta[l];
                if i != j {
                    gap = gap.min(diff.abs());
                }
                if diff <= 0.0 {
                    continue;
                }
                total += diff;
                // d theta / d key_i = -key_j / 2 (and symmetrically for j)
                axpy(&mut grad[i][l + 1], -0.5 * scale, keys[j][l + 1].as_ref());
                axpy(&mut grad[j][l + 1], -0.5 * scale, keys[i][l + 1].as_ref());
                axpy(&mut grad[i][l], 0.5 * scale, keys[j][l].as_ref());
                axpy(&mut grad[j][l], 0.5 * scale, keys[i][l].as_ref());
            }
        }
    }
    Ok((
        LossValue {
            value: total * scale,
            grad,
        },
        gap,
    ))
}

/// Search-aware multi-index loss over all `N^2` ordered pairs:
/// `1 / (N^2 (m-1)) * sum_{i,j} sum_l [theta_ij^(l+1) - theta_ij^(l)]_+`
/// where `theta_ij^(l)` is the relaxed distance between the `l`-th table keys.
/// `keys[i][l]` is key `l` of sample `i`; with one table the loss is zero.
pub fn sami_loss(keys: &[Vec<RelaxedCode>]) -> Result<NestedLoss> {
    sami_relaxed(keys).map(|(v, _)| v)
}

/// The same loss on binary table keys with integer distances.
pub fn sami_loss_exact(keys: &[TableKeySet]) -> Result<f64> {
    let first = keys.first().ok_or_else(|| Error::param("empty batch"))?;
    let m = first.tables();
    if keys.iter().any(|k| k.tables() != m) {
        return Err(Error::Dimension("samples disagree on table count".into()));
    }
    if m < 2 {
        return Ok(0.0);
    }
    let n = keys.len();
    let mut total = 0u64;
    for a in keys {
        for b in keys {
            let theta = a
                .keys
                .iter()
                .zip(&b.keys)
                .map(|(x, y)| hamming_distance(x, y).map(i64::from))
                .collect::<Result<Vec<_>>>()?;
            total += theta.windows(2).map(|w| (w[1] - w[0]).max(0) as u64).sum::<u64>();
        }
    }
    Ok(total as f64 / ((n * n) as f64 * (m - 1) as f64))
}

/// Value and parameter gradient of the relaxed objective
/// `L_t + beta * L_c + gamma * L_s`.
#[derive(Clone, Debug)]
pub struct Objective {
    pub value: f64,
    pub triplet: f64,
    pub classification: f64,
    pub sami: f64,
    pub grads: Params,
    /// Distance of the evaluation point from the nearest hinge kink or
    /// max/min tie; gradients are exact only while this is positive.
    pub kink_gap: f64,
}

/// Forward pass through tanh-relaxed hash layers, then the three losses.
/// SAMI keys use the block-wise layout with `model.hyper.tables` tables.
pub fn total_objective(batch: &Batch, model: &HashModel) -> Result<Objective> {
    let hyper = &model.hyper;
    let branches = model.params.projections.len();
    let r = model.code_bits_per_branch();
    let n = batch.len();
    if n < 2 {
        return Err(Error::param("a batch needs at least two samples"));
    }

    let mut relaxed: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for feats in &batch.features {
        if feats.len() != branches {
            return Err(Error::Dimension(format!(
                "sample has {} branch features, model has {branches} branches",
                feats.len()
            )));
        }
        let mut per_branch = Vec::with_capacity(branches);
        for (f, proj) in feats.iter().zip(&model.params.projections) {
            per_branch.push(proj.forward(f)?.into_iter().map(f64::tanh).collect::<Vec<_>>());
        }
        relaxed.push(per_branch);
    }

    let (triplet, triplet_gap) = total_triplet(&relaxed, &batch.labels, hyper.alpha)?;
    let mut code_grad = triplet.grad;

    let classification = classification_loss(&batch.features, &batch.labels, &model.params.classifiers)?;

    let layout = KeyLayout::new(Strategy::Blockwise, branches, r, hyper.tables)?;
    let full: Vec<Vec<f64>> = relaxed.iter().map(|br| br.concat()).collect();
    let keys: Vec<Vec<Vec<f64>>> = full
        .iter()
        .map(|code| (0..layout.tables()).map(|t| layout.relaxed_key(code, t)).collect())
        .collect();
    let (sami, sami_gap) = sami_relaxed(&keys)?;
    if hyper.gamma != 0.0 {
        for (i, sample) in sami.grad.iter().enumerate() {
            for (t, g) in sample.iter().enumerate() {
                for (p, gv) in layout.positions(t).zip(g) {
                    code_grad[i][p / r][p % r] += hyper.gamma * gv;
                }
            }
        }
    }

    let mut grads = model.params.zeros_like();
    for (i, feats) in batch.features.iter().enumerate() {
        for b in 0..branches {
            let dz: Vec<f64> = code_grad[i][b]
                .iter()
                .zip(&relaxed[i][b])
                .map(|(g, u)| g * (1.0 - u * u))
                .collect();
            grads.projections[b].accumulate(&feats[b], &dz);
        }
    }
    for (dst, src) in grads.classifiers.iter_mut().zip(&classification.grad) {
        dst.params_mut()
            .zip(src.params())
            .for_each(|(d, s)| *d += hyper.beta * s);
    }

    let mut kink_gap = triplet_gap;
    if hyper.gamma != 0.0 {
        kink_gap = kink_gap.min(sami_gap);
    }
    Ok(Objective {
        value: triplet.value + hyper.beta * classification.value + hyper.gamma * sami.value,
        triplet: triplet.value,
        classification: classification.value,
        sami: sami.value,
        grads,
        kink_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table_construction::BranchCodes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rc(v: &[f64]) -> RelaxedCode {
        RelaxedCode::new(v.to_vec()).unwrap()
    }

    fn random_relaxed(rng: &mut ChaCha8Rng, r: usize) -> RelaxedCode {
        rc(&(0..r).map(|_| rng.random_range(-1.0..=1.0)).collect::<Vec<_>>())
    }

    /// Exhaustive oracle: enumerate every positive and negative per anchor.
    fn triplet_oracle(codes: &[Vec<f64>], labels: &[u32], alpha: f64) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - x * y) / 2.0).sum::<f64>();
        let mut total = 0.0;
        let mut count = 0;
        for a in 0..codes.len() {
            let pos: Vec<f64> = (0..codes.len())
                .filter(|&j| j != a && labels[j] == labels[a])
                .map(|j| d(&codes[a], &codes[j]))
                .collect();
            let neg: Vec<f64> = (0..codes.len())
                .filter(|&j| labels[j] != labels[a])
                .map(|j| d(&codes[a], &codes[j]))
                .collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            count += 1;
            let hardest_pos = pos.iter().cloned().fold(f64::MIN, f64::max);
            let hardest_neg = neg.iter().cloned().fold(f64::MAX, f64::min);
            total += (alpha + hardest_pos - hardest_neg).max(0.0);
        }
        total / count as f64
    }

    #[test]
    fn relaxed_hamming_examples() {
        let ones = vec![1.0; 6];
        assert_eq!(relaxed_hamming(&ones, &ones).unwrap(), 0.0);
        let neg: Vec<f64> = ones.iter().map(|v| -v).collect();
        assert_eq!(relaxed_hamming(&ones, &neg).unwrap(), 6.0);
        assert!(relaxed_hamming(&ones, &[1.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = BinaryCode::random(37, &mut rng).unwrap();
            let b = BinaryCode::random(37, &mut rng).unwrap();
            let relaxed = relaxed_hamming(&RelaxedCode::from_binary(&a), &RelaxedCode::from_binary(&b)).unwrap();
            assert_eq!(relaxed, f64::from(hamming_distance(&a, &b).unwrap()));
        }
    }

    #[test]
    fn relaxed_code_range() {
        assert!(RelaxedCode::new(vec![0.5, -1.0, 1.0]).is_ok());
        assert!(RelaxedCode::new(vec![1.5]).is_err());
        assert!(RelaxedCode::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn triplet_zero_when_margin_met() {
        let a = rc(&[1.0, 1.0, 1.0, 1.0]);
        let b = rc(&[-1.0, -1.0, 1.0, 1.0]);
        let codes = vec![a.clone(), a.clone(), b.clone(), b.clone()];
        let labels = [0, 0, 1, 1];
        let lv = triplet_loss_batch_hard(&codes, &labels, 2.0).unwrap();
        assert_eq!(lv.value, 0.0);
        assert!(lv.grad.iter().flatten().all(|g| *g == 0.0));

        let same = vec![a.clone(); 4];
        assert_eq!(triplet_loss_batch_hard(&same, &labels, 0.0).unwrap().value, 0.0);
    }

    #[test]
    fn triplet_hand_built_batch() {
        // N = 4, r = 4
        let raw = vec![
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, -1.0, 1.0, 1.0],
            vec![1.0, 1.0, -1.0, -1.0],
            vec![-1.0, 1.0, 1.0, -1.0],
        ];
        let labels = [0, 0, 1, 1];
        // anchor 0: pos d=1, neg min(2,2)=2 -> [1+1-2]=0
        // anchor 1: pos d=1, neg min(3,3)=3 -> 0
        // anchor 2: pos d=2, neg min(2,3)=2 -> 1
        // anchor 3: pos d=2, neg min(2,3)=2 -> 1
        let expected = 0.5;
        assert_eq!(triplet_oracle(&raw, &labels, 1.0), expected);
        let codes: Vec<RelaxedCode> = raw.iter().map(|v| rc(v)).collect();
        assert_eq!(triplet_loss_batch_hard(&codes, &labels, 1.0).unwrap().value, expected);
        let bin: Vec<BinaryCode> = raw.iter().map(|v| BinaryCode::from_signs(v).unwrap()).collect();
        assert_eq!(triplet_loss_exact(&bin, &labels, 1.0).unwrap(), expected);
    }

    #[test]
    fn triplet_skips_anchors_without_pairs() {
        let codes = vec![rc(&[1.0, 1.0]), rc(&[1.0, -1.0]), rc(&[-1.0, -1.0])];
        // label 2 has no positive; two valid anchors remain
        let lv = triplet_loss_batch_hard(&codes, &[0, 0, 2], 1.0).unwrap();
        let oracle = triplet_oracle(&codes.iter().map(|c| c.to_vec()).collect::<Vec<_>>(), &[0, 0, 2], 1.0);
        assert_eq!(lv.value, oracle);
        assert!(matches!(
            triplet_loss_batch_hard(&codes, &[0, 1, 2], 1.0),
            Err(Error::NoValidAnchor)
        ));
        assert!(matches!(
            triplet_loss_batch_hard(&codes, &[0, 0, 0], 1.0),
            Err(Error::NoValidAnchor)
        ));
    }

    #[test]
    fn triplet_random_batches_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.random_range(2..=8);
            let r = rng.random_range(1..=6);
            let raw: Vec<Vec<f64>> = (0..n).map(|_| random_relaxed(&mut rng, r).to_vec()).collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let codes: Vec<RelaxedCode> = raw.iter().map(|v| rc(v)).collect();
            match triplet_loss_batch_hard(&codes, &labels, 0.7) {
                Ok(lv) => assert!((lv.value - triplet_oracle(&raw, &labels, 0.7)).abs() <= 1e-12),
                Err(Error::NoValidAnchor) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn triplet_invariant_under_group_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<RelaxedCode> = (0..6).map(|_| random_relaxed(&mut rng, 5)).collect();
        let labels = [0, 0, 0, 1, 1, 1];
        let base = triplet_loss_batch_hard(&codes, &labels, 1.0).unwrap().value;
        let permuted = vec![
            codes[2].clone(),
            codes[0].clone(),
            codes[1].clone(),
            codes[4].clone(),
            codes[5].clone(),
            codes[3].clone(),
        ];
        let after = triplet_loss_batch_hard(&permuted, &labels, 1.0).unwrap().value;
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn total_triplet_is_branch_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = [0, 0, 1, 1, 2, 2];
        let codes: Vec<Vec<RelaxedCode>> = (0..6)
            .map(|_| (0..3).map(|_| random_relaxed(&mut rng, 4)).collect())
            .collect();
        let total = total_triplet_loss(&codes, &labels, 1.0).unwrap();
        let mut sum = 0.0;
        let mut oracle_sum = 0.0;
        for b in 0..3 {
            let column: Vec<RelaxedCode> = codes.iter().map(|c| c[b].clone()).collect();
            sum += triplet_loss_batch_hard(&column, &labels, 1.0).unwrap().value;
            let raw: Vec<Vec<f64>> = column.iter().map(|c| c.to_vec()).collect();
            oracle_sum += triplet_oracle(&raw, &labels, 1.0);
        }
        assert!((total.value - sum).abs() < 1e-12);
        assert!((total.value - oracle_sum).abs() < 1e-12);
    }

    /// Direct log-sum-exp cross-entropy, written independently of the loss.
    fn cross_entropy_oracle(features: &[Vec<Vec<f64>>], labels: &[u32], heads: &[Linear]) -> f64 {
        let mut total = 0.0;
        for (b, head) in heads.iter().enumerate() {
            let mut branch = 0.0;
            for (row, &y) in features.iter().zip(labels) {
                let logits: Vec<f64> = (0..head.outputs)
                    .map(|c| {
                        head.bias[c]
                            + (0..head.inputs)
                                .map(|k| head.weight[c * head.inputs + k] * row[b][k])
                                .sum::<f64>()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                branch += -(logits[y as usize].exp() / z).ln();
            }
            total += branch / features.len() as f64;
        }
        total
    }

    #[test]
    fn classification_examples() {
        let heads = vec![Linear::zeros(5, 3), Linear::zeros(5, 3)];
        let feats = vec![vec![vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]; 4];
        let labels = [0, 1, 2, 3];
        let lv = classification_loss(&feats, &labels, &heads).unwrap();
        assert!((lv.value - 2.0 * 5f64.ln()).abs() < 1e-12);

        let mut dominant = Linear::zeros(3, 1);
        dominant.bias = vec![200.0, 0.0, 0.0];
        let lv = classification_loss(&[vec![vec![0.0]]], &[0], &[dominant]).unwrap();
        assert!(lv.value < 1e-80);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads: Vec<Linear> = (0..3).map(|_| Linear::uniform(4, 3, &mut rng)).collect();
        let feats: Vec<Vec<Vec<f64>>> = (0..6)
            .map(|_| {
                (0..3)
                    .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .collect()
            })
            .collect();
        let labels: Vec<u32> = (0..6).map(|i| i % 4).collect();
        let lv = classification_loss(&feats, &labels, &heads).unwrap();
        assert!((lv.value - cross_entropy_oracle(&feats, &labels, &heads)).abs() <= 1e-12);

        assert!(classification_loss(&feats, &[9; 6], &heads).is_err());
        assert!(classification_loss(&feats, &labels, &heads[..2]).is_err());
    }

    #[test]
    fn sami_examples() {
        let same = vec![vec![rc(&[1.0, -1.0]), rc(&[1.0, 1.0])]; 5];
        assert_eq!(sami_loss(&same).unwrap().value, 0.0);

        // N = 2, m = 2: theta^(1) = 1, theta^(2) = 3 for the cross pair.
        let keys = vec![
            vec![rc(&[1.0, 1.0, 1.0]), rc(&[1.0, 1.0, 1.0])],
            vec![rc(&[-1.0, 1.0, 1.0]), rc(&[-1.0, -1.0, -1.0])],
        ];
        assert_eq!(sami_loss(&keys).unwrap().value, 1.0);
        let exact: Vec<TableKeySet> = keys
            .iter()
            .map(|s| TableKeySet {
                keys: s.iter().map(|k| BinaryCode::from_signs(k).unwrap()).collect(),
            })
            .collect();
        assert_eq!(sami_loss_exact(&exact).unwrap(), 1.0);

        // decreasing theta: hinge inactive
        let keys = vec![
            vec![rc(&[1.0, 1.0, 1.0]), rc(&[1.0, 1.0, 1.0])],
            vec![rc(&[-1.0, -1.0, -1.0]), rc(&[-1.0, 1.0, 1.0])],
        ];
        assert_eq!(sami_loss(&keys).unwrap().value, 0.0);

        let single = vec![vec![rc(&[1.0])], vec![rc(&[-1.0])]];
        assert_eq!(sami_loss(&single).unwrap().value, 0.0);
        let ragged = vec![vec![rc(&[1.0]), rc(&[1.0])], vec![rc(&[-1.0])]];
        assert!(sami_loss(&ragged).is_err());
    }

    /// Ordered-pair oracle for the SAMI loss on binary keys.
    fn sami_oracle(keys: &[Vec<Vec<f64>>]) -> f64 {
        let n = keys.len();
        let m = keys[0].len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                for l in 0..m - 1 {
                    let th = |l: usize| keys[i][l].iter().zip(&keys[j][l]).filter(|(a, b)| a != b).count() as f64;
                    s += (th(l + 1) - th(l)).max(0.0);
                }
            }
        }
        s / ((n * n) as f64 * (m - 1) as f64)
    }

    #[test]
    fn sami_matches_oracle_and_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.random_range(1..=8);
            let m = rng.random_range(2..=4);
            let branches: Vec<BranchCodes> = (0..n)
                .map(|_| BranchCodes::new((0..3).map(|_| BinaryCode::random(6, &mut rng).unwrap()).collect()).unwrap())
                .collect();
            let layout = KeyLayout::new(Strategy::Blockwise, 3, 6, m).unwrap();
            let sets: Vec<TableKeySet> = branches.iter().map(|b| layout.keys(&b.full_code()).unwrap()).collect();
            let relaxed: Vec<Vec<RelaxedCode>> = sets
                .iter()
                .map(|s| s.keys.iter().map(RelaxedCode::from_binary).collect())
                .collect();
            let raw: Vec<Vec<Vec<f64>>> = relaxed.iter().map(|s| s.iter().map(|k| k.to_vec()).collect()).collect();
            let want = sami_oracle(&raw);
            assert!((sami_loss(&relaxed).unwrap().value - want).abs() <= 1e-12);
            assert!((sami_loss_exact(&sets).unwrap() - want).abs() <= 1e-12);

            let mut shuffled = relaxed.clone();
            shuffled.reverse();
            assert!((sami_loss(&shuffled).unwrap().value - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn sami_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let keys: Vec<Vec<RelaxedCode>> = (0..4)
            .map(|_| {
                (0..3)
                    .map(|_| rc(&(0..4).map(|_| rng.random_range(-0.9..0.9)).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        let lv = sami_loss(&keys).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for l in 0..3 {
                for p in 0..4 {
                    let mut plus = keys.clone();
                    let mut minus = keys.clone();
                    plus[i][l].0[p] += h;
                    minus[i][l].0[p] -= h;
                    let fd = (sami_loss(&plus).unwrap().value - sami_loss(&minus).unwrap().value) / (2.0 * h);
                    assert!((fd - lv.grad[i][l][p]).abs() < 1e-7, "i={i} l={l} p={p}");
                }
            }
        }
    }
}
