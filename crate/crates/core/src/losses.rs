//! Training objectives built on the autodiff graph.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::params_to_box_graph;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Default hinge margin of the triplet loss.
pub const TRIPLET_MARGIN: f64 = 0.3;

// Added to non-negative pairs so they never win the hardest-negative search.
const MASK_OFFSET: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Triplet weight.
    pub alpha: f64,
    /// Identity cross-entropy weight.
    pub beta: f64,
    pub margin: f64,
    pub black_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            margin: TRIPLET_MARGIN,
            black_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.margin, self.black_weight];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` for `[N, C]` logits.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::invalid(format!(
            "cross_entropy: logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("cross_entropy: label {bad} outside [0, {c})")));
    }
    // Row maxima enter as constants; the shift cancels in the gradient.
    let v = g.value(logits).data();
    let maxima: Vec<T> = v
        .chunks(c)
        .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    let mut onehot = vec![T::zero(); n * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = T::one();
    }
    let m = g.constant(Tensor::from_parts(vec![n, 1], maxima));
    let shifted = g.sub(logits, m)?;
    let e = g.exp(shifted);
    let s = g.sum(e, &[1], true)?;
    let lse = g.log(s);
    let onehot = g.constant(Tensor::from_parts(vec![n, c], onehot));
    let picked = g.mul(shifted, onehot)?;
    let picked = g.sum(picked, &[1], true)?;
    let nll = g.sub(lse, picked)?;
    g.mean_all(nll)
}

fn check_pk_batch(ids: &[usize]) -> Result<()> {
    let mut counts = BTreeMap::new();
    for &id in ids {
        *counts.entry(id).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::invalid("batch_hard_triplet: batch needs at least two identities"));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::invalid(format!("batch_hard_triplet: identity {id} has a single instance")));
    }
    Ok(())
}

/// `[N, N]` Euclidean distances between the rows of `x`.
pub fn pairwise_distances<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(format!("pairwise_distances: expected [N, d], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let a = g.reshape(x, &[n, 1, d])?;
    let b = g.reshape(x, &[1, n, d])?;
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let sq = g.sum(sq, &[2], false)?;
    Ok(g.sqrt(sq))
}

/// Batch-hard triplet loss: for each anchor, hinge on the farthest positive
/// and the nearest negative, averaged over anchors.
pub fn batch_hard_triplet<T: Real>(g: &mut Graph<T>, emb: Var, ids: &[usize], margin: f64) -> Result<Var> {
    let shape = g.shape(emb).to_vec();
    if shape.len() != 2 || shape[0] != ids.len() {
        return Err(Error::invalid(format!(
            "batch_hard_triplet: embeddings {shape:?} do not match {} ids",
            ids.len()
        )));
    }
    check_pk_batch(ids)?;
    let n = ids.len();
    let dist = pairwise_distances(g, emb)?;
    let mut pos = vec![T::zero(); n * n];
    let mut not_neg = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            if ids[i] == ids[j] {
                not_neg[i * n + j] = T::lit(MASK_OFFSET);
                if i != j {
                    pos[i * n + j] = T::one();
                }
            }
        }
    }
    let pos = g.constant(Tensor::from_parts(vec![n, n], pos));
    let not_neg = g.constant(Tensor::from_parts(vec![n, n], not_neg));
    // distances are >= 0, so masking positives by zeroing keeps the max
    let dp = g.mul(dist, pos)?;
    let hp = g.max(dp, &[1], false)?;
    let dn = g.add(dist, not_neg)?;
    let dn = g.neg(dn);
    let hn = g.max(dn, &[1], false)?;
    let hn = g.neg(hn);
    let gap = g.sub(hp, hn)?;
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    g.mean_all(hinge)
}

/// Checks that every row is an LTRB box inside the unit square with left <= right, top <= bottom.
pub fn validate_boxes(boxes: &[[f64; 4]]) -> Result<()> {
    for (i, b) in boxes.iter().enumerate() {
        let inside = b.iter().all(|v| (0.0..=1.0).contains(v));
        if !inside || b[0] > b[2] || b[1] > b[3] {
            return Err(Error::invalid(format!("malformed box at row {i}: {b:?}")));
        }
    }
    Ok(())
}

/// `1/(2N) * sum_i |box(params_i) - gt_i|^2` for `[N, 4]` affine params.
pub fn box_l2<T: Real>(g: &mut Graph<T>, params: Var, gt: &[[f64; 4]]) -> Result<Var> {
    let shape = g.shape(params).to_vec();
    if shape != [gt.len(), 4] {
        return Err(Error::invalid(format!(
            "box_l2: params {shape:?} do not match {} boxes",
            gt.len()
        )));
    }
    validate_boxes(gt)?;
    let n = gt.len();
    let pred = params_to_box_graph(g, params)?;
    let flat: Vec<f64> = gt.iter().flatten().copied().collect();
    let target = g.constant(Tensor::from_f64(&[n, 4], &flat)?);
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum_all(sq)?;
    Ok(g.mul_scalar(total, 0.5 / n as f64))
}

/// Which loss terms a training stage combines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossStage {
    /// Box regression only.
    Localization,
    /// Triplet plus identity cross-entropy.
    Identity,
    /// Identity terms plus the black-clothing classifier.
    IdentityWithBlack,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub ce: Option<Var>,
    pub triplet: Option<Var>,
    pub box_l2: Option<Var>,
    pub black: Option<Var>,
}

pub fn total_loss<T: Real>(g: &mut Graph<T>, parts: &LossParts, w: &LossWeights, stage: LossStage) -> Result<Var> {
    let need = |v: Option<Var>, what: &str| {
        v.ok_or_else(|| Error::invalid(format!("total_loss: {stage:?} stage is missing the {what} term")))
    };
    match stage {
        LossStage::Localization => need(parts.box_l2, "box"),
        LossStage::Identity | LossStage::IdentityWithBlack => {
            let tri = need(parts.triplet, "triplet")?;
            let ce = need(parts.ce, "cross-entropy")?;
            let tri = g.mul_scalar(tri, w.alpha);
            let ce = g.mul_scalar(ce, w.beta);
            let sum = g.add(tri, ce)?;
            if stage == LossStage::Identity {
                return Ok(sum);
            }
            let black = need(parts.black, "black")?;
            let black = g.mul_scalar(black, w.black_weight);
            g.add(sum, black)
        }
    }
}
