//! Contrastive objectives over unit-normalized overall-representation vectors.
//!
//! Every loss is an InfoNCE term averaged over queries:
//! `−(1/B) Σᵢ log( exp(s(qᵢ, pos)/τ) / Σ_c exp(s(qᵢ, c)/τ) )`, differing only
//! in the candidate set `c`. Similarities are dot products, so callers pass
//! normalized features; gradients are returned w.r.t. those features.

use crate::error::{Error, Result};
use crate::nn::{axpy, dot, Mat, Real};

/// Rows are aligned per triplet: row `i` of every matrix belongs to query `i`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T> {
    pub query: Mat<T>,
    pub target: Mat<T>,
    pub reference: Option<Mat<T>>,
    /// Five near-duplicates of each target, rows `5i..5i+5` for query `i`.
    pub group: Option<Mat<T>>,
    pub temperature: T,
}

impl<T: Real> ContrastiveBatch<T> {
    pub fn new(query: Mat<T>, target: Mat<T>, temperature: T) -> Self {
        Self {
            query,
            target,
            reference: None,
            group: None,
            temperature,
        }
    }

    pub fn with_reference(mut self, reference: Mat<T>) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_group(mut self, group: Mat<T>) -> Self {
        self.group = Some(group);
        self
    }

    pub fn len(&self) -> usize {
        self.query.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.query.rows() == 0
    }
}

/// Number of group negatives per query.
pub const GROUP_NEGATIVES: usize = 5;

/// Loss value plus gradients w.r.t. each input that took part.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub value: T,
    pub d_query: Mat<T>,
    pub d_target: Option<Mat<T>>,
    pub d_reference: Option<Mat<T>>,
    pub d_group: Option<Mat<T>>,
    pub d_gallery: Option<Mat<T>>,
}

#[derive(Clone, Debug)]
pub struct JointLoss<T> {
    pub value: T,
    pub detail: LossOutput<T>,
    pub global: LossOutput<T>,
}

/// A block of candidates: seen by every query, or `k` private rows per query.
struct Candidates<'a, T> {
    feats: &'a Mat<T>,
    per_query: Option<usize>,
}

impl<T: Real> Candidates<'_, T> {
    fn rows_for(&self, i: usize) -> std::ops::Range<usize> {
        match self.per_query {
            Some(k) => i * k..(i + 1) * k,
            None => 0..self.feats.rows(),
        }
    }
}

fn check_temperature<T: Real>(tau: T) -> Result<()> {
    if !(tau > T::zero() && tau.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            tau.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(())
}

fn check_feats<T: Real>(what: &str, m: &Mat<T>, dim: usize) -> Result<()> {
    if m.cols() != dim {
        return Err(Error::dim(format!("{what} of width {dim}"), format!("width {}", m.cols())));
    }
    if !m.is_finite() {
        return Err(Error::Numeric(format!("{what} contain non-finite values")));
    }
    Ok(())
}

fn check_aligned<T: Real>(what: &str, m: &Mat<T>, rows: usize, dim: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::dim(format!("{rows} {what} rows"), m.rows()));
    }
    check_feats(what, m, dim)
}

/// Shared InfoNCE core. `positive[i] = (block, row)` locates query `i`'s positive.
fn info_nce<T: Real>(query: &Mat<T>, blocks: &[Candidates<'_, T>], positive: &[(usize, usize)], tau: T) -> (T, Mat<T>, Vec<Mat<T>>) {
    let b = query.rows();
    let d = query.cols();
    let inv_tau = T::one() / tau;
    let scale = T::one() / T::lit(b as f64);
    let mut total = T::zero();
    let mut d_query = Mat::zeros(b, d);
    let mut d_blocks: Vec<Mat<T>> = blocks.iter().map(|c| Mat::zeros(c.feats.rows(), d)).collect();
    let mut logits = Vec::new();
    for i in 0..b {
        let q = query.row(i);
        logits.clear();
        for c in blocks {
            for r in c.rows_for(i) {
                logits.push(dot(q, c.feats.row(r)) * inv_tau);
            }
        }
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        let (pb, pr) = positive[i];
        let pos_logit = dot(q, blocks[pb].feats.row(pr)) * inv_tau;
        total += lse - pos_logit;

        // dL/dlogit = (softmax − onehot) / B, chained through s/τ.
        let mut k = 0;
        for (bi, c) in blocks.iter().enumerate() {
            for r in c.rows_for(i) {
                let p = (logits[k] - lse).exp();
                k += 1;
                let g = p * inv_tau * scale;
                axpy(g, c.feats.row(r), d_query.row_mut(i));
                axpy(g, q, d_blocks[bi].row_mut(r));
            }
        }
        let g = -inv_tau * scale;
        axpy(g, blocks[pb].feats.row(pr), d_query.row_mut(i));
        axpy(g, q, d_blocks[pb].row_mut(pr));
    }
    (total * scale, d_query, d_blocks)
}

fn validate_batch<T: Real>(batch: &ContrastiveBatch<T>) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Usage("contrastive batch is empty".into()));
    }
    check_temperature(batch.temperature)?;
    let d = batch.query.cols();
    check_feats("query features", &batch.query, d)?;
    check_aligned("target features", &batch.target, batch.len(), d)?;
    Ok(d)
}

/// Batch-wise contrastive loss: each query against every target in the batch.
pub fn loss_gm<T: Real>(batch: &ContrastiveBatch<T>) -> Result<LossOutput<T>> {
    validate_batch(batch)?;
    let blocks = [Candidates {
        feats: &batch.target,
        per_query: None,
    }];
    let pos: Vec<_> = (0..batch.len()).map(|i| (0, i)).collect();
    let (value, d_query, mut d) = info_nce(&batch.query, &blocks, &pos, batch.temperature);
    Ok(LossOutput {
        value,
        d_query,
        d_target: d.pop(),
        d_reference: None,
        d_group: None,
        d_gallery: None,
    })
}

/// Same form as [`loss_gm`], applied to fused compositor outputs.
pub fn loss_compositor<T: Real>(batch: &ContrastiveBatch<T>) -> Result<LossOutput<T>> {
    loss_gm(batch)
}

fn reference_of<T: Real>(batch: &ContrastiveBatch<T>, d: usize) -> Result<&Mat<T>> {
    let r = batch
        .reference
        .as_ref()
        .ok_or_else(|| Error::Usage("detail loss needs reference features".into()))?;
    check_aligned("reference features", r, batch.len(), d)?;
    Ok(r)
}

/// Batch contrastive loss where every reference image is an extra negative.
pub fn loss_di<T: Real>(batch: &ContrastiveBatch<T>) -> Result<LossOutput<T>> {
    let d = validate_batch(batch)?;
    let reference = reference_of(batch, d)?;
    let blocks = [
        Candidates {
            feats: &batch.target,
            per_query: None,
        },
        Candidates {
            feats: reference,
            per_query: None,
        },
    ];
    let pos: Vec<_> = (0..batch.len()).map(|i| (0, i)).collect();
    let (value, d_query, mut d) = info_nce(&batch.query, &blocks, &pos, batch.temperature);
    let d_reference = d.pop();
    Ok(LossOutput {
        value,
        d_query,
        d_target: d.pop(),
        d_reference,
        d_group: None,
        d_gallery: None,
    })
}

/// [`loss_di`] plus the five near-duplicates of each query's own target,
/// each counted once in that query's denominator.
pub fn loss_di_sgn<T: Real>(batch: &ContrastiveBatch<T>) -> Result<LossOutput<T>> {
    let d = validate_batch(batch)?;
    let reference = reference_of(batch, d)?;
    let group = batch
        .group
        .as_ref()
        .ok_or_else(|| Error::Usage("group-negative loss needs group features".into()))?;
    if group.rows() != GROUP_NEGATIVES * batch.len() {
        return Err(Error::Usage(format!(
            "expected {GROUP_NEGATIVES} group negatives per query ({} rows), got {} rows",
            GROUP_NEGATIVES * batch.len(),
            group.rows()
        )));
    }
    check_feats("group features", group, d)?;
    let blocks = [
        Candidates {
            feats: &batch.target,
            per_query: None,
        },
        Candidates {
            feats: reference,
            per_query: None,
        },
        Candidates {
            feats: group,
            per_query: Some(GROUP_NEGATIVES),
        },
    ];
    let pos: Vec<_> = (0..batch.len()).map(|i| (0, i)).collect();
    let (value, d_query, mut d) = info_nce(&batch.query, &blocks, &pos, batch.temperature);
    let d_group = d.pop();
    let d_reference = d.pop();
    Ok(LossOutput {
        value,
        d_query,
        d_target: d.pop(),
        d_reference,
        d_group,
        d_gallery: None,
    })
}

/// `loss_di + γ·loss_gm` over the same triplets. `γ = 0` is allowed here and
/// reduces to the detail loss; configs additionally require `γ > 0`.
pub fn loss_joint<T: Real>(detail: &ContrastiveBatch<T>, global: &ContrastiveBatch<T>, gamma: T) -> Result<JointLoss<T>> {
    if !(gamma >= T::zero() && gamma.is_finite()) {
        return Err(Error::Config("trade-off must be positive".into()));
    }
    if detail.len() != global.len() {
        return Err(Error::dim(detail.len(), global.len()));
    }
    let di = loss_di(detail)?;
    let mut gm = loss_gm(global)?;
    let value = di.value + gamma * gm.value;
    gm.d_query.scale(gamma);
    if let Some(t) = gm.d_target.as_mut() {
        t.scale(gamma);
    }
    Ok(JointLoss {
        value,
        detail: di,
        global: gm,
    })
}

/// Contrastive loss whose denominator spans the whole gallery.
///
/// `target_ids[i]` is the gallery row of query `i`'s target.
pub fn loss_gm_spn<T: Real>(query: &Mat<T>, target_ids: &[usize], gallery: &Mat<T>, temperature: T) -> Result<LossOutput<T>> {
    if query.rows() == 0 {
        return Err(Error::Usage("contrastive batch is empty".into()));
    }
    check_temperature(temperature)?;
    let d = query.cols();
    check_feats("query features", query, d)?;
    check_feats("gallery features", gallery, d)?;
    if target_ids.len() != query.rows() {
        return Err(Error::dim(format!("{} target ids", query.rows()), target_ids.len()));
    }
    if let Some(&bad) = target_ids.iter().find(|&&t| t >= gallery.rows()) {
        return Err(Error::Usage(format!(
            "gallery of {} images is missing target id {bad}",
            gallery.rows()
        )));
    }
    let blocks = [Candidates {
        feats: gallery,
        per_query: None,
    }];
    let pos: Vec<_> = target_ids.iter().map(|&t| (0, t)).collect();
    let (value, d_query, mut d) = info_nce(query, &blocks, &pos, temperature);
    Ok(LossOutput {
        value,
        d_query,
        d_target: None,
        d_reference: None,
        d_group: None,
        d_gallery: d.pop(),
    })
}

/// [`loss_gm_spn`] with fused compositor outputs as queries.
pub fn loss_compositor_spn<T: Real>(fused: &Mat<T>, target_ids: &[usize], gallery: &Mat<T>, temperature: T) -> Result<LossOutput<T>> {
    loss_gm_spn(fused, target_ids, gallery, temperature)
}
