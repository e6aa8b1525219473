//! Gallery indexing, ranking and recall metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Serialize, Serializer};

use crate::data::{Image, TripletDataset};
use crate::encoders::{BranchKind, TokenFeatures};
use crate::error::{Error, Result};
use crate::model::DetailFusionModel;
use crate::nn::{dot, l2_normalize, Mat, Real};

/// Unit-normalized image features with their gallery ids.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex<T = f32> {
    ids: Vec<u32>,
    feats: Mat<T>,
    /// Image id → ids of the six images in its near-duplicate group.
    groups: BTreeMap<u32, Vec<u32>>,
}

impl<T: Real> GalleryIndex<T> {
    /// Normalizes each row; rejects duplicate ids and zero rows.
    pub fn from_features(ids: Vec<u32>, mut feats: Mat<T>, groups: BTreeMap<u32, Vec<u32>>) -> Result<Self> {
        if ids.len() != feats.rows() {
            return Err(Error::dim(format!("{} feature rows", ids.len()), feats.rows()));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = ids.iter().find(|&&id| !seen.insert(id)) {
            return Err(Error::Validation(format!("duplicate gallery id {dup}")));
        }
        for i in 0..feats.rows() {
            let (u, _) = l2_normalize(feats.row(i))
                .ok_or_else(|| Error::Numeric(format!("gallery feature {} has zero norm", ids[i])))?;
            feats.row_mut(i).copy_from_slice(&u);
        }
        if !feats.is_finite() {
            return Err(Error::Numeric("gallery features contain non-finite values".into()));
        }
        Ok(Self { ids, feats, groups })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn features(&self) -> &Mat<T> {
        &self.feats
    }

    pub fn row_of(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    pub fn groups(&self) -> &BTreeMap<u32, Vec<u32>> {
        &self.groups
    }

    /// Cosine similarity of a (normalized) query against every row.
    fn similarities(&self, unit: &[T]) -> Vec<T> {
        (0..self.feats.rows()).map(|r| dot(unit, self.feats.row(r))).collect()
    }
}

/// Near-duplicate groups of a dataset as image id → member ids.
pub fn group_map(dataset: &TripletDataset) -> BTreeMap<u32, Vec<u32>> {
    let mut out = BTreeMap::new();
    for g in dataset.groups() {
        for &m in &g.members {
            out.insert(m, g.members.clone());
        }
    }
    out
}

/// Encodes every image through the detail branch's image path, in id order.
pub fn build_index(
    model: &DetailFusionModel<f32>,
    ids: &[u32],
    images: &[Image],
    groups: BTreeMap<u32, Vec<u32>>,
) -> Result<GalleryIndex<f32>> {
    if ids.len() != images.len() {
        return Err(Error::dim(format!("{} images", ids.len()), images.len()));
    }
    let d = model.config().feature_dim;
    let mut feats = Mat::zeros(images.len(), d);
    for (i, im) in images.iter().enumerate() {
        let t = model.encode_image(im)?;
        feats.row_mut(i).copy_from_slice(t.cls());
    }
    GalleryIndex::from_features(ids.to_vec(), feats, groups)
}

/// Index over a dataset's full gallery.
pub fn build_dataset_index(model: &DetailFusionModel<f32>, dataset: &TripletDataset) -> Result<GalleryIndex<f32>> {
    let ids: Vec<u32> = (0..dataset.gallery_len() as u32).collect();
    build_index(model, &ids, dataset.images(), group_map(dataset))
}

/// Query representation for ranking.
#[derive(Clone, Copy, Debug)]
pub enum QueryFeature<'a, T> {
    /// One feature (a branch output or the fused compositor output).
    Single(&'a [T]),
    /// Detail and global branch features whose similarities are summed.
    ScoreSum(&'a [T], &'a [T]),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedResult<T> {
    pub query_id: usize,
    /// Candidate ids, best first.
    pub ids: Vec<u32>,
    pub scores: Vec<T>,
    /// Softmax over all gallery scores, aligned with `ids`.
    pub relative: Vec<T>,
}

impl<T> RankedResult<T> {
    /// Drops one candidate, keeping the order of the rest.
    pub fn without(mut self, id: u32) -> Self {
        if let Some(pos) = self.ids.iter().position(|&x| x == id) {
            self.ids.remove(pos);
            self.scores.remove(pos);
            self.relative.remove(pos);
        }
        self
    }
}

fn unit<T: Real>(v: &[T], dim: usize) -> Result<Vec<T>> {
    if v.len() != dim {
        return Err(Error::dim(dim, v.len()));
    }
    Ok(l2_normalize(v)
        .ok_or_else(|| Error::Numeric("query feature has zero norm".into()))?
        .0)
}

/// Similarity of the query to every gallery row, in row order.
pub fn score_all<T: Real>(query: QueryFeature<'_, T>, index: &GalleryIndex<T>) -> Result<Vec<T>> {
    if index.is_empty() {
        return Err(Error::Usage("cannot retrieve from an empty gallery".into()));
    }
    let d = index.feats.cols();
    Ok(match query {
        QueryFeature::Single(q) => index.similarities(&unit(q, d)?),
        QueryFeature::ScoreSum(a, b) => {
            let sa = index.similarities(&unit(a, d)?);
            let sb = index.similarities(&unit(b, d)?);
            sa.into_iter().zip(sb).map(|(x, y)| x + y).collect()
        }
    })
}

/// Row order by descending score, ties by ascending id.
fn order<T: Real>(scores: &[T], ids: &[u32]) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..scores.len()).collect();
    rows.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ids[a].cmp(&ids[b]))
    });
    rows
}

/// Top-`k` candidates (`k = gallery size` gives the full ranking).
pub fn retrieve<T: Real>(query_id: usize, query: QueryFeature<'_, T>, index: &GalleryIndex<T>, k: usize) -> Result<RankedResult<T>> {
    let scores = score_all(query, index)?;
    if k > index.len() {
        return Err(Error::Usage(format!("k = {k} exceeds gallery size {}", index.len())));
    }
    let rel = relative_scores(&scores);
    let rows = order(&scores, &index.ids);
    let top = &rows[..k];
    Ok(RankedResult {
        query_id,
        ids: top.iter().map(|&r| index.ids[r]).collect(),
        scores: top.iter().map(|&r| scores[r]).collect(),
        relative: top.iter().map(|&r| rel[r]).collect(),
    })
}

/// Softmax at temperature 1 over all gallery similarities.
pub fn relative_scores<T: Real>(similarities: &[T]) -> Vec<T> {
    if similarities.len() <= 1 {
        return vec![T::one(); similarities.len()];
    }
    let max = similarities.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = similarities.iter().map(|&s| (s - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_truth<T>(results: &[RankedResult<T>], truth: &[u32]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Validation("no queries to score".into()));
    }
    if truth.len() != results.len() {
        return Err(Error::Validation(format!(
            "{} queries but {} ground-truth targets",
            results.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Fraction of queries whose target is among the first `k` ranked ids.
pub fn recall_at_k<T>(results: &[RankedResult<T>], truth: &[u32], k: usize) -> Result<f64> {
    check_truth(results, truth)?;
    let hits = results
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.ids.iter().take(k).any(|id| id == *t))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// Recall with each ranking restricted to the target's group members.
///
/// Results must hold full rankings so every group member is present.
pub fn recall_subset_at_k<T>(
    results: &[RankedResult<T>],
    truth: &[u32],
    groups: &BTreeMap<u32, Vec<u32>>,
    k: usize,
) -> Result<f64> {
    check_truth(results, truth)?;
    let mut hits = 0;
    for (r, &t) in results.iter().zip(truth) {
        let members = groups
            .get(&t)
            .ok_or_else(|| Error::Validation(format!("target {t} has no subset group")))?;
        let rank = subset_rank(r, members, t)?;
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Zero-based rank of `target` among `members` in a ranking.
fn subset_rank<T>(r: &RankedResult<T>, members: &[u32], target: u32) -> Result<usize> {
    let mut rank = 0;
    for id in &r.ids {
        if *id == target {
            return Ok(rank);
        }
        if members.contains(id) {
            rank += 1;
        }
    }
    Err(Error::Validation(format!(
        "ranking for query {} does not contain target {target}",
        r.query_id
    )))
}

/// Rounds half-up to two decimals. The nudge keeps values such as 82.855,
/// which are stored just below the midpoint in binary, rounding upward.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    (scaled + scaled.signum() * 1e-7).round() / 100.0
}

/// Fraction in `[0, 1]` printed as a percentage with two decimals.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", round2(fraction * 100.0))
}

fn as_percent<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round2(v * 100.0))
}

fn as_percent_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => as_percent(v, s),
        None => s.serialize_none(),
    }
}

/// Recall values as fractions; serialized as percentages with two decimals.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RecallSet {
    #[serde(rename = "recall@1", serialize_with = "as_percent")]
    pub at_1: f64,
    #[serde(rename = "recall@5", serialize_with = "as_percent")]
    pub at_5: f64,
    #[serde(rename = "recall@10", serialize_with = "as_percent")]
    pub at_10: f64,
    #[serde(rename = "recall@50", serialize_with = "as_percent")]
    pub at_50: f64,
    #[serde(rename = "recall_subset@1", serialize_with = "as_percent_opt")]
    pub subset_at_1: Option<f64>,
    #[serde(rename = "recall_subset@2", serialize_with = "as_percent_opt")]
    pub subset_at_2: Option<f64>,
    #[serde(rename = "recall_subset@3", serialize_with = "as_percent_opt")]
    pub subset_at_3: Option<f64>,
}

impl RecallSet {
    /// `(R@5 + Rs@1) / 2`, defined when subset recall is.
    pub fn avg(&self) -> Option<f64> {
        self.subset_at_1.map(|s| (self.at_5 + s) / 2.0)
    }

    pub fn compute<T>(
        results: &[RankedResult<T>],
        truth: &[u32],
        groups: Option<&BTreeMap<u32, Vec<u32>>>,
    ) -> Result<Self> {
        let subset = |k| groups.map(|g| recall_subset_at_k(results, truth, g, k)).transpose();
        Ok(Self {
            at_1: recall_at_k(results, truth, 1)?,
            at_5: recall_at_k(results, truth, 5)?,
            at_10: recall_at_k(results, truth, 10)?,
            at_50: recall_at_k(results, truth, 50)?,
            subset_at_1: subset(1)?,
            subset_at_2: subset(2)?,
            subset_at_3: subset(3)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Breakdown {
    pub queries: usize,
    pub recall: RecallSet,
    #[serde(serialize_with = "as_percent_opt")]
    pub avg: Option<f64>,
}

/// Per-query summary kept in reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRanking {
    pub query: usize,
    pub target: u32,
    /// Zero-based position of the target in the full ranking.
    pub target_rank: usize,
    pub top: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub queries: usize,
    pub gallery: usize,
    pub recall: RecallSet,
    #[serde(serialize_with = "as_percent_opt")]
    pub avg: Option<f64>,
    /// Breakdown by number of atomic edits in the modification.
    pub per_edit_count: BTreeMap<usize, Breakdown>,
    pub rankings: Vec<QueryRanking>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        let r = &self.recall;
        let opt = |v: Option<f64>| v.map(format_percent).unwrap_or_else(|| "-".into());
        format!(
            "{:?}: R@1 {} R@5 {} R@10 {} R@50 {} Rs@1 {} Rs@2 {} Rs@3 {} Avg {}",
            self.mode,
            format_percent(r.at_1),
            format_percent(r.at_5),
            format_percent(r.at_10),
            format_percent(r.at_50),
            opt(r.subset_at_1),
            opt(r.subset_at_2),
            opt(r.subset_at_3),
            opt(self.avg)
        )
    }
}

/// Builds a report with the average filled in from component recalls.
pub fn aggregate(
    mode: EvalMode,
    gallery: usize,
    recall: RecallSet,
    per_edit_count: BTreeMap<usize, Breakdown>,
    rankings: Vec<QueryRanking>,
    metadata: BTreeMap<String, String>,
) -> MetricsReport {
    MetricsReport {
        mode,
        queries: rankings.len(),
        gallery,
        avg: recall.avg(),
        recall,
        per_edit_count,
        rankings,
        metadata,
    }
}

/// Which query representation is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Detail,
    Global,
    ScoreSum,
    Compositor,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detail" | "di" | "single" => Ok(EvalMode::Detail),
            "global" | "gm" => Ok(EvalMode::Global),
            "score_sum" => Ok(EvalMode::ScoreSum),
            "compositor" => Ok(EvalMode::Compositor),
            other => Err(Error::Usage(format!(
                "unknown mode `{other}` (expected single, global, score_sum or compositor)"
            ))),
        }
    }
}

/// Branch outputs for each query of a dataset, computed once.
#[derive(Clone, Debug)]
pub struct QueryFeatures {
    pub detail: Vec<TokenFeatures<f32>>,
    pub global: Vec<TokenFeatures<f32>>,
}

impl QueryFeatures {
    /// Encodes the selected triplets with both branches (token 0 normalized).
    pub fn encode(model: &DetailFusionModel<f32>, dataset: &TripletDataset, triplets: &[usize]) -> Result<Self> {
        let mut detail = Vec::with_capacity(triplets.len());
        let mut global = Vec::with_capacity(triplets.len());
        for &i in triplets {
            let t = dataset
                .triplet(i)
                .ok_or_else(|| Error::Validation(format!("triplet {i} out of range")))?;
            let patches = model.vision_encode(t.reference)?;
            for (kind, out) in [(BranchKind::Detail, &mut detail), (BranchKind::Global, &mut global)] {
                let (f, _) = model.forward_encode(
                    crate::model::VisualInput::Patches(&patches),
                    Some(t.modification),
                    kind,
                )?;
                out.push(f.normalized()?);
            }
        }
        Ok(Self { detail, global })
    }
}

/// Ranks the selected triplets' queries against `index` and computes metrics.
pub fn evaluate_queries(
    model: &DetailFusionModel<f32>,
    dataset: &TripletDataset,
    triplets: &[usize],
    queries: &QueryFeatures,
    index: &GalleryIndex<f32>,
    mode: EvalMode,
) -> Result<MetricsReport> {
    let mut results = Vec::with_capacity(triplets.len());
    let mut fused = Vec::new();
    if mode == EvalMode::Compositor {
        fused = model
            .compositor()
            .compose_batch(model.store(), &queries.global, &queries.detail)?;
    }
    for (qi, &ti) in triplets.iter().enumerate() {
        let q = match mode {
            EvalMode::Detail => QueryFeature::Single(queries.detail[qi].cls()),
            EvalMode::Global => QueryFeature::Single(queries.global[qi].cls()),
            EvalMode::ScoreSum => QueryFeature::ScoreSum(queries.detail[qi].cls(), queries.global[qi].cls()),
            EvalMode::Compositor => QueryFeature::Single(&fused[qi].vector),
        };
        // As in the CIRR protocol, the reference never counts as a candidate.
        let reference = dataset.triplets()[ti].reference;
        results.push(retrieve(ti, q, index, index.len())?.without(reference));
    }
    let records = dataset.triplets();
    let truth: Vec<u32> = triplets.iter().map(|&i| records[i].target).collect();
    let has_groups = triplets.iter().all(|&i| records[i].subset_group.is_some()) && !index.groups().is_empty();
    let groups = has_groups.then(|| index.groups());
    let recall = RecallSet::compute(&results, &truth, groups)?;

    let mut by_count: BTreeMap<usize, (Vec<RankedResult<f32>>, Vec<u32>)> = BTreeMap::new();
    for (r, (&ti, &t)) in results.iter().zip(triplets.iter().zip(&truth)) {
        let e = by_count.entry(records[ti].edits.len()).or_default();
        e.0.push(r.clone());
        e.1.push(t);
    }
    let mut per_edit_count = BTreeMap::new();
    for (n, (rs, ts)) in by_count {
        let rec = RecallSet::compute(&rs, &ts, groups)?;
        per_edit_count.insert(
            n,
            Breakdown {
                queries: rs.len(),
                avg: rec.avg(),
                recall: rec,
            },
        );
    }
    let rankings = results
        .iter()
        .zip(&truth)
        .map(|(r, &t)| QueryRanking {
            query: r.query_id,
            target: t,
            target_rank: r.ids.iter().position(|&id| id == t).unwrap_or(usize::MAX),
            top: r.ids.iter().take(10).copied().collect(),
        })
        .collect();
    Ok(aggregate(mode, index.len(), recall, per_edit_count, rankings, BTreeMap::new()))
}

/// Full evaluation of every triplet of a dataset against its whole gallery.
pub fn evaluate(model: &DetailFusionModel<f32>, dataset: &TripletDataset, mode: EvalMode) -> Result<MetricsReport> {
    let index = build_dataset_index(model, dataset)?;
    let all: Vec<usize> = (0..dataset.triplets().len()).collect();
    let queries = QueryFeatures::encode(model, dataset, &all)?;
    evaluate_queries(model, dataset, &all, &queries, &index, mode)
}
