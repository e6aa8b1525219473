//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use detailfusion::compositor::CompositorConfig;
use detailfusion::data::{generate_cir_finetune_set, generate_edit_pretrain_set, GenerationConfig, TripletDataset};
use detailfusion::model::{Checkpoint, ModelConfig};
use detailfusion::nn::{Mat, ParamGroup, ParamStore};
use detailfusion::training::{run_stage1, run_stage2, run_stage3, StageOutcome, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_vec(rows, cols, gaussian(rng, rows * cols))
}

/// Rows drawn uniformly from the unit sphere.
pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<f64> {
    let mut m = gaussian_mat(rng, rows, cols);
    for i in 0..rows {
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    m
}

fn sim(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// `−ln(exp(pos/τ) / Σ exp(c/τ))` written out term by term.
fn nll(q: &[f64], pos: &[f64], candidates: &[&[f64]], tau: f64) -> f64 {
    let mut denom = 0.0;
    for c in candidates {
        denom += (sim(q, c) / tau).exp();
    }
    -((sim(q, pos) / tau).exp() / denom).ln()
}

pub fn naive_gm(q: &Mat<f64>, t: &Mat<f64>, tau: f64) -> f64 {
    let b = q.rows();
    let mut total = 0.0;
    for i in 0..b {
        let cands: Vec<&[f64]> = (0..b).map(|j| t.row(j)).collect();
        total += nll(q.row(i), t.row(i), &cands, tau);
    }
    total / b as f64
}

pub fn naive_di(q: &Mat<f64>, t: &Mat<f64>, r: &Mat<f64>, tau: f64) -> f64 {
    let b = q.rows();
    let mut total = 0.0;
    for i in 0..b {
        let mut cands: Vec<&[f64]> = (0..b).map(|j| t.row(j)).collect();
        cands.extend((0..b).map(|j| r.row(j)));
        total += nll(q.row(i), t.row(i), &cands, tau);
    }
    total / b as f64
}

pub fn naive_di_sgn(q: &Mat<f64>, t: &Mat<f64>, r: &Mat<f64>, g: &Mat<f64>, tau: f64) -> f64 {
    let b = q.rows();
    let mut total = 0.0;
    for i in 0..b {
        let mut cands: Vec<&[f64]> = (0..b).map(|j| t.row(j)).collect();
        cands.extend((0..b).map(|j| r.row(j)));
        cands.extend((0..5).map(|k| g.row(5 * i + k)));
        total += nll(q.row(i), t.row(i), &cands, tau);
    }
    total / b as f64
}

pub fn naive_spn(q: &Mat<f64>, targets: &[usize], gallery: &Mat<f64>, tau: f64) -> f64 {
    let b = q.rows();
    let mut total = 0.0;
    for i in 0..b {
        let cands: Vec<&[f64]> = (0..gallery.rows()).map(|j| gallery.row(j)).collect();
        total += nll(q.row(i), gallery.row(targets[i]), &cands, tau);
    }
    total / b as f64
}

/// Full ranking by cosine similarity, computed directly; ties go to the smaller id.
pub fn naive_ranking(q: &[f64], feats: &[Vec<f64>], ids: &[u32]) -> Vec<u32> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut scored: Vec<(f64, u32)> = feats
        .iter()
        .zip(ids)
        .map(|(f, &id)| {
            let mut s = 0.0;
            for k in 0..q.len() {
                s += q[k] * f[k];
            }
            (s / (qn * norm(f)), id)
        })
        .collect();
    // Scores closer than rounding noise count as ties, broken by id.
    scored.sort_by(|a, b| {
        if (a.0 - b.0).abs() <= 1e-12 {
            a.1.cmp(&b.1)
        } else {
            b.0.total_cmp(&a.0)
        }
    });
    scored.into_iter().map(|(_, id)| id).collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn rel_scalar(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Central differences of `f` w.r.t. every entry of `x`.
pub fn numeric_grad(x: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + step;
        let up = f(x);
        x[i] = keep - step;
        let down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * step);
    }
    g
}

/// Central differences of `f` w.r.t. every parameter in `group`, in store order.
pub fn numeric_param_grad(
    store: &mut ParamStore<f64>,
    group: ParamGroup,
    step: f64,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> Vec<f64> {
    let ids: Vec<_> = store.ids_in(group).collect();
    let mut out = Vec::new();
    for id in ids {
        for j in 0..store.value(id).len() {
            let keep = store.value(id)[j];
            store.value_mut(id)[j] = keep + step;
            let up = f(store);
            store.value_mut(id)[j] = keep - step;
            let down = f(store);
            store.value_mut(id)[j] = keep;
            out.push((up - down) / (2.0 * step));
        }
    }
    out
}

/// Flattened gradient entries of `group`, in store order.
pub fn group_grad(store: &ParamStore<f64>, grads: &detailfusion::nn::Grads<f64>, group: ParamGroup) -> Vec<f64> {
    store.ids_in(group).flat_map(|id| grads.get(id).to_vec()).collect()
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub const PRETRAIN_TRIPLETS: usize = 2000;
pub const FINETUNE_TRIPLETS: usize = 1000;
/// 50 groups of 6 members plus 4 references each: a 500-image gallery.
pub const EVAL_TRIPLETS: usize = 200;
pub const EVAL_SEED_OFFSET: u64 = 10_000;

pub struct Datasets {
    pub pretrain: TripletDataset,
    pub finetune: TripletDataset,
    pub eval: TripletDataset,
}

pub fn datasets(seed: u64) -> Datasets {
    let cfg = GenerationConfig::default();
    Datasets {
        pretrain: generate_edit_pretrain_set(seed, PRETRAIN_TRIPLETS, &cfg).unwrap(),
        finetune: generate_cir_finetune_set(seed, FINETUNE_TRIPLETS, &cfg).unwrap(),
        eval: generate_cir_finetune_set(seed + EVAL_SEED_OFFSET, EVAL_TRIPLETS, &cfg).unwrap(),
    }
}

/// Training schedule used by the learning checks.
pub fn stage_configs(seed: u64) -> [TrainConfig; 3] {
    let mut s1 = TrainConfig::for_stage(1);
    s1.epochs = Some(30);
    s1.batch_size = Some(32);
    let mut s2 = TrainConfig::for_stage(2);
    s2.learning_rate = Some(1e-4);
    let mut s3 = TrainConfig::for_stage(3);
    s3.epochs = Some(10);
    let mut out = [s1, s2, s3];
    for c in &mut out {
        c.seed = seed;
    }
    out
}

pub struct PipelineRun {
    pub untrained: Checkpoint,
    pub stage1: Option<StageOutcome>,
    pub stage2: StageOutcome,
    pub stage3: StageOutcome,
}

pub fn run_pipeline(seed: u64, data: &Datasets, with_stage1: bool) -> PipelineRun {
    let [c1, c2, c3] = stage_configs(seed);
    let untrained = Checkpoint::initial(ModelConfig::default(), CompositorConfig::default(), seed).unwrap();
    let stage1 = with_stage1.then(|| run_stage1(&c1, &data.pretrain, Some(&untrained)).unwrap());
    let start = stage1.as_ref().map_or(&untrained, |s| &s.checkpoint);
    let stage2 = run_stage2(&c2, &data.finetune, start).unwrap();
    let stage3 = run_stage3(&c3, &data.finetune, &stage2.checkpoint).unwrap();
    PipelineRun {
        untrained,
        stage1,
        stage2,
        stage3,
    }
}
