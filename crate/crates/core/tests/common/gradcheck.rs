//! Finite-difference checks shared by the gradient tests and the acceptance run.

use detailfusion::compositor::{Compositor, CompositorConfig, ExtractionMode, FusionMode};
use detailfusion::data::Image;
use detailfusion::encoders::{BranchKind, TokenFeatures};
use detailfusion::losses::{
    loss_compositor, loss_compositor_spn, loss_di, loss_di_sgn, loss_gm, loss_gm_spn, loss_joint, ContrastiveBatch,
    LossOutput,
};
use detailfusion::model::{DetailFusionModel, ModelConfig, VisualInput};
use detailfusion::nn::{l2_normalize, l2_normalize_backward, Grads, Mat, ParamGroup, ParamStore};
use rand::Rng;

use super::{gaussian, gaussian_mat, group_grad, numeric_grad, numeric_param_grad, random_tokens, rel_err, rng, unit_rows};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// One named comparison of analytic against numeric gradients.
#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub entries: usize,
}

fn check(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Check {
    assert_eq!(analytic.len(), numeric.len());
    Check {
        name: name.into(),
        error: rel_err(analytic, numeric),
        entries: analytic.len(),
    }
}

/// Numeric gradient of `f` w.r.t. the `slot`-th matrix of `inputs`.
fn input_grad(inputs: &[Mat<f64>], slot: usize, f: &dyn Fn(&[Mat<f64>]) -> f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    let (rows, cols) = (inputs[slot].rows(), inputs[slot].cols());
    let mut flat = inputs[slot].data().to_vec();
    numeric_grad(&mut flat, STEP, |x| {
        work[slot] = Mat::from_vec(rows, cols, x.to_vec());
        f(&work)
    })
}

fn compare_inputs(
    label: &str,
    inputs: &[Mat<f64>],
    names: &[&str],
    analytic: &[Option<Mat<f64>>],
    f: &dyn Fn(&[Mat<f64>]) -> f64,
    out: &mut Vec<Check>,
) {
    for (slot, (name, a)) in names.iter().zip(analytic).enumerate() {
        let a = a.as_ref().unwrap_or_else(|| panic!("{label}: missing gradient for {name}"));
        out.push(check(format!("{label} d/d{name}"), a.data(), &input_grad(inputs, slot, f)));
    }
}

fn grads_of(o: &LossOutput<f64>) -> [Option<Mat<f64>>; 5] {
    [
        Some(o.d_query.clone()),
        o.d_target.clone(),
        o.d_reference.clone(),
        o.d_group.clone(),
        o.d_gallery.clone(),
    ]
}

/// Every loss against its inputs.
pub fn losses(seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let (b, d) = (r.random_range(2..6), r.random_range(3..9));
    let tau = r.random_range(0.1..1.0);
    let gamma = r.random_range(0.5..3.0);
    let q = unit_rows(&mut r, b, d);
    let t = unit_rows(&mut r, b, d);
    let refs = unit_rows(&mut r, b, d);
    let group = unit_rows(&mut r, 5 * b, d);
    let gallery_rows = b + 4;
    let gallery = unit_rows(&mut r, gallery_rows, d);
    let ids: Vec<usize> = (0..b).map(|_| r.random_range(0..gallery_rows)).collect();
    let mut out = Vec::new();

    let gm = |m: &[Mat<f64>]| loss_gm(&ContrastiveBatch::new(m[0].clone(), m[1].clone(), tau)).unwrap().value;
    let o = loss_gm(&ContrastiveBatch::new(q.clone(), t.clone(), tau)).unwrap();
    let g = grads_of(&o);
    compare_inputs("global loss", &[q.clone(), t.clone()], &["query", "target"], &g[..2], &gm, &mut out);

    let comp = |m: &[Mat<f64>]| loss_compositor(&ContrastiveBatch::new(m[0].clone(), m[1].clone(), tau)).unwrap().value;
    let o = loss_compositor(&ContrastiveBatch::new(q.clone(), t.clone(), tau)).unwrap();
    let g = grads_of(&o);
    compare_inputs("compositor loss", &[q.clone(), t.clone()], &["query", "target"], &g[..2], &comp, &mut out);

    let di_batch = |m: &[Mat<f64>]| ContrastiveBatch::new(m[0].clone(), m[1].clone(), tau).with_reference(m[2].clone());
    let di = |m: &[Mat<f64>]| loss_di(&di_batch(m)).unwrap().value;
    let inputs = [q.clone(), t.clone(), refs.clone()];
    let o = loss_di(&di_batch(&inputs)).unwrap();
    let g = grads_of(&o);
    compare_inputs("detail loss", &inputs, &["query", "target", "reference"], &g[..3], &di, &mut out);

    let sgn = |m: &[Mat<f64>]| loss_di_sgn(&di_batch(m).with_group(m[3].clone())).unwrap().value;
    let inputs = [q.clone(), t.clone(), refs.clone(), group.clone()];
    let o = loss_di_sgn(&di_batch(&inputs).with_group(group.clone())).unwrap();
    let g = grads_of(&o);
    compare_inputs("group-negative loss", &inputs, &["query", "target", "reference", "group"], &g[..4], &sgn, &mut out);

    // Joint objective: detail inputs, then separate global query and shared targets.
    let qg = unit_rows(&mut r, b, d);
    let joint = |m: &[Mat<f64>]| {
        let det = ContrastiveBatch::new(m[0].clone(), m[1].clone(), tau).with_reference(m[2].clone());
        let glo = ContrastiveBatch::new(m[3].clone(), m[1].clone(), tau);
        loss_joint(&det, &glo, gamma).unwrap().value
    };
    let inputs = [q.clone(), t.clone(), refs.clone(), qg.clone()];
    let det = ContrastiveBatch::new(q.clone(), t.clone(), tau).with_reference(refs.clone());
    let glo = ContrastiveBatch::new(qg.clone(), t.clone(), tau);
    let o = loss_joint(&det, &glo, gamma).unwrap();
    let mut d_target = o.detail.d_target.clone().unwrap();
    d_target.add_assign(o.global.d_target.as_ref().unwrap());
    let g = [
        Some(o.detail.d_query.clone()),
        Some(d_target),
        o.detail.d_reference.clone(),
        Some(o.global.d_query.clone()),
    ];
    compare_inputs("joint loss", &inputs, &["detail query", "target", "reference", "global query"], &g, &joint, &mut out);

    for (label, f) in [
        ("full-gallery global loss", loss_gm_spn::<f64> as fn(&Mat<f64>, &[usize], &Mat<f64>, f64) -> _),
        ("full-gallery compositor loss", loss_compositor_spn::<f64>),
    ] {
        let spn = |m: &[Mat<f64>]| f(&m[0], &ids, &m[1], tau).unwrap().value;
        let o = f(&q, &ids, &gallery, tau).unwrap();
        let g = [Some(o.d_query.clone()), o.d_gallery.clone()];
        compare_inputs(label, &[q.clone(), gallery.clone()], &["query", "gallery"], &g, &spn, &mut out);
    }
    out
}

/// Small model so every parameter can be perturbed.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        width: 8,
        feature_dim: 8,
        query_tokens: 2,
        hybrid_blocks: 2,
        heads: 2,
        ffn_hidden: 16,
        vision_blocks: 1,
        vocab_size: 12,
        max_text_len: 5,
        vision_trainable: true,
    }
}

fn random_image(r: &mut impl Rng, size: usize) -> Image {
    Image::new(size, size, (0..size * size * 3).map(|_| r.random::<f32>()).collect()).unwrap()
}

/// Probe: a fixed linear read-out of all tokens plus one of the normalized
/// overall-representation token, so the normalization path is covered too.
struct Probe {
    weights: Mat<f64>,
    cls_weights: Vec<f64>,
}

impl Probe {
    fn value(&self, tokens: &TokenFeatures<f64>) -> f64 {
        let lin: f64 = tokens.tokens.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum();
        let (unit, _) = l2_normalize(tokens.cls()).unwrap();
        lin + unit.iter().zip(&self.cls_weights).map(|(a, b)| a * b).sum::<f64>()
    }

    fn upstream(&self, tokens: &TokenFeatures<f64>) -> Mat<f64> {
        let mut d = self.weights.clone();
        let (unit, norm) = l2_normalize(tokens.cls()).unwrap();
        let extra = l2_normalize_backward(&unit, norm, &self.cls_weights);
        for (a, b) in d.row_mut(0).iter_mut().zip(extra) {
            *a += b;
        }
        d
    }
}

/// Every encoder parameter group through the query and image paths.
pub fn encoders(seed: u64) -> Vec<Check> {
    let cfg = small_model_config();
    let mut r = rng(seed ^ 0xE1C0);
    let mut model = DetailFusionModel::<f64>::new(cfg.clone(), CompositorConfig::default(), seed).unwrap();
    for g in [ParamGroup::Vision, ParamGroup::Detail, ParamGroup::Global] {
        model.store_mut().randomize_group(g, 0.3, &mut r);
    }
    let image = random_image(&mut r, cfg.image_size);
    let len = r.random_range(1..=cfg.max_text_len);
    let text = random_tokens(&mut r, cfg.vocab_size, len);
    let n = cfg.token_count();
    let probe = Probe {
        weights: gaussian_mat(&mut r, n, cfg.feature_dim),
        cls_weights: gaussian(&mut r, cfg.feature_dim),
    };

    let paths: [(&str, Option<&[u32]>, BranchKind, &[ParamGroup]); 3] = [
        ("query path (detail)", Some(&text), BranchKind::Detail, &[ParamGroup::Vision, ParamGroup::Detail]),
        ("query path (global)", Some(&text), BranchKind::Global, &[ParamGroup::Vision, ParamGroup::Global]),
        ("image path", None, BranchKind::Detail, &[ParamGroup::Vision, ParamGroup::Detail]),
    ];
    let mut out = Vec::new();
    for (label, text, branch, groups) in paths {
        let (tokens, trace) = model.forward_encode(VisualInput::Image(&image), text, branch).unwrap();
        let mut grads = Grads::zeros_like(model.store());
        model.backward_encode(&trace, &probe.upstream(&tokens), &mut grads);
        for &group in groups {
            let analytic = group_grad(model.store(), &grads, group);
            let mut store = model.store().clone();
            let numeric = numeric_param_grad(&mut store, group, STEP, |ps| {
                let mut m = model.clone();
                *m.store_mut() = ps.clone();
                let (t, _) = m.forward_encode(VisualInput::Image(&image), text, branch).unwrap();
                probe.value(&t)
            });
            out.push(check(format!("{label} / {} parameters", group.as_str()), &analytic, &numeric));
        }
        // Groups outside the path must receive exactly zero gradient.
        for g in [ParamGroup::Detail, ParamGroup::Global, ParamGroup::Compositor] {
            if !groups.contains(&g) {
                let stray = group_grad(model.store(), &grads, g);
                assert!(stray.iter().all(|&v| v == 0.0), "{label} leaked gradient into {}", g.as_str());
            }
        }
    }
    out
}

/// Moves every ReLU pre-activation well away from zero: biases become ±1
/// and the feeding weights shrink, so half the units are active, half are
/// dead, and no central difference straddles the kink.
fn keep_off_relu_kinks(ps: &mut ParamStore<f64>, r: &mut impl Rng) {
    for p in ps.params_mut() {
        let Some((layer, kind)) = p.name.rsplit_once('.') else { continue };
        if !(layer.ends_with("fc1") || layer.ends_with("projection")) {
            continue;
        }
        match kind {
            "bias" => p.data.iter_mut().for_each(|v| *v = if r.random::<bool>() { 1.0 } else { -1.0 }),
            _ => p.data.iter_mut().for_each(|v| *v *= 0.2),
        }
    }
}

pub const EXTRACTIONS: [ExtractionMode; 3] = [ExtractionMode::Attention, ExtractionMode::Concat, ExtractionMode::Projection];
pub const FUSIONS: [FusionMode; 4] = [FusionMode::PhiPsi, FusionMode::PhiOnly, FusionMode::PsiOnly, FusionMode::Average];

/// Compositor parameters and both token inputs, for every block variant.
pub fn compositor(seed: u64) -> Vec<Check> {
    let (d, heads, n, b) = (8, 2, 3, 3);
    let mut out = Vec::new();
    for extraction in EXTRACTIONS {
        for fusion in FUSIONS {
            let cfg = CompositorConfig {
                cross_layers: 2,
                same_layers: 2,
                extraction,
                fusion,
            };
            let mut r = rng(seed ^ 0xC0DE);
            let mut ps = ParamStore::<f64>::new();
            let comp = Compositor::new(&mut ps, cfg, d, heads, &mut r);
            ps.randomize_group(ParamGroup::Compositor, 0.3, &mut r);
            keep_off_relu_kinks(&mut ps, &mut r);
            let glob: Vec<_> = (0..b).map(|_| TokenFeatures::new(gaussian_mat(&mut r, n, d))).collect();
            let det: Vec<_> = (0..b).map(|_| TokenFeatures::new(gaussian_mat(&mut r, n, d))).collect();
            let w = gaussian_mat(&mut r, b, d);
            let score = |ps: &ParamStore<f64>, g: &[TokenFeatures<f64>], f: &[TokenFeatures<f64>]| -> f64 {
                let fused = comp.compose_batch(ps, g, f).unwrap();
                fused
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x.vector.iter().zip(w.row(i)).map(|(a, c)| a * c).sum::<f64>())
                    .sum()
            };
            let (_, trace) = comp.forward_batch(&ps, &glob, &det).unwrap();
            let mut grads = Grads::zeros_like(&ps);
            let (dg, df) = comp.backward_batch(&ps, &trace, &w, &mut grads);
            let label = format!("compositor {extraction:?}/{fusion:?}");
            if ps.count_in(ParamGroup::Compositor) > 0 {
                let analytic = group_grad(&ps, &grads, ParamGroup::Compositor);
                let mut store = ps.clone();
                let numeric = numeric_param_grad(&mut store, ParamGroup::Compositor, STEP, |p| score(p, &glob, &det));
                out.push(check(format!("{label} parameters"), &analytic, &numeric));
            }
            for (side, analytic) in [("global tokens", &dg), ("detail tokens", &df)] {
                let a: Vec<f64> = analytic.iter().flat_map(|m| m.data().to_vec()).collect();
                let mut flat: Vec<f64> = if side == "global tokens" { &glob } else { &det }
                    .iter()
                    .flat_map(|t| t.tokens.data().to_vec())
                    .collect();
                let numeric = numeric_grad(&mut flat, STEP, |x| {
                    let rebuilt: Vec<_> = x.chunks(n * d).map(|c| TokenFeatures::new(Mat::from_vec(n, d, c.to_vec()))).collect();
                    if side == "global tokens" {
                        score(&ps, &rebuilt, &det)
                    } else {
                        score(&ps, &glob, &rebuilt)
                    }
                });
                out.push(check(format!("{label} {side}"), &a, &numeric));
            }
        }
    }
    out
}
