mod common;

use common::{naive_di, naive_di_sgn, naive_gm, naive_spn, rel_scalar, rng, unit_rows};
use detailfusion::losses::{
    loss_compositor, loss_compositor_spn, loss_di, loss_di_sgn, loss_gm, loss_gm_spn, loss_joint, ContrastiveBatch,
};
use detailfusion::nn::Mat;
use proptest::prelude::*;
use rand::seq::SliceRandom;

struct Inputs {
    q: Mat<f64>,
    t: Mat<f64>,
    r: Mat<f64>,
    g: Mat<f64>,
    gallery: Mat<f64>,
    ids: Vec<usize>,
}

fn inputs(seed: u64, b: usize, d: usize, gallery: usize) -> Inputs {
    let mut r = rng(seed);
    let ids = (0..b).map(|i| (i * 7 + seed as usize) % gallery).collect();
    Inputs {
        q: unit_rows(&mut r, b, d),
        t: unit_rows(&mut r, b, d),
        r: unit_rows(&mut r, b, d),
        g: unit_rows(&mut r, 5 * b, d),
        gallery: unit_rows(&mut r, gallery, d),
        ids,
    }
}

fn permute_rows(m: &Mat<f64>, perm: &[usize], block: usize) -> Mat<f64> {
    let rows: Vec<Vec<f64>> = perm
        .iter()
        .flat_map(|&p| (0..block).map(move |k| p * block + k))
        .map(|r| m.row(r).to_vec())
        .collect();
    Mat::from_rows(&rows)
}

fn dims() -> impl Strategy<Value = usize> {
    prop_oneof![Just(4usize), Just(64usize)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_match_naive_oracles(
        seed in any::<u64>(),
        b in 1usize..=16,
        d in dims(),
        rows in 1usize..40,
        tau in 0.02f64..2.0,
        gamma in 0.0f64..5.0,
    ) {
        let x = inputs(seed, b, d, rows);
        let gm = ContrastiveBatch::new(x.q.clone(), x.t.clone(), tau);
        let di = gm.clone().with_reference(x.r.clone());
        let sgn = di.clone().with_group(x.g.clone());
        let cases = [
            (loss_gm(&gm).unwrap().value, naive_gm(&x.q, &x.t, tau)),
            (loss_compositor(&gm).unwrap().value, naive_gm(&x.q, &x.t, tau)),
            (loss_di(&di).unwrap().value, naive_di(&x.q, &x.t, &x.r, tau)),
            (loss_di_sgn(&sgn).unwrap().value, naive_di_sgn(&x.q, &x.t, &x.r, &x.g, tau)),
            (
                loss_joint(&di, &gm, gamma).unwrap().value,
                naive_di(&x.q, &x.t, &x.r, tau) + gamma * naive_gm(&x.q, &x.t, tau),
            ),
            (loss_gm_spn(&x.q, &x.ids, &x.gallery, tau).unwrap().value, naive_spn(&x.q, &x.ids, &x.gallery, tau)),
            (
                loss_compositor_spn(&x.q, &x.ids, &x.gallery, tau).unwrap().value,
                naive_spn(&x.q, &x.ids, &x.gallery, tau),
            ),
        ];
        for (got, want) in cases {
            prop_assert!(rel_scalar(got, want) < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn permuting_triplets_leaves_losses_unchanged(seed in any::<u64>(), b in 1usize..=12, d in dims(), tau in 0.05f64..1.0) {
        let x = inputs(seed, b, d, b + 3);
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng(seed ^ 1));
        let p = |m: &Mat<f64>| permute_rows(m, &perm, 1);
        let ids: Vec<usize> = perm.iter().map(|&i| x.ids[i]).collect();
        let before = ContrastiveBatch::new(x.q.clone(), x.t.clone(), tau).with_reference(x.r.clone());
        let after = ContrastiveBatch::new(p(&x.q), p(&x.t), tau).with_reference(p(&x.r));
        let pairs = [
            (loss_gm(&before).unwrap().value, loss_gm(&after).unwrap().value),
            (loss_di(&before).unwrap().value, loss_di(&after).unwrap().value),
            (
                loss_di_sgn(&before.clone().with_group(x.g.clone())).unwrap().value,
                loss_di_sgn(&after.clone().with_group(permute_rows(&x.g, &perm, 5))).unwrap().value,
            ),
            (
                loss_gm_spn(&x.q, &x.ids, &x.gallery, tau).unwrap().value,
                loss_gm_spn(&p(&x.q), &ids, &x.gallery, tau).unwrap().value,
            ),
        ];
        for (a, b) in pairs {
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn more_negatives_never_lower_the_loss(seed in any::<u64>(), b in 1usize..=16, d in dims(), tau in 0.01f64..3.0) {
        let x = inputs(seed, b, d, 1);
        let gm = ContrastiveBatch::new(x.q.clone(), x.t.clone(), tau);
        let di = gm.clone().with_reference(x.r.clone());
        let (lg, ld) = (loss_gm(&gm).unwrap().value, loss_di(&di).unwrap().value);
        let ls = loss_di_sgn(&di.with_group(x.g.clone())).unwrap().value;
        prop_assert!(ld >= lg);
        prop_assert!(ls >= ld);
    }

    #[test]
    fn losses_stay_finite_across_temperatures(seed in any::<u64>(), b in 1usize..=16, d in dims(), log_tau in -3.0f64..1.0) {
        let tau = 10f64.powf(log_tau);
        let x = inputs(seed, b, d, 2 * b);
        let gm = ContrastiveBatch::new(x.q.clone(), x.t.clone(), tau);
        let di = gm.clone().with_reference(x.r.clone());
        let outs = [
            loss_gm(&gm).unwrap(),
            loss_compositor(&gm).unwrap(),
            loss_di(&di).unwrap(),
            loss_di_sgn(&di.clone().with_group(x.g.clone())).unwrap(),
            loss_gm_spn(&x.q, &x.ids, &x.gallery, tau).unwrap(),
            loss_compositor_spn(&x.q, &x.ids, &x.gallery, tau).unwrap(),
        ];
        for o in &outs {
            prop_assert!(o.value.is_finite() && o.value >= 0.0);
            prop_assert!(o.d_query.is_finite());
        }
        prop_assert!(loss_joint(&di, &gm, 2.0).unwrap().value.is_finite());
    }
}

#[test]
fn losses_accept_single_precision() {
    let x = inputs(3, 6, 16, 9);
    let (q, t, r) = (x.q.cast::<f32>(), x.t.cast::<f32>(), x.r.cast::<f32>());
    let single = loss_di(&ContrastiveBatch::new(q, t, 0.07f32).with_reference(r)).unwrap().value;
    let double = naive_di(&x.q, &x.t, &x.r, 0.07);
    assert!(rel_scalar(single as f64, double) < 1e-4);
}

#[test]
fn malformed_batches_are_rejected() {
    let x = inputs(4, 3, 4, 5);
    let no_ref = ContrastiveBatch::new(x.q.clone(), x.t.clone(), 0.1);
    assert!(loss_di(&no_ref).is_err());
    assert!(loss_di_sgn(&no_ref.clone().with_reference(x.r.clone())).is_err());
    let short_group = no_ref.clone().with_reference(x.r.clone()).with_group(x.g.slice_rows(0, 5));
    assert!(loss_di_sgn(&short_group).is_err());
    assert!(loss_gm(&ContrastiveBatch::new(x.q.clone(), x.t.clone(), 0.0)).is_err());
    assert!(loss_gm(&ContrastiveBatch::new(x.q.clone(), x.t.slice_rows(0, 2), 0.1)).is_err());
    assert!(loss_gm_spn(&x.q, &[0, 1, 5], &x.gallery, 0.1).is_err());
    assert!(loss_gm_spn(&x.q, &[0, 1], &x.gallery, 0.1).is_err());
}
