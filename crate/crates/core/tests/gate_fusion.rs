use proptest::prelude::*;
use rand::Rng;

use sitedge::fusion::{fuse, fuse_selected, semantic_contour, SituationalPrediction};
use sitedge::gating::{
    softmax, top_n_situations, train_gate_on, GateConfig, GatingModel, Selection,
};
use sitedge::raster::BoundaryMap;
use sitedge::util::rng_from;
use sitedge::Error;

/// Three well-separated clusters in 6 dimensions, one per situation.
fn clustered(n_per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut rng = rng_from(seed);
    let mut xs = Vec::new();
    let mut pos = Vec::new();
    for j in 0..3 {
        for _ in 0..n_per {
            let mut x: Vec<f64> = (0..6).map(|_| rng.random_range(-0.3..0.3)).collect();
            x[2 * j] += 2.0;
            xs.push(x);
            pos.push(vec![j]);
        }
    }
    (xs, pos)
}

fn gate_cfg() -> GateConfig {
    GateConfig {
        lambdas: vec![1e-3, 1e-2],
        pos_freqs: vec![0.25, 0.5],
        epochs: 5,
        ..GateConfig::default()
    }
}

#[test]
fn gate_separates_clusters_and_is_calibrated() {
    let (xs, pos) = clustered(20, 1);
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let g = train_gate_on(&refs, &pos, 3, &gate_cfg()).unwrap();
    assert_eq!((g.k(), g.dim()), (3, 6));
    assert!(g.temperature > 0.0 && g.temperature.is_finite());
    for h in &g.hyper {
        assert!(h.cv_ap > 0.95, "cv AP {}", h.cv_ap);
        assert!(gate_cfg().lambdas.contains(&h.lambda));
        assert!(gate_cfg().pos_freqs.contains(&h.pos_freq));
    }
    let (test, tpos) = clustered(10, 2);
    for (x, p) in test.iter().zip(&tpos) {
        let probs = softmax(&g.scores(x).unwrap(), g.temperature);
        let best = (0..3).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
        assert_eq!(best, p[0]);
    }
    let again = train_gate_on(&refs, &pos, 3, &gate_cfg()).unwrap();
    assert_eq!(again, g);
}

#[test]
fn gate_rejects_bad_inputs() {
    let (xs, mut pos) = clustered(5, 3);
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    // Situation 3 has no positives.
    assert!(matches!(train_gate_on(&refs, &pos, 4, &gate_cfg()), Err(Error::InvalidArgument(_))));
    pos.pop();
    assert!(train_gate_on(&refs, &pos, 3, &gate_cfg()).is_err());
    let short = [0.0; 5];
    let mut bad = refs.clone();
    bad[0] = &short;
    let (_, pos) = clustered(5, 3);
    assert!(matches!(train_gate_on(&bad, &pos, 3, &gate_cfg()), Err(Error::DimensionMismatch { .. })));
    let g = GatingModel::single(6);
    assert!(g.scores(&[0.0; 5]).is_err());
}

#[test]
fn one_situation_gate_is_trivial() {
    let (xs, _) = clustered(4, 5);
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let pos = vec![vec![0]; xs.len()];
    let g = train_gate_on(&refs, &pos, 1, &gate_cfg()).unwrap();
    assert_eq!(g.models, GatingModel::single(6).models);
    assert!(g.hyper[0].lambda.is_nan());
}

#[test]
fn fixed_temperature_is_kept() {
    let (xs, pos) = clustered(8, 4);
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let cfg = GateConfig {
        temperature: Some(0.5),
        ..gate_cfg()
    };
    assert_eq!(train_gate_on(&refs, &pos, 3, &cfg).unwrap().temperature, 0.5);
    let cfg = GateConfig {
        temperature: Some(-1.0),
        ..gate_cfg()
    };
    assert!(train_gate_on(&refs, &pos, 3, &cfg).is_err());
}

fn map_strategy(w: usize, h: usize) -> impl Strategy<Value = BoundaryMap> {
    proptest::collection::vec(0.0f64..=1.0, w * h).prop_map(move |v| BoundaryMap::new(w, h, v).unwrap())
}

fn maps_and_probs() -> impl Strategy<Value = (Vec<BoundaryMap>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|k| {
        (
            proptest::collection::vec(map_strategy(4, 3), k),
            proptest::collection::vec(0.01f64..1.0, k),
        )
    })
}

fn preds(maps: &[BoundaryMap], probs: &[f64]) -> Vec<SituationalPrediction> {
    maps.iter()
        .zip(probs)
        .enumerate()
        .map(|(j, (m, &p))| SituationalPrediction {
            situation_id: j,
            probability: p,
            map: m.clone(),
        })
        .collect()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(
        scores in proptest::collection::vec(-50.0f64..50.0, 1..10),
        t in 0.01f64..100.0,
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&scores, t);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = softmax(&shifted, t);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // Ordering follows the scores.
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] > scores[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn selection_keeps_the_most_probable(
        probs in proptest::collection::vec(0.0f64..1.0, 1..12),
        n in 1usize..12,
        m in 0.01f64..=1.0,
    ) {
        let k = probs.len();
        let all = top_n_situations(&probs, Selection::Fixed(k)).unwrap();
        prop_assert_eq!(all.len(), k);
        prop_assert!(all.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        if n <= k {
            let top = top_n_situations(&probs, Selection::Fixed(n)).unwrap();
            prop_assert_eq!(&top[..], &all[..n]);
        } else {
            prop_assert!(top_n_situations(&probs, Selection::Fixed(n)).is_err());
        }
        let mass = top_n_situations(&probs, Selection::Mass(m)).unwrap();
        prop_assert_eq!(&mass[..], &all[..mass.len()]);
        let covered: f64 = mass.iter().map(|s| s.1).sum();
        let before: f64 = mass[..mass.len() - 1].iter().map(|s| s.1).sum();
        if m < 1.0 && mass.len() < k {
            prop_assert!(covered > m && before <= m);
        }
        if m == 1.0 {
            prop_assert_eq!(mass.len(), k);
        }
    }

    #[test]
    fn fusion_is_a_normalized_convex_combination((maps, probs) in maps_and_probs(), scale in 0.1f64..10.0) {
        let fused = fuse(&preds(&maps, &probs)).unwrap();
        let z: f64 = probs.iter().sum();
        for i in 0..12 {
            let lo = maps.iter().map(|m| m.values()[i]).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|m| m.values()[i]).fold(f64::NEG_INFINITY, f64::max);
            let v = fused.values()[i];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            let expect: f64 = maps.iter().zip(&probs).map(|(m, p)| p * m.values()[i]).sum::<f64>() / z;
            prop_assert!((v - expect).abs() < 1e-12);
        }
        // Rescaling every probability leaves the result unchanged.
        let scaled: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        let again = fuse(&preds(&maps, &scaled)).unwrap();
        for (a, b) in fused.values().iter().zip(again.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // Input order does not change a single bit.
        let mut rev = preds(&maps, &probs);
        rev.reverse();
        prop_assert_eq!(fuse(&rev).unwrap(), fused);
    }

    #[test]
    fn top_one_fusion_is_the_top_map((maps, probs) in maps_and_probs()) {
        let (fused, chosen) = fuse_selected(&probs, &maps, Selection::Fixed(1)).unwrap();
        prop_assert_eq!(chosen.len(), 1);
        prop_assert_eq!(&fused, &maps[chosen[0].0]);
        let (all_fixed, _) = fuse_selected(&probs, &maps, Selection::Fixed(maps.len())).unwrap();
        let (all_mass, _) = fuse_selected(&probs, &maps, Selection::Mass(1.0)).unwrap();
        prop_assert_eq!(all_fixed, all_mass);
    }

    #[test]
    fn semantic_contour_is_scaled_class_map(m in map_strategy(5, 5), p in 0.0f64..=1.0) {
        let c = semantic_contour(p, &m).unwrap();
        for (a, b) in c.values().iter().zip(m.values()) {
            prop_assert!((a - p * b).abs() < 1e-15);
            prop_assert!(*a <= *b);
        }
    }
}

#[test]
fn fusion_rejects_degenerate_inputs() {
    let m = BoundaryMap::zeros(3, 3);
    assert!(fuse(&[]).is_err());
    let zero = preds(&[m.clone(), m.clone()], &[0.0, 0.0]);
    assert!(fuse(&zero).is_err());
    let mut mixed = preds(&[m.clone(), BoundaryMap::zeros(4, 3)], &[0.5, 0.5]);
    assert!(matches!(fuse(&mixed), Err(Error::DimensionMismatch { .. })));
    mixed[1].map = m;
    mixed[1].probability = f64::NAN;
    assert!(fuse(&mixed).is_err());
    assert!(semantic_contour(1.5, &BoundaryMap::zeros(2, 2)).is_err());
}
