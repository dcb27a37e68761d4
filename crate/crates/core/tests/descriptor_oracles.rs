use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use sitedge::descriptor::{fisher_block, fit_gmm, fit_pca, GmmConfig, GmmModel};
use sitedge::situations::{kmeans, nearest};
use sitedge::util::{rng_from, sq_dist};

fn gaussian_rows(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    // Anisotropic scales so the spectrum is well separated.
    let scales: Vec<f64> = (0..dim).map(|i| 3.0 / (1.0 + i as f64)).collect();
    let mix: Vec<f64> = (0..dim * dim).map(|_| normal.sample(&mut rng)).collect();
    (0..n)
        .flat_map(|_| {
            let z: Vec<f64> = (0..dim).map(|i| normal.sample(&mut rng) * scales[i]).collect();
            (0..dim)
                .map(|r| z[r] + 0.3 * (0..dim).map(|c| mix[r * dim + c] * z[c]).sum::<f64>())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn pca_matches_dense_eigendecomposition() {
    let (n, dim) = (400, 7);
    let data = gaussian_rows(n, dim, 5);
    let pca = fit_pca(&data, dim, 4).unwrap();

    // Oracle: covariance built directly from centred rows, normalized by n.
    let x = DMatrix::from_row_slice(n, dim, &data);
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / n as f64;
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    assert!((pca.total_variance - cov.trace()).abs() < 1e-9 * cov.trace());
    for (k, &o) in order.iter().take(4).enumerate() {
        assert!((pca.eigenvalues[k] - eig.eigenvalues[o]).abs() < 1e-9 * eig.eigenvalues[order[0]]);
        let ours = pca.component(k);
        let theirs = eig.eigenvectors.column(o);
        let cos: f64 = ours.iter().zip(theirs.iter()).map(|(a, b)| a * b).sum();
        assert!((cos.abs() - 1.0).abs() < 1e-9, "component {k}: |cos| = {}", cos.abs());
    }

    // Mean squared reconstruction error equals the discarded variance.
    let mut err = 0.0;
    for row in data.chunks_exact(dim) {
        err += sq_dist(row, &pca.reconstruct(&pca.project(row)));
    }
    err /= n as f64;
    let discarded: f64 = order[4..].iter().map(|&o| eig.eigenvalues[o]).sum();
    assert!((err - discarded).abs() < 1e-9 * cov.trace(), "{err} vs {discarded}");
}

fn mean_ll(model: &GmmModel, xs: &[Vec<f64>]) -> f64 {
    xs.iter().map(|x| model.log_likelihood(x)).sum::<f64>() / xs.len() as f64
}

#[test]
fn fisher_block_matches_finite_differences() {
    let (k, d) = (2, 3);
    let model = GmmModel {
        weights: vec![0.4, 0.6],
        means: vec![0.0, 1.0, -0.5, 1.5, -1.0, 0.5],
        variances: vec![1.0, 0.5, 2.0, 0.8, 1.5, 0.7],
    };
    let mut rng = rng_from(21);
    let xs: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.5)).collect())
        .collect();
    let block = fisher_block(&xs, &model);
    assert_eq!(block.len(), 2 * k * d);

    let h = 1e-5;
    for c in 0..k {
        let w = model.weights[c];
        for i in 0..d {
            let j = c * d + i;
            let sigma = model.variances[j].sqrt();

            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.means[j] += h;
            minus.means[j] -= h;
            let dmu = (mean_ll(&plus, &xs) - mean_ll(&minus, &xs)) / (2.0 * h);
            let expect = dmu * sigma / w.sqrt();
            let got = block[j];
            assert!(
                (got - expect).abs() <= 1e-4 * expect.abs().max(1e-3),
                "mean block ({c},{i}): {got} vs {expect}"
            );

            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.variances[j] = (sigma + h).powi(2);
            minus.variances[j] = (sigma - h).powi(2);
            let dsigma = (mean_ll(&plus, &xs) - mean_ll(&minus, &xs)) / (2.0 * h);
            let expect = dsigma * sigma / (2.0 * w).sqrt();
            let got = block[k * d + j];
            assert!(
                (got - expect).abs() <= 1e-4 * expect.abs().max(1e-3),
                "std block ({c},{i}): {got} vs {expect}"
            );
        }
    }
}

#[test]
fn em_log_likelihood_never_decreases() {
    let cfg = GmmConfig {
        max_iter: 60,
        tolerance: 0.0,
        ..GmmConfig::default()
    };
    for trial in 0..50u64 {
        let mut rng = rng_from(1000 + trial);
        let dim = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let n = 10 * k + rng.random_range(0..200);
        let centres: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let data: Vec<f64> = (0..n)
            .flat_map(|_| {
                let c = rng.random_range(0..k);
                (0..dim)
                    .map(|i| centres[c * dim + i] + rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>()
            })
            .collect();
        let (model, report) = fit_gmm(&data, dim, k, trial, &cfg).unwrap();
        let ll = &report.log_likelihood;
        for t in 1..ll.len() {
            if report.reseeded_at.contains(&(t - 1)) {
                continue;
            }
            assert!(
                ll[t] >= ll[t - 1] - 1e-9,
                "trial {trial}: step {t} went from {} to {}",
                ll[t - 1],
                ll[t]
            );
        }
        let wsum: f64 = model.weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert!(model.variances.iter().all(|&v| v >= cfg.variance_floor));
    }
}

#[test]
fn single_component_is_sample_moments() {
    let dim = 3;
    let data = gaussian_rows(300, dim, 8);
    let (model, _) = fit_gmm(&data, dim, 1, 1, &GmmConfig::default()).unwrap();
    let n = (data.len() / dim) as f64;
    for i in 0..dim {
        let col: Vec<f64> = data.iter().skip(i).step_by(dim).copied().collect();
        let m = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!((model.means[i] - m).abs() < 1e-10);
        assert!((model.variances[i] - v).abs() < 1e-10 * v.max(1.0));
    }
    assert_eq!(model.weights, vec![1.0]);
}

#[test]
fn single_cluster_kmeans_is_centroid() {
    let pts: Vec<Vec<f64>> = gaussian_rows(50, 4, 3).chunks(4).map(|c| c.to_vec()).collect();
    let r = kmeans(&pts, 1, 9).unwrap();
    for i in 0..4 {
        let m = pts.iter().map(|p| p[i]).sum::<f64>() / 50.0;
        assert!((r.centroids[0][i] - m).abs() < 1e-10);
    }
    assert!(r.assignments.iter().all(|&a| a == 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_objective_monotone_and_fixed_point(
        pts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 2), 4..40),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(pts.len() >= k);
        let r = kmeans(&pts, k, seed).unwrap();
        for w in r.objective.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
        }
        if r.converged {
            for (p, &a) in pts.iter().zip(&r.assignments) {
                let (best, d) = nearest(p, &r.centroids);
                prop_assert!(best == a || (sq_dist(p, &r.centroids[a]) - d).abs() < 1e-12);
            }
            // Centroids are the means of their clusters.
            for c in 0..k {
                let members: Vec<&Vec<f64>> = pts.iter().zip(&r.assignments).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for i in 0..2 {
                    let m = members.iter().map(|p| p[i]).sum::<f64>() / members.len() as f64;
                    prop_assert!((r.centroids[c][i] - m).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pca_reconstruction_error_shrinks_with_dim(seed in any::<u64>(), dim in 2usize..6) {
        let data = gaussian_rows(60, dim, seed);
        let mut prev = f64::INFINITY;
        for t in 1..=dim {
            let pca = fit_pca(&data, dim, t).unwrap();
            let err: f64 = data
                .chunks_exact(dim)
                .map(|row| sq_dist(row, &pca.reconstruct(&pca.project(row))))
                .sum();
            prop_assert!(err <= prev + 1e-9 * prev.min(1e6).max(1.0));
            prev = err;
        }
        prop_assert!(prev < 1e-8);
    }
}
