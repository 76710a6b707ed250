mod common;

use common::*;
use livecheck_core::convnet::{
    self, conv_forward, lcn, max_pool, relu, ConvLayerConfig, ConvNet, ConvNetConfig,
    FeatureTensor, FilterBank,
};
use livecheck_core::lbp::{self, LbpConfig, LbpVariant};
use livecheck_core::svm::{self, SvmParams};
use livecheck_core::transform::{self, FeatureTransform};
use livecheck_core::Label;
use nalgebra::DMatrix;
use rand::Rng;

#[test]
fn lbp_map_matches_definition() {
    let mut rng = rng(1);
    for i in 0..60 {
        let img = if i % 2 == 0 {
            random_image(16, 16, &mut rng)
        } else {
            random_quantized_image(11, 9, 3, &mut rng)
        };
        let map = lbp::lbp_map(&img).unwrap();
        let flat: Vec<u8> = naive_lbp_map(&img).into_iter().flatten().collect();
        assert_eq!(map.codes, flat);
    }
}

#[test]
fn lbp_features_match_histogram_oracle() {
    let mut rng = rng(2);
    for (w, h) in [(16, 16), (13, 17), (7, 5)] {
        let img = random_quantized_image(w, h, 4, &mut rng);
        for uniform in [true, false] {
            for blocks in [(1, 1), (2, 2), (3, 2)] {
                let cfg = LbpConfig {
                    variant: if uniform {
                        LbpVariant::Uniform
                    } else {
                        LbpVariant::Original
                    },
                    blocks,
                };
                let got = lbp::lbp_features(&img, &cfg).unwrap();
                assert_eq!(
                    got,
                    naive_lbp_features(&img, uniform, blocks),
                    "{w}x{h} {blocks:?}"
                );
            }
        }
    }
}

#[test]
fn uniform_labels_match_enumeration() {
    let uniform: Vec<u8> = (0..=255u8)
        .filter(|&c| naive_uniform_label(c) != 9)
        .collect();
    assert_eq!(uniform.len(), 58);
    for c in 0..=255u8 {
        assert_eq!(lbp::uniform_label(c) as usize, naive_uniform_label(c));
    }
    let labels: std::collections::BTreeSet<usize> = (0..=255u8).map(naive_uniform_label).collect();
    assert_eq!(labels.len(), 10);
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = rng(3);
    for _ in 0..20 {
        let c = rng.random_range(1..=4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let f = rng.random_range(1..=3);
        let x = random_tensor(
            c,
            rng.random_range(k..=12),
            rng.random_range(k..=12),
            &mut rng,
        );
        let weights: Vec<f64> = (0..f * c * k * k)
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let bank = FilterBank::new(f, c, k, weights.clone()).unwrap();
        let got = conv_forward(&x, &bank).unwrap();
        let want = naive_conv(&x, &weights, f, k);
        assert_eq!(
            (got.channels, got.height, got.width),
            (want.channels, want.height, want.width)
        );
        assert!(max_abs_diff(&got.data, &want.data) < 1e-10);
    }
}

#[test]
fn pool_matches_window_scan() {
    let mut rng = rng(4);
    for _ in 0..30 {
        let x = random_tensor(
            rng.random_range(1..=3),
            rng.random_range(3..=12),
            rng.random_range(3..=12),
            &mut rng,
        );
        let pool = rng.random_range(1..=3);
        let stride = rng.random_range(1..=3);
        assert_eq!(
            max_pool(&x, pool, stride).unwrap(),
            naive_pool(&x, pool, stride)
        );
    }
}

#[test]
fn lcn_matches_direct_summation() {
    let mut rng = rng(5);
    for _ in 0..20 {
        let c = rng.random_range(1..=4);
        let window = [1, 3, 5][rng.random_range(0..3)];
        // Scale up so the divisive branch is exercised as well.
        let mut x = random_tensor(
            c,
            rng.random_range(5..=12),
            rng.random_range(5..=12),
            &mut rng,
        );
        x.data.iter_mut().for_each(|v| *v *= 4.0);
        let got = lcn(&x, window).unwrap();
        let want = naive_lcn(&x, window);
        assert!(max_abs_diff(&got.data, &want.data) < 1e-10);
    }
}

#[test]
fn lcn_of_constant_is_zero() {
    for (c, v) in [(1, 0.3), (3, 0.1), (4, -7.25)] {
        let x = FeatureTensor::new(c, 9, 11, vec![v; c * 99]).unwrap();
        assert!(lcn(&x, 5).unwrap().data.iter().all(|&y| y == 0.0));
    }
}

#[test]
fn network_equals_stage_composition() {
    let mut rng = rng(6);
    let cfg = ConvNetConfig {
        layers: vec![
            ConvLayerConfig::new(4, 3, 2, 10),
            ConvLayerConfig {
                lcn_window: None,
                pool_stride: 1,
                ..ConvLayerConfig::new(3, 3, 2, 11)
            },
        ],
    };
    let net = ConvNet::new(cfg).unwrap();
    let img = random_image(24, 20, &mut rng);
    let mut x = FeatureTensor::from_image(&img);
    for (layer, bank) in net.config.layers.iter().zip(&net.banks) {
        x = relu(&naive_conv(&x, &bank.weights, bank.num_filters, bank.size));
        if let Some(w) = layer.lcn_window {
            x = naive_lcn(&x, w);
        }
        x = naive_pool(&x, layer.pool_size, layer.pool_stride);
    }
    let got = convnet::convnet_features(&img, &net.config).unwrap();
    assert!(max_abs_diff(&got, &x.data) < 1e-10);
}

#[test]
fn randomized_pca_matches_full_svd() {
    let mut rng = rng(7);
    for t in 0..5 {
        let rows = gapped_matrix(50, 20, 5, &mut rng);
        let model = transform::fit_pca_randomized(&rows, 5, 100 + t, true).unwrap();
        let got = DMatrix::from_fn(5, 20, |i, j| model.components[i][j]);
        let (want, vars) = exact_pca(&rows, 5);
        assert!(max_principal_sine(&got, &want) < 1e-6);
        for (a, b) in model.variances.iter().zip(&vars) {
            assert!((a - b).abs() <= 1e-8 * b, "{a} vs {b}");
        }
    }
}

#[test]
fn pca_agrees_with_jacobi_eigenvectors() {
    let mut rng = rng(8);
    let rows = gapped_matrix(60, 6, 3, &mut rng);
    let x = centered(&rows);
    let cov = x.transpose() * &x / (rows.len() - 1) as f64;
    let (values, vectors) = jacobi_eigen(&cov);
    let model = transform::fit_pca_randomized(&rows, 3, 9, false).unwrap();
    for i in 0..3 {
        assert!((model.variances[i] - values[i]).abs() < 1e-9 * values[i]);
        let dot: f64 = (0..6)
            .map(|j| model.components[i][j] * vectors[(i, j)])
            .sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9);
    }
    // Projections match the eigenbasis up to the sign of each axis.
    for r in &rows {
        let p = model.project(r).unwrap();
        for i in 0..3 {
            let q: f64 = (0..6)
                .map(|j| (r[j] - model.mean[j]) * vectors[(i, j)])
                .sum();
            assert!((p[i].abs() - q.abs()).abs() < 1e-9);
        }
    }
}

#[test]
fn whitened_training_components_have_unit_variance() {
    let mut rng = rng(9);
    let rows = gapped_matrix(50, 20, 5, &mut rng);
    let t = FeatureTransform::fit(&rows, 0.25, true, 3).unwrap();
    let projected: Vec<Vec<f64>> = rows.iter().map(|r| t.apply(r).unwrap()).collect();
    for i in 0..t.pca.n_components() {
        let col: Vec<f64> = projected.iter().map(|p| p[i]).collect();
        assert!((sample_variance(&col) - 1.0).abs() < 1e-4);
    }
}

fn labels(y: &[f64]) -> Vec<Label> {
    y.iter()
        .map(|&v| if v > 0.0 { Label::Live } else { Label::Fake })
        .collect()
}

#[test]
fn svm_fixtures_kkt_and_expansion() {
    let mut rng = rng(10);
    let fixtures = [
        (xor_fixture(10, &mut rng), SvmParams::new(100.0, 1.0)),
        (blob_fixture(20, &mut rng), SvmParams::new(1.0, 0.5)),
    ];
    for ((x, y), params) in fixtures {
        let lab = labels(&y);
        let sol = svm::solve_dual(&x, &lab, &params, 1).unwrap();
        assert!(sol.converged);
        assert!(
            kkt_violation(&x, &y, &sol.alphas, sol.bias, params.c, params.gamma)
                <= 10.0 * params.tol
        );
        let model = svm::model_from_dual(&x, &lab, &sol, params.gamma);
        for (xi, l) in x.iter().zip(&lab) {
            assert_eq!(model.predict(xi).unwrap(), *l);
        }
        for _ in 0..50 {
            let probe: Vec<f64> = (0..x[0].len())
                .map(|_| rng.random::<f64>() * 6.0 - 3.0)
                .collect();
            let want = kernel_expansion(&x, &y, &sol.alphas, sol.bias, params.gamma, &probe);
            assert!((model.decision_score(&probe).unwrap() - want).abs() < 1e-9);
        }
    }
}

#[test]
fn svm_dual_constraints_hold() {
    let mut rng = rng(11);
    let (x, y) = xor_fixture(15, &mut rng);
    let params = SvmParams::new(2.0, 0.7);
    let sol = svm::solve_dual(&x, &labels(&y), &params, 4).unwrap();
    let balance: f64 = sol.alphas.iter().zip(&y).map(|(a, b)| a * b).sum();
    assert!(balance.abs() < 1e-9);
    assert!(sol.alphas.iter().all(|&a| (0.0..=params.c).contains(&a)));
}
