mod common;

use common::{
    flatten_grads, max_abs_diff, network_loss, numeric_gradient, numeric_param_grads, relative_error, rng, uniform,
};
use dsfa_core::linalg::gen_eig;
use dsfa_core::net::{
    center, covariances, dsfa_loss, forward, init_params, load_checkpoint, loss_feature_grad, param_grads,
    project_dsfa, save_checkpoint, train, LayerParams,
};
use dsfa_core::raster::zscore_standardize;
use dsfa_core::sfa::{fit_sfa, transform_diff};
use dsfa_core::{Activation, NetworkParams, TrainConfig};
use ndarray::{array, s, Array1, Array2};

fn small_config(hidden: Vec<usize>, out_dim: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        hidden_sizes: hidden,
        out_dim: Some(out_dim),
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn feature_gradient_matches_finite_differences() {
    let mut r = rng(21);
    let h = 1e-6;
    for &(o, n) in &[(3usize, 8usize), (2, 16), (4, 16)] {
        let xc = center(&uniform(o, n, &mut r)).unwrap();
        let yc = center(&uniform(o, n, &mut r)).unwrap();
        let (gx, gy) = loss_feature_grad(&xc, &yc, 1e-4).unwrap();
        let fx = numeric_gradient(&xc, h, |p| dsfa_loss(p, &yc, 1e-4).unwrap());
        let fy = numeric_gradient(&yc, h, |p| dsfa_loss(&xc, p, 1e-4).unwrap());
        let ex = relative_error(gx.as_slice().unwrap(), fx.as_slice().unwrap());
        let ey = relative_error(gy.as_slice().unwrap(), fy.as_slice().unwrap());
        assert!(ex < 1e-6 && ey < 1e-6, "o={o} n={n}: {ex:e} {ey:e}");
    }
}

#[test]
fn gradient_sum_rule() {
    let mut r = rng(4);
    let (o, n) = (3, 12);
    let xc = center(&uniform(o, n, &mut r)).unwrap();
    let yc = center(&uniform(o, n, &mut r)).unwrap();
    let (gx, gy) = loss_feature_grad(&xc, &yc, 1e-4).unwrap();
    // ∇_B rebuilt from the covariance definitions.
    let cov = covariances(&xc, &yc, 1e-4).unwrap();
    let b_inv = inverse(&cov.b());
    let a = cov.a();
    let grad_b = b_inv.dot(&a).dot(&b_inv).dot(&a).dot(&b_inv) * -2.0;
    let expected = (grad_b.dot(&xc) + grad_b.dot(&yc)) / n as f64;
    assert!(max_abs_diff(&(&gx + &gy), &expected) < 1e-10);
}

/// Gauss-Jordan inverse, independent of the library's Cholesky path.
fn inverse(m: &Array2<f64>) -> Array2<f64> {
    let d = m.nrows();
    let mut aug = Array2::<f64>::zeros((d, 2 * d));
    aug.slice_mut(s![.., ..d]).assign(m);
    aug.slice_mut(s![.., d..]).assign(&Array2::<f64>::eye(d));
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| aug[[i, c]].abs().total_cmp(&aug[[j, c]].abs())).unwrap();
        for k in 0..2 * d {
            aug.swap([c, k], [p, k]);
        }
        let pivot = aug[[c, c]];
        aug.row_mut(c).mapv_inplace(|v| v / pivot);
        for i in 0..d {
            if i != c {
                let f = aug[[i, c]];
                let row_c = aug.row(c).to_owned();
                aug.row_mut(i).scaled_add(-f, &row_c);
            }
        }
    }
    aug.slice(s![.., d..]).to_owned()
}

#[test]
fn equal_features_have_zero_loss_and_gradient() {
    let mut r = rng(9);
    let xc = center(&uniform(3, 10, &mut r)).unwrap();
    assert_eq!(dsfa_loss(&xc, &xc, 1e-4).unwrap(), 0.0);
    let (gx, gy) = loss_feature_grad(&xc, &xc, 1e-4).unwrap();
    assert!(gx.iter().chain(gy.iter()).all(|&v| v == 0.0));
}

#[test]
fn scalar_loss_oracle() {
    let xc = array![[1.0, -1.0, 2.0, -2.0]];
    let yc = array![[0.5, -0.5, 1.0, -1.0]];
    let r = 1e-3;
    let n: f64 = 4.0;
    let sxx = (1.0 + 1.0 + 4.0 + 4.0) / n + r;
    let syy = (0.25 + 0.25 + 1.0 + 1.0) / n + r;
    let sxy = (0.25 + 0.25 + 1.0 + 1.0) / n;
    let expected = (sxy / (0.5 * (sxx + syy))).powi(2);
    assert!((dsfa_loss(&xc, &yc, r).unwrap() - expected).abs() < 1e-14);
}

#[test]
fn covariance_hand_case_and_symmetry() {
    let cov = covariances(&array![[1.0, -1.0]], &array![[1.0, -1.0]], 0.01).unwrap();
    assert!((cov.sigma_xx[[0, 0]] - 1.01).abs() < 1e-15);
    assert_eq!(cov.sigma_xy[[0, 0]], 0.0);

    let mut r = rng(1);
    let xc = center(&uniform(5, 30, &mut r)).unwrap();
    let yc = center(&uniform(5, 30, &mut r)).unwrap();
    let cov = covariances(&xc, &yc, 1e-4).unwrap();
    for m in [&cov.sigma_xx, &cov.sigma_yy, &cov.sigma_xy] {
        assert!(max_abs_diff(m, &m.t().to_owned()) < 1e-14);
    }
    assert!(covariances(&xc, &yc, 0.0).is_err());
}

#[test]
fn loss_equals_sum_of_squared_generalized_eigenvalues() {
    let mut r = rng(27);
    for i in 0..50 {
        let o = 1 + i % 6;
        let xc = center(&uniform(o, 20, &mut r)).unwrap();
        let yc = center(&uniform(o, 20, &mut r)).unwrap();
        let cov = covariances(&xc, &yc, 1e-4).unwrap();
        let lambdas = gen_eig(&cov.a(), &cov.b()).unwrap().eigenvalues;
        let sum_sq: f64 = lambdas.iter().map(|l| l * l).sum();
        assert!((dsfa_loss(&xc, &yc, 1e-4).unwrap() - sum_sq).abs() < 1e-8);
    }
}

#[test]
fn loss_nonincreasing_in_r_and_permutation_invariant() {
    let mut r = rng(31);
    let xc = center(&uniform(4, 25, &mut r)).unwrap();
    let yc = center(&uniform(4, 25, &mut r)).unwrap();
    let losses: Vec<f64> = [1e-8, 1e-6, 1e-4, 1e-2, 1.0]
        .iter()
        .map(|&reg| dsfa_loss(&xc, &yc, reg).unwrap())
        .collect();
    assert!(losses.windows(2).all(|w| w[0] >= w[1]), "{losses:?}");

    let perm: Vec<usize> = (0..25).rev().collect();
    let xp = xc.select(ndarray::Axis(1), &perm);
    let yp = yc.select(ndarray::Axis(1), &perm);
    let a = dsfa_loss(&xc, &yc, 1e-4).unwrap();
    assert!((a - dsfa_loss(&xp, &yp, 1e-4).unwrap()).abs() < 1e-12 * a.max(1.0));
}

#[test]
fn constant_feature_offsets_vanish_after_centering() {
    let mut r = rng(2);
    let xphi = uniform(3, 12, &mut r);
    let yphi = uniform(3, 12, &mut r);
    let shifted = &yphi + &array![[0.7], [-1.3], [2.0]];
    let xc = center(&xphi).unwrap();
    let (loss_a, (gx_a, _)) = (
        dsfa_loss(&xc, &center(&yphi).unwrap(), 1e-4).unwrap(),
        loss_feature_grad(&xc, &center(&yphi).unwrap(), 1e-4).unwrap(),
    );
    let (loss_b, (gx_b, _)) = (
        dsfa_loss(&xc, &center(&shifted).unwrap(), 1e-4).unwrap(),
        loss_feature_grad(&xc, &center(&shifted).unwrap(), 1e-4).unwrap(),
    );
    assert!((loss_a - loss_b).abs() < 1e-12);
    assert!(max_abs_diff(&gx_a, &gx_b) < 1e-12);
}

#[test]
fn backprop_matches_finite_differences() {
    let mut r = rng(17);
    let x = uniform(6, 16, &mut r);
    let y = &x + &(uniform(6, 16, &mut r) * 0.3);
    let r_reg = 1e-4;
    let (theta1, theta2) = init_params(&small_config(vec![8], 4, 5), 6).unwrap();
    let grads = param_grads(&theta1, &theta2, &x, &y, r_reg).unwrap();
    let h = 1e-6;
    let fd1 = numeric_param_grads(&theta1, h, |t| network_loss(t, &theta2, &x, &y, r_reg));
    let fd2 = numeric_param_grads(&theta2, h, |t| network_loss(&theta1, t, &x, &y, r_reg));
    let e1 = relative_error(&flatten_grads(&grads.theta1), &fd1);
    let e2 = relative_error(&flatten_grads(&grads.theta2), &fd2);
    assert!(e1 < 1e-5 && e2 < 1e-5, "{e1:e} {e2:e}");
    assert!((grads.loss - network_loss(&theta1, &theta2, &x, &y, r_reg)).abs() < 1e-12);
}

#[test]
fn backprop_three_layers_sigmoid() {
    let mut r = rng(23);
    let x = uniform(3, 12, &mut r);
    let y = uniform(3, 12, &mut r);
    let config = TrainConfig {
        activation: Activation::Sigmoid,
        ..small_config(vec![5, 4], 2, 8)
    };
    let (theta1, theta2) = init_params(&config, 3).unwrap();
    let grads = param_grads(&theta1, &theta2, &x, &y, 1e-3).unwrap();
    let fd1 = numeric_param_grads(&theta1, 1e-6, |t| network_loss(t, &theta2, &x, &y, 1e-3));
    assert!(relative_error(&flatten_grads(&grads.theta1), &fd1) < 1e-5);
}

#[test]
fn identical_streams_on_identical_data_have_zero_gradients() {
    let mut r = rng(6);
    let x = uniform(4, 10, &mut r);
    let (theta, _) = init_params(&small_config(vec![6], 3, 1), 4).unwrap();
    let grads = param_grads(&theta, &theta, &x, &x, 1e-4).unwrap();
    assert_eq!(grads.loss, 0.0);
    assert!(flatten_grads(&grads.theta1).iter().all(|&g| g == 0.0));
    assert!(flatten_grads(&grads.theta2).iter().all(|&g| g == 0.0));
}

#[test]
fn init_is_seeded_bounded_and_streams_differ() {
    let config = TrainConfig::default();
    let (a1, a2) = init_params(&config, 6).unwrap();
    let (b1, _) = init_params(&config, 6).unwrap();
    assert_eq!(a1, b1);
    assert_ne!(a1, a2);
    let (c1, _) = init_params(&TrainConfig { seed: 1, ..config.clone() }, 6).unwrap();
    assert_ne!(a1, c1);
    assert_eq!(a1.dims(), vec![6, 128, 128, 6]);
    let bound = (6.0f64 / 134.0).sqrt();
    assert!(a1.layers[0].weights.iter().all(|w| w.abs() <= bound));
    assert!(a1.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
}

#[test]
fn forward_examples() {
    let id = NetworkParams::new(
        vec![LayerParams {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
        }],
        Activation::Tanh,
    )
    .unwrap();
    assert!(forward(&id, &Array2::zeros((2, 3))).unwrap().output().iter().all(|&v| v == 0.0));
    let scalar = NetworkParams::new(
        vec![LayerParams {
            weights: array![[1.0]],
            bias: array![0.0],
        }],
        Activation::Tanh,
    )
    .unwrap();
    let out = forward(&scalar, &array![[1.0]]).unwrap().into_output();
    assert!((out[[0, 0]] - 0.761_594_155_955_764_9).abs() < 1e-15);

    let mut r = rng(12);
    let (theta, _) = init_params(&small_config(vec![7], 3, 4), 5).unwrap();
    let x = uniform(5, 6, &mut r);
    let whole = forward(&theta, &x).unwrap().into_output();
    for j in 0..6 {
        let col = forward(&theta, &x.slice(s![.., j..j + 1]).to_owned()).unwrap().into_output();
        assert!(max_abs_diff(&col, &whole.slice(s![.., j..j + 1]).to_owned()) < 1e-14);
    }
    assert!(forward(&theta, &uniform(4, 6, &mut r)).is_err());
}

#[test]
fn center_examples() {
    assert_eq!(center(&array![[1.0, 3.0]]).unwrap(), array![[-1.0, 1.0]]);
    let mut r = rng(0);
    let c = center(&uniform(4, 10, &mut r)).unwrap();
    assert!(c.rows().into_iter().all(|row| row.sum().abs() / 10.0 < 1e-12));
    assert!(max_abs_diff(&center(&c).unwrap(), &c) < 1e-15);
    assert!(center(&array![[1.0]]).is_err());
}

#[test]
fn training_decreases_loss_and_is_deterministic() {
    let mut r = rng(40);
    let x = uniform(4, 64, &mut r);
    let y = &x + &(uniform(4, 64, &mut r) * 0.05);
    let config = TrainConfig {
        learning_rate: 1e-5,
        max_epochs: 200,
        ..small_config(vec![16, 16], 4, 3)
    };
    let a = train(&x, &y, &config).unwrap();
    let b = train(&x, &y, &config).unwrap();
    assert_eq!(a.loss_history.len(), 200);
    assert!(a.loss_history.iter().all(|l| l.is_finite()));
    assert!(a.loss_history.last().unwrap() <= &a.loss_history[0]);
    assert_eq!(a.loss_history, b.loss_history);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let mut r = rng(41);
    let x = uniform(3, 20, &mut r);
    let y = uniform(3, 20, &mut r);
    let config = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 5,
        ..small_config(vec![4], 3, 0)
    };
    let trained = train(&x, &y, &config).unwrap();
    let (t1, t2) = init_params(&config, 3).unwrap();
    assert_eq!(trained.theta1, t1);
    assert_eq!(trained.theta2, t2);
    assert!(trained.loss_history.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn overflowing_updates_report_divergence() {
    let mut r = rng(42);
    let x = uniform(3, 20, &mut r);
    let y = uniform(3, 20, &mut r);
    let config = TrainConfig {
        learning_rate: 1e308,
        max_epochs: 50,
        ..small_config(vec![4], 3, 0)
    };
    let err = train(&x, &y, &config).unwrap_err();
    assert!(matches!(err, dsfa_core::Error::Diverged { .. }), "{err}");
    assert!(err.to_string().contains("learning rate"));
}

#[test]
fn projection_examples() {
    let mut r = rng(50);
    let x = uniform(4, 40, &mut r);
    let (t1, t2) = init_params(&small_config(vec![8], 4, 2), 4).unwrap();
    let d = project_dsfa(&t1, &t1, &x, &x).unwrap();
    assert!(d.iter().all(|&v| v.abs() < 1e-12));
    let y = uniform(4, 40, &mut r);
    assert_eq!(project_dsfa(&t1, &t2, &x, &y).unwrap().dim(), (4, 40));
}

#[test]
fn linear_regime_matches_linear_sfa() {
    let mut r = rng(60);
    let (x, _) = zscore_standardize(&uniform(3, 200, &mut r)).unwrap();
    let (y, _) = zscore_standardize(&(&x + &(uniform(3, 200, &mut r) * 0.5))).unwrap();
    let eps = 1e-3;
    let (xs, ys) = (&x * eps, &y * eps);
    let id = NetworkParams::new(
        vec![LayerParams {
            weights: Array2::eye(3),
            bias: Array1::zeros(3),
        }],
        Activation::Tanh,
    )
    .unwrap();
    let d_net = project_dsfa(&id, &id, &xs, &ys).unwrap();
    let model = fit_sfa(&xs, &ys, None).unwrap();
    let d_lin = transform_diff(&model, &xs, &ys).unwrap();
    let scale = d_lin.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_abs_diff(&d_net, &d_lin) < 1e-3 * scale);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (t1, t2) = init_params(&small_config(vec![5, 3], 2, 9), 4).unwrap();
    let stem = dir.path().join("ckpt/model");
    save_checkpoint(&stem, &t1, &t2, 9, 120).unwrap();
    let (manifest, l1, l2) = load_checkpoint(&stem).unwrap();
    assert_eq!((l1, l2), (t1, t2));
    assert_eq!(manifest.dims, vec![4, 5, 3, 2]);
    assert_eq!((manifest.seed, manifest.epoch), (9, 120));
}
