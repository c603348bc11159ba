use dvxs_core::gradcheck::{check_gradients, check_param_gradients};
use dvxs_core::nn::{GruCell, Linear, Mlp};
use dvxs_core::tape::{softplus, Unary};
use dvxs_core::{Array, ParamSet, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn affine_identity_and_hand_case() {
    let mut t = Tape::new();
    let x = t.constant(Array::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let w = t.constant(Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = t.constant(Array::zeros(&[2]));
    let y = t.affine(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0]);

    let x = t.constant(Array::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let w = t.constant(Array::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
    let b = t.constant(Array::full(&[1], 1.0));
    let y = t.affine(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[6.0]);
}

#[test]
fn affine_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros(&[2, 3]));
    let w = t.constant(Array::zeros(&[4, 5]));
    let b = t.constant(Array::zeros(&[5]));
    let msg = t.affine(x, w, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn affine_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = rand_array(&mut rng, &[3, 4], 1.0);
    let bv = rand_array(&mut rng, &[2], 1.0);
    for _ in 0..10 {
        let wv = rand_array(&mut rng, &[4, 2], 1.0);
        let err = check_gradients(
            |t, w| {
                let x = t.constant(xv.clone());
                let b = t.constant(bv.clone());
                let y = t.affine(x, w, b)?;
                Ok(t.sum(y))
            },
            &wv,
        )
        .unwrap();
        assert!(err < 1e-3, "affine dW err {err}");
    }
}

#[test]
fn conv_lengths_follow_padding_rule() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros(&[1, 1, 360]));
    let k1 = t.constant(Array::zeros(&[32, 1, 5]));
    let k2 = t.constant(Array::zeros(&[64, 32, 5]));
    let k3 = t.constant(Array::zeros(&[128, 64, 3]));
    let a = t.conv1d(x, k1, 2).unwrap();
    let b = t.conv1d(a, k2, 2).unwrap();
    let c = t.conv1d(b, k3, 1).unwrap();
    assert_eq!(t.shape(a), &[1, 32, 180]);
    assert_eq!(t.shape(b), &[1, 64, 90]);
    assert_eq!(t.shape(c), &[1, 128, 90]);

    let d = t.conv1d_transpose(c, k3, 1, 90).unwrap();
    let e = t.conv1d_transpose(d, k2, 2, 180).unwrap();
    let f = t.conv1d_transpose(e, k1, 2, 360).unwrap();
    assert_eq!(t.shape(d), &[1, 64, 90]);
    assert_eq!(t.shape(e), &[1, 32, 180]);
    assert_eq!(t.shape(f), &[1, 1, 360]);
}

#[test]
fn conv_errors() {
    let mut t = Tape::new();
    let x = t.constant(Array::zeros(&[1, 1, 8]));
    let k = t.constant(Array::zeros(&[1, 1, 3]));
    assert!(t.conv1d(x, k, 0).is_err());
    assert!(t.conv1d_transpose(x, k, 2, 20).is_err());
    assert!(t.conv1d_transpose(x, k, 2, 16).is_ok());
    assert!(t.conv1d_transpose(x, k, 2, 15).is_ok());
}

#[test]
fn delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xv = rand_array(&mut rng, &[2, 1, 9], 1.0);
    let mut t = Tape::new();
    let x = t.constant(xv.clone());
    let k = t.constant(Array::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    let y = t.conv1d(x, k, 1).unwrap();
    assert_eq!(t.value(y), &xv);
    let z = t.conv1d_transpose(x, k, 1, 9).unwrap();
    assert_eq!(t.value(z), &xv);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(ci, co, k, stride, len) in &[(1, 3, 5, 2, 17), (2, 4, 3, 1, 9), (3, 2, 5, 2, 360), (4, 4, 3, 3, 11)] {
        for _ in 0..10 {
            let xv = rand_array(&mut rng, &[2, ci, len], 1.0);
            let kv = rand_array(&mut rng, &[co, ci, k], 1.0);
            let out_len = dvxs_core::conv_out_len(len, stride);
            let yv = rand_array(&mut rng, &[2, co, out_len], 1.0);
            let mut t = Tape::new();
            let x = t.constant(xv.clone());
            let kk = t.constant(kv);
            let y = t.constant(yv.clone());
            let cx = t.conv1d(x, kk, stride).unwrap();
            let cty = t.conv1d_transpose(y, kk, stride, len).unwrap();
            let lhs = t.value(cx).dot(&yv);
            let rhs = xv.dot(t.value(cty));
            assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn affine_is_adjoint_of_its_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let w = rand_array(&mut rng, &[5, 3], 1.0);
        let x = rand_array(&mut rng, &[1, 5], 1.0);
        let y = rand_array(&mut rng, &[1, 3], 1.0);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let b = t.constant(Array::zeros(&[3]));
        let lx = t.affine(xv, wv, b).unwrap();
        // Backward of <L x, y> with respect to x is Lᵀ y.
        let yv = t.constant(y.clone());
        let xl = t.leaf(x.clone());
        let lx2 = t.affine(xl, wv, b).unwrap();
        let p = t.mul(lx2, yv).unwrap();
        let s = t.sum(p);
        let g = t.backward(s);
        let lty = g.get(xl).unwrap();
        let lhs = t.value(lx).dot(&y);
        let rhs = x.dot(lty);
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0));
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let xv = rand_array(&mut rng, &[1, 2, 8], 1.0);
        let kv = rand_array(&mut rng, &[3, 2, 3], 1.0);
        let wts = rand_array(&mut rng, &[1, 3, 4], 1.0);
        let kc = kv.clone();
        let w1 = wts.clone();
        let err_x = check_gradients(
            move |t, x| {
                let k = t.constant(kc.clone());
                let y = t.conv1d(x, k, 2)?;
                let w = t.constant(w1.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &xv,
        )
        .unwrap();
        let xc = xv.clone();
        let err_k = check_gradients(
            move |t, k| {
                let x = t.constant(xc.clone());
                let y = t.conv1d(x, k, 2)?;
                let w = t.constant(wts.clone());
                let p = t.mul(y, w)?;
                Ok(t.sum(p))
            },
            &kv,
        )
        .unwrap();
        assert!(err_x < 1e-3 && err_k < 1e-3, "{err_x} {err_k}");

        // transposed conv, both arguments
        let yv = rand_array(&mut rng, &[1, 3, 4], 1.0);
        let probe = rand_array(&mut rng, &[1, 2, 8], 1.0);
        let (kc, pc) = (kv.clone(), probe.clone());
        let err_tx = check_gradients(
            move |t, y| {
                let k = t.constant(kc.clone());
                let o = t.conv1d_transpose(y, k, 2, 8)?;
                let w = t.constant(pc.clone());
                let p = t.mul(o, w)?;
                Ok(t.sum(p))
            },
            &yv,
        )
        .unwrap();
        let err_tk = check_gradients(
            move |t, k| {
                let y = t.constant(yv.clone());
                let o = t.conv1d_transpose(y, k, 2, 8)?;
                let w = t.constant(probe.clone());
                let p = t.mul(o, w)?;
                Ok(t.sum(p))
            },
            &kv,
        )
        .unwrap();
        assert!(err_tx < 1e-3 && err_tk < 1e-3, "{err_tx} {err_tk}");
    }
}

#[test]
fn pointwise_closed_forms() {
    assert_eq!(Unary::Elu.apply(0.0), 0.0);
    assert_eq!(Unary::Sigmoid.apply(0.0), 0.5);
    assert!((Unary::Softplus.apply(0.0) - std::f32::consts::LN_2).abs() < 1e-7);
    for x in [-100.0f32, -20.0, -1.0, 0.0, 3.0, 50.0, 1e4] {
        assert!(softplus(x) > 0.0, "softplus({x})");
    }
}

#[test]
fn pointwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in [
        Unary::Elu,
        Unary::Sigmoid,
        Unary::Tanh,
        Unary::Softplus,
        Unary::Square,
        Unary::Exp,
    ] {
        for _ in 0..10 {
            let p = rand_array(&mut rng, &[2, 3], 2.0);
            let err = check_gradients(
                |t, x| {
                    let y = t.unary(x, kind);
                    Ok(t.sum(y))
                },
                &p,
            )
            .unwrap();
            assert!(err < 1e-3, "{kind:?}: {err}");
        }
    }
    for _ in 0..10 {
        let p = rand_array(&mut rng, &[4], 1.0).map(|v| v.abs() + 0.5);
        let err = check_gradients(
            |t, x| {
                let y = t.ln(x);
                Ok(t.sum(y))
            },
            &p,
        )
        .unwrap();
        assert!(err < 1e-3, "ln: {err}");
    }
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let p = rand_array(&mut rng, &[3, 4], 1.0);
        let w = rand_array(&mut rng, &[6, 5], 1.0);
        let err = check_gradients(
            |t, x| {
                let a = t.slice_cols(x, 1, 2)?;
                let b = t.concat_cols(&[x, a])?; // [3, 6]
                let r = t.slice_rows(b, 1, 2)?;
                let c = t.concat_rows(&[b, r])?; // [5, 6]
                let rs = t.reshape(c, &[6, 5])?;
                let wc = t.constant(w.clone());
                let m = t.mul(rs, wc)?;
                let s = t.row_sum(m)?;
                let e = t.tanh(s);
                let sc = t.scale(e, 0.7);
                let sh = t.add_scalar(sc, 2.0);
                Ok(t.mean(sh))
            },
            &p,
        )
        .unwrap();
        assert!(err < 1e-3, "structural err {err}");
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let a = rand_array(&mut rng, &[3, 4], 1.0);
        let b = rand_array(&mut rng, &[4, 2], 1.0);
        let bc = b.clone();
        let err = check_gradients(
            move |t, x| {
                let bb = t.constant(bc.clone());
                let y = t.matmul(x, bb)?;
                let s = t.square(y);
                Ok(t.sum(s))
            },
            &a,
        )
        .unwrap();
        assert!(err < 1e-3, "matmul {err}");
    }
}

#[test]
fn distribution_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        // packed [qm | qs_raw | pm | ps_raw] so one check covers all four inputs
        let p = rand_array(&mut rng, &[2, 12], 1.0);
        let err = check_gradients(
            |t, x| {
                let qm = t.slice_cols(x, 0, 3)?;
                let qr = t.slice_cols(x, 3, 3)?;
                let pm = t.slice_cols(x, 6, 3)?;
                let pr = t.slice_cols(x, 9, 3)?;
                let qs0 = t.softplus(qr);
                let qs = t.add_scalar(qs0, 0.1);
                let ps0 = t.softplus(pr);
                let ps = t.add_scalar(ps0, 0.1);
                let kl = t.kl_diag(qm, qs, pm, ps)?;
                let lp = t.gaussian_log_prob(qm, pm, ps)?;
                let ent = t.gaussian_entropy(qs)?;
                let a = t.add(kl, lp)?;
                let b = t.add(a, ent)?;
                Ok(t.mean(b))
            },
            &p,
        )
        .unwrap();
        assert!(err < 1e-3, "distribution ops err {err}");

        let logits = rand_array(&mut rng, &[5, 1], 3.0);
        let target: Vec<f32> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let err = check_gradients(|t, x| t.bce_with_logits(x, &target), &logits).unwrap();
        assert!(err < 1e-3, "bce err {err}");
    }
}

#[test]
fn sample_gaussian_gradient_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::new();
    let m = t.leaf(Array::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
    let s = t.leaf(Array::new(&[1, 3], vec![1.0, 0.5, 2.0]).unwrap());
    let z = t.sample_gaussian(m, s, &mut rng).unwrap();
    let tot = t.sum(z);
    let g = t.backward(tot);
    assert_eq!(g.get(m).unwrap().data(), &[1.0, 1.0, 1.0]);
    let eps: Vec<f32> = t
        .value(z)
        .data()
        .iter()
        .zip(t.value(m).data())
        .zip(t.value(s).data())
        .map(|((z, m), s)| (z - m) / s)
        .collect();
    for (a, b) in g.get(s).unwrap().data().iter().zip(&eps) {
        assert!((a - b).abs() < 1e-5);
    }

    let bad = t.constant(Array::new(&[1, 3], vec![1.0, 0.0, 1.0]).unwrap());
    assert!(t.sample_gaussian(m, bad, &mut rng).is_err());
}

#[test]
fn sample_gaussian_floor_stddev_returns_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = Tape::new();
    let m = t.constant(Array::new(&[1, 4], vec![0.3, -0.2, 0.0, 1.0]).unwrap());
    let s = t.constant(Array::full(&[1, 4], 1e-4));
    let z = t.sample_gaussian(m, s, &mut rng).unwrap();
    for (a, b) in t.value(z).data().iter().zip(t.value(m).data()) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn sample_gaussian_monte_carlo_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 1_000_000;
    let mut t = Tape::new();
    let m = t.constant(Array::zeros(&[1, n]));
    let s = t.constant(Array::full(&[1, n], 1.0));
    let z = t.sample_gaussian(m, s, &mut rng).unwrap();
    let d = t.value(z).data();
    let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.01, "mean {mean}");
    assert!((var - 1.0).abs() < 0.01, "var {var}");
}

#[test]
fn sample_gaussian_is_seed_deterministic() {
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let m = t.constant(Array::zeros(&[2, 5]));
        let s = t.constant(Array::full(&[2, 5], 0.7));
        let z = t.sample_gaussian(m, s, &mut rng).unwrap();
        t.value(z).clone()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

fn gru_fixture(hidden: usize, input: usize, seed: u64) -> (ParamSet, GruCell) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cell = GruCell::new(&mut ps, "gru", input, hidden, &mut rng);
    (ps, cell)
}

fn set_gate_bias(ps: &mut ParamSet, cell: &GruCell, gate: usize, value: f32) {
    let h = cell.hidden;
    let b = ps.value_mut(cell.bx);
    b.data_mut()[gate * h..(gate + 1) * h].iter_mut().for_each(|v| *v = value);
}

#[test]
fn gru_full_carry_when_update_gate_saturated() {
    let (mut ps, cell) = gru_fixture(4, 3, 1);
    set_gate_bias(&mut ps, &cell, 1, 100.0);
    let mut t = Tape::new();
    let hv = Array::new(&[1, 4], vec![0.1, -0.5, 0.9, 0.0]).unwrap();
    let h = t.constant(hv.clone());
    let x = t.constant(Array::new(&[1, 3], vec![1.0, 2.0, -1.0]).unwrap());
    let out = cell.forward(&mut t, &ps, h, x).unwrap();
    for (a, b) in t.value(out).data().iter().zip(hv.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn gru_full_overwrite_is_tanh_candidate() {
    let (mut ps, cell) = gru_fixture(4, 3, 2);
    set_gate_bias(&mut ps, &cell, 1, -100.0);
    set_gate_bias(&mut ps, &cell, 0, 100.0);
    let hv = Array::new(&[1, 4], vec![0.1, -0.5, 0.9, 0.0]).unwrap();
    let xv = Array::new(&[1, 3], vec![1.0, 2.0, -1.0]).unwrap();
    let mut t = Tape::new();
    let h = t.constant(hv.clone());
    let x = t.constant(xv.clone());
    let out = cell.forward(&mut t, &ps, h, x).unwrap();
    // candidate = tanh(x·Wxn + bxn + h·Whn + bhn) computed by hand
    let wx = ps.value(cell.wx);
    let wh = ps.value(cell.wh);
    for j in 0..4 {
        let col = 8 + j;
        let mut acc = 0.0f32;
        for i in 0..3 {
            acc += xv.data()[i] * wx.data()[i * 12 + col];
        }
        for i in 0..4 {
            acc += hv.data()[i] * wh.data()[i * 12 + col];
        }
        assert!((t.value(out).data()[j] - acc.tanh()).abs() < 1e-5);
    }
}

#[test]
fn gru_output_bounded_and_gradients_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut ps, cell) = gru_fixture(4, 3, 3);
    for _ in 0..10 {
        let h0 = rand_array(&mut rng, &[1, 4], 0.99);
        let x0 = rand_array(&mut rng, &[1, 3], 2.0);
        let (hc, xc) = (h0.clone(), x0.clone());
        let err = check_param_gradients(&mut [&mut ps], |t, sets| {
            let h = t.constant(hc.clone());
            let x = t.constant(xc.clone());
            let out = cell.forward(t, sets[0], h, x)?;
            let s = t.square(out);
            Ok(t.sum(s))
        })
        .unwrap();
        assert!(err < 1e-3, "gru param err {err}");
        let cellc = cell.clone();
        let psc = ps.clone();
        let err_h = check_gradients(
            move |t, h| {
                let x = t.constant(x0.clone());
                let out = cellc.forward(t, &psc, h, x)?;
                let s = t.square(out);
                Ok(t.sum(s))
            },
            &h0,
        )
        .unwrap();
        assert!(err_h < 1e-3, "gru state err {err_h}");
        let mut t = Tape::new();
        let h = t.constant(h0.clone());
        let x = t.constant(rand_array(&mut rng, &[1, 3], 5.0));
        let out = cell.forward(&mut t, &ps, h, x).unwrap();
        assert!(t.value(out).data().iter().all(|v| v.abs() < 1.0));
    }
}

#[test]
fn composed_network_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ps = ParamSet::new();
    let mlp = Mlp::new(&mut ps, "net", &[5, 7, 3], &mut rng);
    for _ in 0..10 {
        let x = rand_array(&mut rng, &[4, 5], 1.0);
        let err = check_param_gradients(&mut [&mut ps], |t, sets| {
            let xv = t.constant(x.clone());
            let y = mlp.forward(t, sets[0], xv)?;
            let s = t.square(y);
            Ok(t.mean(s))
        })
        .unwrap();
        assert!(err < 1e-3, "mlp err {err}");
    }
}

#[test]
fn frozen_sets_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut a = ParamSet::new();
    let la = Linear::new(&mut a, "a", 3, 3, &mut rng);
    let mut b = ParamSet::new();
    let lb = Linear::new(&mut b, "b", 3, 1, &mut rng);
    let mut t = Tape::new();
    t.freeze(&a);
    let x = t.constant(rand_array(&mut rng, &[2, 3], 1.0));
    let h = la.forward(&mut t, &a, x).unwrap();
    let y = lb.forward(&mut t, &b, h).unwrap();
    let s = t.sum(y);
    t.backward_into(s, &mut [&mut a, &mut b]);
    assert!(a.grads_are_zero());
    assert!(!b.grads_are_zero());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut ps = ParamSet::new();
        let mlp = Mlp::new(&mut ps, "n", &[6, 16, 2], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(rand_array(&mut rng, &[8, 6], 1.0));
        let y = mlp.forward(&mut t, &ps, x).unwrap();
        let z = t.sample_gaussian(y, y, &mut rng).map(|v| t.value(v).clone());
        (t.value(y).clone(), z.is_ok())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn finite_inputs_give_finite_outputs(vals in proptest::collection::vec(-50.0f32..50.0, 6)) {
        let x = Array::new(&[2, 3], vals).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x);
        let ops = [Unary::Elu, Unary::Sigmoid, Unary::Tanh, Unary::Softplus, Unary::Square];
        for op in ops {
            let y = t.unary(v, op);
            prop_assert!(t.value(y).all_finite());
            let s = t.sum(y);
            let g = t.backward(s);
            prop_assert!(g.get(v).unwrap().all_finite());
        }
    }
}
