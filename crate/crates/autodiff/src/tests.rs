use proptest::prelude::*;

use super::*;

fn grad_of(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> (f64, Tensor) {
    let mut tape = Tape::new();
    let v = tape.param(x);
    let out = f(&mut tape, v);
    let g = tape.backward(out).unwrap();
    (tape.value(out).item().unwrap(), g.wrt(&tape, v))
}

#[test]
fn sigmoid_at_zero() {
    let (y, g) = grad_of(Tensor::scalar(0.0), |t, x| t.sigmoid(x));
    assert_eq!(y, 0.5);
    assert_eq!(g.data(), &[0.25]);
}

#[test]
fn max_with_zero_values_and_subgradients() {
    let (y, g) = grad_of(Tensor::scalar(-3.0), |t, x| t.max_with_zero(x));
    assert_eq!((y, g.data()[0]), (0.0, 0.0));
    let (y, g) = grad_of(Tensor::scalar(3.0), |t, x| t.max_with_zero(x));
    assert_eq!((y, g.data()[0]), (3.0, 1.0));
    let (_, g) = grad_of(Tensor::scalar(0.0), |t, x| t.max_with_zero(x));
    assert_eq!(g.data()[0], 0.0);
}

#[test]
fn scatter_then_gather_with_identity_index_is_identity() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0], vec![1.5, 3.0]]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.constant(w.clone());
    let idx: Vec<usize> = vec![0, 1, 2];
    let s = tape.scatter_add_rows(xv, idx.clone(), 3).unwrap();
    let g = tape.gather_rows(s, idx).unwrap();
    assert_eq!(tape.value(g), &x);
    let prod = tape.mul(g, wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(&tape, xv), w);
}

#[test]
fn sum_of_squares_gradient() {
    let (_, g) = grad_of(Tensor::column(vec![1.0, 2.0, 3.0]), |t, x| {
        let s = t.square(x);
        t.sum(s)
    });
    assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn gradient_of_unused_leaf_is_exact_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::column(vec![1.0, 2.0]));
    let y = tape.param(Tensor::column(vec![5.0, 7.0]));
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, y).data(), &[0.0, 0.0]);
}

#[test]
fn linear_chain_gradient_is_transpose_times_ones() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    let mut tape = Tape::new();
    let av = tape.constant(a);
    let x = tape.param(Tensor::column(vec![0.1, 0.2, 0.3]));
    let y = tape.matmul(av, x).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[5.0, 7.0, 9.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::column(vec![1.0, 2.0]));
    assert!(matches!(
        tape.backward(x),
        Err(AutodiffError::NonScalarLoss { rows: 2, cols: 1 })
    ));
}

#[test]
fn repeated_backward_calls_are_independent() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::column(vec![1.0, -2.0]));
    let sq = tape.square(x);
    let loss = tape.sum(sq);
    let g1 = tape.backward(loss).unwrap().wrt(&tape, x);
    let g2 = tape.backward(loss).unwrap().wrt(&tape, x);
    assert_eq!(g1, g2);
    assert_eq!(g1.data(), &[2.0, -4.0]);
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(2, 3));
    let b = tape.param(Tensor::zeros(2, 2));
    assert!(matches!(tape.matmul(a, b), Err(AutodiffError::Shape { .. })));
    let c = tape.param(Tensor::zeros(3, 3));
    assert!(tape.add(a, c).is_err());
}

#[test]
fn softmax_assigns_zero_to_masked_entries() {
    let mut tape = Tape::new();
    let s = tape.param(Tensor::from_rows(&[vec![0.3, 1.2, -0.5]]).unwrap());
    let m = tape
        .masked_fill(s, vec![false, true, false], f64::NEG_INFINITY)
        .unwrap();
    let p = tape.softmax_rows(m);
    let row = tape.value(p).data().to_vec();
    assert_eq!(row[1], 0.0);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn fd_sum_of_squares() {
    let err = finite_difference_check(
        |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let s = t.square(v[0]);
            Ok(t.sum(s))
        },
        &[Tensor::column(vec![1.0, 2.0])],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-7, "{err}");
}

#[test]
fn fd_linear_is_exact_to_roundoff() {
    let w = Tensor::column(vec![0.3, -1.7, 2.5]);
    let err = finite_difference_check(
        |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let wv = t.constant(w.clone());
            let p = t.mul(v[0], wv)?;
            Ok(t.sum(p))
        },
        &[Tensor::column(vec![0.4, 1.1, -2.0])],
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn fd_piecewise_away_from_kink() {
    let eps = 1e-6;
    let report = finite_difference_report(
        |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let r = t.max_with_zero(v[0]);
            let s = t.square(r);
            let l = t.add(s, v[0])?;
            Ok(t.sum(l))
        },
        &[Tensor::column(vec![0.7, -0.4, 1.3])],
        eps,
    )
    .unwrap();
    assert!(report.min_kink_distance > 10.0 * eps);
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn broadcasting_gradients_reduce_to_operand_shape() {
    let mut tape = Tape::new();
    let m = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    let row = tape.param(Tensor::row(vec![10.0, 20.0]));
    let col = tape.param(Tensor::column(vec![1.0, 2.0, 3.0]));
    let a = tape.add(m, row).unwrap();
    let b = tape.mul(a, col).unwrap();
    let loss = tape.sum(b);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, row).data(), &[6.0, 6.0]);
    assert_eq!(g.wrt(&tape, col).data(), &[33.0, 37.0, 41.0]);
    assert_eq!(g.wrt(&tape, m).data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
}

#[test]
fn two_builds_are_bit_identical() {
    let build = || {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap());
        let t = tape.transpose(x);
        let p = tape.matmul(x, t).unwrap();
        let s = tape.softmax_rows(p);
        let e = tape.tanh(s);
        let l = tape.mean(e);
        let g = tape.backward(l).unwrap();
        (tape.value(l).clone(), g.wrt(&tape, x))
    };
    assert_eq!(build(), build());
}

fn smooth_primitive(kind: usize, t: &mut Tape, x: Var, y: Var) -> Result<Var> {
    Ok(match kind {
        0 => t.add(x, y)?,
        1 => t.sub(x, y)?,
        2 => t.mul(x, y)?,
        3 => {
            let yt = t.transpose(y);
            t.matmul(x, yt)?
        }
        4 => t.sigmoid(x),
        5 => t.tanh(x),
        6 => t.exp(x),
        7 => {
            let s = t.square(x);
            let p = t.add_scalar(s, 1.0);
            t.log(p)
        }
        8 => {
            let s = t.square(x);
            let p = t.add_scalar(s, 0.5);
            t.sqrt(p)
        }
        9 => t.softmax_rows(x),
        10 => t.concat_cols(&[x, y])?,
        11 => t.concat_rows(&[x, y])?,
        12 => t.gather_rows(x, vec![2, 0, 0, 1])?,
        13 => t.scatter_add_rows(x, vec![1, 1, 0], 2)?,
        14 => t.select_cols(x, vec![1, 1, 0])?,
        15 => t.sin(x),
        16 => t.cos(x),
        17 => t.row_sums(x),
        18 => t.col_sums(x),
        19 => {
            let m = t.masked_fill(x, vec![true, false, false, false, true, false], -1e9)?;
            t.softmax_rows(m)
        }
        20 => t.leaky_relu(x, 0.2),
        21 => t.abs(x),
        _ => t.relu(x),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_primitive_passes_fd_audit(
        kind in 0usize..23,
        xs in proptest::collection::vec(-2.0f64..2.0, 6),
        ys in proptest::collection::vec(-2.0f64..2.0, 6),
        ws in proptest::collection::vec(-1.0f64..1.0, 12),
    ) {
        let eps = 1e-6;
        let x = Tensor::from_vec(3, 2, xs).unwrap();
        let y = Tensor::from_vec(3, 2, ys).unwrap();
        let report = finite_difference_report(
            |t: &mut Tape, v: &[Var]| -> Result<Var> {
                let out = smooth_primitive(kind, t, v[0], v[1])?;
                let (r, c) = t.value(out).shape();
                let w = Tensor::from_vec(r, c, ws.iter().cycle().take(r * c).copied().collect())?;
                let wv = t.constant(w);
                let p = t.mul(out, wv)?;
                Ok(t.sum(p))
            },
            &[x, y],
            eps,
        ).unwrap();
        prop_assume!(report.min_kink_distance > 1e3 * eps);
        prop_assert!(report.max_rel_error <= 1e-6, "kind {} err {}", kind, report.max_rel_error);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(
        a in proptest::collection::vec(-1.0f64..1.0, 4),
        b in proptest::collection::vec(-1.0f64..1.0, 4),
        w in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let per_sample = |data: &[f64]| {
            let mut t = Tape::new();
            let wv = t.param(Tensor::column(w.clone()));
            let d = t.constant(Tensor::column(data.to_vec()));
            let p = t.mul(wv, d).unwrap();
            let s = t.tanh(p);
            let l = t.sum(s);
            t.backward(l).unwrap().wrt(&t, wv)
        };
        let mut t = Tape::new();
        let wv = t.param(Tensor::column(w.clone()));
        let mut total = None;
        for data in [&a, &b] {
            let d = t.constant(Tensor::column(data.clone()));
            let p = t.mul(wv, d).unwrap();
            let s = t.tanh(p);
            let l = t.sum(s);
            total = Some(match total { None => l, Some(acc) => t.add(acc, l).unwrap() });
        }
        let joint = t.backward(total.unwrap()).unwrap().wrt(&t, wv);
        let ga = per_sample(&a);
        let gb = per_sample(&b);
        for k in 0..4 {
            prop_assert!((joint.data()[k] - ga.data()[k] - gb.data()[k]).abs() < 1e-14);
        }
    }
}
