use std::sync::Arc;

use proptest::prelude::*;

use super::gradcheck::{central_difference, relative_error};
use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn neg<T: Scalar>() -> T {
    T::mask_neg()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = tape.matmul(i2, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let col = tape.constant(t64(&[2, 1], &[5.0, 6.0]));
    let c = tape.matmul(b, col).unwrap();
    assert_eq!(tape.value(c).data(), &[17.0, 39.0]);

    let z = tape.constant(Tensor::zeros(&[3, 2]));
    let c = tape.matmul(z, b).unwrap();
    assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn masked_softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[1.0, 1.0]));
    let m: Arc<[f64]> = vec![0.0, neg()].into();
    let p = tape.masked_softmax(x, &m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 0.0]);

    let x = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
    let m: Arc<[f64]> = vec![0.0, 0.0].into();
    let p = tape.masked_softmax(x, &m).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

    let x = tape.constant(t64(&[1, 3], &[2f64.ln(), 0.0, 0.0]));
    let m: Arc<[f64]> = vec![0.0; 3].into();
    let p = tape.masked_softmax(x, &m).unwrap();
    let got = tape.value(p).data();
    for (g, e) in got.iter().zip([0.5, 0.25, 0.25]) {
        assert!((g - e).abs() < 1e-15);
    }
}

#[test]
fn masked_softmax_rejects_fully_masked_row() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    let m: Arc<[f32]> = vec![neg(), neg()].into();
    assert!(matches!(
        tape.masked_softmax(x, &m),
        Err(crate::Error::Invariant(_))
    ));
}

#[test]
fn masked_softmax_ignores_huge_logits_behind_mask() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::vector(vec![0.0f32, 3.0e38, -3.0e38]).reshape_row());
    let m: Arc<[f32]> = vec![0.0, neg(), 0.0].into();
    let p = tape.masked_softmax(x, &m).unwrap();
    let v = tape.value(p).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[0], 1.0);
    assert!(v.iter().all(|x| x.is_finite()));
}

trait RowExt {
    fn reshape_row(self) -> Self;
}

impl RowExt for Tensor<f32> {
    fn reshape_row(self) -> Self {
        let n = self.len();
        Tensor::new(vec![1, n], self.into_data()).unwrap()
    }
}

#[test]
fn rms_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let cases: [(&[f64], &[f64], f64, &[f64]); 3] = [
        (&[3.0, 3.0], &[1.0, 1.0], 1e-300, &[1.0, 1.0]),
        (&[0.0, 0.0], &[1.0, 1.0], 1e-6, &[0.0, 0.0]),
        (&[1.0, -1.0], &[2.0, 2.0], 1e-300, &[2.0, -2.0]),
    ];
    for (x, g, eps, want) in cases {
        let xv = tape.constant(t64(&[1, 2], x));
        let gv = tape.constant(t64(&[2], g));
        let y = tape.rms_norm(xv, gv, eps).unwrap();
        let got = tape.value(y).data();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let mut dominant = vec![0.0; 5];
    dominant[2] = 60.0;
    let l = tape.constant(t64(&[1, 5], &dominant));
    let loss = tape.cross_entropy(l, &[2]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-20);

    let l = tape.constant(Tensor::zeros(&[1, 256]));
    let loss = tape.cross_entropy(l, &[17]).unwrap();
    assert!((tape.value(loss).data()[0] - 256f64.ln()).abs() < 1e-12);
    assert!((256f64.ln() - 5.5452).abs() < 1e-4);

    let l = tape.constant(t64(&[1, 2], &[3f64.ln(), 0.0]));
    let loss = tape.cross_entropy(l, &[1]).unwrap();
    assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);

    let l = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        tape.cross_entropy(l, &[4]),
        Err(crate::Error::Index { .. })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut tape = Tape::<f64>::new();
    let l = tape.param(t64(&[1, 2], &[3f64.ln(), 0.0]));
    let loss = tape.cross_entropy(l, &[1]).unwrap();
    let g = tape.backward(loss).unwrap().get(l).unwrap();
    assert!((g.data()[0] - 0.75).abs() < 1e-15);
    assert!((g.data()[1] - (0.25 - 1.0)).abs() < 1e-15);
}

#[test]
fn backward_power_rule() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let root = tape.sum(sq);
    let g = tape.backward(root).unwrap().get(x).unwrap();
    assert_eq!(g.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_linear_map_gives_column_sums() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let x = tape.param(t64(&[3, 1], &[0.5, -1.0, 2.0]));
    let ax = tape.matmul(a, x).unwrap();
    let root = tape.sum(ax);
    let g = tape.backward(root).unwrap().get(x).unwrap();
    assert_eq!(g.data(), &[5.0, 7.0, 9.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(t64(&[2], &[1.0, 2.0]));
    let p = tape.param(t64(&[2], &[3.0, 4.0]));
    let prod = tape.mul(c, p).unwrap();
    let root = tape.sum(prod);
    let grads = tape.backward(root).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..64).map(|i| ((i * 37 % 17) as f32 - 8.0) * 0.13).collect();
        let a = tape.constant(Tensor::new(vec![8, 8], data.clone()).unwrap());
        let b = tape.matmul_nt(a, a).unwrap();
        let m: Arc<[f32]> = vec![0.0; 64].into();
        let p = tape.masked_softmax(b, &m).unwrap();
        tape.value(p).clone()
    };
    assert!(run().bit_eq(&run()));
}

/// Compares every coordinate of every input's analytic gradient to central
/// differences. `build` maps leaf vars to a scalar root.
fn check_op(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        let mut flat = input.data().to_vec();
        for i in 0..flat.len() {
            let numeric = central_difference(&mut flat, i, 1e-5, |x| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, inp)| {
                        if j == k {
                            t.param(Tensor::new(inp.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            t.param(inp.clone())
                        }
                    })
                    .collect();
                let r = build(&mut t, &vs);
                t.value(r).data()[0]
            });
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            assert!(err < 1e-5, "input {k} coord {i}: analytic {a} numeric {numeric} rel {err}");
        }
    }
}

fn weights(n: usize, seed: u64) -> Tensor<f64> {
    // fixed pseudo-random projection so the root is not a plain sum
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
        .collect();
    Tensor::vector(data)
}

fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let n = t.value(v).len();
    let shape = t.shape(v).to_vec();
    let w = weights(n, seed);
    let w = t.constant(Tensor::new(shape, w.into_data()).unwrap());
    let prod = t.mul(v, w).unwrap();
    t.sum(prod)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn grad_matmul((a, b) in (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))) {
        check_op(&[a, b], &|t, v| { let c = t.matmul(v[0], v[1]).unwrap(); project(t, c, 1) });
    }

    #[test]
    fn grad_matmul_nt((a, b) in (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(n, k)))) {
        check_op(&[a, b], &|t, v| { let c = t.matmul_nt(v[0], v[1]).unwrap(); project(t, c, 2) });
    }

    #[test]
    fn grad_silu_and_add_row((x, b) in (1usize..5, 1usize..8)
        .prop_flat_map(|(r, c)| (matrix(r, c), matrix(1, c)))) {
        let b = Tensor::vector(b.into_data());
        check_op(&[x, b], &|t, v| {
            let y = t.add_row(v[0], v[1]).unwrap();
            let s = t.silu(y);
            project(t, s, 3)
        });
    }

    #[test]
    fn grad_rms_norm((x, g) in (1usize..5, 1usize..32)
        .prop_flat_map(|(r, c)| (matrix(r, c), matrix(1, c)))) {
        let g = Tensor::vector(g.into_data());
        check_op(&[x, g], &|t, v| {
            let y = t.rms_norm(v[0], v[1], 1e-6).unwrap();
            project(t, y, 4)
        });
    }

    #[test]
    fn grad_rope(x in (1usize..6, 1usize..3).prop_flat_map(|(r, h)| matrix(r, 4 * h))) {
        let rows = x.rows();
        let heads = x.cols() / 4;
        let positions: Vec<usize> = (0..rows).map(|i| 3 * i + 1).collect();
        check_op(&[x], &move |t, v| {
            let y = t.rope(v[0], &positions, heads, 10_000.0).unwrap();
            project(t, y, 5)
        });
    }

    #[test]
    fn grad_masked_softmax(x in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c)),
                           seed in 0u64..1000) {
        let (rows, cols) = (x.rows(), x.cols());
        let mut mask = vec![0.0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if c != r % cols && (seed >> ((r * cols + c) % 60)) & 1 == 1 {
                    mask[r * cols + c] = f64::mask_neg();
                }
            }
        }
        let mask: Arc<[f64]> = mask.into();
        check_op(&[x], &move |t, v| {
            let p = t.masked_softmax(v[0], &mask).unwrap();
            project(t, p, 6)
        });
    }

    #[test]
    fn grad_cross_entropy(x in (1usize..5, 2usize..9).prop_flat_map(|(r, c)| matrix(r, c))) {
        let targets: Vec<usize> = (0..x.rows()).map(|r| (r * 7) % x.cols()).collect();
        check_op(&[x], &move |t, v| t.cross_entropy(v[0], &targets).unwrap());
    }

    #[test]
    fn grad_gather_slices_concats(table in matrix(5, 6)) {
        check_op(&[table], &|t, v| {
            let g = t.gather(v[0], &[4, 0, 4, 2]).unwrap();
            let a = t.slice_cols(g, 1, 3).unwrap();
            let b = t.slice_cols(g, 4, 2).unwrap();
            let cc = t.concat_cols(&[b, a]).unwrap();
            let top = t.slice_rows(cc, 0, 2).unwrap();
            let all = t.concat_rows(&[cc, top]).unwrap();
            let sc = t.scale(all, 0.5);
            project(t, sc, 7)
        });
    }

    #[test]
    fn masked_softmax_rows_are_stochastic(x in (1usize..16, 1usize..32).prop_flat_map(|(r, c)| matrix(r, c)),
                                          seed in any::<u64>()) {
        let (rows, cols) = (x.rows(), x.cols());
        let mut mask = vec![0.0f64; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if c != r % cols && (seed.rotate_left((r * 31 + c) as u32) & 1) == 1 {
                    mask[r * cols + c] = f64::mask_neg();
                }
            }
        }
        let mask: Arc<[f64]> = mask.into();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = tape.masked_softmax(xv, &mask).unwrap();
        let p = tape.value(p);
        for r in 0..rows {
            let row = p.row(r);
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for c in 0..cols {
                if mask[r * cols + c] != 0.0 {
                    prop_assert_eq!(row[c].to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }
}
