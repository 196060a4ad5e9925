//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every reduction runs sequentially in ascending index order, so a seeded
//! computation repeated on the same inputs reproduces values and gradients
//! bit for bit.

mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{glorot_uniform, ParamEntry, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Precision, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Softmax over the kept entries of each row; dropped entries are exactly 0.
pub fn softmax_masked(tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
    tape.softmax_rows(x, Some(mask.into()))
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::nn::{gru_cell, Gru};
    use super::*;
    use crate::error::Error;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[[1.5, -2.0, 0.5], [3.0, 4.0, 7.0]]));
        let i = t.constant(Tensor::identity(2));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let z = t.constant(Tensor::zeros(&[2, 3]));
        let o = t.constant(Tensor::ones(&[3, 4]));
        let zo = t.matmul(z, o).unwrap();
        assert_eq!(t.value(zo), &Tensor::zeros(&[2, 4]));

        let a = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = t.constant(Tensor::from_rows(&[[1.0], [1.0]]));
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).data(), &[3.0, 7.0]);

        assert!(matches!(t.matmul(a, o), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.7, 0.7, 0.7]));
        let s = softmax_masked(&mut t, x, &[true, true, true]).unwrap();
        assert!(close(t.value(s).data(), &[1.0 / 3.0; 3], 1e-15));

        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = softmax_masked(&mut t, x, &[true, true]).unwrap();
        assert!(close(t.value(s).data(), &[0.26894, 0.73106], 1e-5));

        let x = t.constant(Tensor::vector(vec![5.0, 100.0]));
        let s = softmax_masked(&mut t, x, &[true, false]).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 0.0]);

        assert!(matches!(
            softmax_masked(&mut t, x, &[false, false]),
            Err(Error::DegenerateNeighborhood)
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::ones(&[1, 2]));
        let b = t.constant(Tensor::zeros(&[1, 2]));
        let x = t.constant(Tensor::vector(vec![1.0, 3.0]));
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        assert!(close(t.value(y).data(), &[-1.0, 1.0], 1e-15));

        let g4 = t.constant(Tensor::ones(&[1, 4]));
        let b4 = t.constant(Tensor::zeros(&[1, 4]));
        let c = t.constant(Tensor::full(&[1, 4], 2.5));
        let y = t.layer_norm(c, g4, b4, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);

        let zero_gain = t.constant(Tensor::zeros(&[1, 3]));
        let bias = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
        let x = t.constant(Tensor::vector(vec![4.0, -1.0, 9.0]));
        let y = t.layer_norm(x, zero_gain, bias, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.1, -0.2, 0.3]);
    }

    fn zero_gru(tape: &mut Tape, store: &mut ParamStore, d: usize) -> (Gru, nn::GruVars) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = Gru::new(store, "g", d, d, &mut rng);
        for e in store.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let vars = gru.vars(tape, store);
        (gru, vars)
    }

    #[test]
    fn gru_cell_examples() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (_, p) = zero_gru(&mut tape, &mut store, 1);
        let x = tape.constant(Tensor::scalar(0.0));
        let h1 = tape.constant(Tensor::scalar(1.0));
        let out = gru_cell(&mut tape, x, h1, &p).unwrap();
        assert!((tape.value(out).item() - 0.5).abs() < 1e-15);

        let h0 = tape.constant(Tensor::scalar(0.0));
        let out = gru_cell(&mut tape, x, h0, &p).unwrap();
        assert_eq!(tape.value(out).item(), 0.0);
    }

    #[test]
    fn gru_carries_state_when_update_gate_closed() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gru = Gru::new(&mut store, "g", 3, 2, &mut rng);
        // z occupies bias columns 0..hidden
        store.get_mut(gru.bias).data_mut()[..2].copy_from_slice(&[-60.0, -60.0]);
        let mut tape = Tape::new();
        let p = gru.vars(&mut tape, &store);
        let x = tape.constant(Tensor::vector(vec![0.4, -0.9, 1.3]));
        let h = tape.constant(Tensor::vector(vec![0.25, -0.75]));
        let out = gru_cell(&mut tape, x, h, &p).unwrap();
        assert!(close(tape.value(out).data(), &[0.25, -0.75], 1e-12));
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, (0..6).map(|_| rng.random()).collect()).unwrap()).unwrap();
        let b = tape.leaf(Tensor::matrix(2, 2, (0..4).map(|_| rng.random()).collect()).unwrap()).unwrap();
        let c = tape.concat_cols(&[a, b]).unwrap();
        let w = tape.constant(Tensor::matrix(2, 5, (0..10).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap());
        let y = tape.mul(c, w).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        // upstream gradient of c is w itself
        let (ga, gb) = (g.get(a).unwrap(), g.get(b).unwrap());
        let upstream = tape.value(w);
        for r in 0..2 {
            let mut row = ga.row(r).to_vec();
            row.extend_from_slice(gb.row(r));
            assert_eq!(row.as_slice(), upstream.row(r));
        }
    }

    #[test]
    fn checked_mode_flags_overflow() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(x), Err(Error::Numeric(_))));
        t.set_checked(false);
        assert!(t.exp(x).is_ok());
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut t = Tape::with_precision(Precision::F32);
        let x = t.constant(Tensor::scalar(0.1));
        let y = t.affine(x, 1.0, 0.0).unwrap();
        assert_eq!(t.value(y).item(), 0.1f32 as f64);
    }

    /// Each entry builds a scalar from a single random input of the given shape.
    type OpCase = (&'static str, usize, usize, fn(&mut Tape, Var) -> crate::Result<Var>);

    fn weights(t: &mut Tape, rows: usize, cols: usize, salt: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        t.constant(Tensor::matrix(rows, cols, data).unwrap())
    }

    fn weighted_sum(t: &mut Tape, y: Var) -> crate::Result<Var> {
        let v = t.value(y);
        let (r, c) = (v.rows(), v.cols());
        let w = weights(t, r, c, 99);
        let p = t.mul(y, w)?;
        t.sum(p)
    }

    fn op_cases() -> Vec<OpCase> {
        vec![
            ("matmul", 3, 4, |t, x| {
                let w = weights(t, 4, 2, 1);
                let y = t.matmul(x, w)?;
                let w2 = weights(t, 5, 3, 2);
                let y2 = t.matmul(w2, x)?;
                let a = weighted_sum(t, y)?;
                let b = weighted_sum(t, y2)?;
                t.add(a, b)
            }),
            ("add_sub_mul", 2, 3, |t, x| {
                let w = weights(t, 2, 3, 3);
                let a = t.add(x, w)?;
                let b = t.sub(a, x)?;
                let c = t.mul(x, a)?;
                let d = t.add(b, c)?;
                weighted_sum(t, d)
            }),
            ("add_row", 3, 4, |t, x| {
                let row = t.slice_cols(x, 0, 4)?;
                let r0 = t.gather_rows(row, vec![1].into())?;
                let y = t.add_row(x, r0)?;
                weighted_sum(t, y)
            }),
            ("concat", 2, 3, |t, x| {
                let s = t.slice_cols(x, 1, 2)?;
                let c = t.concat_cols(&[x, s, x])?;
                let r = t.concat_rows(&[c, c])?;
                weighted_sum(t, r)
            }),
            ("mean_rows", 4, 3, |t, x| {
                let m = t.mean_rows(x)?;
                let s = t.mean(x)?;
                let a = weighted_sum(t, m)?;
                t.add(a, s)
            }),
            ("sigmoid_tanh", 2, 4, |t, x| {
                let a = t.sigmoid(x)?;
                let b = t.tanh(x)?;
                let c = t.add(a, b)?;
                weighted_sum(t, c)
            }),
            ("relu_leaky_elu", 3, 3, |t, x| {
                let a = t.relu(x)?;
                let b = t.leaky_relu(x, 0.2)?;
                let c = t.elu(x)?;
                let d = t.concat_cols(&[a, b, c])?;
                weighted_sum(t, d)
            }),
            ("exp_affine", 2, 2, |t, x| {
                let a = t.affine(x, 0.5, -0.1)?;
                let e = t.exp(a)?;
                weighted_sum(t, e)
            }),
            ("softmax_masked", 3, 4, |t, x| {
                let mask: Rc<[bool]> = (0..12).map(|i| i % 3 != 1).collect::<Vec<_>>().into();
                let s = t.softmax_rows(x, Some(mask))?;
                weighted_sum(t, s)
            }),
            ("segment_softmax", 6, 1, |t, x| {
                let s = t.segment_softmax(x, vec![0, 1, 0, 2, 1, 0].into())?;
                weighted_sum(t, s)
            }),
            ("layer_norm", 3, 5, |t, x| {
                let g = weights(t, 1, 5, 7);
                let b = weights(t, 1, 5, 8);
                let y = t.layer_norm(x, g, b, 1e-5)?;
                weighted_sum(t, y)
            }),
            ("layer_norm_affine", 1, 4, |t, x| {
                let h = weights(t, 2, 4, 17);
                let g = t.slice_cols(x, 0, 4)?;
                let b = t.affine(g, -0.5, 0.2)?;
                let y = t.layer_norm(h, g, b, 1e-5)?;
                weighted_sum(t, y)
            }),
            ("gather_scatter", 4, 3, |t, x| {
                let g = t.gather_rows(x, vec![3, 0, 0, 2].into())?;
                let s = t.scatter_add_rows(g, vec![1, 1, 0, 2].into(), 3)?;
                weighted_sum(t, s)
            }),
            ("scale_rows", 4, 3, |t, x| {
                let w = t.slice_cols(x, 2, 1)?;
                let y = t.scale_rows(x, w)?;
                weighted_sum(t, y)
            }),
            ("transpose", 2, 3, |t, x| {
                let y = t.transpose(x)?;
                let z = t.matmul(y, x)?;
                weighted_sum(t, z)
            }),
        ]
    }

    #[test]
    fn gru_cell_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gru = Gru::new(&mut store, "g", 3, 4, &mut rng);
        let x = store.add_glorot("x", 5, 3, &mut rng);
        let coords: Vec<_> = store
            .ids()
            .flat_map(|id| (0..store.get(id).len()).map(move |k| (id, k)))
            .collect();
        let report = grad_check_params(&store, &coords, 1e-5, 1e-4, |t, s| {
            let xs = t.param(s, x);
            let h = gru.forward(t, s, xs)?;
            weighted_sum(t, h)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn every_op_passes_grad_check_on_50_seeds() {
        for (name, rows, cols, f) in op_cases() {
            for seed in 0..50u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + rows as u64);
                // keep samples away from the ReLU kink
                let data = (0..rows * cols)
                    .map(|_| {
                        let v: f64 = rng.random_range(0.05..1.5);
                        if rng.random::<bool>() { v } else { -v }
                    })
                    .collect();
                let x = Tensor::matrix(rows, cols, data).unwrap();
                let report = grad_check(f, &x, 1e-5, 1e-4).unwrap();
                assert!(report.passed, "{name} seed {seed}: {report:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(values in proptest::collection::vec(-50.0f64..50.0, 1..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask: Vec<bool> = values.iter().map(|_| rng.random()).collect();
            mask[0] = true;
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(values.clone()));
            let s = softmax_masked(&mut t, x, &mask).unwrap();
            let out = t.value(s).data();
            let total: f64 = out.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (v, m) in out.iter().zip(&mask) {
                if *m { prop_assert!(*v >= 0.0) } else { prop_assert_eq!(*v, 0.0) }
            }
        }
    }

    #[test]
    fn repeated_computation_is_bitwise_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let mut t = Tape::new();
            let x = t.leaf(Tensor::matrix(4, 6, (0..24).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()).unwrap();
            let w = t.leaf(Tensor::matrix(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
            let y = t.matmul(x, w).unwrap();
            let y = t.tanh(y).unwrap();
            let s = t.softmax_rows(y, None).unwrap();
            let m = t.mean_rows(s).unwrap();
            let l = t.sum(m).unwrap();
            let l2 = t.mul(l, l).unwrap();
            let g = t.backward(l2).unwrap();
            (t.value(l2).clone(), g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
        assert_eq!(a.2.data(), b.2.data());
    }
}
