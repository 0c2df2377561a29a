mod common;

use proptest::prelude::*;
use urbanrep::diffusion::Conditioning;
use urbanrep::numerics::{Linear, ParamStore, Seeds, Tape, Tensor};

#[test]
fn encoder_matches_finite_differences() {
    for seed in [0, 1] {
        let err = common::encoder_gradient_error(seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn denoiser_matches_finite_differences_in_every_mode() {
    for mode in [Conditioning::Em, Conditioning::Concat, Conditioning::Xattn] {
        let err = common::denoiser_gradient_error(mode, 3);
        assert!(err < 1e-4, "{mode:?}: relative error {err:e}");
    }
}

fn mlp_loss(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    l1: &Linear,
    l2: &Linear,
    x: &Tensor<f64>,
) -> (f64, Vec<Tensor<f64>>) {
    let p = store.bind(tape, true);
    let xv = tape.constant(x.clone());
    let h = l1.forward(tape, &p, xv).unwrap();
    let h = tape.gelu(h);
    let y = l2.forward(tape, &p, h).unwrap();
    let s = tape.softmax(y);
    let sq = tape.mul(s, y).unwrap();
    let loss = tape.sum(sq);
    let v = tape.value(loss).item();
    let g = tape.backward(loss).unwrap();
    (v, store.collect_grads(&g, &p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mlp_matches_finite_differences(rows in 1usize..5, input in 1usize..6, hidden in 1usize..7, out in 1usize..5, seed in 0u64..1000) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Seeds::new(seed).stream("mlp", &[]);
        let l1 = Linear::new(&mut store, "l1", input, hidden, &mut rng);
        let l2 = Linear::new(&mut store, "l2", hidden, out, &mut rng);
        common::perturb(&mut store, 0.3, seed);
        let xs: Vec<f64> = (0..rows * input).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect();
        let x = Tensor::new(&[rows, input], xs).unwrap();
        let (_, grads) = mlp_loss(&mut Tape::new(true), &store, &l1, &l2, &x);
        let err = common::fd_check(&mut store, &grads, 1e-5, 1e-3, |s| mlp_loss(&mut Tape::new(true), s, &l1, &l2, &x).0);
        prop_assert!(err < 1e-4, "relative error {err:e}");
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, shift in -50.0f64..50.0, seed in 0u64..1000) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 * 7 + seed) as f64).cos() * 3.0).collect();
        let mut tape = Tape::<f64>::new(false);
        let a = tape.constant(Tensor::new(&[rows, cols], data.clone()).unwrap());
        let b = tape.constant(Tensor::new(&[rows, cols], data.iter().map(|v| v + shift).collect()).unwrap());
        let sa = tape.softmax(a);
        let sb = tape.softmax(b);
        for r in 0..rows {
            let row = tape.value(sa).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            for (x, y) in row.iter().zip(tape.value(sb).row(r)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..5, cols in 2usize..12, scale in 0.1f64..100.0, seed in 0u64..1000) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 * 13 + seed) as f64).sin() * scale + 5.0).collect();
        let mut tape = Tape::<f64>::new(false);
        let x = tape.constant(Tensor::new(&[rows, cols], data.clone()).unwrap());
        let g = tape.constant(Tensor::ones(&[cols]));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let moments = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64)
        };
        for r in 0..rows {
            let (_, raw) = moments(&data[r * cols..(r + 1) * cols]);
            let (mean, var) = moments(tape.value(y).row(r));
            prop_assert!(mean.abs() < 1e-9);
            // the variance epsilon shrinks the output variance to raw / (raw + eps)
            prop_assert!((var - raw / (raw + 1e-5)).abs() < 1e-9);
        }
    }
}
