//! Finite-difference checks of every tape primitive and of the composed model.

mod common;

use common::gradcheck::{check_model, check_primitives, model_loss, tiny_spec};
use common::uniform;
use metatta_core::model::{ConvNet, ParamBundle};
use metatta_core::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[test]
fn primitives_match_finite_differences_f64() {
    for (name, err) in check_primitives(10) {
        assert!(err <= 1e-6, "{name}: rel err {err:e}");
    }
}

#[test]
fn composed_model_matches_finite_differences_f64() {
    let err = check_model::<f64>(10, 1e-5);
    assert!(err <= 1e-4, "rel err {err:e}");
}

#[test]
fn composed_model_matches_finite_differences_f32() {
    let err = check_model::<f32>(10, 1e-5);
    assert!(err <= 1e-3, "rel err {err:e}");
}

#[test]
fn forward_and_gradients_are_deterministic() {
    let net = ConvNet::new(tiny_spec()).unwrap();
    let p: ParamBundle<f32> = net.init(&mut ChaCha8Rng::seed_from_u64(4));
    let x = Tensor::<f32>::from_f64(vec![2, 2, 8, 8], &uniform(11, 256, 0.0, 1.0)).unwrap();
    let a = model_loss(&net, &p, &x, &[0, 1], true);
    let b = model_loss(&net, &p, &x, &[0, 1], true);
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn group_norm_output_is_standardized() {
    for seed in 0..10 {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![2, 8, 4, 4], &uniform(seed, 256, -3.0, 5.0)).unwrap()).unwrap();
        let g = tape.constant(&Tensor::from_f64(vec![8], &[1.0; 8]).unwrap()).unwrap();
        let b = tape.constant(&Tensor::from_f64(vec![8], &[0.0; 8]).unwrap()).unwrap();
        let y = tape.group_norm(x, g, b, 4, 1e-5).unwrap();
        for grp in tape.value(y).chunks(32) {
            let mean = grp.iter().sum::<f64>() / 32.0;
            let var = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }
}
