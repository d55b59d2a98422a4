use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bap_core::probe::{
    flops_estimate, load_checkpoint, save_checkpoint, ProbeConfig, ProbeModel,
};
use bap_core::tensor::Tensor;

fn perturbed(config: ProbeConfig, rng: &mut ChaCha8Rng) -> ProbeModel<f64> {
    let mut model = ProbeModel::init(config).unwrap().cast::<f64>();
    // Move layer-norm parameters off their 1/0 initialization.
    for p in model.params_mut() {
        for v in p.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    model
}

fn max_scaled_error(model: &mut ProbeModel<f64>, z: &Tensor<f64>, label: u8) -> f64 {
    const H: f64 = 1e-6;
    let (_, grads) = model.loss_and_grads(z, label).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = model.params()[pi].values()[j];
            model.params_mut()[pi].values_mut()[j] = orig + H;
            let up = model.loss_and_grads(z, label).unwrap().0;
            model.params_mut()[pi].values_mut()[j] = orig - H;
            let down = model.loss_and_grads(z, label).unwrap().0;
            model.params_mut()[pi].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = g.values()[j];
            let scale = analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bare in [false, true] {
        for positional_encoding in [false, true] {
            let config = ProbeConfig {
                d_in: 6,
                n_heads: 2,
                n_kv_heads: 1,
                d_head: 3,
                d_ff: 5,
                use_block_residual_ln: !bare,
                positional_encoding,
                seed: rng.random(),
            };
            let mut model = perturbed(config, &mut rng);
            let z = Tensor::matrix(5, 6, (0..30).map(|_| rng.random_range(-1.5..1.5)).collect())
                .unwrap();
            for label in [0, 1] {
                let err = max_scaled_error(&mut model, &z, label);
                assert!(err < 1e-5, "bare={bare} pe={positional_encoding}: {err}");
            }
        }
    }
}

#[test]
fn flops_are_in_the_expected_range() {
    let f = flops_estimate(&ProbeConfig::full_scale(4096), 256) as f64;
    assert!(f > 2.2e9 && f < 2.2e11, "{f}");
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("probe.bapm");
    let model = ProbeModel::init(ProbeConfig {
        use_block_residual_ln: false,
        ..ProbeConfig::desk(12)
    })
    .unwrap();
    save_checkpoint(&path, &model).unwrap();
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"BAPM");
    assert_eq!(load_checkpoint(&path).unwrap(), model);
    std::fs::write(&path, b"BAPM").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
