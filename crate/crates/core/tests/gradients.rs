//! End-to-end gradient checks beyond the fixed-step suite.

use grin::gradcheck::{check_model, relative_error, SuiteOptions, DEFAULT_TOLERANCE};
use grin::net::GradTape;
use grin::{Activation, Mode, ModelConfig, Rng, StyleNet, ThetaForm};

/// Kink-free coordinates at the default step, then biases at the fine step.
fn assert_groups(model: &ModelConfig, seed: u64) {
    for g in check_model(seed, model, &small_step(), "model").unwrap() {
        assert!(
            g.max_rel_error_smooth < DEFAULT_TOLERANCE,
            "seed {seed}: {} {:e}",
            g.group,
            g.max_rel_error_smooth
        );
    }
    assert_groups_matching(model, seed, &fine_step(), |g| g.ends_with(".bias"));
}

fn assert_groups_matching(model: &ModelConfig, seed: u64, opts: &SuiteOptions, keep: impl Fn(&str) -> bool) {
    for g in check_model(seed, model, opts, "model").unwrap() {
        if !keep(&g.group) {
            continue;
        }
        assert!(g.max_rel_error < DEFAULT_TOLERANCE, "seed {seed}: {} {:e}", g.group, g.max_rel_error);
    }
}

fn small_step() -> SuiteOptions {
    SuiteOptions {
        samples_per_tensor: Some(12),
        ..SuiteOptions::default()
    }
}

/// Channel biases move every pixel of a plane at once, so at the default
/// step some rectifier usually switches inside `±h`. A step ten times
/// smaller stays on one linear piece.
fn fine_step() -> SuiteOptions {
    SuiteOptions {
        h: 1e-6,
        ..SuiteOptions::default()
    }
}

#[test]
fn biases_match_fine_step_differences() {
    let opts = fine_step();
    for seed in 0..3 {
        for detach in [false, true] {
            let model = ModelConfig {
                detach_target: detach,
                ..ModelConfig::default()
            };
            assert_groups_matching(&model, seed, &opts, |g| g.ends_with(".bias"));
        }
    }
}

#[test]
fn kink_free_coordinates_pass_at_default_step() {
    let opts = SuiteOptions::default();
    for seed in 0..3 {
        for g in check_model(seed, &ModelConfig::default(), &opts, "model").unwrap() {
            assert!(
                g.max_rel_error_smooth < DEFAULT_TOLERANCE,
                "seed {seed}: {} {:e}",
                g.group,
                g.max_rel_error_smooth
            );
        }
    }
}

#[test]
fn diagonal_theta_with_relu_between_layers() {
    let model = ModelConfig {
        theta_form: ThetaForm::Diagonal,
        activation: Activation::Relu,
        ..ModelConfig::default()
    };
    assert_groups(&model, 5);
}

#[test]
fn cosine_adjacency_and_mean_reduction() {
    let mut model = ModelConfig {
        adjacency_variant: grin::AdjacencyVariant::Cosine,
        ..ModelConfig::default()
    };
    model.weights.reduction = grin::Reduction::Mean;
    assert_groups(&model, 6);
}

#[test]
fn detaching_target_changes_only_theta_gradients() {
    let mut rng = Rng::new(8);
    let net = StyleNet::new(ModelConfig::default(), &mut rng).unwrap();
    let (c, s) = grin::gradcheck::random_batch(&mut rng, 2, 16);
    let feats = net.encode_batch(&c, &s).unwrap();
    let mut detached = net.clone();
    detached.config.detach_target = true;

    let grads = |n: &StyleNet| {
        let mut tape = GradTape::new();
        let (loss, _) = n.loss_taped(&feats, &mut tape).unwrap();
        tape.backward(loss, 1.0).unwrap()
    };
    let (a, b) = (grads(&net), grads(&detached));
    for g in a.iter() {
        let other = b.get(&g.name).unwrap();
        if g.name.starts_with("decoder.") {
            assert_eq!(g.data, other.data, "{}", g.name);
        } else {
            let diff = g.data.iter().zip(&other.data).map(|(x, y)| relative_error(*x, *y)).fold(0.0, f64::max);
            assert!(diff > 1e-6, "{} unchanged by detaching", g.name);
        }
    }
}

#[test]
fn infer_mode_has_no_theta_gradients() {
    let model = ModelConfig {
        mode: Mode::Infer,
        ..ModelConfig::default()
    };
    let mut rng = Rng::new(9);
    let net = StyleNet::new(model, &mut rng).unwrap();
    let (c, s) = grin::gradcheck::random_batch(&mut rng, 2, 16);
    let feats = net.encode_batch(&c, &s).unwrap();
    let mut tape = GradTape::new();
    let (loss, _) = net.loss_taped(&feats, &mut tape).unwrap();
    let grads = tape.backward(loss, 1.0).unwrap();
    assert!(grads.names().iter().all(|n| n.starts_with("decoder.")));
    assert_eq!(tape.len(), 0);
}

#[test]
fn encoder_registers_no_parameters() {
    let net = StyleNet::new(ModelConfig::default(), &mut Rng::new(1)).unwrap();
    let (c, s) = grin::gradcheck::random_batch(&mut Rng::new(2), 1, 16);
    let feats = net.encode_batch(&c, &s).unwrap();
    let mut tape = GradTape::new();
    net.loss_taped(&feats, &mut tape).unwrap();
    // 4 decoder layers × (kernel, bias) + 2 graph layers.
    assert_eq!(tape.num_params(), 10);
}
