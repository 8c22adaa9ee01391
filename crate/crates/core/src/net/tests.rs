use super::layers::ConvShape;
use super::*;
use crate::dropout::{DropoutSpec, Phase};
use crate::gazefield::GazeMap;
use crate::tensor::{sample_uniform, RngStream, Tensor};

/// Miniature architecture with every layer type: five convs (two dropout
/// slots), four fully-connected layers, 12x16 input.
fn mini_arch() -> ArchConfig {
    ArchConfig {
        input_h: 12,
        input_w: 16,
        conv_filters: vec![2, 3, 2, 2, 2],
        conv_kernels: vec![5, 5, 5, 3, 3],
        conv_strides: vec![2, 2, 2, 1, 1],
        fc_sizes: vec![5, 4, 3, 1],
        dropout_slots: vec![0, 1],
    }
}

fn mini_frames(n: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::from_seed(seed);
    let t = sample_uniform(&[n, 12, 16, 1], &mut rng).unwrap();
    t.add_scalar(-0.5)
}

#[test]
fn zero_net_outputs_zero() {
    let net = PilotNetMini::zeroed(mini_arch()).unwrap();
    let frames = mini_frames(2, 31);
    let spec = DropoutSpec::uniform(0.0, Phase::Test);
    let mut rng = RngStream::from_seed(1);
    let out = net
        .forward(&frames, &spec, GazeInput::None, &mut rng)
        .unwrap();
    assert_eq!(out, vec![0.0, 0.0]);
}

#[test]
fn batch_output_length_matches() {
    let mut rng = RngStream::from_seed(2);
    let net = PilotNetMini::new(mini_arch(), &mut rng).unwrap();
    let frames = mini_frames(3, 32);
    let spec = DropoutSpec::uniform(0.1, Phase::Test);
    let out = net
        .forward(&frames, &spec, GazeInput::None, &mut rng)
        .unwrap();
    assert_eq!(out.len(), 3);
}

#[test]
fn train_phase_forward_is_seed_deterministic() {
    let mut rng = RngStream::from_seed(3);
    let net = PilotNetMini::new(mini_arch(), &mut rng).unwrap();
    let frames = mini_frames(2, 33);
    let spec = DropoutSpec::uniform(0.5, Phase::Train);
    let a = net
        .forward(&frames, &spec, GazeInput::None, &mut RngStream::new(9, 1))
        .unwrap();
    let b = net
        .forward(&frames, &spec, GazeInput::None, &mut RngStream::new(9, 1))
        .unwrap();
    assert_eq!(a, b);
    let c = net
        .forward(&frames, &spec, GazeInput::None, &mut RngStream::new(9, 2))
        .unwrap();
    assert_ne!(a, c);
}

#[test]
fn resolution_mismatch_is_shape_error() {
    let net = PilotNetMini::zeroed(mini_arch()).unwrap();
    let frames = Tensor::zeros(&[1, 10, 16, 1]);
    let spec = DropoutSpec::uniform(0.0, Phase::Test);
    let mut rng = RngStream::from_seed(1);
    assert!(matches!(
        net.forward(&frames, &spec, GazeInput::None, &mut rng),
        Err(crate::Error::InvalidShape(_))
    ));
}

#[test]
fn missing_gaze_is_config_error() {
    let net = PilotNetMini::zeroed(mini_arch()).unwrap();
    let frames = mini_frames(1, 34);
    let spec = DropoutSpec::gaze(0.5, Phase::Train);
    let mut rng = RngStream::from_seed(1);
    assert!(matches!(
        net.forward(&frames, &spec, GazeInput::None, &mut rng),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn perfect_targets_give_zero_loss_and_grads() {
    let mut rng = RngStream::from_seed(4);
    let net = PilotNetMini::new(mini_arch(), &mut rng).unwrap();
    let frames = mini_frames(3, 35);
    let spec = DropoutSpec::uniform(0.0, Phase::Test);
    let out = net
        .forward(&frames, &spec, GazeInput::None, &mut rng.clone())
        .unwrap();
    let (loss, grads) = net
        .backward(&frames, &out, &spec, GazeInput::None, &mut rng)
        .unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.0.iter().all(|&g| g == 0.0));
}

#[test]
fn mse_scales_quadratically_with_offset() {
    let mut rng = RngStream::from_seed(5);
    let net = PilotNetMini::new(mini_arch(), &mut rng).unwrap();
    let frames = mini_frames(2, 36);
    let spec = DropoutSpec::uniform(0.0, Phase::Test);
    let out = net
        .forward(&frames, &spec, GazeInput::None, &mut rng.clone())
        .unwrap();
    let t1: Vec<f32> = out.iter().map(|y| y + 1.0).collect();
    let t2: Vec<f32> = out.iter().map(|y| y + 2.0).collect();
    let (l1, _) = net
        .backward(&frames, &t1, &spec, GazeInput::None, &mut rng.clone())
        .unwrap();
    let (l2, _) = net
        .backward(&frames, &t2, &spec, GazeInput::None, &mut rng.clone())
        .unwrap();
    // f32 rounding of y + c leaves ~1e-7 relative slack.
    assert!((l1 - 1.0).abs() < 1e-5);
    assert!((l2 / l1 - 4.0).abs() < 1e-5);
}

#[test]
fn zeroed_keep_mask_pixel_silences_all_channels_after_conv1() {
    // Gaze test phase with dp = 1: K equals the resized normalized gaze, so a
    // zero gaze pixel forces a zero factor at that feature-map pixel.
    let mut rng = RngStream::from_seed(6);
    let net = PilotNetMini::new(mini_arch(), &mut rng).unwrap();
    let frames = mini_frames(1, 37);
    let slot0 = net.slot_dims()[0];
    let mut gaze_vals = vec![1.0f32; slot0.0 * slot0.1];
    let probe = (2, 3);
    gaze_vals[probe.0 * slot0.1 + probe.1] = 0.0;
    let gaze = GazeMap::new(slot0.0, slot0.1, gaze_vals).unwrap();
    let spec = DropoutSpec::gaze(1.0, Phase::Test);

    let factors = net
        .slot_factors(&spec, GazeInput::Shared(&gaze), 1, &mut rng)
        .unwrap();
    let acts = net.run_forward(frames.data(), 1, &factors);
    let shape = net.conv_shapes[0];
    let base = (probe.0 * shape.ow + probe.1) * shape.oc;
    for c in 0..shape.oc {
        assert_eq!(acts[0][base + c], 0.0, "channel {c} not silenced");
    }
    // A neighbouring pixel keeps nonzero activations.
    let other = ((probe.0 + 1) * shape.ow + probe.1 + 2) * shape.oc;
    assert!(acts[0][other..other + shape.oc].iter().any(|&v| v != 0.0));
}

/// f64 reference forward used by the finite-difference oracle. Mirrors the
/// layer semantics (same padding, ReLU, slot factors, final linear unit)
/// independently of the f32 kernels.
#[test]
fn gradients_match_central_finite_differences() {
    let arch = mini_arch();
    let n = 4;
    let gaze = crate::gazefield::gaussian_blob(12, 16, 9.0, 5.0, 3.0).unwrap();
    let spec = DropoutSpec::gaze(0.5, Phase::Train);

    let mut rng = RngStream::from_seed(71);
    let net = PilotNetMini::new(arch, &mut rng).unwrap();
    let frames = mini_frames(n, 1071);
    let mask_rng = RngStream::new(55, 71);
    let factors = net
        .slot_factors(&spec, GazeInput::Shared(&gaze), n, &mut mask_rng.clone())
        .unwrap();
    let out = {
        let acts = net.run_forward(frames.data(), n, &factors);
        acts.last().unwrap().clone()
    };
    let targets: Vec<f32> = out
        .iter()
        .enumerate()
        .map(|(i, y)| y + 2.0 + i as f32)
        .collect();

    let report = crate::testsupport::gradient_check(
        &net,
        &frames,
        &targets,
        &spec,
        Some(&gaze),
        &mask_rng,
        1e-3,
    )
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-3,
        "max relative gradient error {:.3e}",
        report.max_rel_err
    );
    assert!(report.checked > report.total * 9 / 10, "{report:?}");
    assert!(report.skipped < report.total / 10, "{report:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = RngStream::from_seed(8);
    let net = PilotNetMini::new(mini_arch(), &mut rng).unwrap();
    let spec = DropoutSpec::gaze(0.7, Phase::Train);
    let cp = Checkpoint::from_net(&net, Branch::Follow, spec, 42, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&cp, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.params, cp.params);
    assert_eq!(loaded.meta.seed, 42);
    assert_eq!(loaded.meta.epochs, 3);

    let restored = loaded.to_net().unwrap();
    let frames = mini_frames(2, 39);
    let tspec = DropoutSpec::uniform(0.0, Phase::Test);
    let a = net
        .forward(&frames, &tspec, GazeInput::None, &mut rng.clone())
        .unwrap();
    let b = restored
        .forward(&frames, &tspec, GazeInput::None, &mut rng.clone())
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_rejects_truncation_and_length_mismatch() {
    let net = PilotNetMini::zeroed(mini_arch()).unwrap();
    let cp = Checkpoint::from_net(
        &net,
        Branch::Follow,
        DropoutSpec::uniform(0.1, Phase::Train),
        1,
        1,
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    save_checkpoint(&cp, &path).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    let truncated = dir.path().join("trunc.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(
        load_checkpoint(&truncated),
        Err(crate::Error::Checkpoint(_))
    ));

    // Corrupt the declared tensor length in the header.
    let text = String::from_utf8_lossy(&bytes);
    let edited = text.replacen("\"len\":50", "\"len\":51", 1);
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, edited.as_bytes()).unwrap();
    assert!(matches!(
        load_checkpoint(&bad),
        Err(crate::Error::Checkpoint(_))
    ));
}

fn synthetic_samples(n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = RngStream::from_seed(seed);
    (0..n)
        .map(|_| {
            let frame: Vec<u8> = (0..12 * 16).map(|_| (rng.next_f32() * 255.0) as u8).collect();
            TrainSample {
                frame,
                gaze: None,
                steering_deg: rng.range_f32(-10.0, 10.0),
            }
        })
        .collect()
}

fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        branch: Branch::Follow,
        dropout: DropoutSpec::uniform(0.0, Phase::Train),
        epochs: 200,
        batch_size: 8,
        learning_rate: 1e-3,
        momentum: 0.9,
        optimizer: Optimizer::Adam,
        seed,
        augment: AugmentConfig {
            enabled: false,
            ..AugmentConfig::default()
        },
        arch: mini_arch(),
    }
}

#[test]
fn overfits_a_tiny_dataset() {
    let samples = synthetic_samples(32, 40);
    let (cp, trace) = train(&samples, &overfit_config(7)).unwrap();
    let final_mse = trace.last().unwrap().mse;
    assert!(final_mse < 1.0, "final training MSE {final_mse}");
    assert_eq!(cp.meta.epochs, 200);
}

#[test]
fn training_is_bit_reproducible() {
    let samples = synthetic_samples(16, 41);
    let mut cfg = overfit_config(9);
    cfg.epochs = 5;
    let (a, trace_a) = train(&samples, &cfg).unwrap();
    let (b, trace_b) = train(&samples, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(trace_a, trace_b);
}

#[test]
fn augmentation_changes_the_loss_trace() {
    let samples = synthetic_samples(16, 42);
    let mut plain = overfit_config(11);
    plain.epochs = 3;
    let mut augmented = plain.clone();
    augmented.augment.enabled = true;
    let (_, trace_a) = train(&samples, &plain).unwrap();
    let (_, trace_b) = train(&samples, &augmented).unwrap();
    assert_ne!(trace_a, trace_b);
}

#[test]
fn empty_dataset_is_an_error() {
    assert!(matches!(
        train(&[], &overfit_config(1)),
        Err(crate::Error::Dataset(_))
    ));
}

#[test]
fn gaze_mode_requires_maps_on_every_sample() {
    let samples = synthetic_samples(4, 43);
    let mut cfg = overfit_config(2);
    cfg.epochs = 1;
    cfg.dropout = DropoutSpec::gaze(0.5, Phase::Train);
    match train(&samples, &cfg) {
        Err(crate::Error::Dataset(msg)) => assert!(msg.contains("sample 0")),
        other => panic!("expected dataset error, got {other:?}"),
    }
}
