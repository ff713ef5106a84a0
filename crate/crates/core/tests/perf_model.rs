//! Profiling against live networks: which layers get timed, how the
//! data-gradient fraction falls out, and the timing table's file format.

use sdgp_core::Error;
use sdgp_core::config::{ModelSpec, build_network, resnet9ish_layers, tinynet_layers};
use sdgp_core::perf::{TimingProfile, profile_network};

#[test]
fn profile_times_every_conv_and_nothing_else() {
    let model = ModelSpec { layers: tinynet_layers(4) };
    let mut net = build_network(&model, (16, 16, 1), 4, None, 42).unwrap();
    let profile = profile_network(&mut net, (16, 16, 1), 8, 3, 7).unwrap();

    let names: Vec<&str> = profile.layers.iter().map(|l| l.layer.as_str()).collect();
    assert_eq!(names, ["conv1", "conv2", "conv3", "conv4"]);
    for l in &profile.layers {
        assert!(l.forward_s > 0.0, "{}: forward not timed", l.layer);
        assert!(l.backward_data_s > 0.0, "{}: data gradient not timed", l.layer);
        assert!(l.backward_weight_s > 0.0, "{}: weight gradient not timed", l.layer);
    }
    assert!(profile.total_s() > 0.0);
}

#[test]
fn profile_reaches_convs_inside_residual_blocks() {
    let model = ModelSpec { layers: resnet9ish_layers(4) };
    let mut net = build_network(&model, (16, 16, 1), 4, None, 1).unwrap();
    let profile = profile_network(&mut net, (16, 16, 1), 2, 3, 3).unwrap();

    // Three lead convs, two residual blocks of two convs each.
    let names: Vec<&str> = profile.layers.iter().map(|l| l.layer.as_str()).collect();
    assert_eq!(names, ["conv1", "conv2", "conv3", "conv4", "conv5", "conv6", "conv7"]);
}

#[test]
fn data_gradient_fraction_is_a_sane_share_of_conv_time() {
    let model = ModelSpec { layers: tinynet_layers(4) };
    let mut net = build_network(&model, (16, 16, 1), 4, None, 0).unwrap();
    let profile = profile_network(&mut net, (16, 16, 1), 16, 3, 0).unwrap();

    let f = profile.data_grad_fraction().unwrap();
    // One of three same-order conv passes; the exact share moves with the
    // machine, but far outside this band means mistimed passes.
    assert!(
        (0.05..0.7).contains(&f),
        "data-gradient fraction {f:.4} outside any plausible band"
    );
}

#[test]
fn a_convless_model_profiles_empty_and_has_no_fraction() {
    let model = ModelSpec {
        layers: vec![sdgp_core::config::LayerSpec::Linear { out_features: 3 }],
    };
    let mut net = build_network(&model, (4, 4, 1), 3, None, 0).unwrap();
    let profile = profile_network(&mut net, (4, 4, 1), 2, 3, 0).unwrap();
    assert!(profile.layers.is_empty());
    assert!(matches!(profile.data_grad_fraction().unwrap_err(), Error::Input(_)));
}

#[test]
fn profile_rejects_weak_measurement_setups() {
    let model = ModelSpec { layers: tinynet_layers(4) };
    let mut net = build_network(&model, (16, 16, 1), 4, None, 0).unwrap();
    // Fewer than 3 repeats gives no median worth trusting.
    assert!(matches!(
        profile_network(&mut net, (16, 16, 1), 2, 2, 0).unwrap_err(),
        Error::Config(_)
    ));
    assert!(matches!(
        profile_network(&mut net, (16, 16, 1), 0, 3, 0).unwrap_err(),
        Error::Config(_)
    ));
}

#[test]
fn timing_table_roundtrips_through_its_csv_file() {
    let model = ModelSpec { layers: tinynet_layers(4) };
    let mut net = build_network(&model, (16, 16, 1), 4, None, 9).unwrap();
    let profile = profile_network(&mut net, (16, 16, 1), 4, 3, 9).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("timing.csv");
    profile.write_csv(&path).unwrap();
    let back = TimingProfile::read_csv(&path).unwrap();

    assert_eq!(back.layers.len(), profile.layers.len());
    for (a, b) in back.layers.iter().zip(&profile.layers) {
        assert_eq!(a.layer, b.layer);
        // Stored as microsecond-precision milliseconds.
        assert!((a.forward_s - b.forward_s).abs() < 1e-9);
        assert!((a.backward_data_s - b.backward_data_s).abs() < 1e-9);
        assert!((a.backward_weight_s - b.backward_weight_s).abs() < 1e-9);
    }

    // A mangled numeric field is reported with its byte offset.
    let text = std::fs::read_to_string(&path).unwrap();
    let broken = text.replacen("conv2", "conv2,x", 1);
    std::fs::write(&path, &broken).unwrap();
    match TimingProfile::read_csv(&path).unwrap_err() {
        Error::Format { offset, message, .. } => {
            let line_start = broken.find("conv2").unwrap() as u64;
            assert_eq!(offset, line_start);
            assert!(message.contains("fields"), "{message}");
        }
        other => panic!("expected a format error, got {other}"),
    }
}
