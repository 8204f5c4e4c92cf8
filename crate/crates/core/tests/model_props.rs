//! Network shape contract and op counting against the instrumented tape.

use bccseg_core::model::{Mode, Model, ModelConfig, OUTPUT_STRIDE};
use bccseg_core::opcount::count_ops;
use bccseg_core::tensor::{Shape, Tape, Tensor};
use proptest::prelude::*;

fn ramp(shape: [usize; 4]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, c, y, x| (((c * 31 + y * 7 + x * 3) % 255) as f32) / 127.5 - 1.0)
}

#[test]
fn full_size_forward_keeps_input_dimensions() {
    let mut model = Model::build(ModelConfig::default()).unwrap();
    model.set_mode(Mode::Eval);
    let x = ramp([1, 3, 432, 576]);
    let features = model.encoder_forward(&x).unwrap();
    assert_eq!((features.shape().h, features.shape().w), (27, 36));
    let logits = model.forward(&x).unwrap();
    assert_eq!(logits.shape(), Shape::new(1, 2, 432, 576));
    assert!(logits.is_finite());
    let masks = model.predict_mask(&x).unwrap();
    assert_eq!((masks[0].1.width(), masks[0].1.height()), (576, 432));
}

fn tape_macs(config: &ModelConfig, h: usize, w: usize) -> u64 {
    let mut model = Model::build(config.clone()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(ramp([1, 3, h, w]));
    model.forward_on(&mut tape, x).unwrap();
    tape.macs()
}

#[test]
fn count_ops_matches_instrumented_forward() {
    let configs = [
        ModelConfig::default(),
        ModelConfig {
            stem_channels: 8,
            block_channels: vec![12, 20],
            middle_blocks: 0,
            aspp_channels: 16,
            aspp_rates: [2, 3, 5],
            ..ModelConfig::default()
        },
    ];
    for config in &configs {
        for (h, w) in [(144, 192), (64, 48), (16, 16)] {
            let report = count_ops(config, h, w).unwrap();
            assert_eq!(report.total_macs, tape_macs(config, h, w), "{config:?} at {h}x{w}");
            assert_eq!(report.total_params as usize, config.parameter_count() - bn_params(config));
        }
    }
}

/// Batch-norm scale and shift are trainable but not convolution weights.
fn bn_params(config: &ModelConfig) -> usize {
    let model = Model::build(config.clone()).unwrap();
    model
        .params()
        .iter()
        .filter(|p| p.trainable && (p.name.ends_with(".gamma") || p.name.ends_with(".beta")))
        .map(|p| p.tensor.numel())
        .sum()
}

#[test]
fn aspp_rates_do_not_change_cost() {
    let base = count_ops(&ModelConfig::default(), 432, 576).unwrap();
    for rates in [[1, 2, 3], [6, 12, 18], [12, 24, 36]] {
        let cfg = ModelConfig {
            aspp_rates: rates,
            ..ModelConfig::default()
        };
        assert_eq!(count_ops(&cfg, 432, 576).unwrap().total_macs, base.total_macs, "{rates:?}");
    }
    let features = [432 / OUTPUT_STRIDE, 576 / OUTPUT_STRIDE];
    for rate in [6, 12, 18] {
        let row = base.rows.iter().find(|r| r.name.ends_with(&format!("r{rate}"))).unwrap();
        assert_eq!([row.out_h, row.out_w], features);
        assert_eq!(row.dilation, rate);
    }
}

#[test]
fn separable_rows_follow_the_closed_form() {
    let report = count_ops(&ModelConfig::default(), 144, 192).unwrap();
    assert!(!report.separable.is_empty());
    for row in &report.separable {
        assert!((row.ratio - row.closed_form_ratio).abs() < 1e-12, "{}", row.name);
        assert!(row.separable_macs < row.regular_macs);
    }
}

#[test]
fn eval_forward_is_repeatable_and_batch_independent() {
    let mut model = Model::build(ModelConfig::default()).unwrap();
    model.set_mode(Mode::Eval);
    let one = ramp([1, 3, 32, 48]);
    let two = Tensor::from_fn([2, 3, 32, 48], |_, c, y, x| one.at(0, c, y, x));
    let a = model.forward(&one).unwrap();
    let b = model.forward(&two).unwrap();
    assert_eq!(a, model.forward(&one).unwrap());
    assert_eq!(a.data(), &b.data()[..a.numel()]);
    assert_eq!(a.data(), &b.data()[a.numel()..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn config_json_round_trips(
        stem in 1usize..64,
        blocks in prop::collection::vec(1usize..128, 1..=3),
        middle in 0usize..8,
        aspp in 1usize..128,
        r0 in 1usize..10,
        seed in any::<u64>(),
    ) {
        let config = ModelConfig {
            stem_channels: stem,
            block_channels: blocks,
            middle_blocks: middle,
            aspp_channels: aspp,
            aspp_rates: [r0, 2 * r0, 3 * r0],
            seed,
            ..ModelConfig::default()
        };
        let text = serde_json::to_string(&config).unwrap();
        prop_assert_eq!(ModelConfig::from_json(&text).unwrap(), config.clone());
        prop_assert_eq!(Model::build(config.clone()).unwrap().parameter_count(), config.parameter_count());
    }

    #[test]
    fn non_multiple_of_stride_is_rejected(h in 1usize..100, w in 1usize..100) {
        prop_assume!(h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0);
        let model = Model::build(ModelConfig::default()).unwrap();
        prop_assert!(model.check_input(Shape::new(1, 3, h, w)).is_err());
    }
}
