use tokenmix_core::arch::{Model, ModelConfig, Scale};
use tokenmix_core::checkpoint::{load_model, Checkpoint};
use tokenmix_core::nn::Init;

#[test]
fn every_preset_builds_forwards_and_round_trips() {
    for config in ModelConfig::standard_presets() {
        let name = config.model_name();
        let model = Model::build(&config, 42).unwrap();
        let x = Init::new(1).uniform(&[1, 3, 64, 64], -1.0, 1.0);
        let feats = model.forward_features(&x).unwrap();
        for (s, f) in feats.iter().enumerate() {
            let side = (64 / 4) >> s;
            assert_eq!(f.shape(), [1, config.widths[s], side, side], "{name} stage {s}");
        }
        let logits = model.forward_classify(&x).unwrap();
        assert_eq!(logits.shape(), [1, config.num_classes]);
        assert!(logits.data().iter().all(|v| v.is_finite()), "{name}");

        let bytes = Checkpoint::from_module(&model).to_bytes().unwrap();
        drop(feats);
        let loaded = load_model(&config, &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        drop(bytes);
        assert_eq!(loaded.forward_classify(&x).unwrap(), logits, "{name}");
    }
}

#[test]
fn resolution_contract_for_all_presets() {
    for config in ModelConfig::standard_presets() {
        let model = Model::build(&config, 0).unwrap();
        for size in [64, 128, 224] {
            let trace = model.shape_trace(size);
            assert_eq!(trace[0].1[2], size / 4);
            for s in 0..4 {
                let [_, c, h, w] = trace[s + 1].1;
                assert_eq!((c, h, w), (config.widths[s], (size / 4) >> s, (size / 4) >> s));
            }
        }
    }
}

#[test]
fn micro_feature_maps_follow_the_trace_at_every_size() {
    for config in ModelConfig::standard_presets().into_iter().filter(|c| c.name.starts_with(Scale::Micro.name())) {
        let model = Model::build(&config, 3).unwrap();
        for size in [128, 224] {
            let x = Init::new(size as u64).uniform(&[1, 3, size, size], -1.0, 1.0);
            let feats = model.forward_features(&x).unwrap();
            let trace = model.shape_trace(size);
            for (s, f) in feats.iter().enumerate() {
                assert_eq!(f.shape(), trace[s + 1].1, "{} at {size}", config.name);
            }
        }
    }
}
