use super::*;
use crate::autograd::gradcheck_compare;
use crate::losses::mine_triplets;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn images(config: &ModelConfig, labels: &[usize], seed: u64) -> Vec<ImageSample> {
    let b = &config.backbone;
    let mut r = rng(seed);
    labels
        .iter()
        .enumerate()
        .map(|(i, &identity)| ImageSample {
            pixels: Tensor::uniform(&[b.input_height, b.input_width, b.input_channels], 0.0, 1.0, &mut r),
            identity,
            camera: i % 2,
        })
        .collect()
}

fn micro(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        ablation,
        ..ModelConfig::micro()
    }
}

const ALL: [Ablation; 4] = [Ablation::None, Ablation::AvgPool, Ablation::MaxPool, Ablation::FcHead];

#[test]
fn ablation_names_round_trip() {
    for a in ALL {
        assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        assert_eq!(a.to_string(), a.name());
    }
    assert!(matches!("attention".parse::<Ablation>(), Err(Error::Config(_))));
}

#[test]
fn default_config_is_valid() {
    let c = ModelConfig::default();
    c.validate().unwrap();
    assert_eq!((c.q, c.glimpses, c.steps.clone()), (64, 8, vec![2, 4, 8]));
    assert_eq!(c.embedding_dim(), 192);
    ModelConfig::micro().validate().unwrap();
}

#[test]
fn bad_steps_are_config_errors() {
    let c = ModelConfig {
        steps: vec![2, 9],
        ..ModelConfig::default()
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = ModelConfig {
        steps: vec![],
        ..ModelConfig::default()
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn embeddings_are_unit_norm_for_every_head() {
    for a in ALL {
        let config = micro(a);
        let model = CanModel::new(config.clone(), 3, &mut rng(1)).unwrap();
        for img in images(&config, &[0, 1, 2], 4) {
            let e = model.embed(&img).unwrap();
            assert_eq!(e.dim(), config.embedding_dim());
            assert!((e.values.norm() - 1.0).abs() < 1e-12, "{a}");
        }
    }
}

#[test]
fn parameter_layout() {
    let model = CanModel::new(ModelConfig::micro(), 5, &mut rng(0)).unwrap();
    let params = model.params();
    assert_eq!(model.backbone_param_count(), 4);
    assert_eq!(params.len(), 4 + 17 + 1);
    assert_eq!(params.last().unwrap().name, "identity_head.weight");
    assert_eq!(params.last().unwrap().tensor.shape(), &[6, 5]);
    let fc = CanModel::new(micro(Ablation::FcHead), 5, &mut rng(0)).unwrap();
    assert_eq!(fc.params().len(), 4 + 4 + 1);
    assert_eq!(fc.params()[4].name, "fc_head.fc0.weight");
}

#[test]
fn flat_values_round_trip() {
    let mut model = CanModel::new(ModelConfig::micro(), 2, &mut rng(0)).unwrap();
    let flat = model.flat_values();
    assert_eq!(flat.len(), model.param_count());
    let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
    model.set_flat_values(&doubled);
    assert_eq!(model.flat_values(), doubled);
}

#[test]
fn pretrained_classifier_is_discarded() {
    let config = ModelConfig::micro();
    let mut backbone = BackboneParams::new(&config.backbone, &mut rng(0)).unwrap();
    backbone.attach_classifier(&config.backbone, 4, &mut rng(1));
    let convs = backbone.convs.clone();
    let model = CanModel::with_backbone(config, backbone, 4, &mut rng(2)).unwrap();
    assert!(model.backbone.classifier.is_none());
    assert_eq!(model.backbone.convs, convs);
}

#[test]
fn wrong_image_size_is_config_error() {
    let model = CanModel::new(ModelConfig::micro(), 2, &mut rng(0)).unwrap();
    let img = images(&ModelConfig::default(), &[0], 0).remove(0);
    assert!(matches!(model.embed(&img), Err(Error::Config(_))));
}

#[test]
fn glimpse_traces() {
    let config = ModelConfig::micro();
    let img = images(&config, &[0], 1).remove(0);
    let model = CanModel::new(config.clone(), 2, &mut rng(0)).unwrap();
    let trace = model.glimpse_trace(&img).unwrap();
    assert_eq!(trace.hidden_states.len(), 3);
    assert_eq!(trace.attention_maps.len(), 3);
    let avg = CanModel::new(micro(Ablation::AvgPool), 2, &mut rng(0)).unwrap();
    assert!(avg.glimpse_trace(&img).unwrap().attention_maps.is_empty());
    let fc = CanModel::new(micro(Ablation::FcHead), 2, &mut rng(0)).unwrap();
    assert!(matches!(fc.glimpse_trace(&img), Err(Error::Usage(_))));
}

#[test]
fn embedding_matches_stagewise_value_api() {
    use crate::attention::{build_embedding, run_glimpses};
    use crate::backbone::extract_feature_cube;
    let config = ModelConfig::micro();
    let model = CanModel::new(config.clone(), 2, &mut rng(3)).unwrap();
    let img = images(&config, &[0], 2).remove(0);
    let cube = extract_feature_cube(&img, &config.backbone, &model.backbone).unwrap();
    let Head::Recurrent(att) = &model.head else { unreachable!() };
    let trace = run_glimpses(&cube, config.glimpses, att).unwrap();
    let staged = build_embedding(&trace, &config.steps).unwrap();
    assert_eq!(model.embed(&img).unwrap().values, staged.values);
}

fn fixture(config: &ModelConfig, seed: u64) -> (CanModel, Vec<ImageSample>, TripletBatch) {
    let labels = [0, 0, 1, 1, 2, 2];
    let model = CanModel::new(config.clone(), 3, &mut rng(seed)).unwrap();
    let batch = images(config, &labels, seed + 100);
    let triples = mine_triplets(&labels, &mut rng(seed + 200)).unwrap();
    (model, batch, triples)
}

#[test]
fn execution_modes_agree_bitwise() {
    let (model, batch, triples) = fixture(&ModelConfig::micro(), 1);
    let seq = model.batch_gradient(&batch, &triples, 0.3, false, Execution::Sequential).unwrap();
    let par = model.batch_gradient(&batch, &triples, 0.3, false, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn report_matches_forward_only_loss() {
    for a in ALL {
        let (model, batch, triples) = fixture(&micro(a), 2);
        let g = model.batch_gradient(&batch, &triples, 0.3, false, Execution::Sequential).unwrap();
        let r = model.batch_loss(&batch, &triples, 0.3).unwrap();
        assert_eq!(g.report, r);
        assert_eq!(g.grads.len(), model.params().len());
        for (grad, p) in g.grads.iter().zip(model.params()) {
            assert_eq!(grad.shape(), p.tensor.shape(), "{}", p.name);
        }
    }
}

#[test]
fn frozen_backbone_has_zero_gradient() {
    let (model, batch, triples) = fixture(&ModelConfig::micro(), 3);
    let full = model.batch_gradient(&batch, &triples, 0.3, false, Execution::Sequential).unwrap();
    let frozen = model.batch_gradient(&batch, &triples, 0.3, true, Execution::Sequential).unwrap();
    let nb = model.backbone_param_count();
    assert!(frozen.grads[..nb].iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(full.grads[..nb].iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    assert_eq!(full.grads[nb..], frozen.grads[nb..]);
}

fn pipeline_rel_error(config: &ModelConfig, seed: u64) -> f64 {
    let (model, batch, triples) = fixture(config, seed);
    let g = model.batch_gradient(&batch, &triples, 0.3, false, Execution::Sequential).unwrap();
    let analytic = Tensor::vector(g.grads.iter().flat_map(|t| t.data().iter().copied()).collect());
    let x = Tensor::vector(model.flat_values());
    let eval = |p: &Tensor| {
        let mut m = model.clone();
        m.set_flat_values(p.data());
        m.batch_loss(&batch, &triples, 0.3).map(|r| r.multi)
    };
    let check = gradcheck_compare(eval, &x, &analytic, 1e-5).unwrap();
    assert_eq!(check.non_finite, 0);
    check.max_rel_error
}

#[test]
fn full_pipeline_matches_finite_differences() {
    for a in ALL {
        let err = pipeline_rel_error(&micro(a), 5);
        assert!(err < 1e-4, "{a}: {err}");
    }
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    let config = BackboneConfig::micro();
    let mut params = BackboneParams::new(&config, &mut rng(0)).unwrap();
    params.attach_classifier(&config, 3, &mut rng(1));
    let model_config = ModelConfig::micro();
    let batch = images(&model_config, &[0, 1, 2, 1], 6);
    let g = classifier_batch_gradient(&config, &params, &batch, Execution::Sequential).unwrap();
    assert_eq!(g.grads.len(), params.params().len());
    let analytic = Tensor::vector(g.grads.iter().flat_map(|t| t.data().iter().copied()).collect());
    let eval = |p: &Tensor| {
        let mut m = params.clone();
        m.set_flat_values(p.data());
        classifier_batch_gradient(&config, &m, &batch, Execution::Sequential).map(|r| r.loss)
    };
    let check = gradcheck_compare(eval, &Tensor::vector(params.flat_values()), &analytic, 1e-5).unwrap();
    assert!(check.max_rel_error < 1e-4, "{check:?}");
    let par = classifier_batch_gradient(&config, &params, &batch, Execution::Parallel).unwrap();
    assert_eq!(par, g);
}

#[test]
fn single_class_classifier_has_zero_loss() {
    let config = BackboneConfig::micro();
    let mut params = BackboneParams::new(&config, &mut rng(0)).unwrap();
    params.attach_classifier(&config, 1, &mut rng(1));
    let batch = images(&ModelConfig::micro(), &[0, 0], 6);
    let g = classifier_batch_gradient(&config, &params, &batch, Execution::Sequential).unwrap();
    assert_eq!(g.loss, 0.0);
    assert_eq!(g.correct, 2);
}
