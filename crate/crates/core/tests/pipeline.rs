use catflow_core::data::{DatasetKind, ToyDatasetSpec};
use catflow_core::surjections::PosteriorKind;
use catflow_core::train::{evaluate, Metric, Model, ModelKind, TrainConfig, Trainer};
use catflow_core::rng_from_seed;
use proptest::prelude::*;

fn tiny(model: ModelKind) -> TrainConfig {
    TrainConfig {
        model,
        dataset: ToyDatasetSpec::eight_gaussians(6, 256, 64, 3),
        epochs: 2,
        batch_size: 64,
        steps: 12,
        hidden: 16,
        blocks: 1,
        flow_layers: 2,
        iwbo_samples: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_same_trajectory() {
    for kind in [ModelKind::ArgmaxFlow, ModelKind::MultinomialDiffusion] {
        let config = tiny(kind);
        let (train, _) = config.dataset.generate().unwrap();
        let run = || {
            let mut t = Trainer::new(config.clone()).unwrap();
            t.fit(&train, |_| {}).unwrap();
            (t.log().to_vec(), t.model.params().clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0, "{kind:?}");
        assert_eq!(a.1, b.1, "{kind:?}");
        let mut other = config.clone();
        other.seed += 1;
        let mut t = Trainer::new(other).unwrap();
        t.fit(&train, |_| {}).unwrap();
        assert_ne!(t.log(), &a.0[..], "{kind:?}");
    }
}

#[test]
fn uniform_reference_is_d_log_k() {
    let mut config = tiny(ModelKind::Uniform);
    config.dataset = ToyDatasetSpec::char_corpus(5, 10, 40, 0);
    let (_, val) = config.dataset.generate().unwrap();
    let model = Model::build(&config, &mut rng_from_seed(0)).unwrap();
    let r = evaluate(&model, &val, Metric::Bpd, 1, &mut rng_from_seed(1)).unwrap();
    assert!((r.nll - 5.0 * 27f64.ln()).abs() < 1e-12);
    assert!((r.bpd - 27f64.log2()).abs() < 1e-12);
}

#[test]
fn samples_have_the_model_shape() {
    for kind in [ModelKind::ArgmaxFlow, ModelKind::MultinomialDiffusion, ModelKind::Uniform] {
        let config = tiny(kind);
        let model = Model::build(&config, &mut rng_from_seed(5)).unwrap();
        let x = model.sample(37, &mut rng_from_seed(6)).unwrap();
        assert_eq!((x.batch(), x.dims(), x.classes()), (37, 2, 6), "{kind:?}");
        assert!(x.as_slice().iter().all(|&v| v < 6));
    }
}

#[test]
fn evaluation_rejects_mismatched_data() {
    let config = tiny(ModelKind::MultinomialDiffusion);
    let model = Model::build(&config, &mut rng_from_seed(0)).unwrap();
    let (_, other) = ToyDatasetSpec::char_corpus(2, 1, 8, 0).generate().unwrap();
    assert!(evaluate(&model, &other, Metric::Elbo, 1, &mut rng_from_seed(0)).is_err());
    assert!(evaluate(&model, &other, Metric::Iwbo, 1, &mut rng_from_seed(0)).is_err());
}

#[test]
fn external_spec_keeps_shape_only() {
    let spec = ToyDatasetSpec::external(5, 7);
    assert_eq!((spec.classes, spec.dims()), (5, 7));
    assert!(spec.generate().is_err());
    let config = TrainConfig { dataset: spec, ..TrainConfig::default() };
    assert_eq!(TrainConfig::from_text(&config.to_text()).unwrap(), config);
}

#[test]
fn config_errors_name_the_line() {
    let err = TrainConfig::from_text("epochs = 3\nbogus = 1\n").unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
    assert!(TrainConfig::from_text("epochs = 3\nepochs = 4\n").is_err());
    assert!(TrainConfig::from_text("lr = -1\n").is_err());
    assert!(TrainConfig::from_text("epochs 3\n").is_err());
    let c = TrainConfig::from_text("# comment\n\nT = 40  # steps\nmodel = argmax-flow\n").unwrap();
    assert_eq!((c.steps, c.model), (40, ModelKind::ArgmaxFlow));
}

fn arb_config() -> impl Strategy<Value = TrainConfig> {
    let kinds = prop_oneof![
        Just(ModelKind::ArgmaxFlow),
        Just(ModelKind::MultinomialDiffusion),
        Just(ModelKind::Uniform)
    ];
    let posteriors = prop_oneof![
        Just(PosteriorKind::Softplus),
        Just(PosteriorKind::Gumbel),
        Just(PosteriorKind::GumbelThreshold),
        Just(PosteriorKind::UniformDequant),
        Just(PosteriorKind::VariationalDequant)
    ];
    let data = (any::<bool>(), 2usize..64, 1usize..40, 1usize..10_000, any::<u64>(), -10.0f64..0.0, 0.1f64..10.0);
    let knobs = (1usize..500, 1e-6f64..1.0, 0.5f64..=1.0, any::<u64>(), 1usize..4000, 0.0f64..0.5, 1usize..200);
    (kinds, posteriors, data, knobs, any::<bool>()).prop_map(|(model, posterior, d, k, f32_params)| {
        let (corpus, classes, length, n, data_seed, lo, width) = d;
        let mut dataset = if corpus {
            ToyDatasetSpec::char_corpus(length, n, n / 3, data_seed)
        } else {
            ToyDatasetSpec::eight_gaussians(classes, n, n / 3, data_seed)
        };
        dataset.range = (lo, lo + width);
        TrainConfig {
            model,
            posterior,
            dataset,
            epochs: k.0,
            lr: k.1,
            lr_decay: k.2,
            seed: k.3,
            steps: k.4,
            cosine_s: k.5,
            hidden: k.6,
            f32_params,
            ..TrainConfig::default()
        }
    })
}

proptest! {
    #[test]
    fn config_text_roundtrips(config in arb_config()) {
        let text = config.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        prop_assert_eq!(&back, &config);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn generated_data_is_in_range_and_reproducible(seed in any::<u64>(), classes in 2usize..20, corpus in any::<bool>()) {
        let spec = if corpus {
            ToyDatasetSpec::char_corpus(9, 30, 10, seed)
        } else {
            ToyDatasetSpec::eight_gaussians(classes, 30, 10, seed)
        };
        let (t, v) = spec.generate().unwrap();
        prop_assert_eq!((t.batch(), v.batch()), (30, 10));
        prop_assert!(t.as_slice().iter().chain(v.as_slice()).all(|&x| x < spec.classes));
        prop_assert_eq!(spec.generate().unwrap(), (t, v));
        prop_assert_eq!(spec.kind == DatasetKind::CharCorpus, corpus);
    }
}
