use transmotion::data::{normalize_sample, synth_generate, CanonicalHeader, Dataset, FrameSettings, Modality, SynthConfig};
use transmotion::masking::{MaskMode, MaskSpec};
use transmotion::model::checkpoint::Checkpoint;
use transmotion::model::{LossWeights, Model, ModelConfig, Target};
use transmotion::tensor::{relative_error, Graph, Tensor};
use transmotion::training::{prepare_samples, pretrain, AdamState, EgoPolicy, TrainConfig, Trainer};

fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        layers_stage1: 1,
        layers_stage2: 1,
        ff_mult: 2,
        k: 2,
        init_seed: seed,
        ..ModelConfig::default()
    }
}

/// Every parameter of the full model against central differences, on two
/// agents with three observed frames. Up to 12 entries per tensor are probed.
#[test]
fn loss_gradient_matches_finite_differences_for_every_parameter() {
    let settings = FrameSettings::new(0.6, 0.6, 5.0).unwrap();
    let cfg = SynthConfig {
        agents: [2, 2],
        settings,
        boxes: true,
        image: true,
        ..SynthConfig::default()
    };
    let scene = &synth_generate(4, 1, &cfg).unwrap()[0];
    let (sample, _) = normalize_sample(scene, &scene.agents[0].agent_id).unwrap();
    let model = Model::new(tiny(4)).unwrap();
    let toks = model.tokenize(&sample, &Modality::ALL).unwrap();
    let target = Target::from_sample(&sample).unwrap();

    let eval = |id: usize, p: &Tensor| -> (f64, Tensor) {
        let g = Graph::new();
        let pv = g.leaf(p.clone());
        g.bind_param(id, pv);
        let out = model.forward(&g, &toks).unwrap();
        let loss = model.loss(&g, &out, &target, LossWeights::default()).unwrap().total;
        let value = g.item(loss);
        (value, g.backward(loss).unwrap().get(pv).unwrap().clone())
    };
    let h = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    for id in model.store.ids().collect::<Vec<_>>() {
        let p0 = model.store.get(id).clone();
        let (_, analytic) = eval(id.index(), &p0);
        let step = (p0.len() / 12).max(1);
        for i in (0..p0.len()).step_by(step) {
            let mut a = p0.clone();
            a.data_mut()[i] += h;
            let mut b = p0.clone();
            b.data_mut()[i] -= h;
            let numeric = (eval(id.index(), &a).0 - eval(id.index(), &b).0) / (2.0 * h);
            let an = analytic.data()[i];
            // Exactly-zero gradients (e.g. a shift every softmax row ignores)
            // only leave finite-difference noise.
            if an.abs() < 1e-12 && numeric.abs() < 1e-8 {
                continue;
            }
            let err = relative_error(an, numeric);
            if err > worst.0 {
                worst = (err, format!("{}[{i}]: {an:e} vs {numeric:e}", model.store.name(id)));
            }
        }
    }
    assert!(worst.0 < 1e-4, "worst {:.2e} at {}", worst.0, worst.1);
}

/// A full-batch step repeated on the same samples must reduce the loss.
#[test]
fn frozen_batch_loss_decreases_for_most_seeds() {
    let scfg = SynthConfig {
        agents: [1, 2],
        ..SynthConfig::default()
    };
    let mut decreased = 0;
    let mut report = Vec::new();
    for seed in 0..10u64 {
        let scenes = synth_generate(200 + seed, 2, &scfg).unwrap();
        let cfg = TrainConfig {
            epochs: 11,
            base_lr: 1e-3,
            decay_at_fraction: 0.99,
            seed,
            mask: MaskSpec::none(),
            ego: EgoPolicy::First,
            model: tiny(seed),
            ..TrainConfig::default()
        };
        let samples = prepare_samples(&scenes, &cfg.settings, cfg.window_stride, cfg.ego).unwrap();
        let cfg = TrainConfig {
            batch_size: samples.len(),
            ..cfg
        };
        let model = Model::new(cfg.model.clone()).unwrap();
        let ckpt = Checkpoint {
            optimizer: Some(AdamState::new(&model.store, cfg.adam)),
            model,
            meta: Default::default(),
        };
        let mut t = Trainer::new(ckpt, &samples, cfg).unwrap();
        t.run().unwrap();
        let (first, last) = (t.log[0].total, t.log[10].total);
        decreased += usize::from(last < first);
        report.push(format!("{first:.3}->{last:.3}"));
    }
    assert!(decreased >= 8, "decreased in {decreased}/10: {report:?}");
}

/// Masked training still fits the overfit set: its final loss stays within
/// twice the unmasked run's.
#[test]
fn dynamic_masking_keeps_training_viable() {
    let scfg = SynthConfig {
        agents: [1, 2],
        ..SynthConfig::default()
    };
    let data = Dataset::new(CanonicalHeader::new("synth", "overfit"), synth_generate(300, 12, &scfg).unwrap());
    let run = |mode| {
        let cfg = TrainConfig {
            epochs: 60,
            base_lr: 2e-3,
            batch_size: 4,
            ego: EgoPolicy::First,
            mask: MaskSpec {
                mode,
                ..MaskSpec::default()
            },
            model: ModelConfig {
                hidden_dim: 32,
                ..tiny(3)
            },
            ..TrainConfig::default()
        };
        pretrain(&[data.clone()], &cfg).unwrap().log
    };
    let none = run(MaskMode::None);
    let dynamic = run(MaskMode::Dynamic);
    let tail = |log: &[transmotion::training::LossRow]| log[log.len() - 5..].iter().map(|r| r.total).sum::<f64>() / 5.0;
    let (n, d) = (tail(&none), tail(&dynamic));
    assert!(n < 0.5 * none[0].total, "unmasked run did not converge: {} -> {n}", none[0].total);
    assert!(d < 0.5 * dynamic[0].total, "masked run did not converge: {} -> {d}", dynamic[0].total);
    assert!(d <= 2.0 * n, "masked final loss {d} vs unmasked {n}");
}
