use semimamba::backbones::{Network, NetworkSpec, Variant};
use semimamba::data::{split, synth_samples, Splits, SynthConfig};
use semimamba::evaluation::evaluate_testset;
use semimamba::objectives::supervised_loss;
use semimamba::trainer::{train_on, BatchComposer, CheckpointRecord, Precision, Sgd, TrainConfig, RECORD_FILE};

fn splits() -> Splits {
    let cfg = SynthConfig { cases: 8, slices_per_case: 3, size: 32, seed: 2, ..SynthConfig::default() };
    let (samples, manifest) = synth_samples(&cfg).unwrap();
    split(&samples, &manifest).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        iterations: 8,
        batch_size: 4,
        labelled_per_batch: 2,
        validate_every: 2,
        seed: 3,
        network1: NetworkSpec::debug(Variant::MambaUnet, 4),
        network2: NetworkSpec::debug(Variant::CnnUnet, 4),
        projector_grid: 4,
        learning_rate: 0.05,
        ..TrainConfig::default()
    }
}

#[test]
fn supervised_only_matches_independent_training() {
    let data = splits();
    let cfg = TrainConfig { semi: false, contra: false, precision: Precision::F64, ..config() };
    let tmp = tempfile::tempdir().unwrap();
    let (outcome, _) = train_on(&cfg, &data, tmp.path()).unwrap();

    let net1 = Network::new(&cfg.network1, cfg.seed, cfg.precision.dtype()).unwrap();
    let net2 = Network::new(&cfg.network2, cfg.seed + 1, cfg.precision.dtype()).unwrap();
    let mut opts = [
        Sgd::new(net1.vars(), cfg.learning_rate, cfg.momentum, cfg.weight_decay),
        Sgd::new(net2.vars(), cfg.learning_rate, cfg.momentum, cfg.weight_decay),
    ];
    let mut composer = BatchComposer::new(&data.labelled, &data.unlabelled, &cfg).unwrap();
    for row in &outcome.log {
        let batch = composer.next_batch().unwrap();
        assert!(batch.unlabelled.is_none());
        let mut losses = [0.0; 2];
        for (k, net) in [&net1, &net2].into_iter().enumerate() {
            let (logits, _) = net.forward_mode(&batch.labelled, true).unwrap();
            let loss = supervised_loss(logits.tensor(), &batch.labels).unwrap();
            losses[k] = loss.to_scalar::<f64>().unwrap();
            opts[k].step(&loss.backward().unwrap()).unwrap();
        }
        assert!((row.sup1 - losses[0]).abs() <= 1e-9, "step {}: {} vs {}", row.iteration, row.sup1, losses[0]);
        assert!((row.sup2 - losses[1]).abs() <= 1e-9, "step {}: {} vs {}", row.iteration, row.sup2, losses[1]);
        assert_eq!((row.semi1, row.semi2, row.contra), (0.0, 0.0, 0.0));
    }
}

#[test]
fn best_record_only_improves_and_matches_evaluation() {
    let data = splits();
    let cfg = config();
    let tmp = tempfile::tempdir().unwrap();
    let (outcome, _) = train_on(&cfg, &data, tmp.path()).unwrap();
    assert!(!outcome.improvements.is_empty());
    for w in outcome.improvements.windows(2) {
        assert!(w[1].val_dice_f1 >= w[0].val_dice_f1);
        assert!(w[1].iteration > w[0].iteration);
    }
    assert_eq!(outcome.improvements.last(), Some(&outcome.record));
    let stored: CheckpointRecord =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join(RECORD_FILE)).unwrap()).unwrap();
    assert_eq!(stored, outcome.record);

    let best = Network::load(outcome.record.checkpoint_f1.as_ref().unwrap()).unwrap();
    let eval = evaluate_testset(&best, &data.validation, 4, 3).unwrap();
    assert!((eval.aggregate.dice - outcome.record.val_dice_f1).abs() <= 1e-12);
    let logged: Vec<f64> = outcome.log.iter().filter_map(|r| r.val_dice_f1).collect();
    assert_eq!(logged.len(), cfg.iterations / cfg.validate_every);
    assert!(logged.iter().all(|&d| d <= outcome.record.val_dice_f1));
}

#[test]
fn rerun_writes_identical_checkpoints() {
    let data = splits();
    let cfg = TrainConfig { iterations: 4, ..config() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, _) = train_on(&cfg, &data, a.path()).unwrap();
    let (rb, _) = train_on(&cfg, &data, b.path()).unwrap();
    assert_eq!(ra.log, rb.log);
    let bytes = |r: &CheckpointRecord| std::fs::read(r.checkpoint_f1.as_ref().unwrap()).unwrap();
    assert_eq!(bytes(&ra.record), bytes(&rb.record));
}
