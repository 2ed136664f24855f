use kgcbm::data::{generate, DomainTag, Split, SynthConfig};
use kgcbm::eval::evaluate;
use kgcbm::trainer::{train, KnowledgeSource, TrainConfig};

#[test]
fn default_task_loss_falls_and_training_split_is_fit() {
    let synth = SynthConfig::default();
    let train_set = generate(&synth, DomainTag::InDomain, Split::Train).unwrap();
    let val_set = generate(&synth, DomainTag::InDomain, Split::Val).unwrap();
    let out = train(&TrainConfig::default(), &train_set, &val_set, None).unwrap();
    let epochs = &out.record.epochs;
    assert_eq!(epochs.len(), 30);
    assert!(epochs.last().unwrap().mean.total < epochs[0].mean.total);
    assert!(out.record.summary.best_epoch <= 30);
    let r = evaluate(&out.model, &train_set, Some(0), serde_json::Value::Null).unwrap();
    assert!(r.macro_f1 >= 0.95, "training split macro F1 {}", r.macro_f1);
}

#[test]
fn aligned_run_records_both_alignment_terms() {
    let synth = SynthConfig {
        n_train: 256,
        ..SynthConfig::default()
    };
    let train_set = generate(&synth, DomainTag::InDomain, Split::Train).unwrap();
    let val_set = generate(&synth, DomainTag::InDomain, Split::Val).unwrap();
    let config = TrainConfig {
        epochs: 2,
        knowledge: KnowledgeSource::Path("synthetic".into()),
        ..TrainConfig::default()
    };
    let out = train(&config, &train_set, &val_set, Some(&synth.importance())).unwrap();
    for e in &out.record.epochs {
        for s in &e.steps {
            assert!(s.l_high > 0.0 && s.l_low > 0.0);
            let total = s.l_c + s.l_y + s.l_high + s.l_low;
            assert!((s.total - total).abs() <= 1e-12);
        }
    }
}
