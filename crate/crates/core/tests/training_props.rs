use ttt4rec_core::checkpoint;
use ttt4rec_core::data::{
    planted_successor_dataset, split_leave_one_out, ItemSet, Split, TestCase, TrainSequence,
};
use ttt4rec_core::model::{init_params, ModelConfig};
use ttt4rec_core::optim::OptimizerState;
use ttt4rec_core::training::{train, train_epoch, RunRecorder, TrainConfig};
use ttt4rec_core::ttt::TttConfig;
use ttt4rec_core::Error;

fn small_model(vocab: usize, n: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embed_dim: 8,
        mlp_hidden: 16,
        max_seq_len: n,
        ttt: TttConfig::default(),
    }
}

fn planted(users: usize, items: usize) -> Split {
    split_leave_one_out(&planted_successor_dataset(users, items, (4, 8), 8, 3)).unwrap()
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let split = planted(50, 150);
    let model = small_model(150, 8);
    let cfg = TrainConfig {
        lr: 0.0,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let before = init_params(&model, cfg.seed).unwrap();
    let mut params = before.clone();
    let mut opt = OptimizerState::new(params.tensors());
    train_epoch(&mut params, &mut opt, &split, &model, &cfg, 1).unwrap();
    assert_eq!(params, before);
}

#[test]
fn single_instance_is_memorized() {
    let items = vec![3, 7, 1];
    let seen: ItemSet = [3, 7, 1, 9].into_iter().collect();
    let split = Split {
        train: vec![TrainSequence {
            user: 1,
            items: items.clone(),
            seen: seen.clone(),
        }],
        test: vec![TestCase {
            user: 1,
            history: items,
            positive: 9,
            seen,
        }],
        vocab_size: 30,
        max_seq_len: 4,
    };
    let model = small_model(30, 4);
    let cfg = TrainConfig {
        lr: 0.02,
        epochs: 50,
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &model, &split, None).unwrap();
    let first = out.stats[0].train_loss;
    let last = out.stats.last().unwrap().train_loss;
    assert!(last < 0.1, "loss {first} -> {last}");
    assert!(out.stats.iter().all(|s| s.metrics.is_none()));
}

#[test]
fn runs_are_reproducible() {
    let split = planted(80, 150);
    let model = small_model(150, 8);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 40,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &model, &split, None).unwrap();
    let b = train(&cfg, &model, &split, None).unwrap();
    assert_eq!(a.params, b.params);
    for (x, y) in a.stats.iter().zip(&b.stats) {
        assert_eq!(
            (x.epoch, x.train_loss, x.metrics),
            (y.epoch, y.train_loss, y.metrics)
        );
    }
}

#[test]
fn run_directory_holds_one_row_and_checkpoint_per_epoch() {
    let split = planted(60, 150);
    let model = small_model(150, 8);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 50,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut rec = RunRecorder::create(dir.path(), false).unwrap();
    let out = train(&cfg, &model, &split, Some(&mut rec)).unwrap();

    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,ndcg5,ndcg10,hr5,hr10,seconds");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(','));
    let jsonl = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 3);
    for e in 1..=3 {
        let (cfg_back, p) = checkpoint::load(rec.checkpoint_path(e)).unwrap();
        assert_eq!(cfg_back, model);
        if e == 3 {
            assert_eq!(p, out.params);
        }
    }
}

#[test]
fn divergence_names_the_batch() {
    let split = planted(40, 150);
    let mut model = small_model(150, 8);
    model.ttt.initializer_range = 1.0;
    model.ttt.inner_lr = 1e300;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 20,
        ..TrainConfig::default()
    };
    match train(&cfg, &model, &split, None) {
        Err(Error::Diverged { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 0)),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.stats)),
    }
}

#[test]
fn vocab_mismatch_is_rejected() {
    let split = planted(30, 150);
    let model = small_model(151, 8);
    assert!(matches!(
        train(&TrainConfig::default(), &model, &split, None),
        Err(Error::VocabMismatch { .. })
    ));
}
