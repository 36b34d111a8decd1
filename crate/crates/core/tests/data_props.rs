use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use proptest::prelude::*;
use rand::Rng as _;
use ttt4rec_core::data::{
    build_sequences, parse_amazon_reader, parse_movielens_reader, sample_negatives,
    split_leave_one_out, Dataset, ItemSet, TrainTargets,
};
use ttt4rec_core::rng;

/// Random raw log lines: `(user, item, rating, timestamp)` with repeated ids,
/// repeated timestamps and duplicate lines.
fn synthetic_log(seed: u64, lines: usize) -> Vec<(String, String, f32, i64)> {
    let mut r = rng::stream(&[seed, 1]);
    (0..lines)
        .map(|_| {
            (
                format!("U{}", r.random_range(0..25)),
                format!("B{:04}", r.random_range(0..60)),
                r.random_range(1..=5) as f32,
                r.random_range(0..40) as i64,
            )
        })
        .collect()
}

fn amazon_text(log: &[(String, String, f32, i64)]) -> String {
    log.iter()
        .map(|(u, i, r, t)| format!("{u},{i},{r:.1},{t}\n"))
        .collect()
}

#[test]
fn amazon_round_trip_preserves_the_multiset() {
    for seed in 0..20 {
        let log = synthetic_log(seed, 400);
        let parsed = parse_amazon_reader(Cursor::new(amazon_text(&log)), Path::new("mem")).unwrap();
        assert!(parsed.malformed.is_empty());
        let mut got: Vec<(String, String, String, i64)> = parsed
            .records
            .iter()
            .map(|r| {
                (
                    parsed.user_ids[r.user as usize - 1].clone(),
                    parsed.item_ids[r.item as usize - 1].clone(),
                    r.rating.to_string(),
                    r.timestamp,
                )
            })
            .collect();
        let mut want: Vec<(String, String, String, i64)> = log
            .iter()
            .map(|(u, i, r, t)| (u.clone(), i.clone(), r.to_string(), *t))
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want, "seed {seed}");
    }
}

#[test]
fn densified_ids_are_contiguous() {
    let log = synthetic_log(3, 300);
    let parsed = parse_amazon_reader(Cursor::new(amazon_text(&log)), Path::new("mem")).unwrap();
    let items: std::collections::BTreeSet<u32> = parsed.records.iter().map(|r| r.item).collect();
    assert_eq!(items, (1..=parsed.num_items() as u32).collect());
    let users: std::collections::BTreeSet<u32> = parsed.records.iter().map(|r| r.user).collect();
    assert_eq!(users, (1..=parsed.num_users() as u32).collect());
}

#[test]
fn movielens_and_amazon_agree_on_the_same_log() {
    let log = synthetic_log(5, 200);
    let ml: String = log
        .iter()
        .map(|(u, i, r, t)| format!("{}::{}::{r}::{t}\n", &u[1..], &i[1..]))
        .collect();
    let a = parse_amazon_reader(Cursor::new(amazon_text(&log)), Path::new("a")).unwrap();
    let m = parse_movielens_reader(Cursor::new(ml), Path::new("m")).unwrap();
    let key = |r: &ttt4rec_core::data::Interaction| (r.user, r.item, r.timestamp);
    assert_eq!(
        a.records.iter().map(key).collect::<Vec<_>>(),
        m.records.iter().map(key).collect::<Vec<_>>()
    );
}

/// Selection sort by timestamp; the earliest line wins a tie.
fn brute_force_dataset(
    records: &[ttt4rec_core::data::Interaction],
    min: usize,
    vocab: usize,
    n: usize,
) -> Dataset {
    let mut users: Vec<u32> = records.iter().map(|r| r.user).collect();
    users.sort();
    users.dedup();
    let mut sequences = Vec::new();
    for u in users {
        let mut rest: Vec<(i64, u32)> = records
            .iter()
            .filter(|r| r.user == u)
            .map(|r| (r.timestamp, r.item))
            .collect();
        if rest.len() < min {
            continue;
        }
        let mut items = Vec::new();
        let mut timestamps = Vec::new();
        while !rest.is_empty() {
            let mut best = 0;
            for j in 1..rest.len() {
                if rest[j].0 < rest[best].0 {
                    best = j;
                }
            }
            let (t, i) = rest.remove(best);
            items.push(i);
            timestamps.push(t);
        }
        sequences.push(ttt4rec_core::data::UserSequence {
            user: u,
            items,
            timestamps,
        });
    }
    Dataset {
        sequences,
        vocab_size: vocab,
        max_seq_len: n,
    }
}

#[test]
fn sequences_match_brute_force_sort() {
    for seed in 0..20 {
        let log = synthetic_log(seed, 500);
        let parsed = parse_amazon_reader(Cursor::new(amazon_text(&log)), Path::new("mem")).unwrap();
        for min in [2, 5, 20] {
            let got = build_sequences(&parsed, min, 50).unwrap();
            let want = brute_force_dataset(&parsed.records, min, parsed.num_items(), 50);
            assert_eq!(got, want, "seed {seed} min {min}");
        }
    }
}

#[test]
fn cache_round_trip() {
    let log = synthetic_log(8, 300);
    let parsed = parse_amazon_reader(Cursor::new(amazon_text(&log)), Path::new("mem")).unwrap();
    let ds = build_sequences(&parsed, 5, 50).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.txt");
    ds.write_cache(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    assert_eq!(Dataset::read_cache(&path).unwrap(), ds);
    ds.write_cache(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn no_test_positive_is_a_train_target() {
    for seed in 0..20 {
        let log = synthetic_log(seed, 500);
        let parsed = parse_amazon_reader(Cursor::new(amazon_text(&log)), Path::new("mem")).unwrap();
        let ds = build_sequences(&parsed, 3, 4).unwrap();
        let split = split_leave_one_out(&ds).unwrap();
        assert_eq!(split.train.len(), split.test.len());
        for (tr, te) in split.train.iter().zip(&split.test) {
            assert_eq!(tr.user, te.user);
            let full = &ds
                .sequences
                .iter()
                .find(|s| s.user == te.user)
                .unwrap()
                .items;
            assert_eq!(te.positive, *full.last().unwrap());
            assert_eq!(te.history, full[..full.len() - 1]);
            // The held-out interaction is the last one; nothing in training
            // targets it by position.
            assert_eq!(tr.items, full[..full.len() - 1]);
            for mode in [TrainTargets::Last, TrainTargets::All] {
                for (hist, pos) in tr.examples(mode, 4) {
                    let at = hist.len();
                    assert!(!hist.is_empty() && hist.len() <= 4);
                    let t =
                        tr.items.iter().enumerate().position(|(i, &x)| {
                            x == pos && i >= at && tr.items[i - at..i] == hist[..]
                        });
                    assert!(t.is_some(), "example not drawn from the training items");
                }
            }
        }
    }
}

#[test]
fn forced_choice() {
    let seen: ItemSet = (1..=9).collect();
    for seed in 0..50 {
        let got = sample_negatives(&seen, 1, 10, &mut rng::stream(&[seed])).unwrap();
        assert_eq!(got, vec![10]);
    }
}

#[test]
fn sampling_is_uniform() {
    // 100-item pool: vocabulary 1..=110 minus a 10-item history.
    let seen: ItemSet = (1..=10).collect();
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut r = rng::stream(&[2024]);
    let draws = 100_000u64;
    for _ in 0..draws / 4 {
        for id in sample_negatives(&seen, 4, 110, &mut r).unwrap() {
            *counts.entry(id).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 100);
    let p = 0.01;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (&id, &c) in &counts {
        assert!(id > 10);
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "item {id}: {c}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn negatives_avoid_the_excluded_set(seed in any::<u64>(), vocab in 20usize..400, k in 1usize..20) {
        let mut r = rng::stream(&[seed]);
        let hist = r.random_range(0..vocab - k);
        let seen: ItemSet = (0..hist).map(|_| r.random_range(1..=vocab as u32)).collect();
        let got = sample_negatives(&seen, k, vocab, &mut r).unwrap();
        prop_assert_eq!(got.len(), k);
        let mut sorted = got.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        for id in got {
            prop_assert!(id >= 1 && id as usize <= vocab && !seen.contains(id));
        }
    }
}
