mod common;

use std::collections::{BTreeMap, BTreeSet};

use metagraph::chemgraph::TaskType;
use metagraph::evalbench::finetune::{mean_bce, train_with_early_stopping};
use metagraph::evalbench::{
    aggregate, auprc, average_ranks, evaluate_cell, finetune, instance_set, rank_chart_svg, read_records,
    run_benchmark, run_seed, write_rank_csv, write_records, BenchmarkConfig, EvalRecord, FinetuneConfig,
    Method, MethodSpec,
};
use metagraph::ggnn::init_params;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bf, counts, synthetic_registry, tiny_model};

/// Precision and recall at every distinct threshold, predicted positive when
/// score >= threshold, accumulated as sum of recall increments times precision.
fn threshold_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, y) in scores.iter().zip(labels) {
            if *s >= t {
                if *y == 1 {
                    tp += 1.0
                } else {
                    fp += 1.0
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

#[test]
fn auprc_worked_example() {
    let v = auprc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
    assert!((v - 5.0 / 6.0).abs() < 1e-15);
    assert!((threshold_oracle(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]) - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn auprc_edge_cases() {
    assert_eq!(auprc(&[0.1, 0.2, 0.9], &[0, 0, 1]).unwrap(), 1.0);
    let v = auprc(&[0.5; 5], &[1, 0, 0, 1, 0]).unwrap();
    assert!((v - 0.4).abs() < 1e-15);
    assert!(auprc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(auprc(&[0.1, 0.2], &[0, 0]).is_err());
    assert!(auprc(&[0.1], &[0, 1]).is_err());
    assert!(auprc(&[f64::NAN, 0.2], &[0, 1]).is_err());
    assert!(auprc(&[0.1, 0.2], &[0, 2]).is_err());
}

/// Every label vector of length 2..=12 with both classes, each paired with a
/// tie-heavy and a tie-free score vector.
#[test]
fn auprc_matches_threshold_oracle_exhaustively() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for n in 2..=12usize {
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            let tied: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..3u8))).collect();
            let distinct: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            for scores in [tied, distinct] {
                let got = auprc(&scores, &labels).unwrap();
                let want = threshold_oracle(&scores, &labels);
                assert!((got - want).abs() < 1e-12, "{scores:?} {labels:?}: {got} vs {want}");
                checked += 1;
            }
        }
    }
    assert!(checked > 16_000);
}

#[test]
fn auprc_monotone_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.gen_range(2..40);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(-5..5i32)) * 0.3).collect();
        let (a, b) = (rng.gen_range(0.1..5.0), rng.gen_range(-3.0..3.0));
        let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp() + s * s * s).collect();
        assert_eq!(auprc(&scores, &labels).unwrap(), auprc(&mapped, &labels).unwrap());
    }
}

proptest! {
    #[test]
    fn auprc_in_unit_interval(scores in prop::collection::vec(-10.0f64..10.0, 2..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = scores.iter().map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let v = auprc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - threshold_oracle(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn ranks_sum_to_triangular(values in prop::collection::vec(0u8..4, 1..9)) {
        let xs: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        let ranks = average_ranks(&xs);
        let m = xs.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - m * (m + 1.0) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn batch_size_rule() {
    let config = FinetuneConfig::default();
    assert_eq!(config.batch_size(16), 16);
    assert_eq!(config.batch_size(32), 32);
    assert_eq!(config.batch_size(64), 64);
    assert_eq!(config.batch_size(128), 64);
    assert_eq!(config.batch_size(256), 64);
    assert_eq!(config.lr, 1e-4);
    assert_eq!(config.patience, 10);
}

#[test]
fn default_ks_and_repeats() {
    let config = BenchmarkConfig::default();
    assert_eq!(config.ks, [16, 32, 64, 128, 256]);
    assert_eq!(config.instance_sets * config.seeds, 25);
}

fn record(method: &str, task: &str, ty: TaskType, k: usize, rep: usize, auprc: f64) -> EvalRecord {
    EvalRecord {
        method: method.into(),
        task: task.into(),
        task_type: ty,
        k,
        instance_set: rep / 5,
        seed: rep % 5,
        auprc,
    }
}

#[test]
fn hand_computed_average_ranks() {
    // means per task: t1 a=.9 b=.5 c=.7 -> ranks 1,3,2; t2 a=.4 b=.6 c=.6 -> 3,1.5,1.5
    let table = [("t1", [0.9, 0.5, 0.7]), ("t2", [0.4, 0.6, 0.6])];
    let mut records = Vec::new();
    for (task, means) in table {
        for (m, mean) in ["a", "b", "c"].iter().zip(means) {
            for rep in 0..4 {
                let jitter = if rep % 2 == 0 { 0.01 } else { -0.01 };
                records.push(record(m, task, TaskType::B, 16, rep, mean + jitter));
            }
        }
    }
    let report = aggregate(&records).unwrap();
    let avg: BTreeMap<&str, f64> = report
        .average_ranks
        .iter()
        .filter(|r| r.group == "all")
        .map(|r| (r.method.as_str(), r.rank))
        .collect();
    assert_eq!(avg["a"], 2.0);
    assert_eq!(avg["b"], 2.25);
    assert_eq!(avg["c"], 1.75);
    for (task, k) in [("t1", 16), ("t2", 16)] {
        let sum: f64 = report.cells.iter().filter(|c| c.task == task && c.k == k).map(|c| c.rank).sum();
        assert_eq!(sum, 6.0);
    }
    let t1 = report.significance.iter().find(|s| s.task == "t1").unwrap();
    assert_eq!((t1.best.as_str(), t1.second.as_str()), ("a", "c"));
    assert!(t1.significant);
    let t2 = report.significance.iter().find(|s| s.task == "t2").unwrap();
    assert!(!t2.significant);
    assert!((t2.p_value - 1.0).abs() < 1e-12);
}

#[test]
fn single_method_and_ties() {
    let one = aggregate(&[record("m", "t", TaskType::F, 16, 0, 0.3)]).unwrap();
    assert!(one.cells.iter().all(|c| c.rank == 1.0));
    let tie = aggregate(&[
        record("a", "t", TaskType::F, 16, 0, 0.3),
        record("b", "t", TaskType::F, 16, 0, 0.3),
    ])
    .unwrap();
    assert!(tie.cells.iter().all(|c| c.rank == 1.5));
}

#[test]
fn welch_matches_two_degree_closed_form() {
    // Two samples of two with equal variance give df = 2, where the t CDF is
    // 1/2 + t / (2 sqrt(2 + t^2)).
    let (a, b) = ([0.0, 1.0], [2.0, 3.0]);
    let t: f64 = 2.0 / 0.5f64.sqrt();
    let want = 1.0 - t / (2.0 + t * t).sqrt();
    assert!((metagraph::evalbench::welch_p_value(&a, &b) - want).abs() < 1e-9);
    assert!((metagraph::evalbench::welch_p_value(&a, &a) - 1.0).abs() < 1e-12);
}

#[test]
fn incomplete_matrix_lists_missing_cells() {
    let err = aggregate(&[
        record("a", "t", TaskType::B, 16, 0, 0.3),
        record("a", "t", TaskType::B, 16, 1, 0.3),
        record("b", "t", TaskType::B, 16, 0, 0.3),
        record("a", "u", TaskType::B, 16, 0, 0.3),
    ])
    .unwrap_err()
    .to_string();
    assert!(err.contains("b/t/k=16 has 1 of 2"), "{err}");
    assert!(err.contains("b/u/k=16 has 0 of 1"), "{err}");
}

#[test]
fn report_outputs() {
    let mut records = Vec::new();
    for (task, ty) in [("b1", TaskType::B), ("a1", TaskType::A)] {
        for k in [16, 64] {
            for (i, m) in ["x", "y", "z"].iter().enumerate() {
                records.push(record(m, task, ty, k, 0, 0.2 * i as f64 + 0.1));
            }
        }
    }
    let report = aggregate(&records).unwrap();
    let groups: BTreeSet<&str> = report.average_ranks.iter().map(|r| r.group.as_str()).collect();
    assert_eq!(groups, BTreeSet::from(["all", "in_distribution", "out_of_distribution"]));
    let svg = rank_chart_svg(&report);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 6);
    let mut csv = Vec::new();
    write_rank_csv(&mut csv, &report).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("group,k,method,rank,tasks"));
    assert_eq!(text.lines().count(), 1 + 3 * 3 * 2);
}

#[test]
fn records_round_trip() {
    let records = vec![
        record("maml", "B0000", TaskType::B, 16, 3, 0.123456789012345),
        record("random", "A0000", TaskType::A, 64, 24, 1.0),
    ];
    let mut buf = Vec::new();
    write_records(&mut buf, &records).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("method,task,task_type,k,instance_set,seed,auprc\n"));
    assert_eq!(read_records(buf.as_slice()).unwrap(), records);
    let mut empty = Vec::new();
    write_records(&mut empty, &[]).unwrap();
    assert!(read_records(empty.as_slice()).unwrap().is_empty());
    assert!(read_records("a,b\n1,2\n".as_bytes()).is_err());
}

fn quick_finetune() -> FinetuneConfig {
    FinetuneConfig {
        max_epochs: 3,
        patience: 2,
        lr: 1e-3,
        ..FinetuneConfig::default()
    }
}

#[test]
fn finetune_restores_best_validation_params() {
    let reg = synthetic_registry(1, counts(1, 0), bf(0, 0), bf(0, 0));
    let task = reg.train_tasks()[0];
    let model = tiny_model();
    let init = init_params(&model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let config = FinetuneConfig {
        max_epochs: 12,
        patience: 3,
        lr: 3e-3,
        ..FinetuneConfig::default()
    };
    let train = task.subset(&task.partitions.train[..32]);
    let val = task.subset(&task.partitions.val);
    let out = train_with_early_stopping(&init, |_| true, &train, &val, &model, &config, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let best = mean_bce(&out.params, &val, &model, 64).unwrap();
    assert!((best - out.val_losses[out.best_epoch]).abs() < 1e-12);
    assert!(out.val_losses.iter().all(|&v| best <= v + 1e-12));

    let frozen = FinetuneConfig { max_epochs: 0, ..config };
    let out = finetune(&init, task, 16, &model, &frozen, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(out.params.bit_eq(&init));
    assert_eq!(out.val_losses.len(), 1);
}

#[test]
fn benchmark_matrix_is_complete_paired_and_replayable() {
    let reg = synthetic_registry(2, counts(3, 0), bf(0, 0), bf(0, 0));
    let tasks = reg.train_tasks();
    let model = tiny_model();
    let init = init_params(&model, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let methods = [
        MethodSpec::new("fixed", Method::Finetune(init.clone())),
        MethodSpec::new("random", Method::RandomInit),
    ];
    let config = BenchmarkConfig {
        ks: vec![16],
        instance_sets: 2,
        seeds: 2,
        base_seed: 4,
        finetune: quick_finetune(),
        jobs: 1,
    };
    let records = run_benchmark(&methods, &tasks, &model, &config).unwrap();
    assert_eq!(records.len(), 2 * 3 * 2 * 2);
    let keys: BTreeSet<_> = records
        .iter()
        .map(|r| (r.method.clone(), r.task.clone(), r.k, r.instance_set, r.seed))
        .collect();
    assert_eq!(keys.len(), records.len());

    for task in &tasks {
        let a = instance_set(task, 16, 1, 4).unwrap();
        assert_eq!(a, instance_set(task, 16, 1, 4).unwrap());
        assert_ne!(a, instance_set(task, 16, 0, 4).unwrap());
    }

    let r = records.iter().find(|r| r.method == "fixed" && r.instance_set == 1 && r.seed == 1).unwrap();
    let task = reg.task(&r.task).unwrap();
    let replay = evaluate_cell(
        &Method::Finetune(init),
        task,
        &instance_set(task, 16, 1, 4).unwrap(),
        run_seed(4, &task.id, 16, 1, 1),
        &model,
        &config.finetune,
    )
    .unwrap();
    assert_eq!(replay, r.auprc);

    let threaded = run_benchmark(&methods, &tasks, &model, &BenchmarkConfig { jobs: 3, ..config.clone() }).unwrap();
    assert_eq!(threaded, records);
}

#[test]
fn infeasible_k_is_skipped() {
    let reg = synthetic_registry(3, counts(1, 0), bf(0, 0), bf(0, 0));
    let tasks = reg.train_tasks();
    let config = BenchmarkConfig {
        ks: vec![16, 256],
        instance_sets: 1,
        seeds: 1,
        finetune: quick_finetune(),
        ..BenchmarkConfig::default()
    };
    let records = run_benchmark(&[MethodSpec::new("random", Method::RandomInit)], &tasks, &tiny_model(), &config).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].k, 16);
}
