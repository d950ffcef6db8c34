mod common;

use std::sync::Arc;

use metagraph::baselines::{
    finetune_all, finetune_top, finetune_top_trainable, knn_scores, multitask_data, pretrain_multitask,
    replace_head, MultitaskBatch, PretrainConfig,
};
use metagraph::evalbench::FinetuneConfig;
use metagraph::ggnn::{init_params, ModelConfig};
use metagraph::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bf, counts, random_graph, synthetic_registry, tiny_model};

fn graphs(n: usize) -> Vec<Arc<metagraph::chemgraph::MolecularGraph>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n).map(|_| Arc::new(random_graph(&mut rng, 3, 4))).collect()
}

#[test]
fn batch_rejects_unobserved_rows_and_bad_shapes() {
    let err = MultitaskBatch::new(graphs(2), vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0], 2)
        .unwrap_err()
        .to_string();
    assert!(err.contains("row 1"), "{err}");
    assert!(MultitaskBatch::new(graphs(2), vec![0.0; 3], vec![1.0; 4], 2).is_err());
    assert!(MultitaskBatch::new(graphs(1), vec![0.5, 0.0], vec![1.0, 0.0], 2).is_err());
    assert!(MultitaskBatch::new(graphs(1), vec![0.5, 0.0], vec![0.0, 1.0], 2).is_ok());
}

#[test]
fn masked_loss_matches_hand_sum() {
    let labels = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let mask = vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
    let batch = MultitaskBatch::new(graphs(2), labels.clone(), mask.clone(), 3).unwrap();
    let logits = [0.3, -1.2, 2.0, -0.4, 0.9, 5.0];
    let loss = batch.loss(&Tensor::matrix(2, 3, logits.to_vec()).unwrap()).unwrap().item();
    let bce = |z: f64, y: f64| -(y * (1.0 / (1.0 + (-z).exp())).ln() + (1.0 - y) * (1.0 / (1.0 + z.exp())).ln());
    let mut total = 0.0;
    for i in 0..6 {
        if mask[i] == 1.0 {
            total += bce(logits[i], labels[i]);
        }
    }
    assert!((loss - total / 4.0).abs() < 1e-12);
}

#[test]
fn single_task_masked_loss_is_plain_bce() {
    let labels = vec![1.0, 0.0, 1.0];
    let batch = MultitaskBatch::new(graphs(3), labels.clone(), vec![1.0; 3], 1).unwrap();
    let logits = Tensor::matrix(3, 1, vec![0.2, -0.7, 1.5]).unwrap();
    let plain = logits.reshape([3]).unwrap().bce_with_logits(&labels).unwrap();
    assert!((batch.loss(&logits).unwrap().item() - plain.item()).abs() < 1e-15);
}

#[test]
fn multitask_rows_are_shared_per_molecule() {
    let reg = synthetic_registry(4, counts(2, 0), bf(0, 0), bf(0, 0));
    let tasks = reg.train_tasks();
    let data = multitask_data(&tasks, 0.1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(data.columns.len(), 2);
    let observed: f64 = data.train.mask().iter().chain(data.val.mask()).sum();
    assert_eq!(observed as usize, tasks.iter().map(|t| t.instances.len()).sum::<usize>());
    let val_per_col: Vec<f64> = (0..2)
        .map(|c| data.val.mask().iter().skip(c).step_by(2).sum())
        .collect();
    assert_eq!(val_per_col, [13.0, 13.0]);
}

#[test]
fn knn_definition_cases() {
    let refs = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![9.0, 9.0]];
    let scores = knn_scores(&refs, &[1, 1, 0, 0], &[vec![0.0, 0.0]], 3).unwrap();
    assert!((scores[0] - 2.0 / 3.0).abs() < 1e-15);
    let same = knn_scores(&refs, &[1, 1, 1, 1], &[vec![3.0, 2.0], vec![-1.0, 0.5]], 3).unwrap();
    assert_eq!(same, [1.0, 1.0]);
    // equidistant references: lower index wins
    let tie = knn_scores(&[vec![1.0], vec![-1.0], vec![1.0]], &[0, 1, 1], &[vec![0.0]], 1).unwrap();
    assert_eq!(tie, [0.0]);
    assert!(knn_scores(&refs[..2], &[1, 0], &[vec![0.0, 0.0]], 3).is_err());
}

#[test]
fn knn_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let dim = rng.gen_range(1..6);
        let n = rng.gen_range(3..20);
        let point = |rng: &mut ChaCha8Rng| (0..dim).map(|_| f64::from(rng.gen_range(-3..4i32))).collect::<Vec<f64>>();
        let refs: Vec<Vec<f64>> = (0..n).map(|_| point(&mut rng)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let queries: Vec<Vec<f64>> = (0..5).map(|_| point(&mut rng)).collect();
        let got = knn_scores(&refs, &labels, &queries, 3).unwrap();
        for (q, s) in queries.iter().zip(got) {
            let mut chosen = Vec::new();
            for _ in 0..3 {
                let mut best: Option<(f64, usize)> = None;
                for (i, r) in refs.iter().enumerate() {
                    if chosen.contains(&i) {
                        continue;
                    }
                    let d = r.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                chosen.push(best.unwrap().1);
            }
            let want = chosen.iter().map(|&i| f64::from(labels[i])).sum::<f64>() / 3.0;
            assert_eq!(s, want);
        }
    }
}

fn pretrained(model: &ModelConfig, outputs: usize) -> metagraph::ParamSet {
    let multi = ModelConfig {
        output_dim: outputs,
        ..model.clone()
    };
    init_params(&multi, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
}

#[test]
fn finetune_top_freezes_message_passing() {
    let reg = synthetic_registry(5, counts(1, 0), bf(0, 0), bf(0, 0));
    let task = reg.train_tasks()[0];
    let model = tiny_model();
    let base = pretrained(&model, 4);
    let config = FinetuneConfig {
        max_epochs: 3,
        lr: 1e-2,
        ..FinetuneConfig::default()
    };
    let instances = &task.partitions.train[..16];
    let out = finetune_top(&base, &model, task, instances, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (name, t) in out.params.iter() {
        if name.starts_with("layer") {
            assert!(t.bit_eq(base.get(name).unwrap()), "{name} moved");
        }
    }
    let (f, h) = (model.feature_width, model.hidden_width);
    assert_eq!(finetune_top_trainable(&model), f * h + h + h + 1);

    let zero = FinetuneConfig { max_epochs: 0, ..config };
    let out = finetune_top(&base, &model, task, instances, &zero, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(!out.params.get("mlp.0.W").unwrap().bit_eq(base.get("mlp.0.W").unwrap()));
    assert_eq!(out.params.get("head.W").unwrap().shape(), [h, 1]);
    assert!(out.params.get("layer1.gru.W_z").unwrap().bit_eq(base.get("layer1.gru.W_z").unwrap()));
}

#[test]
fn finetune_all_moves_body_and_matches_head_swap_at_zero_lr() {
    let reg = synthetic_registry(6, counts(1, 0), bf(0, 0), bf(0, 0));
    let task = reg.train_tasks()[0];
    let model = tiny_model();
    let base = pretrained(&model, 3);
    let instances = &task.partitions.train[..16];
    let config = FinetuneConfig {
        max_epochs: 2,
        patience: 5,
        lr: 1e-2,
        ..FinetuneConfig::default()
    };
    let out = finetune_all(&base, &model, task, instances, &config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    if out.best_epoch > 0 {
        assert!(!out.params.get("layer0.A0").unwrap().bit_eq(base.get("layer0.A0").unwrap()));
    }
    let frozen = FinetuneConfig { lr: 0.0, ..config };
    let out = finetune_all(&base, &model, task, instances, &frozen, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let swapped = replace_head(&base, &model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(out.params.bit_eq(&swapped));
}

#[test]
fn pretraining_loss_falls_early() {
    let reg = synthetic_registry(7, counts(2, 1), bf(0, 0), bf(0, 0));
    let tasks = reg.train_tasks();
    let model = tiny_model();
    let config = PretrainConfig {
        lr: 3e-3,
        batch_size: 32,
        max_epochs: 3,
        patience: 5,
        ..PretrainConfig::default()
    };
    let mut passes = 0;
    for seed in 0..5 {
        let out = pretrain_multitask(&tasks, &model, &config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(out.model.output_dim, 3);
        assert_eq!(out.log.len(), 3);
        let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            passes += 1;
        }
    }
    assert!(passes >= 4, "{passes} of 5 seeds decreased");
}
