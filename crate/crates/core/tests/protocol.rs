mod common;

use common::tiny;
use fedprompt_core::experiment::{prepare, run, write_metrics};
use fedprompt_core::federation::{clip_global_norm, Federation, ServerState, Strategy};
use fedprompt_core::model::{forward, init_backbone, loss_and_grads, CcmpContext};
use fedprompt_tensor::Tensor;

fn metrics_bytes(config: &fedprompt_core::config::ExperimentConfig) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics(&path, &run(config).unwrap().metrics).unwrap();
    std::fs::read(path).unwrap()
}

#[test]
fn same_seed_same_metrics_bytes() {
    let cfg = tiny(3, Strategy::SharedCcmp, 3);
    assert_eq!(metrics_bytes(&cfg), metrics_bytes(&cfg));
}

#[test]
fn worker_count_does_not_change_results() {
    let mut cfg = tiny(5, Strategy::SharedCcmp, 2);
    let one = run(&cfg).unwrap();
    cfg.workers = 3;
    let three = run(&cfg).unwrap();
    assert_eq!(one.state, three.state);
    assert_eq!(one.metrics, three.metrics);
}

#[test]
fn metrics_have_warmup_row_plus_one_per_round() {
    for rounds in [0, 1, 4] {
        let out = run(&tiny(1, Strategy::SharedCcmp, rounds)).unwrap();
        assert_eq!(out.metrics.len(), rounds + 1);
        assert!(out.metrics[0].train_loss.is_none());
        assert!(out.metrics[1..].iter().all(|r| r.train_loss.is_some()));
    }
}

#[test]
fn zero_rounds_keeps_initial_prompts() {
    let cfg = tiny(2, Strategy::SharedCcmp, 0);
    let prep = prepare(&cfg).unwrap();
    let fed = Federation::new(&prep.backbone, &cfg.train, &prep.clients, prep.participating.clone(), cfg.seed).unwrap();
    let init = fed.initial_params().unwrap();
    let out = run(&cfg).unwrap();
    assert_eq!(out.state.global, init);
    assert!(out.logs.is_empty());
}

#[test]
fn backbone_is_byte_identical_after_training() {
    for strategy in [Strategy::SharedOnly, Strategy::SharedCcmp, Strategy::Personalized] {
        let cfg = tiny(4, strategy, 2);
        let out = run(&cfg).unwrap();
        let fresh = format!("{:016x}", init_backbone(&cfg.model, cfg.seed).unwrap().checksum());
        assert_eq!(out.report.backbone_checksum_start, fresh);
        assert_eq!(out.report.backbone_checksum_end, fresh);
    }
}

#[test]
fn zero_learning_rate_leaves_prompts_unchanged() {
    let mut cfg = tiny(6, Strategy::SharedCcmp, 2);
    cfg.train.lr = 0.0;
    let prep = prepare(&cfg).unwrap();
    let fed = Federation::new(&prep.backbone, &cfg.train, &prep.clients, prep.participating.clone(), cfg.seed).unwrap();
    let init = fed.initial_params().unwrap();
    let state = fed.run_training(|_, _| Ok(())).unwrap();
    assert_eq!(state.global, init);
}

#[test]
fn one_full_batch_step_matches_hand_update() {
    let mut cfg = tiny(7, Strategy::SharedOnly, 1);
    cfg.train.batch_size = 1000;
    cfg.train.grad_clip = 0.5;
    let prep = prepare(&cfg).unwrap();
    let fed = Federation::new(&prep.backbone, &cfg.train, &prep.clients, prep.participating.clone(), cfg.seed).unwrap();
    let start = fed.initial_params().unwrap();
    let client = &prep.clients[0];
    let batch: Vec<(&Tensor, usize)> = client.train.iter().map(|(t, y)| (t, *y)).collect();
    let (_, mut g) = loss_and_grads(&prep.backbone, &start, &batch, None, &cfg.train.forward_options()).unwrap();
    clip_global_norm(&mut g, cfg.train.grad_clip);
    let mut expected = start.clone();
    expected.add_scaled(&g, -cfg.train.lr_at(1)).unwrap();
    let update = fed.local_train(0, &start, None, 1).unwrap();
    // Only the summation order of the per-sample losses differs.
    assert!(update.params.max_abs_diff(&expected) < 1e-12, "{}", update.params.max_abs_diff(&expected));
}

#[test]
fn local_training_lowers_loss_on_separable_pair() {
    let mut cfg = tiny(8, Strategy::SharedOnly, 8);
    cfg.data = fedprompt_core::data::SyntheticSpec::new(2);
    cfg.data.image_size = 8;
    cfg.data.separation = 32.0;
    cfg.train.num_clients = 1;
    cfg.partition = fedprompt_core::config::PartitionMode::Pathological { classes_per_client: 2 };
    let out = run(&cfg).unwrap();
    let first = out.logs.first().unwrap().train_loss;
    let last = out.logs.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn partial_participation_touches_only_sampled_clients() {
    let mut cfg = tiny(9, Strategy::Personalized, 0);
    cfg.train.num_clients = 6;
    cfg.train.clients_per_round = Some(2);
    cfg.train.update_period = 10;
    let prep = prepare(&cfg).unwrap();
    let fed = Federation::new(&prep.backbone, &cfg.train, &prep.clients, prep.participating.clone(), cfg.seed).unwrap();
    let mut state = fed.run_training(|_, _| Ok(())).unwrap();
    let log = fed.run_round(&mut state).unwrap();
    assert_eq!(log.participants.len(), 2);
    assert_eq!(state.personal.keys().copied().collect::<Vec<_>>(), log.participants);
    let submitted: Vec<usize> = state.bank.as_ref().unwrap().pending().iter().map(|s| s.client).collect();
    assert_eq!(submitted, log.participants);
    for id in (0..6).filter(|id| !log.participants.contains(id)) {
        assert_eq!(state.params_for(id), state.global);
    }
}

#[test]
fn heldout_clients_never_train() {
    for seed in 0..4 {
        let mut cfg = tiny(seed, Strategy::SharedCcmp, 3);
        cfg.train.num_clients = 8;
        cfg.train.clients_per_round = Some(3);
        cfg.heldout_fraction = Some(0.75);
        let out = run(&cfg).unwrap();
        assert_eq!(out.report.heldout_clients.len(), 2);
        for id in &out.report.heldout_clients {
            assert!(!out.report.trained_clients.contains(id));
        }
        assert!(out.report.heldout.is_some());
        assert!(out.metrics.iter().all(|m| m.heldout_mean_acc.is_some()));
    }
}

#[test]
fn bank_moves_only_at_period_end() {
    let mut cfg = tiny(10, Strategy::SharedCcmp, 0);
    cfg.train.update_period = 2;
    let prep = prepare(&cfg).unwrap();
    let fed = Federation::new(&prep.backbone, &cfg.train, &prep.clients, prep.participating.clone(), cfg.seed).unwrap();
    let mut state: ServerState = fed.run_training(|_, _| Ok(())).unwrap();
    let warm = state.bank.clone().unwrap();
    let log1 = fed.run_round(&mut state).unwrap();
    let bank = state.bank.as_ref().unwrap();
    assert!(!log1.prototypes_updated);
    for &l in warm.layers() {
        assert_eq!(bank.layer(l).unwrap(), warm.layer(l).unwrap());
    }
    assert_eq!(bank.pending().len(), 4);
    let log2 = fed.run_round(&mut state).unwrap();
    let bank = state.bank.as_ref().unwrap();
    assert!(log2.prototypes_updated);
    assert!(bank.pending().is_empty());
    assert_ne!(bank.layer(2).unwrap(), warm.layer(2).unwrap());
}

#[test]
fn detached_scores_do_not_change_the_forward_pass() {
    let cfg = tiny(11, Strategy::SharedCcmp, 1);
    let prep = prepare(&cfg).unwrap();
    let out = run(&cfg).unwrap();
    let bank = out.state.bank.as_ref().unwrap();
    let client = &prep.clients[1];
    let ctx = CcmpContext { bank, priors: &client.priors };
    let tokens: Vec<&Tensor> = client.test.iter().map(|(t, _)| t).collect();
    let mut opts = cfg.train.forward_options();
    let a = forward(&prep.backbone, &out.state.global, &tokens, Some(ctx), &opts, None).unwrap();
    opts.detach_scores = true;
    let b = forward(&prep.backbone, &out.state.global, &tokens, Some(ctx), &opts, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn no_prior_variant_scores_with_uniform_priors() {
    let with = run(&tiny(12, Strategy::SharedCcmp, 1)).unwrap();
    let without = run(&tiny(12, Strategy::SharedCcmpNoPrior, 1)).unwrap();
    // Same seed, same initial prompts; the priors change what is learned.
    assert_ne!(with.state.global, without.state.global);
}

#[test]
fn prototype_probe_beats_chance_on_separated_data() {
    let mut cfg = tiny(13, Strategy::SharedOnly, 0);
    cfg.data.separation = 32.0;
    let prep = prepare(&cfg).unwrap();
    let pool: Vec<(Tensor, usize)> = prep.clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let top1 = fedprompt_core::eval::prototype_topk_probe(&prep.backbone, &pool, 4, 3, 1).unwrap();
    let top4 = fedprompt_core::eval::prototype_topk_probe(&prep.backbone, &pool, 4, 3, 4).unwrap();
    assert!(top1 > 0.5, "top-1 {top1} vs chance 0.25");
    assert_eq!(top4, 1.0);
}

#[test]
fn training_loss_trends_down() {
    let out = run(&tiny(14, Strategy::SharedCcmp, 15)).unwrap();
    let losses: Vec<f64> = out.logs.iter().map(|l| l.train_loss).collect();
    let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let first = avg(&losses[..5]);
    let last = avg(&losses[losses.len() - 5..]);
    assert!(last < first, "5-round mean {first} -> {last}");
}
