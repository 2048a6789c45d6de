#![allow(clippy::needless_range_loop)]

use fedprompt_core::ccmp::{
    class_means, compute_class_priors, cosine, dp_sensitivity, laplace, mix_prompt, momentum_update, server_aggregate,
    soft_scores, ClassPriors, ScoreVector,
};
use fedprompt_core::data::{largest_remainder, partition_dirichlet, partition_pathological};
use fedprompt_core::federation::{fedavg_aggregate, sample_clients, warmup_mean, ClientUpdate};
use fedprompt_core::model::PromptParams;
use fedprompt_core::rng::{derive_seed, stream, Purpose};
use fedprompt_tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n)
}

/// Random priors with at least one positive entry; about a third of the
/// entries are exactly zero.
fn priors(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 2 => 0.01..1.0f64], n)
        .prop_filter("some mass", |v| v.iter().any(|&p| p > 0.0))
        .prop_map(move |v| {
            let s: f64 = v.iter().sum();
            let mut out: Vec<f64> = v.iter().map(|p| p / s).collect();
            // Push the rounding residue into the largest entry so the sum
            // is 1 to within an ulp or two.
            let r = 1.0 - out.iter().sum::<f64>();
            let i = (0..n).max_by(|&a, &b| out[a].total_cmp(&out[b])).unwrap();
            out[i] += r;
            out
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn scores_form_a_distribution_that_respects_zero_priors(
        protos in vecs(6, 5),
        cls in prop::collection::vec(-3.0..3.0f64, 5),
        p in priors(6),
        tau in 0.01..10.0f64,
    ) {
        let priors = ClassPriors::new(p.clone()).unwrap();
        let s = soft_scores(&cls, &protos, &priors, tau).unwrap();
        let s = s.as_slice();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        for (sc, pc) in s.iter().zip(&p) {
            if *pc == 0.0 {
                prop_assert_eq!(*sc, 0.0);
            }
        }
    }

    #[test]
    fn scores_ignore_positive_rescaling(
        protos in vecs(5, 4),
        cls in prop::collection::vec(-3.0..3.0f64, 4),
        p in priors(5),
        k in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 1024.0]),
    ) {
        // Power-of-two factors keep the rescaled inputs exact, so the cosine
        // and hence the scores must be bit-identical.
        let priors = ClassPriors::new(p).unwrap();
        let scaled: Vec<f64> = cls.iter().map(|v| v * k).collect();
        let a = soft_scores(&cls, &protos, &priors, 0.05).unwrap();
        let b = soft_scores(&scaled, &protos, &priors, 0.05).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
        prop_assert_eq!(cosine(&cls, &protos[0]), cosine(&scaled, &protos[0]));
    }

    #[test]
    fn huge_temperature_returns_the_prior(
        protos in vecs(5, 4),
        cls in prop::collection::vec(-3.0..3.0f64, 4),
        p in priors(5),
    ) {
        let priors = ClassPriors::new(p.clone()).unwrap();
        let s = soft_scores(&cls, &protos, &priors, 1e6).unwrap();
        for (sc, pc) in s.as_slice().iter().zip(&p) {
            prop_assert!((sc - pc).abs() < 1e-4);
        }
    }

    #[test]
    fn mixed_prompt_is_the_score_weighted_column_sum(
        cols in vecs(4, 6),
        p in priors(4),
    ) {
        let scores = ScoreVector::from_probs(p.clone());
        let d = 6;
        let mut data = vec![0.0; d * 4];
        for (c, col) in cols.iter().enumerate() {
            for i in 0..d {
                data[i * 4 + c] = col[i];
            }
        }
        let pc = Tensor::matrix(d, 4, data).unwrap();
        let m = mix_prompt(&pc, &scores).unwrap();
        for i in 0..d {
            let direct: f64 = (0..4).map(|c| cols[c][i] * p[c]).sum();
            prop_assert!((m[i] - direct).abs() <= 1e-15);
        }
    }

    #[test]
    fn momentum_is_the_convex_blend(
        prev in prop::collection::vec(-5.0..5.0f64, 4),
        agg in prop::collection::vec(-5.0..5.0f64, 4),
        rho in 0.0..=1.0f64,
        d in 1usize..6,
    ) {
        let out = momentum_update(&prev, &agg, d, rho).unwrap();
        for i in 0..4 {
            prop_assert_eq!(out[i], rho * prev[i] + (1.0 - rho) * agg[i]);
        }
        prop_assert_eq!(momentum_update(&prev, &agg, 0, rho).unwrap(), prev.clone());
        prop_assert_eq!(momentum_update(&prev, &agg, d, 1.0).unwrap(), prev);
    }

    #[test]
    fn server_mean_skips_absent_clients(
        subs in prop::collection::vec(
            prop_oneof![1 => Just(None), 2 => prop::collection::vec(0.5..3.0f64, 3).prop_map(Some)],
            1..8,
        ),
    ) {
        let dim = 3;
        let zero = vec![0.0; dim];
        let rows: Vec<&[f64]> = subs.iter().map(|s| s.as_deref().unwrap_or(&zero)).collect();
        let (agg, d_c) = server_aggregate(&rows, dim);
        let present: Vec<&Vec<f64>> = subs.iter().flatten().collect();
        prop_assert_eq!(d_c, present.len());
        for j in 0..dim {
            let mut sum = 0.0;
            for p in &present {
                sum += p[j];
            }
            let expect = if present.is_empty() { 0.0 } else { sum / present.len() as f64 };
            prop_assert!((agg[j] - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn warmup_is_the_plain_mean_over_sampled_clients(
        clients in prop::collection::vec(vecs(3, 2), 1..6),
    ) {
        let out = warmup_mean(&clients, 3, 2);
        for c in 0..3 {
            for j in 0..2 {
                let mut sum = 0.0;
                for k in &clients {
                    sum += k[c][j];
                }
                prop_assert_eq!(out[c][j], sum / clients.len() as f64);
            }
        }
    }

    #[test]
    fn class_means_match_brute_force(
        labelled in prop::collection::vec((prop::collection::vec(-2.0..2.0f64, 3), 0usize..4), 1..30),
    ) {
        let toks: Vec<&[f64]> = labelled.iter().map(|(t, _)| t.as_slice()).collect();
        let labels: Vec<usize> = labelled.iter().map(|(_, y)| *y).collect();
        let mu = class_means(&toks, &labels, 4).unwrap();
        for c in 0..4 {
            let members: Vec<&Vec<f64>> = labelled.iter().filter(|(_, y)| *y == c).map(|(t, _)| t).collect();
            for j in 0..3 {
                let expect = if members.is_empty() {
                    0.0
                } else {
                    members.iter().map(|t| t[j]).sum::<f64>() / members.len() as f64
                };
                prop_assert!((mu[c][j] - expect).abs() <= 1e-12);
            }
            let s = dp_sensitivity(&members.iter().map(|t| t.as_slice()).collect::<Vec<_>>(), &mu[c], members.len());
            prop_assert_eq!(s.is_none(), members.is_empty());
        }
    }

    #[test]
    fn fedavg_is_the_blockwise_mean(
        raw in prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 6), 1usize..50), 1..7),
    ) {
        let updates: Vec<ClientUpdate> = raw
            .iter()
            .enumerate()
            .rev()
            .map(|(i, (v, n))| ClientUpdate {
                client: i,
                params: PromptParams {
                    shared: Some(Tensor::matrix(2, 1, v[..2].to_vec()).unwrap()),
                    class: Tensor::matrix(2, 1, v[2..4].to_vec()).unwrap(),
                    head: Tensor::matrix(1, 2, v[4..].to_vec()).unwrap(),
                },
                submission: None,
                num_samples: *n,
                train_loss: 0.0,
            })
            .collect();
        let avg = fedavg_aggregate(&updates, false).unwrap();
        let flat: Vec<f64> = avg.blocks().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        for j in 0..6 {
            let mean = raw.iter().map(|(v, _)| v[j]).sum::<f64>() / raw.len() as f64;
            prop_assert!((flat[j] - mean).abs() <= 1e-15, "{} vs {}", flat[j], mean);
        }
        let weighted = fedavg_aggregate(&updates, true).unwrap();
        let total: usize = raw.iter().map(|(_, n)| n).sum();
        let flat: Vec<f64> = weighted.blocks().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        for j in 0..6 {
            let mean = raw.iter().map(|(v, n)| v[j] * *n as f64).sum::<f64>() / total as f64;
            prop_assert!((flat[j] - mean).abs() <= 1e-14);
        }
    }

    #[test]
    fn largest_remainder_hits_the_total(
        w in prop::collection::vec(0.0..1.0f64, 1..10),
        total in 0usize..200,
    ) {
        prop_assume!(w.iter().sum::<f64>() > 0.0);
        let out = largest_remainder(&w, total);
        prop_assert_eq!(out.iter().sum::<usize>(), total);
    }

    #[test]
    fn sampled_clients_are_distinct_and_sorted(seed in any::<u64>(), n in 1usize..40, frac in 0.0..=1.0f64) {
        let count = ((n as f64 * frac) as usize).max(1).min(n);
        let ids = sample_clients(&mut stream(seed, Purpose::Sampling, 1, 0), n, count).unwrap();
        prop_assert_eq!(ids.len(), count);
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ids.iter().all(|&i| i < n));
    }

    #[test]
    fn seed_streams_are_reproducible(master in any::<u64>(), round in 0u64..100, client in 0u64..100) {
        let a: u64 = stream(master, Purpose::Batches, round, client).random();
        let b: u64 = stream(master, Purpose::Batches, round, client).random();
        prop_assert_eq!(a, b);
        prop_assert_ne!(
            derive_seed(master, Purpose::Batches, round, client),
            derive_seed(master, Purpose::Privacy, round, client)
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pathological_partition_is_a_disjoint_cover(seed in any::<u64>(), n in 2usize..12, k in 1usize..5) {
        let nc = 8;
        let labels: Vec<usize> = (0..nc * 15).map(|i| i % nc).collect();
        if n * k < nc {
            // Some class would have no owner and its samples no shard.
            prop_assert!(partition_pathological(&labels, nc, n, k, seed).is_err());
            return Ok(());
        }
        let p = partition_pathological(&labels, nc, n, k, seed).unwrap();
        prop_assert!(p.is_disjoint_cover(labels.len()));
        for h in &p.histograms {
            prop_assert_eq!(h.iter().filter(|&&c| c > 0).count(), k);
        }
    }

    #[test]
    fn dirichlet_partition_is_a_disjoint_cover(seed in any::<u64>(), n in 1usize..12, beta in 0.05..100.0f64) {
        let nc = 6;
        let labels: Vec<usize> = (0..nc * 20).map(|i| (i * 7) % nc).collect();
        let p = partition_dirichlet(&labels, nc, n, beta, seed).unwrap();
        prop_assert!(p.is_disjoint_cover(labels.len()));
        prop_assert_eq!(p.num_clients(), n);
        for (shard, h) in p.shards.iter().zip(&p.histograms) {
            prop_assert_eq!(shard.len(), h.iter().sum::<usize>());
        }
    }
}

#[test]
fn priors_are_label_frequencies() {
    let p = compute_class_priors(&[0, 0, 2, 2, 2, 1], 4).unwrap();
    assert_eq!(p.as_slice(), &[2.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0, 0.0]);
    assert_eq!(compute_class_priors(&[3, 3], 4).unwrap().as_slice(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn laplace_draws_have_the_right_spread() {
    let mut rng = stream(1, Purpose::Privacy, 0, 0);
    let n = 200_000;
    let draws: Vec<f64> = (0..n).map(|_| laplace(&mut rng, 2.0)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let mad = draws.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    // E|X| = b for Laplace(0, b).
    assert!(mean.abs() < 0.03, "{mean}");
    assert!((mad - 2.0).abs() < 0.03, "{mad}");
}
