//! Client accuracy, heldout splits, the prototype probe and cost accounting.

use fedprompt_tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ccmp::{class_means, cosine};
use crate::error::{CoreError, Result};
use crate::federation::{effective_priors, ClientData, ServerState, Strategy, TrainConfig};
use crate::model::{forward, predict, BackboneWeights, CcmpContext, ForwardOptions, PromptParams};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(client id, accuracy)` for clients with a nonempty test shard.
    pub per_client: Vec<(usize, f64)>,
    pub mean: f64,
    pub worst: f64,
    pub max: f64,
    /// Clients skipped because their test shard was empty.
    pub excluded: usize,
}

impl EvalReport {
    pub fn from_accuracies(per_client: Vec<(usize, f64)>, excluded: usize) -> Self {
        if per_client.is_empty() {
            return Self {
                excluded,
                ..Self::default()
            };
        }
        let accs = per_client.iter().map(|(_, a)| *a);
        let mean = accs.clone().sum::<f64>() / per_client.len() as f64;
        let worst = accs.clone().fold(f64::INFINITY, f64::min);
        let max = accs.fold(f64::NEG_INFINITY, f64::max);
        Self {
            per_client,
            mean,
            worst,
            max,
            excluded,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_client.is_empty()
    }
}

/// Accuracy of every listed client on its own test shard, using the
/// parameters it would train from and its own priors.
pub fn evaluate_clients(
    backbone: &BackboneWeights,
    state: &ServerState,
    clients: &[&ClientData],
    config: &TrainConfig,
) -> Result<EvalReport> {
    let opts = config.forward_options();
    let mut per_client = Vec::with_capacity(clients.len());
    let mut excluded = 0;
    for client in clients {
        if client.test.is_empty() {
            excluded += 1;
            continue;
        }
        let params = state.params_for(client.id);
        let priors = effective_priors(config.strategy, client);
        let ctx = state.bank.as_ref().map(|bank| CcmpContext { bank, priors: &priors });
        let tokens: Vec<&Tensor> = client.test.iter().map(|(t, _)| t).collect();
        let traces = forward(backbone, &params, &tokens, ctx, &opts, None)?;
        let correct = traces
            .iter()
            .zip(&client.test)
            .filter(|(tr, (_, y))| predict(&tr.logits) == *y)
            .count();
        per_client.push((client.id, correct as f64 / client.test.len() as f64));
    }
    if excluded > 0 {
        log::warn!("{excluded} client(s) with empty test shards excluded from evaluation");
    }
    Ok(EvalReport::from_accuracies(per_client, excluded))
}

/// Splits client ids `0..n` into `round(fraction · n)` participating clients
/// and the heldout remainder, both ascending.
pub fn heldout_split(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoreError::config("heldout_fraction", "participating fraction must be in (0, 1)"));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(CoreError::config(
            "heldout_fraction",
            format!("{fraction} of {n} clients leaves one side empty"),
        ));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut stream(seed, Purpose::Heldout, 0, 0));
    let mut part = ids[..k].to_vec();
    let mut held = ids[k..].to_vec();
    part.sort_unstable();
    held.sort_unstable();
    Ok((part, held))
}

/// Top-k accuracy of nearest-prototype classification on the cls token
/// entering `layer` of the prompt-free frozen model. Prototypes are the class
/// means over `pool`; only classes present in the pool compete.
pub fn prototype_topk_probe(
    backbone: &BackboneWeights,
    pool: &[(Tensor, usize)],
    num_classes: usize,
    layer: usize,
    k: usize,
) -> Result<f64> {
    if pool.is_empty() {
        return Err(CoreError::Data("empty probe pool".into()));
    }
    let params = PromptParams::init(backbone.config.dim, 0, num_classes, 0.0, 0)?;
    let tokens: Vec<&Tensor> = pool.iter().map(|(t, _)| t).collect();
    let labels: Vec<usize> = pool.iter().map(|(_, y)| *y).collect();
    let traces = forward(backbone, &params, &tokens, None, &ForwardOptions::plain(), Some(layer))?;
    let cls: Vec<&[f64]> = traces.iter().map(|t| t.cls_in[layer - 1].as_slice()).collect();
    let protos = class_means(&cls, &labels, num_classes)?;
    let mut present = vec![false; num_classes];
    labels.iter().for_each(|&y| present[y] = true);
    let hits = cls
        .iter()
        .zip(&labels)
        .filter(|(c, &y)| {
            let own = cosine(c, &protos[y]);
            // Rank = number of competing classes strictly closer, ties to the
            // lower index.
            let better = (0..num_classes)
                .filter(|&o| present[o] && o != y)
                .filter(|&o| {
                    let s = cosine(c, &protos[o]);
                    s > own || (s == own && o < y)
                })
                .count();
            better < k
        })
        .count();
    Ok(hits as f64 / pool.len() as f64)
}

/// Dimensions entering the multiplication count of a ViT forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopDims {
    pub layers: u64,
    pub heads: u64,
    pub tokens: u64,
    pub dim: u64,
    pub head_dim: u64,
    pub classes: u64,
}

impl FlopDims {
    pub const VIT_B16_CIFAR100: FlopDims = FlopDims {
        layers: 12,
        heads: 12,
        tokens: 197,
        dim: 768,
        head_dim: 64,
        classes: 100,
    };
}

/// `LH(3Tdd_h + T²d_h) + LTd² + Cd`.
pub fn flop_estimate(d: &FlopDims) -> u128 {
    let (l, h, t, dm, dh, c) = (
        d.layers as u128,
        d.heads as u128,
        d.tokens as u128,
        d.dim as u128,
        d.head_dim as u128,
        d.classes as u128,
    );
    l * h * (3 * t * dm * dh + t * t * dh) + l * t * dm * dm + c * dm
}

/// CCMP multiplications per sample: `|C|·d` for the similarities plus `|C|·d`
/// for the mixing product, per CCMP layer.
pub fn ccmp_multiplications(d: &FlopDims, ccmp_layers: u64) -> u128 {
    ccmp_layers as u128 * 2 * d.classes as u128 * d.dim as u128
}

/// CCMP multiplications as a fraction of [`flop_estimate`].
pub fn ccmp_overhead(d: &FlopDims, ccmp_layers: u64) -> f64 {
    ccmp_multiplications(d, ccmp_layers) as f64 / flop_estimate(d) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommSpec {
    pub rounds: u64,
    pub classes: u64,
    pub dim: u64,
    pub shared_prompts: u64,
    pub ccmp_layers: u64,
    pub update_period: u64,
    pub strategy: Strategy,
}

impl CommSpec {
    pub fn from_config(config: &TrainConfig, classes: usize, dim: usize) -> Self {
        Self {
            rounds: config.rounds as u64,
            classes: classes as u64,
            dim: dim as u64,
            shared_prompts: config.num_shared_prompts as u64,
            ccmp_layers: if config.strategy.uses_ccmp() {
                config.ccmp_layers.len() as u64
            } else {
                0
            },
            update_period: config.update_period as u64,
            strategy: config.strategy,
        }
    }
}

/// Parameter counts moved by one client that participates in every round.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommReport {
    /// Prompt blocks and head uploaded each round.
    pub params_per_round: u64,
    /// Local prototypes uploaded each round (they are buffered server-side
    /// until the period ends).
    pub prototypes_per_round: u64,
    /// Rounds that close an update period and broadcast a new bank.
    pub bank_broadcasts: u64,
    pub total_upload: u64,
    pub total_download: u64,
}

pub fn comm_accounting(spec: &CommSpec) -> CommReport {
    let head = spec.classes * spec.dim;
    let shared = spec.shared_prompts * spec.dim;
    let class = if spec.ccmp_layers > 0 { spec.classes * spec.dim } else { 0 };
    let bank = spec.ccmp_layers * spec.classes * spec.dim;
    // Personalized clients keep their prompt blocks local; only H travels.
    let params = match spec.strategy {
        Strategy::Personalized => head,
        _ => head + shared + class,
    };
    let broadcasts = spec.rounds.checked_div(spec.update_period).unwrap_or(0);
    CommReport {
        params_per_round: params,
        prototypes_per_round: bank,
        bank_broadcasts: broadcasts,
        total_upload: spec.rounds * (params + bank),
        total_download: spec.rounds * params + broadcasts * bank,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies(vec![(0, 1.0), (1, 0.5)], 0);
        assert_eq!((r.mean, r.worst, r.max), (0.75, 0.5, 1.0));
        let r = EvalReport::from_accuracies(vec![(3, 1.0)], 2);
        assert_eq!((r.mean, r.worst, r.excluded), (1.0, 1.0, 2));
    }

    #[test]
    fn heldout_nine_one() {
        let (p, h) = heldout_split(10, 0.9, 4).unwrap();
        assert_eq!((p.len(), h.len()), (9, 1));
        assert_eq!(heldout_split(10, 0.9, 4).unwrap(), (p.clone(), h.clone()));
        assert!(h.iter().all(|id| !p.contains(id)));
        assert!(heldout_split(3, 0.1, 0).is_err());
        assert!(heldout_split(3, 1.0, 0).is_err());
    }

    #[test]
    fn flops_unit_dims() {
        let one = FlopDims {
            layers: 1,
            heads: 1,
            tokens: 1,
            dim: 1,
            head_dim: 1,
            classes: 1,
        };
        assert_eq!(flop_estimate(&one), 6);
        let mut two = one;
        two.tokens = 2;
        assert!(flop_estimate(&two) - 2 > 2 * (flop_estimate(&one) - 2));
    }

    #[test]
    fn flops_match_expanded_polynomial() {
        let d = FlopDims::VIT_B16_CIFAR100;
        // 12·12·(3·197·768·64 + 197²·64) + 12·197·768² + 100·768
        let expanded: u128 = 12 * 12 * (29_048_832 + 2_483_776) + 1_394_343_936 + 76_800;
        assert_eq!(flop_estimate(&d), expanded);
    }

    #[test]
    fn comm_without_ccmp_has_no_prototypes() {
        let spec = CommSpec {
            rounds: 5,
            classes: 10,
            dim: 8,
            shared_prompts: 1,
            ccmp_layers: 0,
            update_period: 1,
            strategy: Strategy::SharedOnly,
        };
        let r = comm_accounting(&spec);
        assert_eq!(r.prototypes_per_round, 0);
        assert_eq!(r.total_upload, 5 * (80 + 8));
    }

    #[test]
    fn longer_period_halves_bank_broadcasts() {
        let mut spec = CommSpec {
            rounds: 12,
            classes: 10,
            dim: 8,
            shared_prompts: 1,
            ccmp_layers: 3,
            update_period: 1,
            strategy: Strategy::SharedCcmp,
        };
        let r1 = comm_accounting(&spec);
        spec.update_period = 2;
        let r2 = comm_accounting(&spec);
        assert_eq!(r2.bank_broadcasts * 2, r1.bank_broadcasts);
        assert_eq!(r1.total_download - r2.total_download, 6 * 240);
    }
}
