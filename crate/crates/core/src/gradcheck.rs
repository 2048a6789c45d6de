//! Autodiff versus central finite differences over the trainable blocks of a
//! small CCMP model.

use fedprompt_tensor::{finite_diff_grad, max_relative_error, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccmp::{ClassPriors, PrototypeBank};
use crate::error::{CoreError, Result};
use crate::model::{batch_loss, embed_image, init_backbone, loss_and_grads, BackboneConfig, CcmpContext, ForwardOptions, PromptParams};
use crate::rng::{stream, Purpose};

pub const TOLERANCE: f64 = 1e-4;
const MAX_PARAMS: usize = 5_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSpec {
    pub seed: u64,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub classes: usize,
    pub shared_prompts: usize,
    pub batch: usize,
    pub step: f64,
    /// Corrupts the analytic gradient of every block; a negative control
    /// for the harness itself.
    pub inject_fault: bool,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 16,
            layers: 4,
            heads: 2,
            classes: 4,
            shared_prompts: 2,
            batch: 3,
            step: 1e-5,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    pub params: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockError>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// CCMP runs at every layer from the middle of the backbone onwards, with a
/// moderate temperature and a prior with one empty class so that the score
/// path, the masking and the token replacement are all on the tape.
pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    let cfg = BackboneConfig {
        dim: spec.dim,
        layers: spec.layers,
        heads: spec.heads,
        image_size: 8,
        patch_size: 4,
        mlp_ratio: 2,
        init_std: 0.3,
    };
    if spec.classes < 2 {
        return Err(CoreError::config("classes", "need at least two classes"));
    }
    let backbone = init_backbone(&cfg, spec.seed)?;
    let mut params = PromptParams::init(spec.dim, spec.shared_prompts, spec.classes, 0.5, spec.seed)?;
    if params.num_params() > MAX_PARAMS {
        return Err(CoreError::config("dim", format!("{} parameters is too many for finite differences", params.num_params())));
    }
    let mut rng = stream(spec.seed, Purpose::Warmup, 0, 0);
    params
        .head
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.5..0.5));
    let layers: Vec<usize> = ((spec.layers / 2).max(1)..=spec.layers).collect();
    let mut bank = PrototypeBank::new(&layers, spec.classes, spec.dim, 0.9, 1)?;
    for &l in &layers {
        let protos = (0..spec.classes)
            .map(|_| (0..spec.dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        bank.set_layer(l, protos)?;
    }
    let mut priors = vec![1.0; spec.classes];
    priors[spec.classes - 1] = 0.0;
    let total: f64 = priors.iter().sum();
    let priors = ClassPriors::new(priors.iter().map(|p| p / total).collect())?;
    let opts = ForwardOptions {
        ccmp_layers: layers,
        tau: 0.5,
        ..ForwardOptions::default()
    };
    let images: Vec<Tensor> = (0..spec.batch)
        .map(|_| {
            let px: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            embed_image(&backbone, &px)
        })
        .collect::<Result<_>>()?;
    let batch: Vec<(&Tensor, usize)> = images
        .iter()
        .enumerate()
        .map(|(i, t)| (t, i % (spec.classes - 1)))
        .collect();
    let ctx = CcmpContext { bank: &bank, priors: &priors };
    let (_, grads) = loss_and_grads(&backbone, &params, &batch, Some(ctx), &opts)?;

    let mut blocks = Vec::new();
    for (name, analytic) in grads.blocks() {
        let base = params.clone();
        let x = base.blocks().into_iter().find(|(n, _)| *n == name).expect("same layout").1.clone();
        let numeric = finite_diff_grad(
            |probe| {
                let mut p = base.clone();
                for (n, t) in p.blocks_mut() {
                    if n == name {
                        *t = probe.clone();
                    }
                }
                batch_loss(&backbone, &p, &batch, Some(ctx), &opts).unwrap_or(f64::NAN)
            },
            &x,
            spec.step,
        )?;
        let mut analytic = analytic.clone();
        if spec.inject_fault {
            let m = analytic.data().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-3);
            analytic.data_mut()[0] += 0.5 * m;
        }
        blocks.push(BlockError {
            block: name.to_string(),
            params: x.len(),
            max_rel_error: max_relative_error(analytic.data(), numeric.data()),
        });
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { blocks, max_rel_error })
}
