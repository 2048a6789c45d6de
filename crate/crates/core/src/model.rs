//! Frozen transformer backbone with a shared-prompt block and a CCMP slot.
//!
//! Tokens are stored as rows. The sequence entering layer 1 is
//! `[cls, P_S, E]`; the first CCMP layer inserts the mixed prompt `m` right
//! after `cls`, giving `[cls, m, P_S, E]`, and later CCMP layers overwrite
//! that slot using their own incoming `cls`.

use fedprompt_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ccmp::{ClassPriors, PrototypeBank};
use crate::error::{CoreError, Result};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 8,
            heads: 2,
            image_size: 16,
            patch_size: 8,
            mlp_ratio: 4,
            // At 0.02 the random stack washes the image signal out of the cls
            // token and nothing downstream learns at desk scale.
            init_std: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("model.{f}");
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CoreError::config(field("heads"), format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.layers == 0 {
            return Err(CoreError::config(field("layers"), "must be at least 1"));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(CoreError::config(
                field("patch_size"),
                format!("image size {} not divisible into {}-pixel patches", self.image_size, self.patch_size),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(CoreError::config(field("mlp_ratio"), "must be at least 1"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(CoreError::config(field("init_std"), "must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }
}

/// Frozen weights. Nothing in this crate ever hands out a mutable reference
/// once a run has started.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub patch_embed: Tensor,
    pub patch_bias: Tensor,
    /// Row 0 belongs to `cls`, rows `1..` to the image patches.
    pub pos_embed: Tensor,
    pub cls: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl BackboneWeights {
    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        [&self.patch_embed, &self.patch_bias, &self.pos_embed, &self.cls]
            .into_iter()
            .chain(self.layers.iter().flat_map(|l| l.tensors()))
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.tensors().flat_map(|t| t.data()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }
}

fn gaussian<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        let normal = Normal::new(0.0, std).map_err(|e| CoreError::config("model.init_std", e.to_string()))?;
        (0..n).map(|_| normal.sample(rng)).collect()
    };
    Ok(Tensor::new(shape, data)?)
}

/// Weight matrices are `N(0, init_std²)`, biases zero, layer-norm gains one.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneWeights> {
    config.validate()?;
    let mut rng = stream(seed, Purpose::Backbone, 0, 0);
    let d = config.dim;
    let hidden = d * config.mlp_ratio;
    let std = config.init_std;
    let ones = |n: usize| Tensor::vector(&vec![1.0; n]);
    let zeros = |n: usize| Tensor::vector(&vec![0.0; n]);
    let patch_embed = gaussian(&mut rng, &[config.patch_dim(), d], std)?;
    let pos_embed = gaussian(&mut rng, &[config.num_patches() + 1, d], std)?;
    let cls = gaussian(&mut rng, &[d], std)?;
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        layers.push(LayerWeights {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: gaussian(&mut rng, &[d, d], std)?,
            bq: zeros(d),
            wk: gaussian(&mut rng, &[d, d], std)?,
            bk: zeros(d),
            wv: gaussian(&mut rng, &[d, d], std)?,
            bv: zeros(d),
            wo: gaussian(&mut rng, &[d, d], std)?,
            bo: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w1: gaussian(&mut rng, &[d, hidden], std)?,
            b1: zeros(hidden),
            w2: gaussian(&mut rng, &[hidden, d], std)?,
            b2: zeros(d),
        });
    }
    Ok(BackboneWeights {
        config: config.clone(),
        patch_embed,
        patch_bias: zeros(d),
        pos_embed,
        cls,
        layers,
    })
}

/// Patch tokens `E` (with position embeddings) for one square single-channel
/// image. They do not depend on any trainable parameter, so callers can embed
/// a shard once and reuse the tokens for every round.
pub fn embed_image(backbone: &BackboneWeights, pixels: &[f64]) -> Result<Tensor> {
    let cfg = &backbone.config;
    let (s, p) = (cfg.image_size, cfg.patch_size);
    if pixels.len() != s * s {
        return Err(CoreError::Data(format!("image has {} pixels, expected {}", pixels.len(), s * s)));
    }
    let grid = s / p;
    let d = cfg.dim;
    let mut out = Vec::with_capacity(grid * grid * d);
    let mut patch = vec![0.0; p * p];
    for gi in 0..grid {
        for gj in 0..grid {
            for r in 0..p {
                let src = (gi * p + r) * s + gj * p;
                patch[r * p..(r + 1) * p].copy_from_slice(&pixels[src..src + p]);
            }
            let token = out.len() / d + 1;
            for j in 0..d {
                let mut acc = backbone.patch_bias.data()[j] + backbone.pos_embed.at(token, j);
                for (k, x) in patch.iter().enumerate() {
                    acc += x * backbone.patch_embed.at(k, j);
                }
                out.push(acc);
            }
        }
    }
    Ok(Tensor::matrix(grid * grid, d, out)?)
}

/// The trainable set: shared prompts `P_S` (d×|S|, absent when |S| = 0),
/// class prompts `P_C` (d×|C|, one set for all CCMP layers) and the head `H`
/// (|C|×d).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams {
    pub shared: Option<Tensor>,
    pub class: Tensor,
    pub head: Tensor,
}

impl PromptParams {
    /// Prompts are `N(0, std²)`; the head starts at zero.
    pub fn init(dim: usize, num_shared: usize, num_classes: usize, std: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(CoreError::config("data.num_classes", "must be at least 1"));
        }
        let mut rng = stream(seed, Purpose::Prompts, 0, 0);
        let shared = if num_shared == 0 {
            None
        } else {
            Some(gaussian(&mut rng, &[dim, num_shared], std)?)
        };
        Ok(Self {
            shared,
            class: gaussian(&mut rng, &[dim, num_classes], std)?,
            head: Tensor::zeros(&[num_classes, dim])?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.head.shape()[1]
    }

    pub fn num_shared(&self) -> usize {
        self.shared.as_ref().map_or(0, |s| s.shape()[1])
    }

    /// Named blocks in a fixed order: `P_S` (if present), `P_C`, `H`.
    pub fn blocks(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(3);
        if let Some(s) = &self.shared {
            out.push(("P_S", s));
        }
        out.push(("P_C", &self.class));
        out.push(("H", &self.head));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = Vec::with_capacity(3);
        if let Some(s) = self.shared.as_mut() {
            out.push(("P_S", s));
        }
        out.push(("P_C", &mut self.class));
        out.push(("H", &mut self.head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape()).expect("existing shape is valid");
        Self {
            shared: self.shared.as_ref().map(z),
            class: z(&self.class),
            head: z(&self.head),
        }
    }

    fn same_layout(&self, other: &Self) -> bool {
        let a = self.blocks();
        let b = other.blocks();
        a.len() == b.len() && a.iter().zip(&b).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    /// `self += alpha · other`, block by block.
    pub fn add_scaled(&mut self, other: &Self, alpha: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(CoreError::Protocol("prompt parameter layouts differ".into()));
        }
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += alpha * s;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, t) in self.blocks_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .map(|((_, a), (_, b))| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, t)| t.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForwardOptions {
    /// 1-indexed layers before which the CCMP token is mixed, ascending.
    pub ccmp_layers: Vec<usize>,
    pub tau: f64,
    /// Mix only at the first CCMP layer and let the token propagate.
    pub propagate_only: bool,
    /// Treat the scores as constants in the backward pass.
    pub detach_scores: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            ccmp_layers: vec![5, 6, 7],
            tau: 0.05,
            propagate_only: false,
            detach_scores: false,
        }
    }
}

impl ForwardOptions {
    pub fn plain() -> Self {
        Self {
            ccmp_layers: Vec::new(),
            ..Self::default()
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(CoreError::config("train.tau", "temperature must be positive"));
        }
        if self.ccmp_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::config("train.ccmp_layers", "must be strictly ascending"));
        }
        if let Some(&l) = self.ccmp_layers.iter().find(|&&l| l == 0 || l > num_layers) {
            return Err(CoreError::config(
                "train.ccmp_layers",
                format!("layer {l} outside 1..={num_layers}"),
            ));
        }
        Ok(())
    }
}

/// Prototypes and client priors consulted by the CCMP layers.
#[derive(Clone, Copy, Debug)]
pub struct CcmpContext<'a> {
    pub bank: &'a PrototypeBank,
    pub priors: &'a ClassPriors,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    /// `cls_in[l - 1]` is the cls token entering layer `l`, recorded before
    /// any CCMP token is mixed for that layer.
    pub cls_in: Vec<Vec<f64>>,
    /// `(layer, s)` for every layer whose scores were computed.
    pub scores: Vec<(usize, Vec<f64>)>,
    /// Empty when the pass stopped before the last layer.
    pub logits: Vec<f64>,
}

struct LayerVars {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
}

struct PromptVars {
    shared: Option<Var>,
    shared_rows: Option<Var>,
    class: Var,
    class_rows: Var,
    head: Var,
    head_cols: Var,
}

struct CcmpSlot {
    layer: usize,
    /// Unit-norm prototypes as columns (d×|C|); zero prototypes stay zero.
    protos: Var,
    log_prior: Vec<Option<f64>>,
}

/// One tape holding the backbone constants and the prompt leaves, on which
/// any number of samples can be run.
struct Session<'a> {
    g: Graph,
    cfg: &'a BackboneConfig,
    opts: &'a ForwardOptions,
    cls: Var,
    layers: Vec<LayerVars>,
    prompts: PromptVars,
    ccmp: Vec<CcmpSlot>,
}

impl<'a> Session<'a> {
    fn new(
        backbone: &'a BackboneWeights,
        params: &PromptParams,
        trainable: bool,
        ccmp: Option<CcmpContext<'_>>,
        opts: &'a ForwardOptions,
        stop_before: Option<usize>,
    ) -> Result<Self> {
        let cfg = &backbone.config;
        opts.validate(cfg.layers)?;
        if params.dim() != cfg.dim {
            return Err(CoreError::config("model.dim", "prompt and backbone widths differ"));
        }
        let mut g = Graph::new();
        let mut cls0 = backbone.cls.data().to_vec();
        for (c, p) in cls0.iter_mut().zip(backbone.pos_embed.row(0)) {
            *c += p;
        }
        let cls = g.constant(Tensor::matrix(1, cfg.dim, cls0)?);
        let mut c = |t: &Tensor| g.constant(t.clone());
        let layers = backbone
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1: (c(&l.ln1_gain), c(&l.ln1_bias)),
                q: (c(&l.wq), c(&l.bq)),
                k: (c(&l.wk), c(&l.bk)),
                v: (c(&l.wv), c(&l.bv)),
                o: (c(&l.wo), c(&l.bo)),
                ln2: (c(&l.ln2_gain), c(&l.ln2_bias)),
                fc1: (c(&l.w1), c(&l.b1)),
                fc2: (c(&l.w2), c(&l.b2)),
            })
            .collect();
        let reg = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.leaf(t.detached().with_grad())
            } else {
                g.constant(t.clone())
            }
        };
        let shared = params.shared.as_ref().map(|t| reg(&mut g, t));
        let class = reg(&mut g, &params.class);
        let head = reg(&mut g, &params.head);
        let shared_rows = shared.map(|s| g.transpose(s)).transpose()?;
        let class_rows = g.transpose(class)?;
        let head_cols = g.transpose(head)?;
        let active = opts
            .ccmp_layers
            .iter()
            .copied()
            .filter(|&l| stop_before.is_none_or(|s| l < s))
            .take(if opts.propagate_only { 1 } else { usize::MAX });
        let mut slots = Vec::new();
        for layer in active {
            let ctx = ccmp.ok_or_else(|| {
                CoreError::config("train.ccmp_layers", "CCMP layers configured without a prototype bank")
            })?;
            if ctx.priors.num_classes() != params.num_classes() {
                return Err(CoreError::config("data.num_classes", "priors and head disagree on |C|"));
            }
            let protos = ctx.bank.layer(layer)?;
            let (nc, d) = (protos.len(), cfg.dim);
            if nc != params.num_classes() {
                return Err(CoreError::config("data.num_classes", "bank and head disagree on |C|"));
            }
            let mut cols = vec![0.0; d * nc];
            for (ci, p) in protos.iter().enumerate() {
                let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for (j, v) in p.iter().enumerate() {
                        cols[j * nc + ci] = v / norm;
                    }
                }
            }
            let protos = g.constant(Tensor::matrix(d, nc, cols)?);
            slots.push(CcmpSlot {
                layer,
                protos,
                log_prior: ctx.priors.log_bias(),
            });
        }
        Ok(Self {
            g,
            cfg,
            opts,
            cls,
            layers,
            prompts: PromptVars {
                shared,
                shared_rows,
                class,
                class_rows,
                head,
                head_cols,
            },
            ccmp: slots,
        })
    }

    fn linear(&mut self, x: Var, (w, b): (Var, Var)) -> Result<Var> {
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add_row(y, b)?)
    }

    fn block(&mut self, x: Var, layer: usize) -> Result<Var> {
        let lv = &self.layers[layer];
        let (ln1, q, k, v, o, ln2, fc1, fc2) = (lv.ln1, lv.q, lv.k, lv.v, lv.o, lv.ln2, lv.fc1, lv.fc2);
        let a = self.g.layer_norm(x, ln1.0, ln1.1)?;
        let q = self.linear(a, q)?;
        let k = self.linear(a, k)?;
        let v = self.linear(a, v)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = self.g.slice_cols(q, h * dh, dh)?;
            let kh = self.g.slice_cols(k, h * dh, dh)?;
            let vh = self.g.slice_cols(v, h * dh, dh)?;
            let kt = self.g.transpose(kh)?;
            let att = self.g.matmul(qh, kt)?;
            let att = self.g.scale(att, scale)?;
            let att = self.g.softmax_rows(att)?;
            heads.push(self.g.matmul(att, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { self.g.concat_cols(&heads)? };
        let attn = self.linear(cat, o)?;
        let x = self.g.add(x, attn)?;
        let b = self.g.layer_norm(x, ln2.0, ln2.1)?;
        let hdn = self.linear(b, fc1)?;
        let hdn = self.g.gelu(hdn)?;
        let out = self.linear(hdn, fc2)?;
        Ok(self.g.add(x, out)?)
    }

    /// Scores `s` and mixed token `m = (P_C s)ᵀ` for the current cls row.
    fn mix(&mut self, x: Var, slot: usize) -> Result<(Var, Vec<f64>)> {
        let cls = self.g.slice_rows(x, 0, 1)?;
        let unit = self.g.normalize_rows(cls)?;
        let sims = self.g.matmul(unit, self.ccmp[slot].protos)?;
        let logits = self.g.scale(sims, 1.0 / self.opts.tau)?;
        let mut s = self.g.masked_softmax_rows(logits, &self.ccmp[slot].log_prior)?;
        if self.opts.detach_scores {
            s = self.g.detach(s);
        }
        let values = self.g.value(s).data().to_vec();
        let m = self.g.matmul(s, self.prompts.class_rows)?;
        Ok((m, values))
    }

    fn run(&mut self, tokens: &Tensor, stop_before: Option<usize>) -> Result<(Option<Var>, ForwardTrace)> {
        if tokens.matrix_dims() != (self.cfg.num_patches(), self.cfg.dim) {
            return Err(CoreError::Data(format!("image tokens have shape {:?}", tokens.shape())));
        }
        let e = self.g.constant(tokens.clone());
        let mut parts = vec![self.cls];
        parts.extend(self.prompts.shared_rows);
        parts.push(e);
        let mut x = self.g.concat_rows(&parts)?;
        let mut trace = ForwardTrace::default();
        let mut inserted = false;
        let last = stop_before.map_or(self.cfg.layers, |s| (s - 1).min(self.cfg.layers));
        for layer in 1..=self.cfg.layers {
            trace.cls_in.push(self.g.value(x).row(0).to_vec());
            if stop_before == Some(layer) {
                break;
            }
            if let Some(slot) = self.ccmp.iter().position(|s| s.layer == layer) {
                let (m, s) = self.mix(x, slot)?;
                trace.scores.push((layer, s));
                x = if inserted {
                    self.g.replace_row(x, 1, m)?
                } else {
                    let n = self.g.value(x).matrix_dims().0;
                    let head = self.g.slice_rows(x, 0, 1)?;
                    let tail = self.g.slice_rows(x, 1, n - 1)?;
                    self.g.concat_rows(&[head, m, tail])?
                };
                inserted = true;
            }
            x = self.block(x, layer - 1)?;
        }
        if last < self.cfg.layers {
            return Ok((None, trace));
        }
        let cls = self.g.slice_rows(x, 0, 1)?;
        let logits = self.g.matmul(cls, self.prompts.head_cols)?;
        trace.logits = self.g.value(logits).data().to_vec();
        Ok((Some(logits), trace))
    }

    fn grads(&self) -> Result<PromptParams> {
        let get = |v: Var, like: &Tensor| -> Result<Tensor> {
            let g = self.g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; like.len()]);
            Ok(Tensor::new(like.shape(), g)?)
        };
        let p = &self.prompts;
        Ok(PromptParams {
            shared: p.shared.map(|v| get(v, self.g.value(v))).transpose()?,
            class: get(p.class, self.g.value(p.class))?,
            head: get(p.head, self.g.value(p.head))?,
        })
    }
}

/// Forward passes without gradients. With `stop_before = Some(l)` the pass
/// ends once the cls token entering layer `l` is recorded; CCMP layers at or
/// after `l` are then not consulted.
pub fn forward(
    backbone: &BackboneWeights,
    params: &PromptParams,
    tokens: &[&Tensor],
    ccmp: Option<CcmpContext<'_>>,
    opts: &ForwardOptions,
    stop_before: Option<usize>,
) -> Result<Vec<ForwardTrace>> {
    if let Some(s) = stop_before {
        if s == 0 || s > backbone.config.layers {
            return Err(CoreError::config("stop_before", format!("layer {s} outside the backbone")));
        }
    }
    let mut out = Vec::with_capacity(tokens.len());
    // A fresh tape per chunk keeps memory flat on large pools.
    for chunk in tokens.chunks(32) {
        let mut session = Session::new(backbone, params, false, ccmp, opts, stop_before)?;
        for t in chunk {
            out.push(session.run(t, stop_before)?.1);
        }
    }
    Ok(out)
}

/// Mean cross-entropy over `batch` and its gradient with respect to every
/// prompt block.
pub fn loss_and_grads(
    backbone: &BackboneWeights,
    params: &PromptParams,
    batch: &[(&Tensor, usize)],
    ccmp: Option<CcmpContext<'_>>,
    opts: &ForwardOptions,
) -> Result<(f64, PromptParams)> {
    if batch.is_empty() {
        return Err(CoreError::Data("empty batch".into()));
    }
    let mut session = Session::new(backbone, params, true, ccmp, opts, None)?;
    let mut total: Option<Var> = None;
    for (tokens, label) in batch {
        let (logits, _) = session.run(tokens, None)?;
        let logits = logits.expect("full pass yields logits");
        let loss = session.g.cross_entropy(logits, *label)?;
        total = Some(match total {
            Some(t) => session.g.add(t, loss)?,
            None => loss,
        });
    }
    let loss = session.g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64)?;
    let value = session.g.value(loss).data()[0];
    session.g.backward(loss)?;
    Ok((value, session.grads()?))
}

/// Mean cross-entropy only; the reference function for finite differences.
pub fn batch_loss(
    backbone: &BackboneWeights,
    params: &PromptParams,
    batch: &[(&Tensor, usize)],
    ccmp: Option<CcmpContext<'_>>,
    opts: &ForwardOptions,
) -> Result<f64> {
    let tokens: Vec<&Tensor> = batch.iter().map(|(t, _)| *t).collect();
    let traces = forward(backbone, params, &tokens, ccmp, opts, None)?;
    let mut total = 0.0;
    for (trace, (_, label)) in traces.iter().zip(batch) {
        let max = trace.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + trace.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - trace.logits[*label];
    }
    Ok(total / batch.len() as f64)
}

/// Argmax; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccmp::mix_prompt;
    use crate::ccmp::soft_scores;

    fn small() -> BackboneConfig {
        BackboneConfig {
            dim: 16,
            layers: 4,
            heads: 2,
            image_size: 8,
            patch_size: 4,
            mlp_ratio: 2,
            init_std: 0.3,
        }
    }

    fn image(seed: u64, cfg: &BackboneConfig) -> Vec<f64> {
        let mut rng = stream(seed, Purpose::Data, 0, 0);
        (0..cfg.image_size * cfg.image_size).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn bank(cfg: &BackboneConfig, layers: &[usize], nc: usize, seed: u64) -> PrototypeBank {
        let mut b = PrototypeBank::new(layers, nc, cfg.dim, 0.9, 1).unwrap();
        let mut rng = stream(seed, Purpose::Warmup, 0, 0);
        for &l in layers {
            let protos = (0..nc).map(|_| (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            b.set_layer(l, protos).unwrap();
        }
        b
    }

    #[test]
    fn init_is_seeded() {
        let cfg = BackboneConfig::default();
        let a = init_backbone(&cfg, 1).unwrap();
        assert_eq!(a, init_backbone(&cfg, 1).unwrap());
        assert_eq!(a.checksum(), init_backbone(&cfg, 1).unwrap().checksum());
        assert_ne!(a.checksum(), init_backbone(&cfg, 2).unwrap().checksum());
    }

    #[test]
    fn invalid_geometry_is_config_error() {
        let cfg = BackboneConfig { heads: 3, ..BackboneConfig::default() };
        assert!(matches!(init_backbone(&cfg, 0), Err(CoreError::Config { .. })));
        let cfg = BackboneConfig { patch_size: 5, ..BackboneConfig::default() };
        assert!(matches!(init_backbone(&cfg, 0), Err(CoreError::Config { .. })));
    }

    #[test]
    fn default_geometry_runs() {
        let cfg = BackboneConfig::default();
        let bb = init_backbone(&cfg, 0).unwrap();
        let params = PromptParams::init(32, 2, 8, 0.02, 0).unwrap();
        let tokens = embed_image(&bb, &image(0, &cfg)).unwrap();
        assert_eq!(tokens.shape(), &[4, 32]);
        let b = bank(&cfg, &[5, 6, 7], 8, 0);
        let priors = ClassPriors::uniform(8);
        let ctx = CcmpContext { bank: &b, priors: &priors };
        let t = forward(&bb, &params, &[&tokens], Some(ctx), &ForwardOptions::default(), None).unwrap();
        assert_eq!(t[0].logits.len(), 8);
        assert_eq!(t[0].cls_in.len(), 8);
        assert_eq!(t[0].scores.iter().map(|s| s.0).collect::<Vec<_>>(), vec![5, 6, 7]);
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[0.1, 0.9]), 1);
        assert_eq!(predict(&[0.5, 0.5]), 0);
        assert_eq!(predict(&[-1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn graph_scores_match_reference() {
        let cfg = small();
        let bb = init_backbone(&cfg, 4).unwrap();
        let params = PromptParams::init(16, 2, 3, 0.5, 4).unwrap();
        let b = bank(&cfg, &[2, 3], 3, 4);
        let priors = ClassPriors::new(vec![0.5, 0.0, 0.5]).unwrap();
        let ctx = CcmpContext { bank: &b, priors: &priors };
        let opts = ForwardOptions {
            ccmp_layers: vec![2, 3],
            tau: 0.5,
            ..ForwardOptions::default()
        };
        let tokens = embed_image(&bb, &image(1, &cfg)).unwrap();
        let t = &forward(&bb, &params, &[&tokens], Some(ctx), &opts, None).unwrap()[0];
        for (layer, s) in &t.scores {
            let expect = soft_scores(&t.cls_in[layer - 1], b.layer(*layer).unwrap(), &priors, 0.5).unwrap();
            for (a, e) in s.iter().zip(expect.as_slice()) {
                assert!((a - e).abs() < 1e-14);
            }
            assert_eq!(s[1], 0.0);
        }
    }

    #[test]
    fn one_hot_prior_inserts_class_column() {
        let cfg = small();
        let bb = init_backbone(&cfg, 2).unwrap();
        let params = PromptParams::init(16, 0, 3, 0.5, 2).unwrap();
        let b = bank(&cfg, &[2], 3, 2);
        let priors = ClassPriors::new(vec![0.0, 1.0, 0.0]).unwrap();
        let opts = ForwardOptions {
            ccmp_layers: vec![2],
            ..ForwardOptions::default()
        };
        let tokens = embed_image(&bb, &image(2, &cfg)).unwrap();
        let t = &forward(&bb, &params, &[&tokens], Some(CcmpContext { bank: &b, priors: &priors }), &opts, None)
            .unwrap()[0];
        assert_eq!(t.scores[0].1, vec![0.0, 1.0, 0.0]);
        let m = mix_prompt(&params.class, &crate::ccmp::ScoreVector::from_probs(t.scores[0].1.clone())).unwrap();
        let column: Vec<f64> = (0..16).map(|j| params.class.at(j, 1)).collect();
        assert_eq!(m, column);
    }

    #[test]
    fn plain_forward_ignores_class_prompts_and_bank() {
        let cfg = small();
        let bb = init_backbone(&cfg, 3).unwrap();
        let mut params = PromptParams::init(16, 0, 3, 0.5, 3).unwrap();
        params.head = Tensor::matrix(3, 16, (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let tokens = embed_image(&bb, &image(3, &cfg)).unwrap();
        let a = forward(&bb, &params, &[&tokens], None, &ForwardOptions::plain(), None).unwrap();
        params.class.data_mut()[0] += 1.0;
        let b = forward(&bb, &params, &[&tokens], None, &ForwardOptions::plain(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_bank_layer_is_config_error() {
        let cfg = small();
        let bb = init_backbone(&cfg, 3).unwrap();
        let params = PromptParams::init(16, 1, 3, 0.5, 3).unwrap();
        let b = bank(&cfg, &[2], 3, 3);
        let priors = ClassPriors::uniform(3);
        let opts = ForwardOptions {
            ccmp_layers: vec![2, 3],
            ..ForwardOptions::default()
        };
        let tokens = embed_image(&bb, &image(3, &cfg)).unwrap();
        let err = forward(&bb, &params, &[&tokens], Some(CcmpContext { bank: &b, priors: &priors }), &opts, None);
        assert!(matches!(err, Err(CoreError::Config { .. })));
        let err = forward(&bb, &params, &[&tokens], None, &opts, None);
        assert!(matches!(err, Err(CoreError::Config { .. })));
    }

    #[test]
    fn stop_before_records_prefix_and_skips_later_bank_layers() {
        let cfg = small();
        let bb = init_backbone(&cfg, 5).unwrap();
        let params = PromptParams::init(16, 1, 3, 0.5, 5).unwrap();
        let b = bank(&cfg, &[2, 3], 3, 5);
        let priors = ClassPriors::uniform(3);
        let ctx = CcmpContext { bank: &b, priors: &priors };
        let opts = ForwardOptions {
            ccmp_layers: vec![2, 3],
            ..ForwardOptions::default()
        };
        let tokens = embed_image(&bb, &image(5, &cfg)).unwrap();
        let full = &forward(&bb, &params, &[&tokens], Some(ctx), &opts, None).unwrap()[0];
        let part = &forward(&bb, &params, &[&tokens], Some(ctx), &opts, Some(3)).unwrap()[0];
        assert!(part.logits.is_empty());
        assert_eq!(part.cls_in, full.cls_in[..3].to_vec());
        assert_eq!(part.scores, full.scores[..1].to_vec());
    }

    #[test]
    fn propagate_only_mixes_once() {
        let cfg = small();
        let bb = init_backbone(&cfg, 6).unwrap();
        let params = PromptParams::init(16, 1, 3, 0.5, 6).unwrap();
        let b = bank(&cfg, &[2, 3], 3, 6);
        let priors = ClassPriors::uniform(3);
        let ctx = CcmpContext { bank: &b, priors: &priors };
        let opts = ForwardOptions {
            ccmp_layers: vec![2, 3],
            propagate_only: true,
            ..ForwardOptions::default()
        };
        let tokens = embed_image(&bb, &image(6, &cfg)).unwrap();
        let t = &forward(&bb, &params, &[&tokens], Some(ctx), &opts, None).unwrap()[0];
        assert_eq!(t.scores.len(), 1);
    }

    #[test]
    fn zero_learning_signal_on_frozen_backbone() {
        let cfg = small();
        let bb = init_backbone(&cfg, 7).unwrap();
        let before = bb.checksum();
        let params = PromptParams::init(16, 2, 3, 0.5, 7).unwrap();
        let tokens = embed_image(&bb, &image(7, &cfg)).unwrap();
        let (_, grads) = loss_and_grads(&bb, &params, &[(&tokens, 1)], None, &ForwardOptions::plain()).unwrap();
        assert_eq!(bb.checksum(), before);
        assert!(grads.is_finite());
        // P_C is unused without CCMP layers.
        assert!(grads.class.data().iter().all(|&v| v == 0.0));
    }
}
