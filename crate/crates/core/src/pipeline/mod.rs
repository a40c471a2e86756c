//! Training stages and inference loops.

mod infer;
mod optim;

use std::fmt;

use rand::Rng;

use crate::autograd::Graph;
use crate::captions::{StructuredCaption, TokenSequence};
use crate::diffusion::{joint_loss, text_loss, GraphCond, LossWeights};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::model::{latent_row, render_task_definition, embed_roles, Denoiser, DualModel};
use crate::params::Gradients;
use crate::preference::{frequency_scores, sample_preference, DEFAULT_DRAWS, DEFAULT_TEMPERATURE};
use crate::rng::{stream, stream_indexed, DetRng};
use crate::synthworld::{augment_captions, Dataset, Outfit, Split};

pub use infer::{generate_item, infer_gor, infer_pfitb, Generated, InferenceOptions};
pub use optim::{Optimizer, OptimizerKind};

pub const AUGMENTATIONS_PER_OUTFIT: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Matching,
    TextFinetune,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::Warmup),
            2 => Ok(Stage::Matching),
            3 => Ok(Stage::TextFinetune),
            _ => Err(Error::Usage(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::Warmup => 1,
            Stage::Matching => 2,
            Stage::TextFinetune => 3,
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Stage::Warmup => 20_000,
            Stage::Matching => 10_000,
            Stage::TextFinetune => 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub temperature: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            steps: stage.default_steps(),
            batch_size: 8,
            lr: 3e-5,
            weight_decay: 1e-2,
            optimizer: OptimizerKind::Sgd,
            weights: LossWeights::default(),
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Usage("weight decay must be ≥ 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Usage("temperature must be positive".into()));
        }
        self.weights.validate()
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: u32,
    pub image_loss: f64,
    pub text_loss: f64,
    pub joint_loss: f64,
    /// Norm of the mean gap between role-embedded target and context latents; NaN without context.
    pub mean_gap_norm: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,stage,image_loss,text_loss,joint_loss,mean_gap_norm";
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.step, self.stage, self.image_loss, self.text_loss, self.joint_loss, self.mean_gap_norm
        )
    }
}

/// Observer for log lines and periodic checkpoints.
pub trait TrainObserver {
    fn log(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _step: usize, _model: &DualModel<f32>) -> Result<()> {
        Ok(())
    }
}

/// Collects log lines in memory.
#[derive(Default)]
pub struct MemoryLog {
    pub rows: Vec<LogRow>,
}

impl TrainObserver for MemoryLog {
    fn log(&mut self, row: &LogRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// `mean(z̃0) − mean(z̃c)` over a batch of (target, context) pairs.
pub fn mean_gap(pairs: &[(&LatentImage, &[LatentImage])], e0: &[f64], ec: &[f64]) -> Result<Vec<f64>> {
    let mut targets = Vec::new();
    let mut contexts = Vec::new();
    for (z0, ctx) in pairs {
        let (a, c) = embed_roles(z0, ctx, e0, ec)?;
        targets.push(a);
        contexts.extend(c);
    }
    if contexts.is_empty() {
        return Err(Error::Domain("mean gap needs at least one context".into()));
    }
    let mt = LatentImage::mean(&targets.iter().collect::<Vec<_>>())?;
    let mc = LatentImage::mean(&contexts.iter().collect::<Vec<_>>())?;
    Ok(mt.data.iter().zip(&mc.data).map(|(a, b)| a - b).collect())
}

/// Everything one training example needs.
struct Example {
    z0: LatentImage,
    y0: TokenSequence,
    context: Vec<LatentImage>,
    p: Option<Vec<u32>>,
    d: Option<Vec<u32>>,
}

/// Preference tokens for a user, or `None` when the history is empty.
pub fn preference_tokens<R: Rng + ?Sized>(
    ds: &Dataset,
    user: usize,
    temperature: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<Option<Vec<u32>>> {
    let history = ds.history_captions(user)?;
    let table = frequency_scores(&history);
    if table.is_empty() {
        return Ok(None);
    }
    sample_preference(&table, temperature, DEFAULT_DRAWS, rng)?.tokens(max_len)
}

fn context_latents(ds: &Dataset, outfit: &Outfit) -> Result<Vec<LatentImage>> {
    outfit.context_items().iter().map(|&i| ds.item(i).map(|it| it.latent.clone())).collect()
}

struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    train_outfits: Vec<&'a Outfit>,
    augmented: Vec<Vec<StructuredCaption>>,
}

impl<'a> Trainer<'a> {
    fn new(ds: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        let train_outfits = ds.outfits_in(Split::Train);
        if ds.items.is_empty() {
            return Err(Error::Usage("dataset has no items".into()));
        }
        if cfg.stage != Stage::Warmup && train_outfits.is_empty() {
            return Err(Error::Usage("dataset has no training outfits".into()));
        }
        let mut augmented = Vec::new();
        if cfg.stage == Stage::TextFinetune {
            let mut rng = stream(cfg.seed, "stage3.augment");
            for o in &train_outfits {
                let ctx: Vec<StructuredCaption> = o
                    .context_items()
                    .iter()
                    .map(|&i| ds.item(i).map(|it| it.caption.clone()))
                    .collect::<Result<_>>()?;
                let cat = &ds.item(o.held_out_item())?.category;
                augmented.push(augment_captions(&ds.schema, &ctx, cat, AUGMENTATIONS_PER_OUTFIT, &mut rng)?);
            }
        }
        Ok(Self { ds, cfg, train_outfits, augmented })
    }

    fn example(&self, model_cfg: &crate::model::ModelConfig, rng: &mut DetRng) -> Result<Example> {
        let ds = self.ds;
        if self.cfg.stage == Stage::Warmup {
            let item = &ds.items[rng.random_range(0..ds.items.len())];
            return Ok(Example {
                z0: item.latent.clone(),
                y0: TokenSequence::from_caption(&item.caption)?,
                context: Vec::new(),
                p: None,
                d: None,
            });
        }
        let k = rng.random_range(0..self.train_outfits.len());
        let outfit = self.train_outfits[k];
        let target = ds.item(outfit.held_out_item())?;
        let caption = match self.cfg.stage {
            Stage::TextFinetune => {
                let options = &self.augmented[k];
                options[rng.random_range(0..options.len())].clone()
            }
            _ => target.caption.clone(),
        };
        let p = preference_tokens(ds, outfit.user, self.cfg.temperature, model_cfg.pref_len, rng)?;
        Ok(Example {
            z0: target.latent.clone(),
            y0: TokenSequence::from_caption(&caption)?,
            context: context_latents(ds, outfit)?,
            p,
            d: Some(render_task_definition(&target.category)?),
        })
    }
}

/// Runs one training stage from `model` and returns the updated model.
pub fn train_stage(
    mut model: DualModel<f32>,
    ds: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<DualModel<f32>> {
    cfg.validate()?;
    if ds.latent_shape() != model.config.latent_shape {
        return Err(Error::Shape(format!(
            "dataset latents {:?} vs model {:?}",
            ds.latent_shape(),
            model.config.latent_shape
        )));
    }
    let trainer = Trainer::new(ds, cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay);
    let stage_label = format!("stage{}", cfg.stage.number());
    let w = cfg.weights;
    let zeros = LatentImage::zeros(model.config.latent_shape);
    let mut window = [0.0f64; 3];
    let mut window_n = 0usize;
    for step in 0..cfg.steps {
        let mut rng = stream_indexed(cfg.seed, &stage_label, step as u64);
        let mut grads = Gradients::empty(model.params.len());
        let scale = 1.0 / cfg.batch_size as f32;
        let mut sums = [0.0f64; 3];
        let mut gap_pairs = Vec::new();
        let examples: Vec<Example> =
            (0..cfg.batch_size).map(|_| trainer.example(&model.config, &mut rng)).collect::<Result<_>>()?;
        for ex in &examples {
            let keep_m = !ex.context.is_empty() && rng.random::<f64>() >= w.drop_m;
            let keep_p = rng.random::<f64>() >= w.drop_p;
            let keep_d = rng.random::<f64>() >= w.drop_d;
            if !ex.context.is_empty() {
                gap_pairs.push((&ex.z0, ex.context.as_slice()));
            }
            let mut g: Graph<'_, f32> = model.graph(true);
            let m = if keep_m { Some(model.project_context(&mut g, &ex.context, Some(&mut rng))?) } else { None };
            let cond = GraphCond {
                p: ex.p.as_deref().filter(|_| keep_p),
                d: ex.d.as_deref().filter(|_| keep_d),
                m,
            };
            let (loss, parts) = match cfg.stage {
                Stage::TextFinetune => {
                    let z = g.constant(latent_row(&zeros));
                    let l = text_loss(&model, &mut g, &ex.y0, z, cond, w.k, w.t_min, &mut rng)?;
                    (l, [0.0, f64::from(g.scalar(l)), f64::from(g.scalar(l))])
                }
                stage => {
                    let (caption, text_latent) = if stage == Stage::Warmup {
                        (Some(ex.y0.tokens.as_slice()), &ex.z0)
                    } else {
                        (None, &zeros)
                    };
                    let j = joint_loss(&model, &mut g, &ex.z0, &ex.y0, caption, text_latent, cond, &w, &mut rng)?;
                    let parts = [j.image, j.text, j.total].map(|v| f64::from(g.scalar(v)));
                    (j.total, parts)
                }
            };
            if !parts.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged(format!("non-finite loss {parts:?} at {stage_label} step {step}")));
            }
            for (s, v) in sums.iter_mut().zip(parts) {
                *s += v / cfg.batch_size as f64;
            }
            let gr = g.backward(loss)?;
            grads.merge_scaled(&gr, scale);
        }
        if !grads.all_finite() {
            return Err(Error::Diverged(format!("non-finite gradient at {stage_label} step {step}")));
        }
        opt.step(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after {stage_label} step {step}")));
        }
        for (a, s) in window.iter_mut().zip(sums) {
            *a += s;
        }
        window_n += 1;
        let done = step + 1;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.steps) {
            let (e0, ec) = model.role_embeddings();
            let gap = if gap_pairs.is_empty() {
                f64::NAN
            } else {
                mean_gap(&gap_pairs, &e0, &ec)?.iter().map(|v| v * v).sum::<f64>().sqrt()
            };
            let n = window_n as f64;
            observer.log(&LogRow {
                step: done,
                stage: cfg.stage.number(),
                image_loss: window[0] / n,
                text_loss: window[1] / n,
                joint_loss: window[2] / n,
                mean_gap_norm: gap,
            })?;
            window = [0.0; 3];
            window_n = 0;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            observer.checkpoint(done, &model)?;
        }
    }
    Ok(model)
}
