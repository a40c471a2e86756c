//! Dual-branch transformer.
//!
//! The image stream holds patch tokens of the (role-embedded) latent followed
//! by the matching-condition tokens; the text stream holds the caption, the
//! preference segment and the task segment. Every block runs one joint
//! attention over both streams, so information flows in both directions, then
//! a per-stream feed-forward layer. Absent conditions become a single learned
//! null token.

mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::captions::{Vocab, CAPTION_LEN};
use crate::error::{Error, Result};
use crate::latent::{LatentImage, LatentShape};
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, DetRng};
use crate::tensor::{Real, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const TASK_TEMPLATE: &str = "Recommend a fashion {category} item, on white background.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub latent_shape: LatentShape,
    pub patch: usize,
    pub proj_hidden: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    pub pref_len: usize,
    pub task_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 64,
            heads: 4,
            ffn_mult: 4,
            latent_shape: (4, 8, 8),
            patch: 4,
            proj_hidden: 128,
            vocab_size: Vocab::global().size(),
            caption_len: CAPTION_LEN,
            pref_len: 32,
            task_len: 10,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.latent_shape;
        let counts = [
            self.depth, self.width, self.heads, self.ffn_mult, c, h, w, self.patch, self.proj_hidden,
            self.caption_len, self.pref_len, self.task_len,
        ];
        if counts.contains(&0) {
            return Err(Error::Spec("model sizes must all be at least 1".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Spec(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Spec(format!("patch {} does not tile {h}×{w}", self.patch)));
        }
        if self.vocab_size != Vocab::global().size() {
            return Err(Error::Spec(format!("vocab size {} ≠ {}", self.vocab_size, Vocab::global().size())));
        }
        if self.caption_len != CAPTION_LEN {
            return Err(Error::Spec(format!("caption length must be {CAPTION_LEN}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Spec("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_shape.0 * self.latent_shape.1 * self.latent_shape.2
    }

    pub fn patches(&self) -> usize {
        (self.latent_shape.1 / self.patch) * (self.latent_shape.2 / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.latent_shape.0 * self.patch * self.patch
    }

    /// Every parameter name with its shape.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (w, pd, np, d, hid) = (self.width, self.patch_dim(), self.patches(), self.latent_dim(), self.proj_hidden);
        let f = self.width * self.ffn_mult;
        let mut out: Vec<(String, (usize, usize))> = vec![
            ("ctx.embed.b".into(), (1, w)),
            ("ctx.embed.w".into(), (pd, w)),
            ("ctx.null".into(), (1, w)),
            ("ctx.pos".into(), (np, w)),
            ("ctx.proj1.b".into(), (1, hid)),
            ("ctx.proj1.w".into(), (d, hid)),
            ("ctx.proj2.b".into(), (1, d)),
            ("ctx.proj2.w".into(), (hid, d)),
            ("head.txt.b".into(), (1, self.vocab_size)),
            ("head.txt.ln.b".into(), (1, w)),
            ("head.txt.ln.g".into(), (1, w)),
            ("head.txt.w".into(), (w, self.vocab_size)),
            ("head.vel.b".into(), (1, pd)),
            ("head.vel.ln.b".into(), (1, w)),
            ("head.vel.ln.g".into(), (1, w)),
            ("head.vel.w".into(), (w, pd)),
            ("img.embed.b".into(), (1, w)),
            ("img.embed.w".into(), (pd, w)),
            ("img.pos".into(), (np, w)),
            ("pos.caption".into(), (self.caption_len, w)),
            ("pos.pref".into(), (self.pref_len, w)),
            ("pos.task".into(), (self.task_len, w)),
            ("role.e0".into(), (1, self.latent_shape.0)),
            ("role.ec".into(), (1, self.latent_shape.0)),
            ("time.b".into(), (1, w)),
            ("time.w".into(), (w, w)),
            ("tok.embed".into(), (self.vocab_size, w)),
        ];
        for b in 0..self.depth {
            for s in ["img", "txt"] {
                let p = |n: &str| format!("blocks.{b}.{s}.{n}");
                out.extend([
                    (p("ff1.b"), (1, f)),
                    (p("ff1.w"), (w, f)),
                    (p("ff2.b"), (1, w)),
                    (p("ff2.w"), (f, w)),
                    (p("k.b"), (1, w)),
                    (p("k.w"), (w, w)),
                    (p("ln1.b"), (1, w)),
                    (p("ln1.g"), (1, w)),
                    (p("ln2.b"), (1, w)),
                    (p("ln2.g"), (1, w)),
                    (p("o.b"), (1, w)),
                    (p("o.w"), (w, w)),
                    (p("q.b"), (1, w)),
                    (p("q.w"), (w, w)),
                    (p("v.b"), (1, w)),
                    (p("v.w"), (w, w)),
                ]);
            }
        }
        out
    }

    /// Names of parameters that only the velocity prediction depends on.
    pub fn image_exclusive_params(&self) -> Vec<String> {
        let last = self.depth - 1;
        let mut names: Vec<String> =
            ["head.vel.b", "head.vel.ln.b", "head.vel.ln.g", "head.vel.w"].iter().map(|s| s.to_string()).collect();
        for n in ["ff1.b", "ff1.w", "ff2.b", "ff2.w", "ln2.b", "ln2.g", "o.b", "o.w"] {
            names.push(format!("blocks.{last}.img.{n}"));
        }
        names
    }
}

fn init_tensor(name: &str, shape: (usize, usize), seed: u64) -> Tensor<f64> {
    let (r, c) = shape;
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf == "g" {
        return Tensor::filled(r, c, 1.0);
    }
    if leaf == "b" {
        return Tensor::zeros(r, c);
    }
    let std = match leaf {
        "w" => 1.0 / (r as f64).sqrt(),
        _ => 0.1,
    };
    let mut rng = stream(seed, &format!("init.{name}"));
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_vec(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Clone, Debug)]
struct StreamIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Ids {
    ctx_embed: (ParamId, ParamId),
    ctx_null: ParamId,
    ctx_pos: ParamId,
    proj1: (ParamId, ParamId),
    proj2: (ParamId, ParamId),
    head_txt: (ParamId, ParamId),
    head_txt_ln: (ParamId, ParamId),
    head_vel: (ParamId, ParamId),
    head_vel_ln: (ParamId, ParamId),
    img_embed: (ParamId, ParamId),
    img_pos: ParamId,
    pos_caption: ParamId,
    pos_pref: ParamId,
    pos_task: ParamId,
    e0: ParamId,
    ec: ParamId,
    time: (ParamId, ParamId),
    tok: ParamId,
    blocks: Vec<[StreamIds; 2]>,
}

impl Ids {
    fn resolve<T: Real>(cfg: &ModelConfig, p: &ParamStore<T>) -> Result<Self> {
        let one = |n: &str| p.id(n);
        let wb = |n: &str| -> Result<(ParamId, ParamId)> { Ok((p.id(&format!("{n}.w"))?, p.id(&format!("{n}.b"))?)) };
        let gb = |n: &str| Ok::<_, Error>((p.id(&format!("{n}.g"))?, p.id(&format!("{n}.b"))?));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let s = |s: &str| -> Result<StreamIds> {
                let n = |x: &str| format!("blocks.{b}.{s}.{x}");
                Ok(StreamIds {
                    ln1: gb(&n("ln1"))?,
                    q: wb(&n("q"))?,
                    k: wb(&n("k"))?,
                    v: wb(&n("v"))?,
                    o: wb(&n("o"))?,
                    ln2: gb(&n("ln2"))?,
                    ff1: wb(&n("ff1"))?,
                    ff2: wb(&n("ff2"))?,
                })
            };
            blocks.push([s("img")?, s("txt")?]);
        }
        Ok(Self {
            ctx_embed: wb("ctx.embed")?,
            ctx_null: one("ctx.null")?,
            ctx_pos: one("ctx.pos")?,
            proj1: wb("ctx.proj1")?,
            proj2: wb("ctx.proj2")?,
            head_txt: wb("head.txt")?,
            head_txt_ln: gb("head.txt.ln")?,
            head_vel: wb("head.vel")?,
            head_vel_ln: gb("head.vel.ln")?,
            img_embed: wb("img.embed")?,
            img_pos: one("img.pos")?,
            pos_caption: one("pos.caption")?,
            pos_pref: one("pos.pref")?,
            pos_task: one("pos.task")?,
            e0: one("role.e0")?,
            ec: one("role.ec")?,
            time: wb("time")?,
            tok: one("tok.embed")?,
            blocks,
        })
    }
}

/// Which heads a forward pass must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub velocity: bool,
    pub logits: bool,
}

impl Heads {
    pub const VELOCITY: Heads = Heads { velocity: true, logits: false };
    pub const LOGITS: Heads = Heads { velocity: false, logits: true };
    pub const BOTH: Heads = Heads { velocity: true, logits: true };
}

/// `velocity` is `1×dim`; `logits` is `caption_len×V`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub velocity: Option<Var>,
    pub logits: Option<Var>,
}

/// Matching condition before or after projection.
#[derive(Clone, Debug, PartialEq)]
pub enum Matching {
    /// Latents of the incomplete outfit; projected inside the graph.
    Context(Vec<LatentImage>),
    /// An already projected `m`.
    Projected(LatentImage),
}

/// The condition triple; `None` marks an absent condition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionBundle {
    pub p: Option<Vec<u32>>,
    pub d: Option<Vec<u32>>,
    pub m: Option<Matching>,
}

impl ConditionBundle {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn with_m(&self, m: Option<Matching>) -> Self {
        Self { m, ..self.clone() }
    }
}

/// Anything that predicts velocities and caption logits on a [`Graph`].
pub trait Denoiser<T: Real> {
    fn latent_shape(&self) -> LatentShape;

    fn graph(&self, record: bool) -> Graph<'_, T>;

    /// `m` for the given context latents. `dropout` carries the rng in training mode.
    fn project_context(&self, g: &mut Graph<'_, T>, context: &[LatentImage], dropout: Option<&mut DetRng>)
        -> Result<Var>;

    /// `z` is a `1×dim` node; `m` a `1×dim` node or absent. `caption` may be
    /// omitted when only the velocity is needed.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        caption: Option<&[u32]>,
        t: f64,
        p: Option<&[u32]>,
        d: Option<&[u32]>,
        m: Option<Var>,
        heads: Heads,
    ) -> Result<Outputs>;

    fn matching(&self, g: &mut Graph<'_, T>, m: &Matching, dropout: Option<&mut DetRng>) -> Result<Var> {
        match m {
            Matching::Context(ctx) => self.project_context(g, ctx, dropout),
            Matching::Projected(z) => Ok(g.constant(latent_row(z))),
        }
    }
}

pub fn latent_row<T: Real>(z: &LatentImage) -> Tensor<T> {
    Tensor::from_vec(1, z.dim(), z.data.iter().map(|&v| T::of(v)).collect())
}

pub fn row_latent<T: Real>(shape: LatentShape, t: &Tensor<T>) -> LatentImage {
    LatentImage::new(shape, t.data.iter().map(|v| v.f64()).collect())
}

/// `z̃0 = z0 + e0` and `z̃c = mean(context) + e_c`, with per-channel offsets.
pub fn embed_roles(
    z0: &LatentImage,
    context: &[LatentImage],
    e0: &[f64],
    ec: &[f64],
) -> Result<(LatentImage, Option<LatentImage>)> {
    let shift = |z: &LatentImage, e: &[f64]| -> Result<LatentImage> {
        if e.len() != z.channels() {
            return Err(Error::Shape(format!("{} role offsets for {} channels", e.len(), z.channels())));
        }
        let data = z.data.iter().enumerate().map(|(i, &v)| v + e[z.channel_of(i)]).collect();
        Ok(LatentImage::new(z.shape, data))
    };
    let zt0 = shift(z0, e0)?;
    if context.is_empty() {
        return Ok((zt0, None));
    }
    let refs: Vec<&LatentImage> = context.iter().collect();
    let mean = LatentImage::mean(&refs)?;
    mean.check_same_shape(z0)?;
    Ok((zt0, Some(shift(&mean, ec)?)))
}

/// Token ids of the task sentence for `category`.
pub fn render_task_definition(category: &str) -> Result<Vec<u32>> {
    let vocab = Vocab::global();
    if !vocab.is_category(category) {
        return Err(Error::Vocab(format!("unknown category {category:?}")));
    }
    vocab.tokenize(&TASK_TEMPLATE.replace("{category}", category))
}

fn time_features(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

#[derive(Clone, Debug)]
pub struct DualModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

impl<T: Real> PartialEq for DualModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Real> DualModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let map: BTreeMap<String, Tensor<T>> = config
            .param_shapes()
            .into_iter()
            .map(|(n, s)| {
                let t = init_tensor(&n, s, config.seed).cast();
                (n, t)
            })
            .collect();
        Self::from_params(config, ParamStore::from_map(map))
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.param_shapes() {
            match params.by_name(&name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => return Err(Error::Shape(format!("{name}: {:?} vs {:?}", t.shape(), shape))),
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        if params.len() != config.param_shapes().len() {
            return Err(Error::Format("unexpected extra parameters".into()));
        }
        let ids = Ids::resolve(&config, &params)?;
        Ok(Self { config, params, ids })
    }

    pub fn cast<U: Real>(&self) -> DualModel<U> {
        DualModel { config: self.config.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }

    pub fn role_embeddings(&self) -> (Vec<f64>, Vec<f64>) {
        let row = |id: ParamId| self.params.get(id).data.iter().map(|v| v.f64()).collect();
        (row(self.ids.e0), row(self.ids.ec))
    }

    fn channel_index(&self) -> Vec<usize> {
        let (_, h, w) = self.config.latent_shape;
        (0..self.config.latent_dim()).map(|i| i / (h * w)).collect()
    }

    /// Flat latent index for each (patch, feature) pair, patch-major.
    fn patch_index(&self) -> Vec<usize> {
        let (c, h, w) = self.config.latent_shape;
        let p = self.config.patch;
        let mut idx = Vec::with_capacity(c * h * w);
        for ph in 0..h / p {
            for pw in 0..w / p {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            idx.push(ch * h * w + (ph * p + dy) * w + pw * p + dx);
                        }
                    }
                }
            }
        }
        idx
    }

    fn unpatch_index(&self) -> Vec<usize> {
        let fwd = self.patch_index();
        let mut inv = vec![0; fwd.len()];
        for (i, &f) in fwd.iter().enumerate() {
            inv[f] = i;
        }
        inv
    }

    fn affine(&self, g: &mut Graph<'_, T>, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let (w, b) = (g.param(w), g.param(b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn ln(&self, g: &mut Graph<'_, T>, x: Var, (gain, bias): (ParamId, ParamId)) -> Var {
        let (gain, bias) = (g.param(gain), g.param(bias));
        g.layer_norm(x, gain, bias)
    }

    fn add_channel_offset(&self, g: &mut Graph<'_, T>, z: Var, e: ParamId) -> Var {
        let e = g.param(e);
        let row = g.gather(e, self.channel_index(), 1, self.config.latent_dim());
        g.add(z, row)
    }

    fn patch_tokens(&self, g: &mut Graph<'_, T>, z: Var, embed: (ParamId, ParamId), pos: ParamId) -> Var {
        let (np, pd) = (self.config.patches(), self.config.patch_dim());
        let patches = g.gather(z, self.patch_index(), np, pd);
        let x = self.affine(g, patches, embed);
        let pos = g.param(pos);
        g.add(x, pos)
    }

    fn text_segment(&self, g: &mut Graph<'_, T>, ids: &[u32], pos: ParamId, cap: usize) -> Result<Var> {
        let w = self.config.width;
        if ids.is_empty() || ids.len() > cap {
            return Err(Error::Shape(format!("text segment of {} tokens exceeds {cap}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} outside the vocabulary")));
        }
        let table = g.param(self.ids.tok);
        let idx = ids.iter().flat_map(|&i| (i as usize * w)..(i as usize + 1) * w).collect();
        let emb = g.gather(table, idx, ids.len(), w);
        let pos = g.param(pos);
        let pos = g.slice_rows(pos, 0, ids.len());
        Ok(g.add(emb, pos))
    }

    /// One joint-attention block. `keep` says which streams need their update.
    fn block(&self, g: &mut Graph<'_, T>, b: usize, xs: [Var; 2], keep: [bool; 2]) -> [Var; 2] {
        let ids = &self.ids.blocks[b];
        let n_img = g.shape(xs[0]).0;
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for s in 0..2 {
            let h = self.ln(g, xs[s], ids[s].ln1);
            q.push(self.affine(g, h, ids[s].q));
            k.push(self.affine(g, h, ids[s].k));
            v.push(self.affine(g, h, ids[s].v));
        }
        let (q, k, v) = (g.concat_rows(&q), g.concat_rows(&k), g.concat_rows(&v));
        let att = g.attention(q, k, v, self.config.heads);
        let total = g.shape(att).0;
        let mut out = xs;
        for s in 0..2 {
            if !keep[s] {
                continue;
            }
            let part = if s == 0 { g.slice_rows(att, 0, n_img) } else { g.slice_rows(att, n_img, total) };
            let o = self.affine(g, part, ids[s].o);
            let x = g.add(xs[s], o);
            let h = self.ln(g, x, ids[s].ln2);
            let h = self.affine(g, h, ids[s].ff1);
            let h = g.gelu(h);
            let h = self.affine(g, h, ids[s].ff2);
            out[s] = g.add(x, h);
        }
        out
    }

    /// Eval-mode `m` for context latents.
    pub fn project_context_value(&self, context: &[LatentImage]) -> Result<LatentImage> {
        let mut g = self.graph(false);
        let m = self.project_context(&mut g, context, None)?;
        Ok(row_latent(self.config.latent_shape, g.value(m)))
    }
}

impl<T: Real> Denoiser<T> for DualModel<T> {
    fn latent_shape(&self) -> LatentShape {
        self.config.latent_shape
    }

    fn graph(&self, record: bool) -> Graph<'_, T> {
        Graph::new(&self.params, record)
    }

    fn project_context(
        &self,
        g: &mut Graph<'_, T>,
        context: &[LatentImage],
        dropout: Option<&mut DetRng>,
    ) -> Result<Var> {
        let refs: Vec<&LatentImage> = context.iter().collect();
        let mean = LatentImage::mean(&refs)?;
        if mean.shape != self.config.latent_shape {
            return Err(Error::Shape(format!("context {:?} vs model {:?}", mean.shape, self.config.latent_shape)));
        }
        let zc = g.constant(latent_row(&mean));
        let zc = self.add_channel_offset(g, zc, self.ids.ec);
        let h = self.affine(g, zc, self.ids.proj1);
        let mut h = g.leaky_relu(h, T::of(LEAKY_SLOPE));
        if let Some(rng) = dropout {
            let rate = self.config.dropout;
            if rate > 0.0 {
                let keep = T::of(1.0 / (1.0 - rate));
                let n = self.config.proj_hidden;
                let mask = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
                let mask = g.constant(Tensor::from_vec(1, n, mask));
                h = g.mul(h, mask);
            }
        }
        Ok(self.affine(g, h, self.ids.proj2))
    }

    fn forward(
        &self,
        g: &mut Graph<'_, T>,
        z: Var,
        caption: Option<&[u32]>,
        t: f64,
        p: Option<&[u32]>,
        d: Option<&[u32]>,
        m: Option<Var>,
        heads: Heads,
    ) -> Result<Outputs> {
        let cfg = &self.config;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let dim = cfg.latent_dim();
        if g.shape(z) != (1, dim) || m.is_some_and(|m| g.shape(m) != (1, dim)) {
            return Err(Error::Shape(format!("latent rows must be 1×{dim}")));
        }
        if heads.logits && caption.is_none() {
            return Err(Error::Usage("logits requested without a caption segment".into()));
        }

        let z = self.add_channel_offset(g, z, self.ids.e0);
        let img = self.patch_tokens(g, z, self.ids.img_embed, self.ids.img_pos);
        let ctx = match m {
            Some(m) => self.patch_tokens(g, m, self.ids.ctx_embed, self.ids.ctx_pos),
            None => g.param(self.ids.ctx_null),
        };
        let mut x_img = g.concat_rows(&[img, ctx]);

        let null = [Vocab::global().null()];
        let mut segs = Vec::with_capacity(3);
        if let Some(c) = caption {
            if c.len() != cfg.caption_len {
                return Err(Error::Shape(format!("caption of {} tokens, expected {}", c.len(), cfg.caption_len)));
            }
            segs.push(self.text_segment(g, c, self.ids.pos_caption, cfg.caption_len)?);
        }
        segs.push(self.text_segment(g, p.unwrap_or(&null), self.ids.pos_pref, cfg.pref_len)?);
        segs.push(self.text_segment(g, d.unwrap_or(&null), self.ids.pos_task, cfg.task_len)?);
        let mut x_txt = g.concat_rows(&segs);

        let feats = time_features(t, cfg.width).into_iter().map(T::of).collect();
        let feats = g.constant(Tensor::from_vec(1, cfg.width, feats));
        let temb = self.affine(g, feats, self.ids.time);

        for b in 0..cfg.depth {
            x_img = g.add_row(x_img, temb);
            x_txt = g.add_row(x_txt, temb);
            let keep = if b + 1 == cfg.depth { [heads.velocity, heads.logits] } else { [true, true] };
            [x_img, x_txt] = self.block(g, b, [x_img, x_txt], keep);
        }

        let velocity = if heads.velocity {
            let h = g.slice_rows(x_img, 0, cfg.patches());
            let h = self.ln(g, h, self.ids.head_vel_ln);
            let v = self.affine(g, h, self.ids.head_vel);
            Some(g.gather(v, self.unpatch_index(), 1, dim))
        } else {
            None
        };
        let logits = if heads.logits {
            let h = g.slice_rows(x_txt, 0, cfg.caption_len);
            let h = self.ln(g, h, self.ids.head_txt_ln);
            Some(self.affine(g, h, self.ids.head_txt))
        } else {
            None
        };
        Ok(Outputs { velocity, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::{StructuredCaption, TokenSequence};
    use rand::SeedableRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 1,
            width: 8,
            heads: 2,
            ffn_mult: 2,
            latent_shape: (2, 4, 4),
            patch: 2,
            proj_hidden: 6,
            pref_len: 20,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn random_latent(shape: LatentShape, seed: u64) -> LatentImage {
        let mut rng = DetRng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        LatentImage::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    fn run(model: &DualModel<f64>, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let shape = model.config.latent_shape;
        let mut g = model.graph(false);
        let z = g.constant(latent_row(&random_latent(shape, seed)));
        let m = model.project_context(&mut g, &[random_latent(shape, seed + 1)], None).unwrap();
        let cap = TokenSequence::masked_template().tokens;
        let d = render_task_definition("shoes").unwrap();
        let out = model.forward(&mut g, z, Some(&cap), 0.4, None, Some(&d), Some(m), Heads::BOTH).unwrap();
        (g.value(out.velocity.unwrap()).data.clone(), g.value(out.logits.unwrap()).data.clone())
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let cfg = ModelConfig::default();
        let (w, f, v) = (64, 256, cfg.vocab_size);
        let per_stream = 4 * (w * w + w) + 2 * 2 * w + (w * f + f) + (f * w + w);
        let expect = 2 * 2 * per_stream
            + 2 * (64 * w + w) + 2 * 4 * w + w // patch embeds, positions, null
            + (256 * 128 + 128) + (128 * 256 + 256)
            + (w * v + v + 2 * w) + (w * 64 + 64 + 2 * w)
            + (24 + 32 + 10) * w
            + 2 * 4
            + (w * w + w)
            + v * w;
        let model = DualModel::<f32>::new(cfg).unwrap();
        assert_eq!(model.params.scalar_count(), expect);
    }

    #[test]
    fn role_embeddings_start_distinct() {
        let model = DualModel::<f64>::new(tiny()).unwrap();
        let (e0, ec) = model.role_embeddings();
        assert_ne!(e0, ec);
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let model = DualModel::<f64>::new(tiny()).unwrap();
        assert_eq!(run(&model, 5), run(&model, 5));
        let f32_model = DualModel::<f32>::new(ModelConfig::default()).unwrap();
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut g = f32_model.graph(false);
            let z = g.constant(latent_row(&random_latent((4, 8, 8), 1)));
            let o = f32_model.forward(&mut g, z, None, 0.7, None, None, None, Heads::VELOCITY).unwrap();
            outs.push(g.value(o.velocity.unwrap()).data.clone());
        }
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model = DualModel::<f64>::new(tiny()).unwrap();
        let mut g = model.graph(false);
        let z = g.constant(latent_row(&LatentImage::zeros((2, 4, 4))));
        assert!(matches!(model.forward(&mut g, z, None, 1.5, None, None, None, Heads::VELOCITY), Err(Error::Domain(_))));
        let short = vec![0u32; 5];
        assert!(matches!(
            model.forward(&mut g, z, Some(&short), 0.5, None, None, None, Heads::LOGITS),
            Err(Error::Shape(_))
        ));
        let bad = vec![999u32];
        assert!(matches!(model.forward(&mut g, z, None, 0.5, Some(&bad), None, None, Heads::VELOCITY), Err(Error::Vocab(_))));
        assert!(model.forward(&mut g, z, None, 0.5, None, None, None, Heads::LOGITS).is_err());
    }

    #[test]
    fn projection_examples() {
        let mut cfg = tiny();
        cfg.proj_hidden = 32;
        let mut model = DualModel::<f64>::new(cfg).unwrap();
        let ids = model.ids.clone();
        for id in [ids.proj1.0, ids.proj1.1, ids.proj2.0, ids.proj2.1, ids.ec] {
            model.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let z = random_latent((2, 4, 4), 2);
        assert!(model.project_context_value(&[z.clone()]).unwrap().data.iter().all(|&v| v == 0.0));
        for (id, n) in [(ids.proj1.0, 32), (ids.proj2.0, 32)] {
            let t = model.params.get_mut(id);
            for i in 0..n {
                t.data[i * n + i] = 1.0;
            }
        }
        let positive = LatentImage::new(z.shape, z.data.iter().map(|v| v.abs() + 0.1).collect());
        let m = model.project_context_value(&[positive.clone()]).unwrap();
        assert_eq!(m, positive);
        assert_eq!(model.project_context_value(&[z.clone()]).unwrap(), model.project_context_value(&[z]).unwrap());
    }

    #[test]
    fn role_embedding_examples() {
        let z0 = random_latent((2, 4, 4), 1);
        let zc = random_latent((2, 4, 4), 2);
        let (a, c) = embed_roles(&z0, &[zc.clone()], &[0.5, -1.0], &[2.0, 0.25]).unwrap();
        assert_eq!(a.data[0], z0.data[0] + 0.5);
        assert_eq!(a.data[31], z0.data[31] - 1.0);
        let c = c.unwrap();
        assert_eq!(c.data[3], zc.data[3] + 2.0);
        let (a, c) = embed_roles(&z0, &[zc.clone()], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!((a, c.unwrap()), (z0.clone(), zc));
        assert!(embed_roles(&z0, &[], &[0.0; 2], &[0.0; 2]).unwrap().1.is_none());
        assert!(embed_roles(&z0, &[LatentImage::zeros((2, 2, 2))], &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn task_definition_template() {
        let v = Vocab::global();
        let toks = render_task_definition("sneakers").unwrap();
        assert_eq!(v.detokenize(&toks).unwrap(), "Recommend a fashion sneakers item, on white background.");
        let other = render_task_definition("bag").unwrap();
        let diff: Vec<usize> = (0..toks.len()).filter(|&i| toks[i] != other[i]).collect();
        assert_eq!(diff, vec![3]);
        assert!(matches!(render_task_definition(""), Err(Error::Vocab(_))));
        assert!(toks.len() <= ModelConfig::default().task_len);
    }

    #[test]
    fn preference_and_caption_fit_segments() {
        let cap = TokenSequence::from_caption(&StructuredCaption::new("red", "silk", "plaid", "formal")).unwrap();
        assert_eq!(cap.tokens.len(), ModelConfig::default().caption_len);
    }

    #[test]
    fn batch_order_does_not_matter() {
        // Each sample runs on its own graph, so permuting samples permutes outputs.
        let model = DualModel::<f64>::new(tiny()).unwrap();
        let a: Vec<_> = [1, 2, 3].iter().map(|&s| run(&model, s)).collect();
        let b: Vec<_> = [3, 1, 2].iter().map(|&s| run(&model, s)).collect();
        assert_eq!(a[0], b[1]);
        assert_eq!(a[2], b[0]);
    }
}
