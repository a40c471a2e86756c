//! Losses, guidance composition and samplers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::captions::{mask_values, AttributeSchema, StructuredCaption, TokenSequence, Vocab, NUM_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::model::{latent_row, row_latent, Denoiser, Heads};
use crate::schedules::{ContinuousSchedule, DEFAULT_K, DEFAULT_T_MIN};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_IMAGE_STEPS: usize = 50;
pub const DEFAULT_TEXT_STEPS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceScales {
    pub s_d: f64,
    pub s_m: f64,
    pub s_p: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self { s_d: 8.0, s_m: 7.0, s_p: 8.0 }
    }
}

impl GuidanceScales {
    pub fn new(s_d: f64, s_m: f64, s_p: f64) -> Result<Self> {
        let s = Self { s_d, s_m, s_p };
        if [s_d, s_m, s_p].iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(s)
        } else {
            Err(Error::Domain(format!("guidance scales must be finite and ≥ 0: {s:?}")))
        }
    }

    pub fn uniform(s: f64) -> Self {
        Self { s_d: s, s_m: s, s_p: s }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_text: f64,
    pub lambda_m: f64,
    pub k: usize,
    pub drop_m: f64,
    pub drop_p: f64,
    pub drop_d: f64,
    pub t_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_text: 0.2,
            lambda_m: 0.1,
            k: DEFAULT_K,
            drop_m: 0.5,
            drop_p: 0.1,
            drop_d: 0.1,
            t_min: DEFAULT_T_MIN,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.lambda_text >= 0.0 && self.lambda_text.is_finite()) {
            return Err(Error::Domain("lambda_text must be finite and ≥ 0".into()));
        }
        if !prob(self.lambda_m) || !prob(self.drop_m) || !prob(self.drop_p) || !prob(self.drop_d) {
            return Err(Error::Domain("mixing weight and drop rates must lie in [0, 1]".into()));
        }
        if self.k == 0 {
            return Err(Error::Domain("K must be at least 1".into()));
        }
        ContinuousSchedule::new(self.t_min).map(|_| ())
    }
}

/// Conditions as they enter a graph: token segments plus an `m` node.
#[derive(Clone, Copy, Debug, Default)]
pub struct GraphCond<'a> {
    pub p: Option<&'a [u32]>,
    pub d: Option<&'a [u32]>,
    pub m: Option<Var>,
}

/// Flow-matching loss at time `t`: noise, optional mixing with `m`, then
/// mean squared error of the velocity against `eps − z0`.
#[allow(clippy::too_many_arguments)]
pub fn image_loss<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    g: &mut Graph<'_, T>,
    z0: &LatentImage,
    eps: &LatentImage,
    t: f64,
    caption: Option<&[u32]>,
    cond: GraphCond<'_>,
    lambda_m: f64,
) -> Result<Var> {
    let sched = ContinuousSchedule::default();
    let zt = sched.add_noise(z0, eps, t)?;
    let target = sched.velocity_target(z0, eps)?;
    let mut z = g.constant(latent_row(&zt));
    if let Some(m) = cond.m {
        let a = g.scale(z, T::of(1.0 - lambda_m));
        let b = g.scale(m, T::of(lambda_m));
        z = g.add(a, b);
    }
    let out = model.forward(g, z, caption, t, cond.p, cond.d, cond.m, Heads::VELOCITY)?;
    let v = out.velocity.ok_or_else(|| Error::Usage("model returned no velocity".into()))?;
    Ok(g.mse_mean(v, target.data.iter().map(|&x| T::of(x)).collect()))
}

/// One corrupted copy of the caption per time.
pub fn corrupt_captions<R: Rng + ?Sized>(
    y0: &TokenSequence,
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<(f64, TokenSequence)>> {
    times.iter().map(|&t| Ok((t, mask_values(y0, t, rng)?))).collect()
}

/// Masked-token loss for fixed corruptions:
/// `(1/K) Σ_i (1/t_i) · mean over masked slots of −log p(true token)`.
/// Corruptions without masked slots contribute zero.
pub fn text_loss_at<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    g: &mut Graph<'_, T>,
    y0: &TokenSequence,
    z_in: Var,
    corruptions: &[(f64, TokenSequence)],
    cond: GraphCond<'_>,
) -> Result<Var> {
    let k = corruptions.len();
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    let mut terms = Vec::with_capacity(k);
    for (t, yt) in corruptions {
        let rows = yt.masked_positions();
        if rows.is_empty() {
            continue;
        }
        let out = model.forward(g, z_in, Some(&yt.tokens), *t, cond.p, cond.d, cond.m, Heads::LOGITS)?;
        let logits = out.logits.ok_or_else(|| Error::Usage("model returned no logits".into()))?;
        let w = T::of(1.0 / (k as f64 * rows.len() as f64 * t));
        let targets = rows.iter().map(|&j| y0.tokens[j] as usize).collect();
        let weights = vec![w; rows.len()];
        terms.push(g.cross_entropy(logits, rows, targets, weights));
    }
    Ok(match terms.len() {
        0 => g.constant(Tensor::scalar(T::zero())),
        1 => terms[0],
        _ => {
            let stacked = g.concat_rows(&terms);
            g.sum(stacked)
        }
    })
}

/// Draws one shared offset, stratified times and masks, then evaluates [`text_loss_at`].
#[allow(clippy::too_many_arguments)]
pub fn text_loss<T: Real, M: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    g: &mut Graph<'_, T>,
    y0: &TokenSequence,
    z_in: Var,
    cond: GraphCond<'_>,
    k: usize,
    t_min: f64,
    rng: &mut R,
) -> Result<Var> {
    let u: f64 = rng.random();
    let times = ContinuousSchedule::new(t_min)?.stratified_times(k, u)?;
    let corruptions = corrupt_captions(y0, &times, rng)?;
    text_loss_at(model, g, y0, z_in, &corruptions, cond)
}

/// Nodes of one joint objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub image: Var,
    pub text: Var,
}

/// `image + λ_text · text`. The image pass sees `image_caption` (if any) as
/// its text input; the text pass sees `text_latent` on the image stream.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Real, M: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    g: &mut Graph<'_, T>,
    z0: &LatentImage,
    y0: &TokenSequence,
    image_caption: Option<&[u32]>,
    text_latent: &LatentImage,
    cond: GraphCond<'_>,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<JointLoss> {
    let t = weights.t_min + (1.0 - weights.t_min) * rng.random::<f64>();
    let eps = standard_normal(z0.shape, rng);
    let image = image_loss(model, g, z0, &eps, t, image_caption, cond, weights.lambda_m)?;
    let z_in = g.constant(latent_row(text_latent));
    let text = text_loss(model, g, y0, z_in, cond, weights.k, weights.t_min, rng)?;
    let scaled = g.scale(text, T::of(weights.lambda_text));
    let total = g.add(image, scaled);
    Ok(JointLoss { total, image, text })
}

pub fn standard_normal<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> LatentImage {
    let n = shape.0 * shape.1 * shape.2;
    LatentImage::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect())
}

/// Conditions for sampling; `m` is already projected.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleCond<'a> {
    pub p: Option<&'a [u32]>,
    pub d: Option<&'a [u32]>,
    pub m: Option<&'a LatentImage>,
}

fn eval_velocity<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    z: &LatentImage,
    t: f64,
    p: Option<&[u32]>,
    d: Option<&[u32]>,
    m: Option<&LatentImage>,
) -> Result<Vec<f64>> {
    let mut g = model.graph(false);
    let zv = g.constant(latent_row(z));
    let mv = m.map(|m| g.constant(latent_row(m)));
    let out = model.forward(&mut g, zv, None, t, p, d, mv, Heads::VELOCITY)?;
    let v = out.velocity.ok_or_else(|| Error::Usage("model returned no velocity".into()))?;
    Ok(row_latent(z.shape, g.value(v)).data)
}

/// Nested guidance:
/// `v∅ + s_d[v(d) − v∅] + s_m[v(d,m) − v(d)] + s_p[v(d,m,p) − v(d,m)]`.
/// A missing condition makes its bracket vanish, and the repeated evaluation is skipped.
pub fn cfg_velocity<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    z: &LatentImage,
    t: f64,
    cond: SampleCond<'_>,
    scales: GuidanceScales,
) -> Result<LatentImage> {
    let v0 = eval_velocity(model, z, t, None, None, None)?;
    let vd = if cond.d.is_some() { eval_velocity(model, z, t, None, cond.d, None)? } else { v0.clone() };
    let vdm = if cond.m.is_some() { eval_velocity(model, z, t, None, cond.d, cond.m)? } else { vd.clone() };
    let vdmp = if cond.p.is_some() { eval_velocity(model, z, t, cond.p, cond.d, cond.m)? } else { vdm.clone() };
    let data = (0..v0.len())
        .map(|i| {
            v0[i] + scales.s_d * (vd[i] - v0[i]) + scales.s_m * (vdm[i] - vd[i]) + scales.s_p * (vdmp[i] - vdm[i])
        })
        .collect();
    Ok(LatentImage::new(z.shape, data))
}

/// Euler integration of the guided velocity from `t = 1` to `t = 0`. The rng
/// is used only for the initial Gaussian; `m` is mixed in once at the start.
pub fn sample_image<T: Real, M: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cond: SampleCond<'_>,
    scales: GuidanceScales,
    steps: usize,
    lambda_m: f64,
    rng: &mut R,
) -> Result<LatentImage> {
    if steps == 0 {
        return Err(Error::Domain("need at least one sampling step".into()));
    }
    let mut z = standard_normal(model.latent_shape(), rng);
    if let Some(m) = cond.m {
        z = z.mix(m, lambda_m)?;
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = cfg_velocity(model, &z, t, cond, scales)?;
        for (a, b) in z.data.iter_mut().zip(&v.data) {
            *a -= dt * b;
        }
    }
    Ok(z)
}

/// Iterative unmasking of the caption template. Each round commits the
/// `ceil(remaining / rounds_left)` most confident masked slots; a committed
/// token that is not a legal value for its slot is replaced by the most
/// probable legal one. Greedy, so no randomness is consumed.
pub fn sample_text<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    schema: &AttributeSchema,
    cond: SampleCond<'_>,
    steps: usize,
) -> Result<StructuredCaption> {
    unmask_text::<T, M, crate::rng::DetRng>(model, schema, cond, steps, None)
}

/// Same unmasking schedule as [`sample_text`], but each slot's value is drawn
/// from the model's distribution over that slot's legal values, and confidence
/// is the probability of the drawn value.
pub fn sample_text_stochastic<T: Real, M: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schema: &AttributeSchema,
    cond: SampleCond<'_>,
    steps: usize,
    rng: &mut R,
) -> Result<StructuredCaption> {
    unmask_text(model, schema, cond, steps, Some(rng))
}

fn unmask_text<T: Real, M: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schema: &AttributeSchema,
    cond: SampleCond<'_>,
    steps: usize,
    mut rng: Option<&mut R>,
) -> Result<StructuredCaption> {
    if steps == 0 {
        return Err(Error::Domain("need at least one sampling step".into()));
    }
    let vocab = Vocab::global();
    let legal: Vec<Vec<u32>> = schema
        .keys
        .iter()
        .map(|&a| schema.values(a).iter().map(|v| vocab.id(v)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut y = TokenSequence::masked_template();
    let zeros = LatentImage::zeros(model.latent_shape());
    for round in 0..steps {
        let masked = y.masked_positions();
        if masked.is_empty() {
            break;
        }
        let take = masked.len().div_ceil(steps - round);
        let mut g = model.graph(false);
        let z = g.constant(latent_row(&zeros));
        let m = cond.m.map(|m| g.constant(latent_row(m)));
        let t = masked.len() as f64 / NUM_ATTRIBUTES as f64;
        let out = model.forward(&mut g, z, Some(&y.tokens), t, cond.p, cond.d, m, Heads::LOGITS)?;
        let logits = g.value(out.logits.ok_or_else(|| Error::Usage("model returned no logits".into()))?);
        let mut picks = Vec::with_capacity(masked.len());
        for &j in &masked {
            let mut probs: Vec<f64> = logits.row(j).iter().map(|v| v.f64()).collect();
            softmax_in_place(&mut probs, 1.0);
            let slot = &legal[y.slot_attribute(j).expect("masked position is a value slot").index()];
            let pick = match rng.as_deref_mut() {
                None => {
                    let (best, conf) = argmax(&probs);
                    let token = if slot.contains(&(best as u32)) {
                        best as u32
                    } else {
                        *slot
                            .iter()
                            .max_by(|a, b| probs[**a as usize].total_cmp(&probs[**b as usize]).then(b.cmp(a)))
                            .expect("nonempty value list")
                    };
                    (conf, j, token)
                }
                Some(rng) => {
                    let weights: Vec<f64> = slot.iter().map(|&v| probs[v as usize]).collect();
                    let total: f64 = weights.iter().sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut k = weights.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        if u < *w {
                            k = i;
                            break;
                        }
                        u -= w;
                    }
                    (weights[k], j, slot[k])
                }
            };
            picks.push(pick);
        }
        picks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, j, token) in picks.iter().take(take) {
            y.tokens[j] = token;
        }
    }
    y.to_caption()
}

fn argmax(x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in x.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}
