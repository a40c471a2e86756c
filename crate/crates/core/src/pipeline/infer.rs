//! PFITB and GOR inference.

use crate::captions::{AttributeSchema, StructuredCaption};
use crate::diffusion::{
    sample_image, sample_text, GuidanceScales, SampleCond, DEFAULT_IMAGE_STEPS, DEFAULT_TEXT_STEPS,
};
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::model::{render_task_definition, row_latent, Denoiser};
use crate::preference::DEFAULT_TEMPERATURE;
use crate::rng::{stream, stream_indexed};
use crate::synthworld::Dataset;
use crate::tensor::Real;

use super::{context_latents, preference_tokens};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub scales: GuidanceScales,
    pub image_steps: usize,
    pub text_steps: usize,
    pub temperature: f64,
    pub lambda_m: f64,
    pub pref_len: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            scales: GuidanceScales::default(),
            image_steps: DEFAULT_IMAGE_STEPS,
            text_steps: DEFAULT_TEXT_STEPS,
            temperature: DEFAULT_TEMPERATURE,
            lambda_m: 0.1,
            pref_len: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub category: String,
    pub caption: StructuredCaption,
    pub latent: LatentImage,
    pub round: usize,
    /// Number of latents the matching condition was built from.
    pub context_size: usize,
}

fn project<T: Real, M: Denoiser<T> + ?Sized>(model: &M, context: &[LatentImage]) -> Result<LatentImage> {
    let mut g = model.graph(false);
    let m = model.project_context(&mut g, context, None)?;
    Ok(row_latent(model.latent_shape(), g.value(m)))
}

/// Caption and latent for one slot. `context` empty means no matching condition.
#[allow(clippy::too_many_arguments)]
pub fn generate_item<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    schema: &AttributeSchema,
    p: Option<&[u32]>,
    category: &str,
    context: &[LatentImage],
    opts: &InferenceOptions,
    seed: u64,
    round: usize,
) -> Result<Generated> {
    let d = render_task_definition(category)?;
    let m = if context.is_empty() { None } else { Some(project(model, context)?) };
    let cond = SampleCond { p, d: Some(&d), m: m.as_ref() };
    let caption = sample_text(model, schema, cond, opts.text_steps)?;
    let mut rng = stream_indexed(seed, "infer.image", round as u64);
    let latent = sample_image(model, cond, opts.scales, opts.image_steps, opts.lambda_m, &mut rng)?;
    Ok(Generated { category: category.to_string(), caption, latent, round, context_size: context.len() })
}

fn user_preference(ds: &Dataset, user: usize, opts: &InferenceOptions, seed: u64) -> Result<Option<Vec<u32>>> {
    preference_tokens(ds, user, opts.temperature, opts.pref_len, &mut stream(seed, "infer.pref"))
}

/// Fills the pre-designated held-out slot of `outfit` for `user`.
pub fn infer_pfitb<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    ds: &Dataset,
    user: usize,
    outfit: usize,
    opts: &InferenceOptions,
    seed: u64,
) -> Result<Generated> {
    ds.user(user)?;
    let o = ds.outfit(outfit)?;
    let category = ds.item(o.held_out_item())?.category.clone();
    let p = user_preference(ds, user, opts, seed)?;
    let context = context_latents(ds, o)?;
    generate_item(model, &ds.schema, p.as_deref(), &category, &context, opts, seed, 0)
}

/// Generates an outfit in `categories.len()` rounds; round `i` is matched
/// against the `i` latents generated before it.
pub fn infer_gor<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    ds: &Dataset,
    user: usize,
    categories: &[String],
    opts: &InferenceOptions,
    seed: u64,
) -> Result<Vec<Generated>> {
    if categories.is_empty() {
        return Err(Error::Request("outfit generation needs at least one category".into()));
    }
    ds.user(user)?;
    for c in categories {
        ds.category_index(c)?;
    }
    let p = user_preference(ds, user, opts, seed)?;
    let mut out: Vec<Generated> = Vec::with_capacity(categories.len());
    for (round, cat) in categories.iter().enumerate() {
        let context: Vec<LatentImage> = out.iter().map(|g| g.latent.clone()).collect();
        out.push(generate_item(model, &ds.schema, p.as_deref(), cat, &context, opts, seed, round)?);
    }
    Ok(out)
}
