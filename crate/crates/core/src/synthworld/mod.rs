//! Synthetic fashion world with exact oracles.
//!
//! Items carry a structured caption and a category; their latents come from a
//! fixed block-structured linear map `W`: the flattened latent is split into
//! one contiguous slice per attribute plus one for the category, and each
//! value owns a Gaussian column on its slice. Decoding is therefore exact and
//! separable per attribute. Outfits share one style value, which is the
//! world's compatibility rule.

mod io;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::captions::{Attribute, AttributeSchema, StructuredCaption, CATEGORIES, NUM_ATTRIBUTES};
use crate::error::{Error, Result};
use crate::latent::{LatentImage, LatentShape};
use crate::rng::{stream, DetRng};

pub use io::{read_dataset, write_dataset, FORMAT_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub vocab_sizes: [usize; NUM_ATTRIBUTES],
    pub n_categories: usize,
    pub latent_shape: LatentShape,
    pub n_items: usize,
    pub n_users: usize,
    pub n_outfits: usize,
    pub outfit_size: usize,
    pub noise: f64,
    pub test_fraction: f64,
    pub history_min: usize,
    pub history_max: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            vocab_sizes: [8, 6, 8, 5],
            n_categories: 5,
            latent_shape: (4, 8, 8),
            n_items: 1000,
            n_users: 200,
            n_outfits: 500,
            outfit_size: 4,
            noise: 0.05,
            test_fraction: 0.2,
            history_min: 5,
            history_max: 15,
            seed: 7,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.n_items == 0 || self.n_users == 0 || self.n_outfits == 0 {
            return bad("items, users and outfits must all be at least 1".into());
        }
        if self.outfit_size == 0 {
            return bad("outfit size must be at least 1".into());
        }
        if self.n_categories == 0 || self.n_categories > CATEGORIES.len() {
            return bad(format!("category count must lie in 1..={}", CATEGORIES.len()));
        }
        if self.n_categories < self.outfit_size {
            return bad(format!(
                "{} categories cannot fill outfits of {} distinct categories",
                self.n_categories, self.outfit_size
            ));
        }
        let (c, h, w) = self.latent_shape;
        if c * h * w < NUM_ATTRIBUTES + 1 {
            return bad("latent too small for one slice per attribute and category".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise level {} must be finite and non-negative", self.noise));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test fraction must lie in [0, 1)".into());
        }
        if self.history_min == 0 || self.history_min > self.history_max {
            return bad("history length range must satisfy 1 ≤ min ≤ max".into());
        }
        AttributeSchema::with_sizes(self.vocab_sizes).map(|_| ())
    }
}

/// The fixed attribute→latent map. Block `b < 4` belongs to attribute `b`, block 4 to the category.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldMap {
    pub shape: LatentShape,
    pub block_sizes: Vec<usize>,
    /// Dense `dim × columns` matrix, row-major; columns enumerate attribute values then categories.
    pub matrix: Vec<f64>,
}

impl WorldMap {
    pub fn dim(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn columns(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    pub fn slice(&self, block: usize) -> (usize, usize) {
        let d = self.dim();
        let n = self.block_sizes.len();
        (block * d / n, (block + 1) * d / n)
    }

    fn column_offset(&self, block: usize) -> usize {
        self.block_sizes[..block].iter().sum()
    }

    fn column(&self, block: usize, value: usize) -> impl Iterator<Item = f64> + '_ {
        let col = self.column_offset(block) + value;
        let cols = self.columns();
        let (lo, hi) = self.slice(block);
        (lo..hi).map(move |r| self.matrix[r * cols + col])
    }

    /// `W · onehot(values)` where `values[b]` indexes block `b`.
    pub fn embed(&self, values: &[usize]) -> LatentImage {
        let mut z = vec![0.0; self.dim()];
        for (b, &v) in values.iter().enumerate() {
            let (lo, _) = self.slice(b);
            for (i, x) in self.column(b, v).enumerate() {
                z[lo + i] += x;
            }
        }
        LatentImage::new(self.shape, z)
    }

    /// Per-block nearest column; ties resolve to the lowest index.
    pub fn decode(&self, z: &LatentImage) -> Vec<usize> {
        (0..self.block_sizes.len())
            .map(|b| {
                let (lo, _) = self.slice(b);
                let mut best = (f64::INFINITY, 0);
                for v in 0..self.block_sizes[b] {
                    let d: f64 = self.column(b, v).enumerate().map(|(i, w)| (z.data[lo + i] - w).powi(2)).sum();
                    if d < best.0 {
                        best = (d, v);
                    }
                }
                best.1
            })
            .collect()
    }

    fn generate(shape: LatentShape, block_sizes: Vec<usize>, rng: &mut DetRng) -> Self {
        let mut map = Self { shape, block_sizes, matrix: Vec::new() };
        let (d, cols) = (map.dim(), map.columns());
        map.matrix = vec![0.0; d * cols];
        for b in 0..map.block_sizes.len() {
            let (lo, hi) = map.slice(b);
            let off = map.column_offset(b);
            for v in 0..map.block_sizes[b] {
                for r in lo..hi {
                    let x: f64 = StandardNormal.sample(rng);
                    // Stored as f32 on disk, so keep f32-representable values.
                    map.matrix[r * cols + off + v] = f64::from(x as f32);
                }
            }
        }
        map
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: usize,
    pub caption: StructuredCaption,
    pub category: String,
    pub latent: LatentImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outfit {
    pub id: usize,
    pub user: usize,
    pub items: Vec<usize>,
    pub style: String,
    /// Slot of the pre-designated held-out item.
    pub held_out: usize,
    pub split: Split,
}

impl Outfit {
    pub fn held_out_item(&self) -> usize {
        self.items[self.held_out]
    }

    /// Item ids of the incomplete outfit.
    pub fn context_items(&self) -> Vec<usize> {
        self.items.iter().enumerate().filter(|(i, _)| *i != self.held_out).map(|(_, &id)| id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct User {
    pub id: usize,
    /// Per attribute, a distribution over that attribute's value vocabulary.
    pub preference: Vec<Vec<f64>>,
    pub history: Vec<usize>,
}

/// Oracle reading of a latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub caption: StructuredCaption,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub schema: AttributeSchema,
    pub categories: Vec<String>,
    pub map: WorldMap,
    /// Largest noise level at which oracle decoding stays ≥ 99% exact.
    pub eta_max: f64,
    pub items: Vec<Item>,
    pub users: Vec<User>,
    pub outfits: Vec<Outfit>,
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut c = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        c += w;
        if u < c && w > 0.0 {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

fn user_preference(schema: &AttributeSchema, rng: &mut DetRng) -> Vec<Vec<f64>> {
    Attribute::ALL
        .iter()
        .map(|&a| {
            let n = schema.values(a).len();
            let favourites = if n > 1 && rng.random_bool(0.4) { 2 } else { 1 };
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut p = vec![0.2 / n as f64; n];
            for &f in &order[..favourites] {
                p[f] += 0.8 / favourites as f64;
            }
            p
        })
        .collect()
}

pub fn gen_world(spec: &WorldSpec) -> Result<Dataset> {
    spec.validate()?;
    let schema = AttributeSchema::with_sizes(spec.vocab_sizes)?;
    let categories: Vec<String> = CATEGORIES[..spec.n_categories].iter().map(|s| s.to_string()).collect();
    let mut block_sizes = spec.vocab_sizes.to_vec();
    block_sizes.push(spec.n_categories);
    let map = WorldMap::generate(spec.latent_shape, block_sizes, &mut stream(spec.seed, "world.map"));

    let mut rng = stream(spec.seed, "world.items");
    let mut items = Vec::with_capacity(spec.n_items);
    for id in 0..spec.n_items {
        let idx = [0, 1, 2, 3].map(|i| rng.random_range(0..spec.vocab_sizes[i]));
        let cat = rng.random_range(0..spec.n_categories);
        let mut values = idx.to_vec();
        values.push(cat);
        let latent = noisy(&map, &values, spec.noise, &mut rng).quantized();
        items.push(Item { id, caption: schema.caption_from_indices(idx), category: categories[cat].clone(), latent });
    }
    let item_idx: Vec<[usize; NUM_ATTRIBUTES]> =
        items.iter().map(|it| schema.indices(&it.caption)).collect::<Result<_>>()?;

    let mut rng = stream(spec.seed, "world.users");
    let mut users = Vec::with_capacity(spec.n_users);
    for id in 0..spec.n_users {
        let preference = user_preference(&schema, &mut rng);
        let len = rng.random_range(spec.history_min..=spec.history_max).min(spec.n_items);
        let mut weights: Vec<f64> =
            item_idx.iter().map(|idx| (0..NUM_ATTRIBUTES).map(|a| preference[a][idx[a]]).product()).collect();
        let mut history = Vec::with_capacity(len);
        for _ in 0..len {
            let Some(pick) = sample_index(&weights, &mut rng) else { break };
            history.push(pick);
            weights[pick] = 0.0;
        }
        users.push(User { id, preference, history });
    }

    // (style, category) → item ids
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (it, idx) in items.iter().zip(&item_idx) {
        let cat = categories.iter().position(|c| *c == it.category).expect("known category");
        cells.entry((idx[Attribute::Style.index()], cat)).or_default().push(it.id);
    }
    let n_styles = spec.vocab_sizes[Attribute::Style.index()];
    let style_cats: Vec<Vec<usize>> = (0..n_styles)
        .map(|s| (0..spec.n_categories).filter(|c| cells.contains_key(&(s, *c))).collect())
        .collect();
    if style_cats.iter().all(|c| c.len() < spec.outfit_size) {
        return Err(Error::Spec(format!(
            "no style has items in {} distinct categories; add items or shrink outfits",
            spec.outfit_size
        )));
    }

    let mut rng = stream(spec.seed, "world.outfits");
    let n_test = (spec.n_outfits as f64 * spec.test_fraction).round() as usize;
    let mut outfits = Vec::with_capacity(spec.n_outfits);
    for id in 0..spec.n_outfits {
        let user = rng.random_range(0..spec.n_users);
        let pref = &users[user].preference;
        let style_w: Vec<f64> = (0..n_styles)
            .map(|s| if style_cats[s].len() >= spec.outfit_size { pref[Attribute::Style.index()][s] } else { 0.0 })
            .collect();
        let style = sample_index(&style_w, &mut rng).expect("some style is feasible");
        let mut cats = style_cats[style].clone();
        cats.shuffle(&mut rng);
        cats.truncate(spec.outfit_size);
        let held_out = rng.random_range(0..spec.outfit_size);
        let mut members = Vec::with_capacity(spec.outfit_size);
        for (slot, &cat) in cats.iter().enumerate() {
            let pool = &cells[&(style, cat)];
            let pick = if slot == held_out {
                let w: Vec<f64> = pool
                    .iter()
                    .map(|&i| (0..3).map(|a| pref[a][item_idx[i][a]]).product())
                    .collect();
                pool[sample_index(&w, &mut rng).expect("positive weights")]
            } else {
                pool[rng.random_range(0..pool.len())]
            };
            members.push(pick);
        }
        let split = if id >= spec.n_outfits - n_test { Split::Test } else { Split::Train };
        outfits.push(Outfit {
            id,
            user,
            items: members,
            style: schema.values(Attribute::Style)[style].clone(),
            held_out,
            split,
        });
    }

    let mut ds = Dataset { spec: spec.clone(), schema, categories, map, eta_max: 0.0, items, users, outfits };
    ds.eta_max = ds.measure_eta_max(&mut stream(spec.seed, "world.eta_max"));
    Ok(ds)
}

fn noisy<R: Rng + ?Sized>(map: &WorldMap, values: &[usize], eta: f64, rng: &mut R) -> LatentImage {
    let mut z = map.embed(values);
    if eta > 0.0 {
        for v in &mut z.data {
            let xi: f64 = StandardNormal.sample(rng);
            *v += eta * xi;
        }
    }
    z
}

impl Dataset {
    pub fn item(&self, id: usize) -> Result<&Item> {
        self.items.get(id).ok_or_else(|| Error::Request(format!("unknown item {id}")))
    }

    pub fn user(&self, id: usize) -> Result<&User> {
        self.users.get(id).ok_or_else(|| Error::Request(format!("unknown user {id}")))
    }

    pub fn outfit(&self, id: usize) -> Result<&Outfit> {
        self.outfits.get(id).ok_or_else(|| Error::Request(format!("unknown outfit {id}")))
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.spec.latent_shape
    }

    pub fn category_index(&self, category: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| Error::Vocab(format!("unknown category {category:?}")))
    }

    pub fn history_captions(&self, user: usize) -> Result<Vec<StructuredCaption>> {
        self.user(user)?.history.iter().map(|&i| self.item(i).map(|it| it.caption.clone())).collect()
    }

    pub fn outfits_in(&self, split: Split) -> Vec<&Outfit> {
        self.outfits.iter().filter(|o| o.split == split).collect()
    }

    fn block_values(&self, caption: &StructuredCaption, category: &str) -> Result<Vec<usize>> {
        let mut v = self.schema.indices(caption)?.to_vec();
        v.push(self.category_index(category)?);
        Ok(v)
    }

    /// `W · onehot(caption, category) + η·ξ` with fresh `ξ ~ N(0, I)`.
    pub fn encode_item<R: Rng + ?Sized>(
        &self,
        caption: &StructuredCaption,
        category: &str,
        rng: &mut R,
    ) -> Result<LatentImage> {
        self.encode_with_noise(caption, category, self.spec.noise, rng)
    }

    pub fn encode_with_noise<R: Rng + ?Sized>(
        &self,
        caption: &StructuredCaption,
        category: &str,
        eta: f64,
        rng: &mut R,
    ) -> Result<LatentImage> {
        Ok(noisy(&self.map, &self.block_values(caption, category)?, eta, rng))
    }

    /// Nearest caption and category under the world map.
    pub fn oracle_decode(&self, latent: &LatentImage) -> Result<Decoded> {
        if latent.shape != self.map.shape {
            return Err(Error::Shape(format!("latent {:?} vs world {:?}", latent.shape, self.map.shape)));
        }
        let v = self.map.decode(latent);
        Ok(Decoded {
            caption: self.schema.caption_from_indices([v[0], v[1], v[2], v[3]]),
            category: self.categories[v[4]].clone(),
        })
    }

    fn decode_accuracy(&self, eta: f64, trials: usize, rng: &mut DetRng) -> f64 {
        let mut ok = 0;
        for _ in 0..trials {
            let idx = [0, 1, 2, 3].map(|i| rng.random_range(0..self.spec.vocab_sizes[i]));
            let cat = rng.random_range(0..self.categories.len());
            let c = self.schema.caption_from_indices(idx);
            let z = self.encode_with_noise(&c, &self.categories[cat], eta, rng).expect("valid caption");
            let d = self.oracle_decode(&z).expect("matching shape");
            if d.caption == c && d.category == self.categories[cat] {
                ok += 1;
            }
        }
        ok as f64 / trials as f64
    }

    fn measure_eta_max(&self, rng: &mut DetRng) -> f64 {
        let mut best = 0.0;
        for step in 1..=100 {
            let eta = 0.05 * step as f64;
            if self.decode_accuracy(eta, 400, rng) < 0.99 {
                break;
            }
            best = eta;
        }
        best
    }
}

/// 1 when every caption shares one style, otherwise the share of the modal style.
pub fn oracle_compatibility(captions: &[StructuredCaption]) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::Domain("compatibility of an empty outfit".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in captions {
        *counts.entry(c.get(Attribute::Style)).or_default() += 1;
    }
    let modal = counts.values().copied().max().unwrap_or(0);
    Ok(modal as f64 / captions.len() as f64)
}

/// Most frequent style; ties go to the earliest value in schema order.
pub fn modal_style(schema: &AttributeSchema, captions: &[StructuredCaption]) -> Option<String> {
    schema
        .values(Attribute::Style)
        .iter()
        .map(|s| (captions.iter().filter(|c| c.get(Attribute::Style) == s).count(), s))
        .filter(|(n, _)| *n > 0)
        .fold(None::<(usize, &String)>, |best, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, s)| s.clone())
}

/// Rule-based caption augmentation: `k` distinct captions keeping the outfit's
/// modal style, with the other attributes drawn uniformly.
pub fn augment_captions<R: Rng + ?Sized>(
    schema: &AttributeSchema,
    outfit_prime: &[StructuredCaption],
    _category: &str,
    k: usize,
    rng: &mut R,
) -> Result<Vec<StructuredCaption>> {
    if k == 0 {
        return Err(Error::Augment("k must be at least 1".into()));
    }
    let style = modal_style(schema, outfit_prime)
        .ok_or_else(|| Error::Augment("incomplete outfit has no items to match".into()))?;
    let s = schema.sizes();
    let capacity = s[0] * s[1] * s[2];
    if k > capacity {
        return Err(Error::Augment(format!("only {capacity} distinct captions share a style, asked for {k}")));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let idx = [rng.random_range(0..s[0]), rng.random_range(0..s[1]), rng.random_range(0..s[2])];
        if seen.insert(idx) {
            let mut c = schema.caption_from_indices([idx[0], idx[1], idx[2], 0]);
            c.set(Attribute::Style, style.clone());
            out.push(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_spec() -> WorldSpec {
        WorldSpec { n_items: 300, n_users: 20, n_outfits: 40, seed: 11, ..WorldSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_world(&small_spec()).unwrap();
        let b = gen_world(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 12;
        assert_ne!(gen_world(&other).unwrap().items, a.items);
    }

    #[test]
    fn outfits_share_style_and_distinct_categories() {
        let ds = gen_world(&small_spec()).unwrap();
        for o in &ds.outfits {
            let caps: Vec<_> = o.items.iter().map(|&i| ds.items[i].caption.clone()).collect();
            assert_eq!(oracle_compatibility(&caps).unwrap(), 1.0);
            assert!(caps.iter().all(|c| c.get(Attribute::Style) == o.style));
            let cats: HashSet<_> = o.items.iter().map(|&i| ds.items[i].category.clone()).collect();
            assert_eq!(cats.len(), o.items.len());
            assert_eq!(o.context_items().len(), o.items.len() - 1);
        }
        assert_eq!(ds.outfits_in(Split::Test).len(), 8);
    }

    #[test]
    fn users_have_histories_and_distributions() {
        let ds = gen_world(&small_spec()).unwrap();
        for u in &ds.users {
            assert!(u.history.len() >= 5 && u.history.len() <= 15);
            for p in &u.preference {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_world_settings_are_rejected() {
        let mut s = small_spec();
        s.n_items = 0;
        assert!(matches!(gen_world(&s), Err(Error::Spec(_))));
        let mut s = small_spec();
        s.n_categories = 3;
        assert!(matches!(gen_world(&s), Err(Error::Spec(_))));
        let mut s = small_spec();
        s.vocab_sizes = [9, 6, 8, 5];
        assert!(matches!(gen_world(&s), Err(Error::Spec(_))));
    }

    #[test]
    fn color_marginal_is_uniform() {
        // Monte-Carlo against the generator's own uniform prior over 8 colours.
        let spec = WorldSpec { n_items: 1000, ..small_spec() };
        let ds = gen_world(&spec).unwrap();
        for v in ds.schema.values(Attribute::Color) {
            let f = ds.items.iter().filter(|i| i.caption.get(Attribute::Color) == v).count() as f64 / 1000.0;
            assert!((f - 0.125).abs() <= 0.04, "{v}: {f}");
        }
    }

    #[test]
    fn encode_decode_exhaustive_noise_free() {
        let spec = WorldSpec { noise: 0.0, vocab_sizes: [3, 2, 3, 2], n_categories: 4, ..small_spec() };
        let ds = gen_world(&spec).unwrap();
        let mut rng = DetRng::seed_from_u64(0);
        for c in ds.schema.all_captions() {
            for cat in &ds.categories {
                let z = ds.encode_item(&c, cat, &mut rng).unwrap();
                assert_eq!(z, ds.encode_item(&c, cat, &mut rng).unwrap());
                let d = ds.oracle_decode(&z).unwrap();
                assert_eq!((d.caption, d.category.as_str()), (c.clone(), cat.as_str()));
            }
        }
    }

    #[test]
    fn one_value_change_moves_latent_by_column_difference() {
        let spec = WorldSpec { noise: 0.0, ..small_spec() };
        let ds = gen_world(&spec).unwrap();
        let mut rng = DetRng::seed_from_u64(0);
        let a = StructuredCaption::new("red", "silk", "plaid", "formal");
        let mut b = a.clone();
        b.set(Attribute::Material, "wool");
        let za = ds.encode_item(&a, "top", &mut rng).unwrap();
        let zb = ds.encode_item(&b, "top", &mut rng).unwrap();
        let (lo, hi) = ds.map.slice(1);
        let ca: Vec<f64> = ds.map.column(1, 3).collect();
        let cb: Vec<f64> = ds.map.column(1, 4).collect();
        for r in 0..za.dim() {
            let expect = if (lo..hi).contains(&r) { cb[r - lo] - ca[r - lo] } else { 0.0 };
            assert_eq!(zb.data[r] - za.data[r], expect);
        }
    }

    #[test]
    fn noisy_encodes_average_to_clean_latent() {
        let ds = gen_world(&small_spec()).unwrap();
        let c = StructuredCaption::new("blue", "denim", "floral", "casual");
        let mut rng = DetRng::seed_from_u64(9);
        let eta = 0.1;
        let n = 1000;
        let clean = ds.encode_with_noise(&c, "bag", 0.0, &mut rng).unwrap();
        let mut mean = vec![0.0; clean.dim()];
        for _ in 0..n {
            let z = ds.encode_with_noise(&c, "bag", eta, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&z.data) {
                *m += v / n as f64;
            }
        }
        // RMS deviation of the sample mean concentrates at η/√n.
        let rms = (mean.iter().zip(&clean.data).map(|(m, c)| (m - c).powi(2)).sum::<f64>() / clean.dim() as f64).sqrt();
        assert!(rms <= 3.0 * eta / (n as f64).sqrt(), "rms {rms}");
    }

    #[test]
    fn decoding_holds_up_to_eta_max() {
        let ds = gen_world(&small_spec()).unwrap();
        assert!(ds.eta_max >= ds.spec.noise, "eta_max {}", ds.eta_max);
        let mut rng = DetRng::seed_from_u64(21);
        assert!(ds.decode_accuracy(ds.eta_max, 1000, &mut rng) >= 0.98);
    }

    #[test]
    fn zero_latent_decodes_to_min_norm_columns() {
        let ds = gen_world(&small_spec()).unwrap();
        let d = ds.oracle_decode(&LatentImage::zeros(ds.latent_shape())).unwrap();
        let norms = |b: usize| -> usize {
            let mut best = (f64::INFINITY, 0);
            for v in 0..ds.map.block_sizes[b] {
                let n: f64 = ds.map.column(b, v).map(|x| x * x).sum();
                if n < best.0 {
                    best = (n, v);
                }
            }
            best.1
        };
        let idx = ds.schema.indices(&d.caption).unwrap();
        for b in 0..4 {
            assert_eq!(idx[b], norms(b));
        }
        assert_eq!(ds.category_index(&d.category).unwrap(), norms(4));
    }

    #[test]
    fn compatibility_examples() {
        let c = |s: &str| StructuredCaption::new("red", "silk", "plaid", s);
        assert_eq!(oracle_compatibility(&[c("casual"), c("casual"), c("casual"), c("casual")]).unwrap(), 1.0);
        assert_eq!(oracle_compatibility(&[c("casual"), c("casual"), c("casual"), c("formal")]).unwrap(), 0.75);
        assert_eq!(oracle_compatibility(&[c("formal")]).unwrap(), 1.0);
        assert!(oracle_compatibility(&[]).is_err());
    }

    #[test]
    fn augmentation_rules() {
        let schema = AttributeSchema::default();
        let prime = vec![
            StructuredCaption::new("red", "silk", "plaid", "formal"),
            StructuredCaption::new("blue", "wool", "floral", "formal"),
            StructuredCaption::new("pink", "denim", "striped", "casual"),
        ];
        let mut rng = DetRng::seed_from_u64(4);
        let out = augment_captions(&schema, &prime, "top", 5, &mut rng).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|c| c.get(Attribute::Style) == "formal"));
        assert_eq!(out.iter().collect::<HashSet<_>>().len(), 5);

        let tiny = AttributeSchema::with_sizes([1, 1, 2, 5]).unwrap();
        let prime = vec![tiny.caption_from_indices([0, 0, 0, 1])];
        assert!(matches!(augment_captions(&tiny, &prime, "top", 3, &mut rng), Err(Error::Augment(_))));
        assert!(augment_captions(&tiny, &prime, "top", 2, &mut rng).is_ok());
    }

    #[test]
    fn augmented_colours_are_near_uniform() {
        let schema = AttributeSchema::default();
        let prime = vec![StructuredCaption::new("red", "silk", "plaid", "formal")];
        let mut rng = DetRng::seed_from_u64(8);
        let mut counts = [0usize; 8];
        for _ in 0..200 {
            for c in augment_captions(&schema, &prime, "top", 5, &mut rng).unwrap() {
                counts[schema.value_index(Attribute::Color, c.get(Attribute::Color)).unwrap()] += 1;
            }
        }
        let n: usize = counts.iter().sum();
        let h: f64 = counts.iter().filter(|&&c| c > 0).map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        }).sum();
        assert!(h >= 0.9 * 8f64.ln(), "entropy {h}");
    }
}
