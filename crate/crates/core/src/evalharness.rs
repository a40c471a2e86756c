//! Oracle-based metrics over generated samples.
//!
//! Every metric here is computed against the synthetic world: the category
//! and attribute values of a latent come from the exact decoder, and
//! compatibility is the shared-style rule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captions::{Attribute, StructuredCaption, NUM_ATTRIBUTES};
use crate::diffusion::standard_normal;
use crate::error::{Error, Result};
use crate::latent::LatentImage;
use crate::preference::{frequency_scores, sample_preference, PreferenceProfile, DEFAULT_DRAWS, DEFAULT_TEMPERATURE};
use crate::rng::{stream, stream_indexed};
use crate::synthworld::{oracle_compatibility, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pfitb,
    Gor,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Pfitb => "pfitb",
            Task::Gor => "gor",
        }
    }
}

/// One generated item with the request that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub task: Task,
    pub user: usize,
    pub outfit: Option<usize>,
    pub categories: Vec<String>,
    pub category: String,
    pub seed: u64,
    pub round: usize,
    pub caption: StructuredCaption,
    pub latent: LatentImage,
}

impl Sample {
    /// Requests that differ only by seed share a diversity group.
    fn group_key(&self) -> (Task, usize, Option<usize>, Vec<String>, usize) {
        (self.task, self.user, self.outfit, self.categories.clone(), self.round)
    }

    /// Rounds of one GOR run share an outfit.
    fn outfit_key(&self) -> (usize, Vec<String>, u64) {
        (self.user, self.categories.clone(), self.seed)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    task: Task,
    user: usize,
    outfit: Option<usize>,
    categories: Vec<String>,
    category: String,
    seed: u64,
    round: usize,
    caption: String,
    latent: String,
}

pub fn write_samples<W: Write>(samples: &[Sample], mut out: W) -> Result<()> {
    for s in samples {
        let rec = SampleRecord {
            task: s.task,
            user: s.user,
            outfit: s.outfit,
            categories: s.categories.clone(),
            category: s.category.clone(),
            seed: s.seed,
            round: s.round,
            caption: s.caption.render(),
            latent: B64.encode(s.latent.to_f32_bytes()),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples<R: BufRead>(input: R, ds: &Dataset) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: String| Error::Format(format!("line {}: {e}", n + 1));
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let bytes = B64.decode(&rec.latent).map_err(|e| at(e.to_string()))?;
        let latent = LatentImage::from_f32_bytes(ds.latent_shape(), &bytes).map_err(|e| at(e.to_string()))?;
        let caption = StructuredCaption::parse(&rec.caption).map_err(|e| at(e.to_string()))?;
        ds.schema.validate(&caption).map_err(|e| at(e.to_string()))?;
        ds.category_index(&rec.category).map_err(|e| at(e.to_string()))?;
        if rec.user >= ds.users.len() || rec.outfit.is_some_and(|o| o >= ds.outfits.len()) {
            return Err(at("unknown user or outfit".into()));
        }
        out.push(Sample {
            task: rec.task,
            user: rec.user,
            outfit: rec.outfit,
            categories: rec.categories,
            category: rec.category,
            seed: rec.seed,
            round: rec.round,
            caption,
            latent,
        });
    }
    Ok(out)
}

/// Running mean that merges exactly across shards.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mean {
    pub sum: f64,
    pub count: usize,
}

impl Mean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn merge(&mut self, other: &Mean) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.sum / self.count as f64
        }
    }
}

fn nonempty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::Domain(format!("{what} needs at least one sample")))
    } else {
        Ok(())
    }
}

/// Fraction of samples whose decoded category is the requested one.
pub fn eval_quality(ds: &Dataset, samples: &[Sample]) -> Result<Mean> {
    nonempty(samples, "quality")?;
    let mut m = Mean::default();
    for s in samples {
        let hit = ds.oracle_decode(&s.latent)?.category == s.category;
        m.push(if hit { 1.0 } else { 0.0 });
    }
    Ok(m)
}

pub fn eval_compatibility(outfits: &[Vec<StructuredCaption>]) -> Result<Mean> {
    nonempty(outfits, "compatibility")?;
    let mut m = Mean::default();
    for o in outfits {
        m.push(oracle_compatibility(o)?);
    }
    Ok(m)
}

/// Per sample, the share of attributes whose value appears in the user's
/// profile. Users with an empty profile are skipped and counted separately.
pub fn eval_personalization(
    samples: &[Sample],
    profiles: &BTreeMap<usize, PreferenceProfile>,
) -> Result<(Mean, usize)> {
    nonempty(samples, "personalization")?;
    let mut m = Mean::default();
    let mut flagged = 0;
    for s in samples {
        match profiles.get(&s.user) {
            Some(p) if !p.is_empty() => {
                let hits = Attribute::ALL.iter().filter(|&&a| p.contains(a, s.caption.get(a))).count();
                m.push(hits as f64 / NUM_ATTRIBUTES as f64);
            }
            _ => flagged += 1,
        }
    }
    Ok((m, flagged))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diversity {
    /// Mean pairwise `‖zi − zj‖ / √dim` within groups of two or more.
    pub latent: Mean,
    pub singleton_groups: usize,
    /// Mean over attributes of the value entropy (nats).
    pub attribute_entropy: f64,
    /// Mean pairwise share of differing attributes within groups.
    pub semantic_distance: Mean,
}

pub fn attribute_entropy(captions: &[&StructuredCaption]) -> f64 {
    if captions.is_empty() {
        return 0.0;
    }
    let n = captions.len() as f64;
    Attribute::ALL
        .iter()
        .map(|&a| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for c in captions {
                *counts.entry(c.get(a)).or_default() += 1;
            }
            counts
                .values()
                .map(|&k| {
                    let p = k as f64 / n;
                    p * (1.0 / p).ln()
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / NUM_ATTRIBUTES as f64
}

pub fn semantic_distance(a: &StructuredCaption, b: &StructuredCaption) -> f64 {
    Attribute::ALL.iter().filter(|&&x| a.get(x) != b.get(x)).count() as f64 / NUM_ATTRIBUTES as f64
}

pub fn eval_diversity(groups: &[Vec<&Sample>]) -> Result<Diversity> {
    nonempty(groups, "diversity")?;
    let mut out = Diversity::default();
    let mut all = Vec::new();
    for g in groups {
        all.extend(g.iter().map(|s| &s.caption));
        if g.len() < 2 {
            out.singleton_groups += 1;
            continue;
        }
        let mut lat = Mean::default();
        let mut sem = Mean::default();
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                let (a, b) = (&g[i], &g[j]);
                lat.push(a.latent.l2_distance(&b.latent) / (a.latent.dim() as f64).sqrt());
                sem.push(semantic_distance(&a.caption, &b.caption));
            }
        }
        out.latent.push(lat.value());
        out.semantic_distance.push(sem.value());
    }
    out.attribute_entropy = attribute_entropy(&all);
    Ok(out)
}

/// Agreement between each generated caption and the decoded latent, overall and per attribute.
pub fn eval_alignment(ds: &Dataset, samples: &[Sample]) -> Result<(Mean, [Mean; NUM_ATTRIBUTES])> {
    nonempty(samples, "alignment")?;
    let mut overall = Mean::default();
    let mut per = [Mean::default(); NUM_ATTRIBUTES];
    for s in samples {
        let decoded = ds.oracle_decode(&s.latent)?.caption;
        let mut hits = 0;
        for a in Attribute::ALL {
            let ok = decoded.get(a) == s.caption.get(a);
            per[a.index()].push(if ok { 1.0 } else { 0.0 });
            hits += usize::from(ok);
        }
        overall.push(hits as f64 / NUM_ATTRIBUTES as f64);
    }
    Ok((overall, per))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskMetrics {
    pub samples: usize,
    pub category_accuracy: Mean,
    pub compatibility: Mean,
    pub personalization: Mean,
    pub personalization_flagged: usize,
    pub diversity: Diversity,
    pub alignment: Mean,
    pub alignment_per_attribute: [Mean; NUM_ATTRIBUTES],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub tasks: BTreeMap<Task, TaskMetrics>,
}

/// Each user's sampled textual preference, drawn from a fixed evaluation stream.
pub fn user_profiles(ds: &Dataset, users: impl IntoIterator<Item = usize>, seed: u64) -> Result<BTreeMap<usize, PreferenceProfile>> {
    let mut out = BTreeMap::new();
    for u in users {
        let table = frequency_scores(&ds.history_captions(u)?);
        let profile = if table.is_empty() {
            PreferenceProfile::default()
        } else {
            sample_preference(&table, DEFAULT_TEMPERATURE, DEFAULT_DRAWS, &mut stream_indexed(seed, "eval.pref", u as u64))?
        };
        out.insert(u, profile);
    }
    Ok(out)
}

fn compat_outfits(ds: &Dataset, task: Task, samples: &[&Sample]) -> Result<Vec<Vec<StructuredCaption>>> {
    match task {
        Task::Pfitb => samples
            .iter()
            .map(|s| {
                let o = ds.outfit(s.outfit.ok_or_else(|| Error::Format("fill-in sample without outfit".into()))?)?;
                let mut caps: Vec<StructuredCaption> =
                    o.context_items().iter().map(|&i| ds.items[i].caption.clone()).collect();
                caps.push(s.caption.clone());
                Ok(caps)
            })
            .collect(),
        Task::Gor => {
            let mut by: BTreeMap<_, Vec<&Sample>> = BTreeMap::new();
            for s in samples {
                by.entry(s.outfit_key()).or_default().push(s);
            }
            Ok(by
                .into_values()
                .map(|mut v| {
                    v.sort_by_key(|s| s.round);
                    v.into_iter().map(|s| s.caption.clone()).collect()
                })
                .collect())
        }
    }
}

pub fn evaluate(ds: &Dataset, samples: &[Sample], seed: u64, label: &str) -> Result<EvalReport> {
    nonempty(samples, "evaluation")?;
    let profiles = user_profiles(ds, samples.iter().map(|s| s.user), seed)?;
    let mut report = EvalReport { label: label.to_string(), tasks: BTreeMap::new() };
    for task in [Task::Pfitb, Task::Gor] {
        let subset: Vec<&Sample> = samples.iter().filter(|s| s.task == task).collect();
        if subset.is_empty() {
            continue;
        }
        let owned: Vec<Sample> = subset.iter().map(|s| (*s).clone()).collect();
        let mut groups: BTreeMap<_, Vec<&Sample>> = BTreeMap::new();
        for s in &subset {
            groups.entry(s.group_key()).or_default().push(*s);
        }
        let groups: Vec<Vec<&Sample>> = groups.into_values().collect();
        let (personalization, flagged) = eval_personalization(&owned, &profiles)?;
        let (alignment, per) = eval_alignment(ds, &owned)?;
        report.tasks.insert(
            task,
            TaskMetrics {
                samples: subset.len(),
                category_accuracy: eval_quality(ds, &owned)?,
                compatibility: eval_compatibility(&compat_outfits(ds, task, &subset)?)?,
                personalization,
                personalization_flagged: flagged,
                diversity: eval_diversity(&groups)?,
                alignment,
                alignment_per_attribute: per,
            },
        );
    }
    Ok(report)
}

/// Replaces every generated caption by a uniform draw and every latent by Gaussian noise.
pub fn random_baseline(ds: &Dataset, samples: &[Sample], seed: u64) -> Vec<Sample> {
    let mut rng = stream(seed, "eval.baseline");
    let sizes = ds.schema.sizes();
    samples
        .iter()
        .map(|s| {
            let idx = [0, 1, 2, 3].map(|a| rng.random_range(0..sizes[a]));
            Sample {
                caption: ds.schema.caption_from_indices(idx),
                latent: standard_normal(ds.latent_shape(), &mut rng),
                ..s.clone()
            }
        })
        .collect()
}

/// Closed-form chance levels for uniform captions and a uniform decoded category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChanceLevels {
    pub category_accuracy: f64,
    pub alignment: f64,
    pub single_value_personalization: f64,
}

pub fn chance_levels(ds: &Dataset) -> ChanceLevels {
    let inv: f64 = ds.schema.sizes().iter().map(|&s| 1.0 / s as f64).sum::<f64>() / NUM_ATTRIBUTES as f64;
    ChanceLevels {
        category_accuracy: 1.0 / ds.categories.len() as f64,
        alignment: inv,
        single_value_personalization: inv,
    }
}

impl EvalReport {
    pub const HEADER: &'static str = "label,task,metric,value,count";

    /// Metric rows in fixed order.
    pub fn rows(&self) -> Vec<(Task, String, f64, usize)> {
        let mut out = Vec::new();
        for (task, m) in &self.tasks {
            let t = *task;
            let d = &m.diversity;
            out.push((t, "category_accuracy".into(), m.category_accuracy.value(), m.category_accuracy.count));
            out.push((t, "compatibility".into(), m.compatibility.value(), m.compatibility.count));
            out.push((t, "personalization".into(), m.personalization.value(), m.personalization.count));
            out.push((t, "diversity_latent".into(), d.latent.value(), d.latent.count));
            out.push((t, "diversity_entropy".into(), d.attribute_entropy, m.samples));
            out.push((t, "semantic_distance".into(), d.semantic_distance.value(), d.semantic_distance.count));
            out.push((t, "alignment".into(), m.alignment.value(), m.alignment.count));
            for a in Attribute::ALL {
                let pa = &m.alignment_per_attribute[a.index()];
                out.push((t, format!("alignment_{}", attr_slug(a)), pa.value(), pa.count));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (task, metric, value, count) in self.rows() {
            let _ = writeln!(s, "{},{},{},{},{}", self.label, task.name(), metric, value, count);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label = {}", self.label);
        let _ = writeln!(s, "evaluator = synthetic-world oracles");
        for (task, m) in &self.tasks {
            let _ = writeln!(s, "{}.samples = {}", task.name(), m.samples);
            let _ = writeln!(s, "{}.personalization_flagged_users = {}", task.name(), m.personalization_flagged);
            let _ = writeln!(s, "{}.singleton_groups = {}", task.name(), m.diversity.singleton_groups);
        }
        s
    }
}

fn attr_slug(a: Attribute) -> &'static str {
    match a {
        Attribute::Color => "color",
        Attribute::Material => "material",
        Attribute::DesignFeatures => "design",
        Attribute::Style => "style",
    }
}

/// Writes the metric table followed by a `[summary]` key–value block.
pub fn write_report<W: Write>(reports: &[EvalReport], mut out: W) -> Result<()> {
    writeln!(out, "{}", EvalReport::HEADER)?;
    for r in reports {
        out.write_all(r.to_csv().as_bytes())?;
    }
    writeln!(out)?;
    writeln!(out, "[summary]")?;
    for r in reports {
        out.write_all(r.summary().as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use crate::synthworld::{gen_world, WorldSpec};
    use rand::SeedableRng;

    fn world(noise: f64) -> Dataset {
        gen_world(&WorldSpec { n_items: 100, n_users: 8, n_outfits: 10, noise, ..WorldSpec::default() }).unwrap()
    }

    fn truthful(ds: &Dataset) -> Vec<Sample> {
        let mut rng = DetRng::seed_from_u64(0);
        ds.outfits
            .iter()
            .map(|o| {
                let it = &ds.items[o.held_out_item()];
                Sample {
                    task: Task::Pfitb,
                    user: o.user,
                    outfit: Some(o.id),
                    categories: vec![],
                    category: it.category.clone(),
                    seed: 1,
                    round: 0,
                    caption: it.caption.clone(),
                    latent: ds.encode_item(&it.caption, &it.category, &mut rng).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn ground_truth_samples_score_perfectly() {
        let ds = world(0.0);
        let s = truthful(&ds);
        assert_eq!(eval_quality(&ds, &s).unwrap().value(), 1.0);
        assert_eq!(eval_alignment(&ds, &s).unwrap().0.value(), 1.0);
        let r = evaluate(&ds, &s, 0, "truth").unwrap();
        assert_eq!(r.tasks[&Task::Pfitb].compatibility.value(), 1.0);
        assert_eq!(eval_quality(&ds, &s[..1]).unwrap().value(), 1.0);
        assert!(eval_quality(&ds, &[]).is_err());
    }

    #[test]
    fn noise_latents_hit_chance() {
        let ds = world(0.05);
        let base = truthful(&ds);
        let many: Vec<Sample> = (0..40).flat_map(|_| base.clone()).collect();
        let noise = random_baseline(&ds, &many, 3);
        let q = eval_quality(&ds, &noise).unwrap().value();
        assert!((q - 0.2).abs() <= 0.06, "{q}");
        let a = eval_alignment(&ds, &noise).unwrap().0.value();
        assert!((a - chance_levels(&ds).alignment).abs() <= 0.03, "{a}");
    }

    #[test]
    fn personalization_examples() {
        let ds = world(0.0);
        let c = StructuredCaption::new("red", "silk", "plaid", "formal");
        let single = PreferenceProfile { values: ["red", "silk", "plaid", "formal"].map(|v| vec![v.to_string()]) };
        let mut profiles = BTreeMap::new();
        profiles.insert(0, single);
        profiles.insert(1, PreferenceProfile::default());
        let mut s = truthful(&ds)[0].clone();
        s.caption = c;
        s.user = 0;
        let (m, flagged) = eval_personalization(&[s.clone()], &profiles).unwrap();
        assert_eq!((m.value(), flagged), (1.0, 0));
        let mut t = s.clone();
        t.user = 1;
        let (m, flagged) = eval_personalization(&[s, t], &profiles).unwrap();
        assert_eq!((m.value(), m.count, flagged), (1.0, 1, 1));
    }

    #[test]
    fn uniform_captions_against_single_value_profiles() {
        let ds = world(0.0);
        let mut rng = DetRng::seed_from_u64(12);
        let mut profiles = BTreeMap::new();
        let mut samples = Vec::new();
        let proto = truthful(&ds)[0].clone();
        for u in 0..1000 {
            let pick = |rng: &mut DetRng| [0, 1, 2, 3].map(|a| rng.random_range(0..ds.schema.sizes()[a]));
            let pref = ds.schema.caption_from_indices(pick(&mut rng));
            profiles.insert(u, PreferenceProfile { values: Attribute::ALL.map(|a| vec![pref.get(a).to_string()]) });
            samples.push(Sample { user: u, caption: ds.schema.caption_from_indices(pick(&mut rng)), ..proto.clone() });
        }
        let (m, _) = eval_personalization(&samples, &profiles).unwrap();
        assert!((m.value() - 0.1542).abs() <= 0.02, "{}", m.value());
    }

    #[test]
    fn diversity_examples() {
        let ds = world(0.0);
        let s = truthful(&ds)[0].clone();
        let same = vec![vec![&s, &s, &s]];
        let d = eval_diversity(&same).unwrap();
        assert_eq!((d.latent.value(), d.attribute_entropy, d.semantic_distance.value()), (0.0, 0.0, 0.0));
        let mut t = s.clone();
        t.caption.set(Attribute::Color, "navy");
        let d = eval_diversity(&[vec![&s, &t]]).unwrap();
        assert_eq!(d.semantic_distance.value(), 0.25);
        let d = eval_diversity(&[vec![&s], vec![&s, &t]]).unwrap();
        assert_eq!(d.singleton_groups, 1);

        let mut rng = DetRng::seed_from_u64(2);
        let colours = ds.schema.values(Attribute::Color).to_vec();
        let caps: Vec<StructuredCaption> = (0..1000)
            .map(|_| {
                let mut c = s.caption.clone();
                c.set(Attribute::Color, colours[rng.random_range(0..8)].clone());
                c
            })
            .collect();
        let refs: Vec<&StructuredCaption> = caps.iter().collect();
        let color_entropy = attribute_entropy(&refs) * 4.0;
        assert!((color_entropy - 8f64.ln()).abs() <= 0.05, "{color_entropy}");
    }

    #[test]
    fn metrics_are_order_invariant_and_compose() {
        let ds = world(0.05);
        let mut pairs = truthful(&ds);
        pairs.extend(truthful(&ds).into_iter().map(|x| Sample { seed: 2, ..x }));
        let s = random_baseline(&ds, &pairs, 4);
        let mut rev = s.clone();
        rev.reverse();
        let (fwd, back) = (evaluate(&ds, &s, 1, "x").unwrap(), evaluate(&ds, &rev, 1, "x").unwrap());
        let (f, b) = (&fwd.tasks[&Task::Pfitb], &back.tasks[&Task::Pfitb]);
        assert_eq!((f.category_accuracy, f.alignment, f.personalization), (b.category_accuracy, b.alignment, b.personalization));
        assert_eq!(f.compatibility, b.compatibility);
        // Pairwise sums run in a different order within each group.
        assert!((f.diversity.latent.value() - b.diversity.latent.value()).abs() < 1e-12);
        assert_eq!(f.diversity.attribute_entropy, b.diversity.attribute_entropy);
        let (a, b) = s.split_at(4);
        let mut merged = eval_quality(&ds, a).unwrap();
        merged.merge(&eval_quality(&ds, b).unwrap());
        assert_eq!(merged, eval_quality(&ds, &s).unwrap());
        let mut merged = eval_alignment(&ds, a).unwrap().0;
        merged.merge(&eval_alignment(&ds, b).unwrap().0);
        assert_eq!(merged.count, s.len());
        assert!((merged.value() - eval_alignment(&ds, &s).unwrap().0.value()).abs() < 1e-15);
    }

    #[test]
    fn alignment_is_symmetric() {
        let ds = world(0.0);
        let s = truthful(&ds)[0].clone();
        let other = StructuredCaption::new("navy", "silk", "plaid", "casual");
        let z_other = ds.encode_item(&other, &s.category, &mut DetRng::seed_from_u64(0)).unwrap();
        let a = Sample { caption: other.clone(), latent: s.latent.clone(), ..s.clone() };
        let b = Sample { caption: s.caption.clone(), latent: z_other, ..s.clone() };
        assert_eq!(eval_alignment(&ds, &[a]).unwrap().0, eval_alignment(&ds, &[b]).unwrap().0);
    }

    #[test]
    fn samples_and_report_round_trip() {
        let ds = world(0.05);
        let s = truthful(&ds);
        let mut buf = Vec::new();
        write_samples(&s, &mut buf).unwrap();
        let back = read_samples(buf.as_slice(), &ds).unwrap();
        assert_eq!(back.len(), s.len());
        assert_eq!(back[0].caption, s[0].caption);
        assert_eq!(back[0].latent, s[0].latent.quantized());
        let bad = String::from_utf8(buf).unwrap().replacen("\"task\":\"pfitb\"", "\"task\":\"nope\"", 2);
        let err = read_samples(bad.as_bytes(), &ds).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");

        let r = evaluate(&ds, &s, 0, "model").unwrap();
        let mut a = Vec::new();
        write_report(&[r.clone()], &mut a).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("label,task,metric,value,count\nmodel,pfitb,category_accuracy,1,10\n"));
        assert!(text.contains("[summary]"));
    }
}
