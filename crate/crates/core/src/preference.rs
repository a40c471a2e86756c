//! Attribute-level preference extraction from interaction histories.

use std::collections::BTreeMap;

use rand::Rng;

use crate::captions::{Attribute, StructuredCaption, Vocab, NUM_ATTRIBUTES};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_DRAWS: usize = 10;

/// Per attribute, how often each observed value occurs in a history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrequencyTable {
    pub scores: [BTreeMap<String, f64>; NUM_ATTRIBUTES],
}

impl FrequencyTable {
    pub fn attribute(&self, a: Attribute) -> &BTreeMap<String, f64> {
        &self.scores[a.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.scores.iter().all(BTreeMap::is_empty)
    }
}

pub fn frequency_scores(history: &[StructuredCaption]) -> FrequencyTable {
    let mut table = FrequencyTable::default();
    for c in history {
        for a in Attribute::ALL {
            *table.scores[a.index()].entry(c.get(a).to_string()).or_insert(0.0) += 1.0;
        }
    }
    table
}

/// `P(v) = exp(f(v)/T) / Σ exp(f(v')/T)` over the recorded values of `a`.
/// An empty table yields an empty list, which callers treat as an absent preference.
pub fn softmax_probs(table: &FrequencyTable, a: Attribute, temperature: f64) -> Result<Vec<(String, f64)>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("temperature {temperature} must be positive")));
    }
    let scores = table.attribute(a);
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    let max = scores.values().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let weights: Vec<(String, f64)> =
        scores.iter().map(|(v, &f)| (v.clone(), ((f - max) / temperature).exp())).collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    Ok(weights.into_iter().map(|(v, w)| (v, w / total)).collect())
}

/// Sampled textual preference: per attribute, distinct values in first-draw order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PreferenceProfile {
    pub values: [Vec<String>; NUM_ATTRIBUTES],
}

impl PreferenceProfile {
    pub fn get(&self, a: Attribute) -> &[String] {
        &self.values[a.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(Vec::is_empty)
    }

    pub fn contains(&self, a: Attribute, v: &str) -> bool {
        self.get(a).iter().any(|x| x == v)
    }

    /// Canonical key-value text with values joined by ", ".
    pub fn render(&self) -> String {
        Attribute::ALL
            .iter()
            .filter(|a| !self.get(**a).is_empty())
            .map(|a| format!("{}: {}", a.key(), self.get(*a).join(", ")))
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Token ids of [`PreferenceProfile::render`], shortened to at most `max_len`
    /// by dropping the latest-drawn value of the longest list (never the last one
    /// of an attribute). `None` for an empty profile.
    pub fn tokens(&self, max_len: usize) -> Result<Option<Vec<u32>>> {
        if self.is_empty() {
            return Ok(None);
        }
        let vocab = Vocab::global();
        let mut p = self.clone();
        loop {
            let toks = vocab.tokenize(&p.render())?;
            if toks.len() <= max_len {
                return Ok(Some(toks));
            }
            let longest = (0..NUM_ATTRIBUTES).max_by_key(|&i| p.values[i].len()).expect("nonempty");
            if p.values[longest].len() <= 1 {
                return Err(Error::Domain(format!("preference cannot fit in {max_len} tokens")));
            }
            p.values[longest].pop();
        }
    }
}

fn draw<R: Rng + ?Sized>(probs: &[(String, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut c = 0.0;
    for (i, (_, p)) in probs.iter().enumerate() {
        c += p;
        if u < c {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws `n` values per attribute from [`softmax_probs`] and removes duplicates.
pub fn sample_preference<R: Rng + ?Sized>(
    table: &FrequencyTable,
    temperature: f64,
    n: usize,
    rng: &mut R,
) -> Result<PreferenceProfile> {
    if n == 0 {
        return Err(Error::Domain("need at least one draw".into()));
    }
    let mut profile = PreferenceProfile::default();
    for a in Attribute::ALL {
        let probs = softmax_probs(table, a, temperature)?;
        if probs.is_empty() {
            continue;
        }
        let list = &mut profile.values[a.index()];
        for _ in 0..n {
            let v = &probs[draw(&probs, rng)].0;
            if !list.contains(v) {
                list.push(v.clone());
            }
        }
    }
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(a: Attribute, entries: &[(&str, f64)]) -> FrequencyTable {
        let mut t = FrequencyTable::default();
        for (v, f) in entries {
            t.scores[a.index()].insert(v.to_string(), *f);
        }
        t
    }

    fn prob(p: &[(String, f64)], v: &str) -> f64 {
        p.iter().find(|(x, _)| x == v).unwrap().1
    }

    #[test]
    fn counts_history_values() {
        let red = StructuredCaption::new("red", "denim", "pleated", "casual");
        let blue = StructuredCaption::new("blue", "denim", "plaid", "casual");
        let t = frequency_scores(&[red.clone(), red.clone(), red.clone()]);
        assert_eq!(t.attribute(Attribute::Color).get("red"), Some(&3.0));
        assert_eq!(t.attribute(Attribute::Color).len(), 1);
        let t = frequency_scores(&[red.clone(), red, blue]);
        assert_eq!(t.attribute(Attribute::Color).get("red"), Some(&2.0));
        assert_eq!(t.attribute(Attribute::Color).get("blue"), Some(&1.0));
        assert!(frequency_scores(&[]).is_empty());
    }

    #[test]
    fn softmax_examples() {
        let c = Attribute::Color;
        let p = softmax_probs(&table(c, &[("a", 1.0), ("b", 1.0)]), c, 1.0).unwrap();
        assert_eq!(prob(&p, "a"), 0.5);
        let p = softmax_probs(&table(c, &[("a", 2f64.ln()), ("b", 0.0)]), c, 1.0).unwrap();
        assert!((prob(&p, "a") - 2.0 / 3.0).abs() < 1e-12);
        assert!((prob(&p, "b") - 1.0 / 3.0).abs() < 1e-12);
        let p = softmax_probs(&table(c, &[("a", 3.0), ("b", 1.0)]), c, 1e-4).unwrap();
        assert!(prob(&p, "a") > 1.0 - 1e-12);
        assert!(matches!(softmax_probs(&table(c, &[("a", 1.0)]), c, 0.0), Err(Error::Domain(_))));
        assert!(softmax_probs(&FrequencyTable::default(), c, 1.0).unwrap().is_empty());
    }

    #[test]
    fn single_value_and_single_draw() {
        let t = frequency_scores(&[StructuredCaption::new("red", "silk", "plaid", "formal")]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = sample_preference(&t, 1.0, 10, &mut rng).unwrap();
        assert_eq!(p.get(Attribute::Color), ["red".to_string()]);
        let t = frequency_scores(&[
            StructuredCaption::new("red", "silk", "plaid", "formal"),
            StructuredCaption::new("blue", "wool", "floral", "casual"),
        ]);
        let p = sample_preference(&t, 1.0, 1, &mut rng).unwrap();
        assert!(p.values.iter().all(|v| v.len() == 1));
    }

    #[test]
    fn miss_rate_matches_binomial_bound() {
        // P(value a never drawn in 10 fair draws) = 2^-10.
        let c = Attribute::Color;
        let t = table(c, &[("a", 1.0), ("b", 1.0)]);
        let mut misses = 0;
        for seed in 0..10_000u64 {
            let p = sample_preference(&t, 1.0, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            if !p.contains(c, "a") {
                misses += 1;
            }
        }
        assert!(misses as f64 / 10_000.0 <= 0.005, "misses {misses}");
    }

    #[test]
    fn rendering_and_truncation() {
        let mut p = PreferenceProfile::default();
        p.values[0] = vec!["red".into(), "blue".into()];
        p.values[1] = vec!["silk".into()];
        p.values[2] = vec!["plaid".into()];
        p.values[3] = vec!["formal".into(), "casual".into(), "sporty".into()];
        assert_eq!(
            p.render(),
            "Color: red, blue; Material: silk; Design features: plaid; Clothing Fashion Style: formal, casual, sporty"
        );
        let full = p.tokens(64).unwrap().unwrap();
        assert_eq!(full.len(), 7 + 2 * 7);
        let short = p.tokens(17).unwrap().unwrap();
        assert_eq!(Vocab::global().detokenize(&short).unwrap(),
            "Color: red, blue; Material: silk; Design features: plaid; Clothing Fashion Style: formal");
        assert!(PreferenceProfile::default().tokens(32).unwrap().is_none());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            f in prop::collection::vec(0.0f64..20.0, 1..8),
            shift in -50.0f64..50.0,
            temp in 0.1f64..5.0,
        ) {
            let c = Attribute::Style;
            let names: Vec<String> = (0..f.len()).map(|i| format!("v{i}")).collect();
            let t1 = table(c, &names.iter().map(String::as_str).zip(f.iter().copied()).collect::<Vec<_>>());
            let t2 = table(c, &names.iter().map(String::as_str).zip(f.iter().map(|x| x + shift)).collect::<Vec<_>>());
            let p1 = softmax_probs(&t1, c, temp).unwrap();
            let p2 = softmax_probs(&t2, c, temp).unwrap();
            prop_assert!((p1.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() <= 1e-12);
            for (a, b) in p1.iter().zip(&p2) {
                prop_assert!((a.1 - b.1).abs() <= 1e-12);
            }
        }

        #[test]
        fn dedup_keeps_first_occurrences(seed in any::<u64>(), n in 1usize..30) {
            let c = Attribute::Color;
            let t = table(c, &[("a", 1.0), ("b", 2.0), ("c", 0.5)]);
            let probs = softmax_probs(&t, c, 1.0).unwrap();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let draws: Vec<String> = (0..n).map(|_| probs[draw(&probs, &mut r1)].0.clone()).collect();
            let p = sample_preference(&t, 1.0, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut expect: Vec<String> = Vec::new();
            for d in draws {
                if !expect.contains(&d) {
                    expect.push(d);
                }
            }
            prop_assert_eq!(p.get(c), expect.as_slice());
        }
    }
}
