//! Synthetic attribute corpora.
//!
//! Each domain is an order-1 Markov chain over a shared token alphabet. Every
//! transition row places exactly `marker_rate` of its mass on the domain's
//! marker tokens, so the long-run marker frequency equals `marker_rate`
//! irrespective of the chain's finer structure.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::write_corpus;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainSpec {
    /// Attribute label.
    pub name: String,
    /// Token strings, indexed by alphabet position.
    pub alphabet: Vec<String>,
    /// Alphabet positions characteristic of this domain.
    pub marker_tokens: Vec<usize>,
    /// `transition[i][j]` = P(next = j | current = i).
    pub transition: Vec<Vec<f64>>,
    /// Distribution of the first token of a document.
    pub initial: Vec<f64>,
    pub marker_rate: f64,
}

/// The default 64-token alphabet: 24 `aNN` markers, 24 `bNN` markers and 16
/// shared `sNN` tokens.
pub fn default_alphabet() -> Vec<String> {
    let a = (0..24).map(|i| format!("a{i:02}"));
    let b = (0..24).map(|i| format!("b{i:02}"));
    let s = (0..16).map(|i| format!("s{i:02}"));
    a.chain(b).chain(s).collect()
}

/// The two built-in domains `A` and `B` over [`default_alphabet`], both with
/// marker rate 0.6.
pub fn default_domains() -> (DomainSpec, DomainSpec) {
    let alphabet = default_alphabet();
    let a_markers: Vec<usize> = (0..24).collect();
    let b_markers: Vec<usize> = (24..48).collect();
    let shared: Vec<usize> = (48..64).collect();
    let a = DomainSpec::structured("A", alphabet.clone(), a_markers, &shared, 0.6, 0xA11CE).expect("built-in domain A is valid");
    let b = DomainSpec::structured("B", alphabet, b_markers, &shared, 0.6, 0xB0B).expect("built-in domain B is valid");
    (a, b)
}

impl DomainSpec {
    /// Builds a chain whose rows split mass `marker_rate` / `1 - marker_rate`
    /// between `markers` and `shared`. Within each group a row favours a few
    /// seeded successors so the chain has learnable sequential structure.
    pub fn structured(
        name: &str,
        alphabet: Vec<String>,
        markers: Vec<usize>,
        shared: &[usize],
        marker_rate: f64,
        structure_seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&marker_rate) {
            return Err(Error::InvalidDomain(format!("marker_rate {marker_rate} outside [0, 1]")));
        }
        if (markers.is_empty() && marker_rate > 0.0) || (shared.is_empty() && marker_rate < 1.0) {
            return Err(Error::InvalidDomain("empty token group with non-zero mass".into()));
        }
        let n = alphabet.len();
        let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
        let mut transition = vec![vec![0.0; n]; n];
        for row in transition.iter_mut() {
            spread(row, &markers, marker_rate, &mut rng);
            spread(row, shared, 1.0 - marker_rate, &mut rng);
        }
        let mut initial = vec![0.0; n];
        for &m in &markers {
            initial[m] += marker_rate / markers.len() as f64;
        }
        for &s in shared {
            initial[s] += (1.0 - marker_rate) / shared.len() as f64;
        }
        let spec = DomainSpec {
            name: name.to_owned(),
            alphabet,
            marker_tokens: markers,
            transition,
            initial,
            marker_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alphabet.len();
        if n == 0 {
            return Err(Error::InvalidDomain("empty alphabet".into()));
        }
        if self.transition.len() != n {
            return Err(Error::InvalidDomain(format!(
                "transition has {} rows for an alphabet of {n}",
                self.transition.len()
            )));
        }
        let rows = self.transition.iter().chain(std::iter::once(&self.initial));
        for (i, row) in rows.enumerate() {
            if row.len() != n {
                return Err(Error::InvalidDomain(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidDomain(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidDomain(format!("row {i} sums to {sum}")));
            }
        }
        if let Some(&m) = self.marker_tokens.iter().find(|&&m| m >= n) {
            return Err(Error::InvalidDomain(format!("marker index {m} outside alphabet")));
        }
        Ok(())
    }

    pub fn marker_strings(&self) -> Vec<&str> {
        self.marker_tokens.iter().map(|&i| self.alphabet[i].as_str()).collect()
    }
}

/// Distributes `mass` over `group` inside `row`: half on one seeded successor,
/// a quarter on a second, an eighth on a third, the rest uniform.
fn spread(row: &mut [f64], group: &[usize], mass: f64, rng: &mut ChaCha8Rng) {
    if group.is_empty() || mass == 0.0 {
        return;
    }
    let uniform = mass / group.len() as f64;
    if group.len() < 4 {
        for &g in group {
            row[g] += uniform;
        }
        return;
    }
    let mut picks = group.to_vec();
    picks.shuffle(rng);
    let peaked = [0.5, 0.25, 0.125];
    let rest = 1.0 - peaked.iter().sum::<f64>();
    for &g in group {
        row[g] += mass * rest / group.len() as f64;
    }
    for (w, &g) in peaked.iter().zip(&picks) {
        row[g] += mass * w;
    }
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Samples `num_docs` documents of `doc_len` tokens each, one per line.
pub fn synth_domain_corpus(spec: &DomainSpec, num_docs: usize, doc_len: usize, seed: u64) -> Result<Vec<String>> {
    if doc_len < 2 {
        return Err(Error::InvalidDomain(format!("doc_len {doc_len} < 2")));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::with_capacity(num_docs);
    for _ in 0..num_docs {
        let mut cur = draw(&spec.initial, &mut rng);
        let mut words = Vec::with_capacity(doc_len);
        words.push(spec.alphabet[cur].as_str());
        for _ in 1..doc_len {
            cur = draw(&spec.transition[cur], &mut rng);
            words.push(spec.alphabet[cur].as_str());
        }
        docs.push(words.join(" "));
    }
    Ok(docs)
}

pub fn synth_domain_corpus_to_file(spec: &DomainSpec, num_docs: usize, doc_len: usize, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(path, &synth_domain_corpus(spec, num_docs, doc_len, seed)?)
}

/// Fraction of whitespace tokens in `docs` that are in `markers`.
pub fn marker_frequency(docs: &[String], markers: &[&str]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for d in docs {
        for w in d.split_whitespace() {
            total += 1;
            if markers.contains(&w) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{build_vocab, DEFAULT_SPECIALS};

    #[test]
    fn default_domains_are_valid_and_disjoint() {
        let (a, b) = default_domains();
        assert_eq!(a.alphabet.len(), 64);
        assert!(a.marker_tokens.iter().all(|m| !b.marker_tokens.contains(m)));
        for spec in [&a, &b] {
            for row in &spec.transition {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, _) = default_domains();
        let d1 = synth_domain_corpus(&a, 20, 16, 7).unwrap();
        let d2 = synth_domain_corpus(&a, 20, 16, 7).unwrap();
        let d3 = synth_domain_corpus(&a, 20, 16, 8).unwrap();
        assert_eq!(d1, d2);
        assert_ne!(d1, d3);

        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1"), dir.path().join("2"));
        synth_domain_corpus_to_file(&a, 20, 16, 7, &p1).unwrap();
        synth_domain_corpus_to_file(&a, 20, 16, 7, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn zero_marker_rate_emits_no_markers() {
        let alphabet = default_alphabet();
        let shared: Vec<usize> = (48..64).collect();
        let spec = DomainSpec::structured("Z", alphabet, (0..24).collect(), &shared, 0.0, 1).unwrap();
        let docs = synth_domain_corpus(&spec, 200, 32, 3).unwrap();
        assert_eq!(marker_frequency(&docs, &spec.marker_strings()), 0.0);
    }

    #[test]
    fn marker_rate_is_respected() {
        let (a, _) = default_domains();
        let docs = synth_domain_corpus(&a, 2000, 64, 11).unwrap();
        let f = marker_frequency(&docs, &a.marker_strings());
        assert!((f - 0.6).abs() <= 0.05, "measured {f}");
    }

    #[test]
    fn vocab_over_full_alphabet_has_69_entries() {
        let (a, b) = default_domains();
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a"), dir.path().join("b"));
        synth_domain_corpus_to_file(&a, 500, 64, 1, &pa).unwrap();
        synth_domain_corpus_to_file(&b, 500, 64, 2, &pb).unwrap();
        let body = std::fs::read_to_string(&pa).unwrap() + &std::fs::read_to_string(&pb).unwrap();
        let distinct: std::collections::HashSet<&str> = body.split_whitespace().collect();
        assert_eq!(distinct.len(), 64);
        let v = build_vocab(&[pa, pb], &DEFAULT_SPECIALS).unwrap();
        assert_eq!(v.size(), distinct.len() + 5);
        assert!(!body.contains("<mask>") && !body.contains("<pad>"));
    }

    #[test]
    fn invalid_tables_are_rejected() {
        let (mut a, _) = default_domains();
        a.transition[3][0] += 0.1;
        assert!(matches!(a.validate(), Err(Error::InvalidDomain(_))));
        assert!(synth_domain_corpus(&a, 1, 4, 0).is_err());

        let (a, _) = default_domains();
        assert!(synth_domain_corpus(&a, 1, 1, 0).is_err());
    }
}
