//! Seeded synthetic DNS traffic with per-class signatures, for demos and
//! tests when the public corpora are not at hand.
//!
//! Events follow the default schema. Each preset class owns a disjoint band
//! of `frame.len` and of `dns.resp.ttl`, so a one-feature threshold rule
//! separates every pair of classes.

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{write_dataset, DnsEvent, FeatureSchema, LabelMap, CANONICAL_CLASSES};

const MAX_LABEL: usize = 63;
const MAX_QNAME: usize = 253;

const WORDS: [&str; 40] = [
    "www", "mail", "api", "cdn", "shop", "news", "blog", "static", "img", "login", "docs", "app", "m", "support",
    "portal", "video", "media", "store", "auth", "search", "maps", "cloud", "status", "help", "edge", "assets",
    "files", "update", "time", "ntp", "vpn", "git", "wiki", "forum", "pay", "beta", "dev", "en", "us", "web",
];

const BENIGN_DOMAINS: [&str; 8] = [
    "example.com",
    "example.org",
    "contoso.net",
    "fabrikam.com",
    "northwind.io",
    "acme.co.uk",
    "globex.de",
    "initech.com",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alphabet {
    /// Whole words from a fixed list.
    Dictionary,
    /// A dictionary word followed by digits.
    WordDigits,
    Base32,
    Hex,
    Base64Url,
}

impl Alphabet {
    fn chars(self) -> &'static [u8] {
        match self {
            Alphabet::Base32 => b"abcdefghijklmnopqrstuvwxyz234567",
            Alphabet::Hex => b"0123456789abcdef",
            Alphabet::Base64Url => b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_",
            Alphabet::Dictionary | Alphabet::WordDigits => b"0123456789",
        }
    }
}

/// How one class draws its names and numeric fields. Ranges are inclusive for
/// integers and half-open for reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub name: String,
    pub alphabet: Alphabet,
    /// Length of random labels; ignored by `Dictionary`.
    pub label_len: (usize, usize),
    /// Generated labels in front of the base domain.
    pub depth: (usize, usize),
    /// Base domains picked uniformly.
    pub domains: Vec<String>,
    pub frame_len: (f64, f64),
    pub ttl: (f64, f64),
    pub qtypes: Vec<u16>,
    pub answers: (u32, u32),
    pub time_delta: (f64, f64),
}

impl ClassRecipe {
    /// Expected query-name length in characters under this recipe, ignoring
    /// the cap at 253.
    pub fn expected_qname_len(&self) -> f64 {
        let mean_label = match self.alphabet {
            Alphabet::Dictionary => WORDS.iter().map(|w| w.len() as f64).sum::<f64>() / WORDS.len() as f64,
            Alphabet::WordDigits => {
                WORDS.iter().map(|w| w.len() as f64).sum::<f64>() / WORDS.len() as f64
                    + (self.label_len.0 + self.label_len.1) as f64 / 2.0
            }
            _ => (self.label_len.0 + self.label_len.1) as f64 / 2.0,
        };
        let depth = (self.depth.0 + self.depth.1) as f64 / 2.0;
        let domain = self.domains.iter().map(|d| d.len() as f64).sum::<f64>() / self.domains.len() as f64;
        depth * (mean_label + 1.0) + domain
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("recipe `{}`: {what}", self.name)));
        if self.name.trim().is_empty() {
            return bad("empty class name");
        }
        if self.label_len.0 == 0 || self.label_len.0 > self.label_len.1 || self.label_len.1 > MAX_LABEL {
            return bad("label length range must lie in 1..=63");
        }
        if self.depth.0 > self.depth.1 {
            return bad("depth range is reversed");
        }
        if self.domains.is_empty() || self.qtypes.is_empty() {
            return bad("needs at least one domain and one query type");
        }
        if self.domains.iter().any(|d| d.is_empty() || d.len() > MAX_QNAME / 2) {
            return bad("base domain is empty or too long");
        }
        for (lo, hi) in [self.frame_len, self.ttl, self.time_delta] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= 0.0) {
                return bad("numeric ranges must be finite, non-negative and non-empty");
            }
        }
        if self.answers.0 > self.answers.1 {
            return bad("answer-count range is reversed");
        }
        Ok(())
    }

    /// Preset for one of the canonical class names.
    pub fn preset(name: &str) -> Option<Self> {
        let idx = CANONICAL_CLASSES.iter().position(|c| *c == name)?;
        let domains = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let recipe = match idx {
            0 => ClassRecipe {
                name: name.into(),
                alphabet: Alphabet::Dictionary,
                label_len: (1, 1),
                depth: (1, 2),
                domains: domains(&BENIGN_DOMAINS),
                frame_len: (70.0, 100.0),
                ttl: (3000.0, 3600.0),
                qtypes: vec![1, 1, 1, 28, 28, 5, 15],
                answers: (1, 4),
                time_delta: (0.05, 2.0),
            },
            1 => ClassRecipe {
                name: name.into(),
                alphabet: Alphabet::WordDigits,
                label_len: (2, 5),
                depth: (1, 1),
                domains: domains(&["wild.example.net", "any.contoso.org"]),
                frame_len: (105.0, 135.0),
                ttl: (2000.0, 2600.0),
                qtypes: vec![1],
                answers: (1, 1),
                time_delta: (0.02, 1.0),
            },
            _ => {
                // Tunnel families: bands of width 36 above the benign ones,
                // longer labels and deeper chains.
                let t = idx - 2;
                let (alphabet, label_len, depth, qtypes): (_, _, _, &[u16]) = match name {
                    "tcp-over-dns" => (Alphabet::Base32, (30, 50), (2, 3), &[16, 5]),
                    "dnscat2" => (Alphabet::Hex, (30, 62), (2, 3), &[16, 5, 15]),
                    "andiodine" => (Alphabet::Base32, (40, 63), (3, 4), &[10]),
                    "dns2tcp" => (Alphabet::Base64Url, (20, 45), (2, 3), &[16]),
                    "iodine" => (Alphabet::Base32, (35, 60), (3, 4), &[10, 16]),
                    "dnspot" => (Alphabet::Hex, (16, 40), (2, 4), &[16, 1]),
                    "dns-shell" => (Alphabet::Base64Url, (12, 30), (2, 3), &[16]),
                    "tuns" => (Alphabet::Base32, (20, 40), (3, 4), &[5]),
                    "CobaltStrike" => (Alphabet::Hex, (8, 24), (2, 3), &[1, 16, 28]),
                    _ => (Alphabet::Base64Url, (40, 63), (2, 3), &[16]),
                };
                let lo = 150.0 + 40.0 * t as f64;
                let ttl_lo = 5.0 + 60.0 * t as f64;
                ClassRecipe {
                    name: name.into(),
                    alphabet,
                    label_len,
                    depth,
                    domains: vec![format!("t{t}.{}.net", name.to_ascii_lowercase())],
                    frame_len: (lo, lo + 36.0),
                    ttl: (ttl_lo, ttl_lo + 50.0),
                    qtypes: qtypes.to_vec(),
                    answers: (0, 2),
                    time_delta: (0.001, 0.05),
                }
            }
        };
        Some(recipe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub per_class: usize,
    pub seed: u64,
    pub classes: Vec<ClassRecipe>,
}

impl SynthSpec {
    /// Spec built from canonical class presets.
    pub fn with_classes<S: AsRef<str>>(names: &[S], per_class: usize, seed: u64) -> Result<Self> {
        let classes = names
            .iter()
            .map(|n| ClassRecipe::preset(n.as_ref()).ok_or_else(|| Error::UnknownLabel(n.as_ref().to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(SynthSpec {
            per_class,
            seed,
            classes,
        })
    }

    /// All twelve canonical classes.
    pub fn canonical(per_class: usize, seed: u64) -> Self {
        Self::with_classes(&CANONICAL_CLASSES, per_class, seed).expect("presets exist for canonical names")
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidArgument("synthetic spec has no classes".into()));
        }
        for r in &self.classes {
            r.validate()?;
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("synthetic spec repeats a class".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Result<LabelMap> {
        LabelMap::new(&self.classes.iter().map(|c| c.name.as_str()).collect::<Vec<_>>())
    }
}

/// Shannon entropy in bits per character of the name without its dots.
pub fn qname_entropy(qname: &str) -> f64 {
    let mut counts = [0u32; 256];
    let mut n = 0u32;
    for b in qname.bytes().filter(|&b| b != b'.') {
        counts[b.to_ascii_lowercase() as usize] += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Numeric vector in default-schema order for a query name and its packet
/// fields.
pub fn default_numerics(qname: &str, frame_len: f64, ttl: f64, qtype: u16, answers: u32, time_delta: f64) -> Vec<f64> {
    vec![
        frame_len,
        ttl,
        qname.len() as f64,
        qname.split('.').count() as f64,
        qname_entropy(qname),
        qtype as f64,
        answers as f64,
        time_delta,
    ]
}

fn random_label<R: Rng>(recipe: &ClassRecipe, rng: &mut R) -> String {
    match recipe.alphabet {
        Alphabet::Dictionary => WORDS.choose(rng).expect("non-empty").to_string(),
        Alphabet::WordDigits => {
            let word = WORDS.choose(rng).expect("non-empty");
            let digits = rng.random_range(recipe.label_len.0..=recipe.label_len.1);
            let mut s = String::with_capacity(word.len() + digits);
            s.push_str(word);
            s.extend((0..digits).map(|_| char::from(b'0' + rng.random_range(0..10u8))));
            s
        }
        a => {
            let chars = a.chars();
            let len = rng.random_range(recipe.label_len.0..=recipe.label_len.1);
            let mut s: String = (0..len).map(|_| char::from(*chars.choose(rng).expect("non-empty"))).collect();
            // Labels may not start or end with a hyphen.
            if s.starts_with('-') || s.ends_with('-') {
                s = s.replace('-', "x");
            }
            s
        }
    }
}

fn sample_class<R: Rng>(recipe: &ClassRecipe, class: usize, rng: &mut R) -> Result<DnsEvent> {
    let domain = recipe.domains.choose(rng).expect("validated non-empty");
    let depth = rng.random_range(recipe.depth.0..=recipe.depth.1);
    let mut qname = String::new();
    for _ in 0..depth {
        let label = random_label(recipe, rng);
        if qname.len() + label.len() + 1 + domain.len() > MAX_QNAME {
            break;
        }
        qname.push_str(&label);
        qname.push('.');
    }
    qname.push_str(domain);
    let frame_len = rng.random_range(recipe.frame_len.0..recipe.frame_len.1).floor();
    let ttl = rng.random_range(recipe.ttl.0..recipe.ttl.1).floor();
    let qtype = *recipe.qtypes.choose(rng).expect("validated non-empty");
    let answers = rng.random_range(recipe.answers.0..=recipe.answers.1);
    let delta = (rng.random_range(recipe.time_delta.0..recipe.time_delta.1) * 1e6).round() / 1e6;
    let numerics = default_numerics(&qname, frame_len, ttl, qtype, answers, delta);
    DnsEvent::new(&qname, numerics, Some(class))
}

/// Draws `per_class` events for each recipe, label index = recipe position,
/// then shuffles. The result depends only on `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<DnsEvent>> {
    spec.validate()?;
    let mut events = Vec::with_capacity(spec.per_class * spec.classes.len());
    for (class, recipe) in spec.classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(class as u64 + 1);
        for _ in 0..spec.per_class {
            events.push(sample_class(recipe, class, &mut rng)?);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    events.shuffle(&mut rng);
    Ok(events)
}

/// Generates and writes a default-schema CSV; returns the row count.
pub fn write_csv<W: Write>(spec: &SynthSpec, out: W) -> Result<usize> {
    let events = generate(spec)?;
    write_dataset(out, &events, &FeatureSchema::default_dns(), &spec.labels()?, b',')?;
    Ok(events.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{read_dataset, ParseOptions};

    #[test]
    fn counts_per_class() {
        let spec = SynthSpec::with_classes(&["normal", "iodine", "dnscat2"], 100, 1).unwrap();
        let events = generate(&spec).unwrap();
        assert_eq!(events.len(), 300);
        for c in 0..3 {
            assert_eq!(events.iter().filter(|e| e.label == Some(c)).count(), 100);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec::canonical(20, 5);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SynthSpec::canonical(20, 6);
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn qname_length_gap_matches_recipes() {
        let spec = SynthSpec::with_classes(&["normal", "andiodine"], 2000, 3).unwrap();
        let events = generate(&spec).unwrap();
        let mean = |c: usize| {
            let lens: Vec<f64> = events.iter().filter(|e| e.label == Some(c)).map(|e| e.qname.len() as f64).collect();
            lens.iter().sum::<f64>() / lens.len() as f64
        };
        let expected_gap = spec.classes[1].expected_qname_len() - spec.classes[0].expected_qname_len();
        let gap = mean(1) - mean(0);
        assert!(expected_gap > 100.0);
        assert!((gap - expected_gap).abs() < 0.03 * expected_gap, "gap {gap} vs {expected_gap}");
    }

    /// Thresholds learned from one half classify the other half on a single
    /// feature: the class whose observed band contains the value.
    fn band_rule_accuracy(events: &[DnsEvent], feature: usize, k: usize) -> f64 {
        let (fit, held) = events.split_at(events.len() / 2);
        let mut bands = vec![(f64::INFINITY, f64::NEG_INFINITY); k];
        for e in fit {
            let b = &mut bands[e.label.unwrap()];
            b.0 = b.0.min(e.numerics[feature]);
            b.1 = b.1.max(e.numerics[feature]);
        }
        let correct = held
            .iter()
            .filter(|e| {
                let v = e.numerics[feature];
                let guess = bands
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let d = |(lo, hi): (f64, f64)| if v < lo { lo - v } else if v > hi { v - hi } else { 0.0 };
                        d(*a.1).partial_cmp(&d(*b.1)).unwrap()
                    })
                    .unwrap()
                    .0;
                Some(guess) == e.label
            })
            .count();
        correct as f64 / held.len() as f64
    }

    #[test]
    fn one_rule_separates_on_two_features() {
        let spec = SynthSpec::canonical(300, 11);
        let events = generate(&spec).unwrap();
        for feature in [0, 1] {
            let acc = band_rule_accuracy(&events, feature, 12);
            assert!(acc > 0.95, "feature {feature}: {acc}");
        }
    }

    #[test]
    fn numerics_follow_qname() {
        for e in generate(&SynthSpec::canonical(10, 2)).unwrap() {
            assert_eq!(e.numerics.len(), 8);
            assert_eq!(e.numerics[2], e.qname.len() as f64);
            assert_eq!(e.numerics[3], e.qname.split('.').count() as f64);
            assert!(e.qname.len() <= MAX_QNAME);
            assert!(e.qname.split('.').all(|l| !l.is_empty() && l.len() <= MAX_LABEL));
        }
    }

    #[test]
    fn entropy_values() {
        assert_eq!(qname_entropy("aaaa"), 0.0);
        assert!((qname_entropy("ab.ab") - 1.0).abs() < 1e-12);
        assert!((qname_entropy("abcd") - 2.0).abs() < 1e-12);
        assert_eq!(qname_entropy(""), 0.0);
    }

    #[test]
    fn csv_round_trips_through_ingest() {
        let spec = SynthSpec::with_classes(&["normal", "tuns"], 25, 4).unwrap();
        let mut buf = Vec::new();
        assert_eq!(write_csv(&spec, &mut buf).unwrap(), 50);
        let (parsed, report) = read_dataset(
            buf.as_slice(),
            &FeatureSchema::default_dns(),
            &spec.labels().unwrap(),
            ParseOptions::default(),
        )
        .unwrap();
        assert_eq!(report.rejected, 0);
        assert_eq!(parsed, generate(&spec).unwrap());
    }

    #[test]
    fn invalid_specs() {
        assert!(SynthSpec::with_classes(&["nope"], 1, 0).is_err());
        let mut spec = SynthSpec::with_classes(&["normal"], 1, 0).unwrap();
        spec.classes.push(spec.classes[0].clone());
        assert!(generate(&spec).is_err());
        spec.classes.pop();
        spec.classes[0].frame_len = (5.0, 1.0);
        assert!(generate(&spec).is_err());
    }
}
