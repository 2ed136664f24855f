//! Concept-annotated datasets: CSV ingestion, the synthetic domain-shift
//! generator, and seeded mini-batching.
//!
//! CSV layout (one optional `#` metadata line, then a header):
//!
//! ```text
//! # format_version=1 domain=in_domain
//! split,class,concept_1,...,concept_L,f_0,...,f_{F-1}
//! train,3,0,2,...,0.913,...
//! ```
//!
//! `class` and `concept_*` hold 0-based indices into the scheme.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cbm::{Concept, ConceptScheme};
use crate::error::{Error, Result};
use crate::io::{read_json, write_text};
use crate::knowledge::{Importance, ImportanceMatrix};
use crate::FORMAT_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    InDomain,
    OutOfDomain,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::InDomain => "in_domain",
            DomainTag::OutOfDomain => "out_of_domain",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_domain" => Ok(DomainTag::InDomain),
            "out_of_domain" => Ok(DomainTag::OutOfDomain),
            other => Err(Error::config(format!("unknown domain tag {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Value index per concept.
    pub concept_values: Vec<usize>,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scheme: ConceptScheme,
    pub samples: Vec<Sample>,
    pub domain: DomainTag,
    pub split: Split,
}

impl Dataset {
    pub fn new(scheme: ConceptScheme, samples: Vec<Sample>, domain: DomainTag, split: Split) -> Result<Self> {
        let d = Dataset {
            scheme,
            samples,
            domain,
            split,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        let first = self.samples.first().ok_or_else(|| Error::config("no samples"))?;
        let width = first.features.len();
        if width == 0 {
            return Err(Error::config("samples need at least one feature"));
        }
        let cards = self.scheme.cardinalities();
        for (i, s) in self.samples.iter().enumerate() {
            if s.features.len() != width {
                return Err(Error::config(format!("sample {i} has {} features, expected {width}", s.features.len())));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("sample {i} has a non-finite feature")));
            }
            if s.class >= self.scheme.num_classes() {
                return Err(Error::config(format!("sample {i} has class index {}", s.class)));
            }
            if s.concept_values.len() != cards.len() {
                return Err(Error::config(format!("sample {i} has {} concept values", s.concept_values.len())));
            }
            for (l, (&v, &n)) in s.concept_values.iter().zip(&cards).enumerate() {
                if v >= n {
                    return Err(Error::config(format!("sample {i} concept {} value {v} outside 0..{n}", l + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.samples[0].features.len()
    }

    /// `batch x F` features for the given sample indices.
    pub fn features(&self, idx: &[usize]) -> Tensor {
        let f = self.feature_width();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].features);
        }
        Tensor::new(vec![idx.len(), f], data).expect("validated widths")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].class).collect()
    }

    pub fn concept_targets(&self, idx: &[usize]) -> Vec<Vec<usize>> {
        idx.iter().map(|&i| self.samples[i].concept_values.clone()).collect()
    }

    /// Ground-truth bottleneck (concatenated one-hot blocks), `batch x D`.
    pub fn concept_one_hot(&self, idx: &[usize]) -> Tensor {
        let cards = self.scheme.cardinalities();
        let d: usize = cards.iter().sum();
        let mut data = vec![0.0; idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            let mut off = r * d;
            for (&v, &n) in self.samples[i].concept_values.iter().zip(&cards) {
                data[off + v] = 1.0;
                off += n;
            }
        }
        Tensor::new(vec![idx.len(), d], data).expect("validated widths")
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let l = self.scheme.num_concepts();
        let mut out = format!("# format_version={FORMAT_VERSION} domain={}\n", self.domain);
        let mut header = vec!["split".to_string(), "class".to_string()];
        header.extend((1..=l).map(|i| format!("concept_{i}")));
        header.extend((0..self.feature_width()).map(|j| format!("f_{j}")));
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.samples {
            let mut cells = vec![self.split.as_str().to_string(), s.class.to_string()];
            cells.extend(s.concept_values.iter().map(usize::to_string));
            // Debug formatting of f64 is the shortest exact round-trip form.
            cells.extend(s.features.iter().map(|v| format!("{v:?}")));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        write_text(path, &out)
    }
}

/// Parses a dataset CSV against the scheme stored at `scheme_path`.
pub fn load_dataset(data_path: &Path, scheme_path: &Path) -> Result<Dataset> {
    let scheme = ConceptScheme::load(scheme_path)?;
    load_dataset_with_scheme(data_path, &scheme)
}

pub fn load_dataset_with_scheme(data_path: &Path, scheme: &ConceptScheme) -> Result<Dataset> {
    let text = fs::read_to_string(data_path).map_err(|e| Error::io(data_path, e))?;
    let name = data_path.display().to_string();
    let err = |line: Option<usize>, m: String| Error::parse(name.clone(), line, m);

    let mut domain = DomainTag::InDomain;
    if let Some(meta) = text.lines().next().and_then(|l| l.strip_prefix('#')) {
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("format_version", v)) => {
                    if v.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                        return Err(err(Some(1), format!("unsupported format_version {v}")));
                    }
                }
                Some(("domain", v)) => domain = v.parse().map_err(|e: Error| err(Some(1), e.to_string()))?,
                _ => {}
            }
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| err(None, e.to_string()))?
        .clone();
    if header.is_empty() {
        return Err(err(None, "no samples".into()));
    }
    let l = scheme.num_concepts();
    let cards = scheme.cardinalities();
    let expect_prefix: Vec<String> = ["split".to_string(), "class".to_string()]
        .into_iter()
        .chain((1..=l).map(|i| format!("concept_{i}")))
        .collect();
    for (i, want) in expect_prefix.iter().enumerate() {
        if header.get(i) != Some(want.as_str()) {
            return Err(err(Some(1), format!("column {} should be {want:?}, found {:?}", i + 1, header.get(i))));
        }
    }
    let f = header.len() - expect_prefix.len();
    if f == 0 {
        return Err(err(Some(1), "no feature columns".into()));
    }
    for j in 0..f {
        let got = &header[expect_prefix.len() + j];
        if got != format!("f_{j}") {
            return Err(err(Some(1), format!("feature column {j} should be \"f_{j}\", found {got:?}")));
        }
    }

    let mut samples = Vec::new();
    let mut split: Option<Split> = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            err(line, format!("ragged or malformed row: {e}"))
        })?;
        let line = rec.position().map(|p| p.line() as usize);
        let row_split: Split = rec[0].parse().map_err(|e: Error| err(line, e.to_string()))?;
        match split {
            None => split = Some(row_split),
            Some(s) if s != row_split => {
                return Err(err(line, format!("mixed splits {:?} and {:?} in one file", s.as_str(), row_split.as_str())))
            }
            _ => {}
        }
        let class: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("class {:?} is not an index", &rec[1])))?;
        if class >= scheme.num_classes() {
            return Err(err(line, format!("unknown class index {class}")));
        }
        let mut concept_values = Vec::with_capacity(l);
        for c in 0..l {
            let cell = &rec[2 + c];
            let v: usize = cell
                .trim()
                .parse()
                .map_err(|_| err(line, format!("concept_{} value {cell:?} is not an index", c + 1)))?;
            if v >= cards[c] {
                return Err(err(line, format!("concept_{} value index {v} outside 0..{}", c + 1, cards[c])));
            }
            concept_values.push(v);
        }
        let mut features = Vec::with_capacity(f);
        for j in 0..f {
            let cell = &rec[2 + l + j];
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(line, format!("f_{j} value {cell:?} is not numeric")))?;
            if !v.is_finite() {
                return Err(err(line, format!("f_{j} value {cell:?} is not finite")));
            }
            features.push(v);
        }
        samples.push(Sample {
            features,
            concept_values,
            class,
        });
    }
    if samples.is_empty() {
        return Err(err(None, "no samples".into()));
    }
    Dataset::new(scheme.clone(), samples, domain, split.unwrap_or(Split::Train)).map_err(|e| err(None, e.to_string()))
}

/// Settings for the synthetic benchmark.
///
/// Each concept has a role shared by all classes. High concepts are a
/// deterministic function of the class, Mid concepts agree with the class
/// with probability `mid_agreement`, and Low concepts agree with probability
/// `rho_in` in-domain and `rho_out` out-of-domain (`None` = chance, `1/N`).
/// Out-of-domain features also get a per-dimension affine jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub format_version: u32,
    pub num_classes: usize,
    pub cardinalities: Vec<usize>,
    pub roles: Vec<Importance>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_in: usize,
    pub n_test_ood: usize,
    pub noise_sigma: f64,
    pub mid_agreement: f64,
    pub rho_in: f64,
    pub rho_out: Option<f64>,
    pub jitter_scale: [f64; 2],
    pub jitter_offset: [f64; 2],
    pub seed: u64,
    /// Class-linked value of each concept, one row per class. Defaults to
    /// `class % N` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linked_values: Option<Vec<Vec<usize>>>,
    /// Importance matrix rows published with the data. Every row equals
    /// `roles` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance_rows: Option<Vec<Vec<Importance>>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        use Importance::*;
        SynthConfig {
            format_version: FORMAT_VERSION,
            num_classes: 5,
            cardinalities: vec![3, 4, 2, 2, 3, 4, 3, 2, 3, 4, 2],
            roles: vec![High, High, High, Mid, Mid, Mid, Mid, Low, Low, Low, Low],
            n_train: 3000,
            n_val: 500,
            n_test_in: 1000,
            n_test_ood: 1000,
            noise_sigma: 0.1,
            mid_agreement: 0.7,
            rho_in: 0.9,
            rho_out: None,
            jitter_scale: [0.5, 1.5],
            jitter_offset: [-0.3, 0.3],
            seed: 0,
            linked_values: None,
            importance_rows: None,
        }
    }
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: SynthConfig = read_json(path)?;
        cfg.validate()
            .map_err(|e| Error::parse(path.display().to_string(), None, e.to_string()))?;
        Ok(cfg)
    }

    pub fn num_concepts(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!("unsupported format_version {}", self.format_version)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.cardinalities.is_empty() || self.cardinalities.iter().any(|&n| n < 2) {
            return Err(Error::config("every concept needs at least two values"));
        }
        if self.roles.len() != self.cardinalities.len() {
            return Err(Error::config("roles and cardinalities must have one entry per concept"));
        }
        if [self.n_train, self.n_val, self.n_test_in, self.n_test_ood].contains(&0) {
            return Err(Error::config("split counts must be at least 1"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if !unit(self.rho_in) || !self.rho_out.is_none_or(unit) || !unit(self.mid_agreement) {
            return Err(Error::config("rho_in, rho_out and mid_agreement must lie in [0, 1]"));
        }
        for (name, [lo, hi]) in [("jitter_scale", self.jitter_scale), ("jitter_offset", self.jitter_offset)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!("{name} must be a finite [lo, hi] range")));
            }
        }
        if let Some(rows) = &self.linked_values {
            if rows.len() != self.num_classes || rows.iter().any(|r| r.len() != self.num_concepts()) {
                return Err(Error::config("linked_values needs one row per class and one entry per concept"));
            }
            for row in rows {
                if row.iter().zip(&self.cardinalities).any(|(&v, &n)| v >= n) {
                    return Err(Error::config("linked_values entry outside its concept's value range"));
                }
            }
        }
        if let Some(rows) = &self.importance_rows {
            if rows.len() != self.num_classes || rows.iter().any(|r| r.len() != self.num_concepts()) {
                return Err(Error::config("importance_rows needs one row per class and one entry per concept"));
            }
        }
        self.high_code_check()
    }

    /// Value concept `l` takes when it agrees with `class`.
    pub fn linked_value(&self, class: usize, l: usize) -> usize {
        match &self.linked_values {
            Some(rows) => rows[class][l],
            None => class % self.cardinalities[l],
        }
    }

    /// Errors unless the High-concept values identify the class uniquely.
    fn high_code_check(&self) -> Result<()> {
        let code = |k: usize| -> Vec<usize> {
            (0..self.num_concepts())
                .filter(|&l| self.roles[l] == Importance::High)
                .map(|l| self.linked_value(k, l))
                .collect()
        };
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if code(a) == code(b) {
                    return Err(Error::config(format!(
                        "High concepts cannot separate classes {a} and {b}: no injective class code exists"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn scheme(&self) -> ConceptScheme {
        let tag = |r: Importance| match r {
            Importance::High => "high",
            Importance::Mid => "mid",
            Importance::Low => "low",
        };
        ConceptScheme {
            classes: (0..self.num_classes).map(|k| format!("class_{k}")).collect(),
            concepts: self
                .cardinalities
                .iter()
                .zip(&self.roles)
                .enumerate()
                .map(|(l, (&n, &r))| Concept {
                    name: format!("{}_{}", tag(r), l + 1),
                    values: (0..n).map(|v| format!("v{v}")).collect(),
                })
                .collect(),
        }
    }

    /// The published importance matrix: `importance_rows`, or `roles` for
    /// every class.
    pub fn importance(&self) -> ImportanceMatrix {
        let scheme = self.scheme();
        let rows = self
            .importance_rows
            .clone()
            .unwrap_or_else(|| vec![self.roles.clone(); self.num_classes]);
        ImportanceMatrix::new(&scheme, rows).expect("validated dims")
    }

    fn count(&self, domain: DomainTag, split: Split) -> usize {
        match (domain, split) {
            (DomainTag::OutOfDomain, _) => self.n_test_ood,
            (_, Split::Train) => self.n_train,
            (_, Split::Val) => self.n_val,
            (_, Split::Test) => self.n_test_in,
        }
    }
}

/// Deterministic stream keyed by `(seed, part, index)`.
pub(crate) fn keyed_rng(seed: u64, part: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&part.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

fn part_id(domain: DomainTag, split: Split) -> u64 {
    let d = match domain {
        DomainTag::InDomain => 0,
        DomainTag::OutOfDomain => 1,
    };
    let s = match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    };
    d * 8 + s + 1
}

const JITTER_PART: u64 = 0x6a17;

fn draw_other(rng: &mut ChaCha8Rng, avoid: usize, n: usize) -> usize {
    let v = rng.random_range(0..n - 1);
    if v >= avoid {
        v + 1
    } else {
        v
    }
}

/// Generates one split. Each sample draws from its own keyed stream, so the
/// output does not depend on generation order.
pub fn generate(config: &SynthConfig, domain: DomainTag, split: Split) -> Result<Dataset> {
    config.validate()?;
    let scheme = config.scheme();
    let n = config.count(domain, split);
    let part = part_id(domain, split);
    let width: usize = config.cardinalities.iter().sum();
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::config(e.to_string()))?;

    let jitter: Option<Vec<(f64, f64)>> = (domain == DomainTag::OutOfDomain).then(|| {
        let mut rng = keyed_rng(config.seed, JITTER_PART, 0);
        let [slo, shi] = config.jitter_scale;
        let [olo, ohi] = config.jitter_offset;
        (0..width)
            .map(|_| {
                let s = slo + (shi - slo) * rng.random::<f64>();
                let o = olo + (ohi - olo) * rng.random::<f64>();
                (s, o)
            })
            .collect()
    });

    let samples = (0..n)
        .map(|i| {
            let mut rng = keyed_rng(config.seed, part, i as u64);
            let class = rng.random_range(0..config.num_classes);
            let concept_values: Vec<usize> = config
                .cardinalities
                .iter()
                .zip(&config.roles)
                .enumerate()
                .map(|(l, (&card, role))| {
                    let linked = config.linked_value(class, l);
                    match role {
                        Importance::High => linked,
                        Importance::Mid => {
                            if rng.random::<f64>() < config.mid_agreement {
                                linked
                            } else {
                                rng.random_range(0..card)
                            }
                        }
                        Importance::Low => {
                            let rho = match domain {
                                DomainTag::InDomain => config.rho_in,
                                DomainTag::OutOfDomain => config.rho_out.unwrap_or(1.0 / card as f64),
                            };
                            if rng.random::<f64>() < rho {
                                linked
                            } else {
                                draw_other(&mut rng, linked, card)
                            }
                        }
                    }
                })
                .collect();
            let mut features = vec![0.0; width];
            let mut off = 0;
            for (&v, &card) in concept_values.iter().zip(&config.cardinalities) {
                features[off + v] = 1.0;
                off += card;
            }
            for x in features.iter_mut() {
                *x += noise.sample(&mut rng);
            }
            if let Some(j) = &jitter {
                for (x, (s, o)) in features.iter_mut().zip(j) {
                    *x = *x * s + o;
                }
            }
            Sample {
                features,
                concept_values,
                class,
            }
        })
        .collect();
    Dataset::new(scheme, samples, domain, split)
}

/// Mini-batch index lists: a permutation keyed by `(seed, epoch)`, chunked,
/// with the short final batch kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = keyed_rng(seed, 0xba7c4, epoch);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
