//! The concept bottleneck model: features → per-concept probability segments
//! (the bottleneck) → class probabilities.
//!
//! The bottleneck is the concatenation of one softmax segment per concept, in
//! scheme order. Removing a concept zero-fills its segment before the class
//! head sees it.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::nn::{BoundDense, DenseLayer};
use crate::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub values: Vec<String>,
}

/// Class names plus the ordered concepts and their value names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptScheme {
    pub classes: Vec<String>,
    pub concepts: Vec<Concept>,
}

#[derive(Serialize, Deserialize)]
struct SchemeFile {
    format_version: u32,
    #[serde(flatten)]
    scheme: ConceptScheme,
}

fn check_unique<'a>(what: &str, names: impl IntoIterator<Item = &'a String>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::config(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(())
}

impl ConceptScheme {
    pub fn new(classes: Vec<String>, concepts: Vec<Concept>) -> Result<Self> {
        let s = ConceptScheme { classes, concepts };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::config("a scheme needs at least two classes"));
        }
        if self.concepts.is_empty() {
            return Err(Error::config("a scheme needs at least one concept"));
        }
        check_unique("class", &self.classes)?;
        check_unique("concept", self.concepts.iter().map(|c| &c.name))?;
        for c in &self.concepts {
            if c.values.len() < 2 {
                return Err(Error::config(format!("concept {:?} needs at least two values", c.name)));
            }
            check_unique(&format!("value of concept {:?}", c.name), &c.values)?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    /// Cardinality of each concept, in order.
    pub fn cardinalities(&self) -> Vec<usize> {
        self.concepts.iter().map(|c| c.values.len()).collect()
    }

    /// Width of the concatenated bottleneck.
    pub fn bottleneck_width(&self) -> usize {
        self.concepts.iter().map(|c| c.values.len()).sum()
    }

    /// Column offset of concept `l`'s segment in the bottleneck.
    pub fn segment_offset(&self, l: usize) -> usize {
        self.concepts[..l].iter().map(|c| c.values.len()).sum()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: SchemeFile = read_json(path)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                path.display().to_string(),
                None,
                format!("unsupported format_version {}", file.format_version),
            ));
        }
        file.scheme
            .validate()
            .map_err(|e| Error::parse(path.display().to_string(), None, e.to_string()))?;
        Ok(file.scheme)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &SchemeFile {
                format_version: FORMAT_VERSION,
                scheme: self.clone(),
            },
        )
    }
}

/// Class-head architectures: a single linear map, or one rectified hidden
/// layer of width 20 or 128.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierVariant {
    Linear,
    Mlp20,
    Mlp128,
}

impl ClassifierVariant {
    pub fn hidden_width(self) -> Option<usize> {
        match self {
            ClassifierVariant::Linear => None,
            ClassifierVariant::Mlp20 => Some(20),
            ClassifierVariant::Mlp128 => Some(128),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ClassifierVariant::Linear => "linear",
            ClassifierVariant::Mlp20 => "mlp20",
            ClassifierVariant::Mlp128 => "mlp128",
        }
    }

    pub const ALL: [ClassifierVariant; 3] = [
        ClassifierVariant::Linear,
        ClassifierVariant::Mlp20,
        ClassifierVariant::Mlp128,
    ];
}

impl fmt::Display for ClassifierVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassifierVariant::Linear => f.write_str("Linear"),
            ClassifierVariant::Mlp20 => f.write_str("MLP(20)"),
            ClassifierVariant::Mlp128 => f.write_str("MLP(128)"),
        }
    }
}

impl FromStr for ClassifierVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ClassifierVariant::Linear),
            "mlp20" | "mlp(20)" => Ok(ClassifierVariant::Mlp20),
            "mlp128" | "mlp(128)" => Ok(ClassifierVariant::Mlp128),
            other => Err(Error::config(format!("unknown classifier variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbmModel {
    pub scheme: ConceptScheme,
    /// Hidden layers (rectified) followed by the concept-logit layer.
    pub predictor: Vec<DenseLayer>,
    pub variant: ClassifierVariant,
    /// One layer for `Linear`, two for the MLP variants.
    pub classifier: Vec<DenseLayer>,
}

/// Model parameters placed on a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    segments: Vec<usize>,
    offsets: Vec<usize>,
    input_width: usize,
    predictor: Vec<BoundDense>,
    classifier: Vec<BoundDense>,
}

impl CbmModel {
    /// Randomly initialised model with the given predictor hidden widths.
    pub fn new<R: Rng>(
        scheme: ConceptScheme,
        input_width: usize,
        hidden: &[usize],
        variant: ClassifierVariant,
        rng: &mut R,
    ) -> Result<Self> {
        scheme.validate()?;
        if input_width == 0 {
            return Err(Error::config("input width must be positive"));
        }
        let d = scheme.bottleneck_width();
        let mut predictor = Vec::new();
        let mut prev = input_width;
        for &h in hidden.iter().chain(std::iter::once(&d)) {
            predictor.push(DenseLayer::init(prev, h, rng));
            prev = h;
        }
        let classifier = match variant.hidden_width() {
            None => vec![DenseLayer::init(d, scheme.num_classes(), rng)],
            Some(h) => vec![
                DenseLayer::init(d, h, rng),
                DenseLayer::init(h, scheme.num_classes(), rng),
            ],
        };
        Ok(CbmModel {
            scheme,
            predictor,
            variant,
            classifier,
        })
    }

    pub fn input_width(&self) -> usize {
        self.predictor[0].inputs()
    }

    /// Checks layer chaining and that both ends agree with the scheme.
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        let d = self.scheme.bottleneck_width();
        let k = self.scheme.num_classes();
        if self.predictor.is_empty() {
            return Err(Error::config("concept predictor has no layers"));
        }
        for layers in [&self.predictor, &self.classifier] {
            for l in layers.iter() {
                l.validate()?;
            }
            for pair in layers.windows(2) {
                if pair[0].outputs() != pair[1].inputs() {
                    return Err(Error::config(format!(
                        "layer widths do not chain: {} -> {}",
                        pair[0].outputs(),
                        pair[1].inputs()
                    )));
                }
            }
        }
        let last = self.predictor.last().unwrap();
        if last.outputs() != d {
            return Err(Error::config(format!(
                "concept predictor emits {} values, bottleneck needs {d}",
                last.outputs()
            )));
        }
        let expected_layers = if self.variant.hidden_width().is_some() { 2 } else { 1 };
        if self.classifier.len() != expected_layers {
            return Err(Error::config(format!(
                "{} classifier needs {expected_layers} layers, found {}",
                self.variant,
                self.classifier.len()
            )));
        }
        if self.classifier[0].inputs() != d {
            return Err(Error::config(format!(
                "classifier input width {} differs from bottleneck width {d}",
                self.classifier[0].inputs()
            )));
        }
        if let Some(h) = self.variant.hidden_width() {
            if self.classifier[0].outputs() != h {
                return Err(Error::config(format!("{} hidden width is {}", self.variant, self.classifier[0].outputs())));
            }
        }
        if self.classifier.last().unwrap().outputs() != k {
            return Err(Error::config(format!("classifier must emit {k} class logits")));
        }
        Ok(())
    }

    /// Parameters in a fixed order: predictor layers then classifier layers,
    /// weights before bias.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("predictor", &self.predictor), ("classifier", &self.classifier)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weights"), &l.weights));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.predictor
            .iter_mut()
            .chain(self.classifier.iter_mut())
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Places the parameters on `g`; trainable parameters receive gradients.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundModel> {
        let segments = self.scheme.cardinalities();
        let offsets = (0..segments.len()).map(|l| self.scheme.segment_offset(l)).collect();
        Ok(BoundModel {
            segments,
            offsets,
            input_width: self.input_width(),
            predictor: self
                .predictor
                .iter()
                .map(|l| l.bind(g, trainable))
                .collect::<Result<_>>()?,
            classifier: self
                .classifier
                .iter()
                .map(|l| l.bind(g, trainable))
                .collect::<Result<_>>()?,
        })
    }

    /// Bottleneck probabilities for a `batch x F` feature matrix.
    pub fn predict_concepts(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let c = m.predict_concepts(&mut g, xv)?;
        Ok(g.value(c).clone())
    }

    /// Class probabilities for a `batch x D` bottleneck.
    pub fn predict_class(&self, c: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false)?;
        let cv = g.constant(c.clone());
        let y = m.predict_class(&mut g, cv)?;
        Ok(g.value(y).clone())
    }

    /// `(concepts, classes)` for a feature batch.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let c = m.predict_concepts(&mut g, xv)?;
        let y = m.predict_class(&mut g, c)?;
        Ok((g.value(c).clone(), g.value(y).clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &ModelFile::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = read_json(path)?;
        file.into_model()
            .map_err(|e| Error::parse(path.display().to_string(), None, e.to_string()))
    }
}

impl BoundModel {
    pub fn predictor_layers(&self) -> &[BoundDense] {
        &self.predictor
    }

    pub fn classifier_layers(&self) -> &[BoundDense] {
        &self.classifier
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    pub fn predict_concepts(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.input_width {
            return Err(Error::config(format!(
                "feature width {width} differs from predictor input width {}",
                self.input_width
            )));
        }
        let mut h = x;
        let last = self.predictor.len() - 1;
        for (i, layer) in self.predictor.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        g.segment_softmax(h, &self.segments)
    }

    pub fn predict_class(&self, g: &mut Graph, c: Var) -> Result<Var> {
        let width = g.value(c).cols();
        let d: usize = self.segments.iter().sum();
        if width != d {
            return Err(Error::config(format!("bottleneck width {width} differs from {d}")));
        }
        let mut h = c;
        let last = self.classifier.len() - 1;
        for (i, layer) in self.classifier.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        g.softmax(h)
    }

    /// Zero-fills the segment of concept `l` (0-based).
    pub fn remove_concept(&self, g: &mut Graph, c: Var, l: usize) -> Result<Var> {
        if l >= self.segments.len() {
            return Err(Error::usage(format!(
                "concept index {l} out of range for {} concepts",
                self.segments.len()
            )));
        }
        g.zero_mask(c, self.offsets[l], self.segments[l])
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&DenseLayer> for LayerRecord {
    fn from(l: &DenseLayer) -> Self {
        LayerRecord {
            inputs: l.inputs(),
            outputs: l.outputs(),
            weights: l.weights.data().to_vec(),
            bias: l.bias.data().to_vec(),
        }
    }
}

impl LayerRecord {
    fn into_layer(self) -> Result<DenseLayer> {
        Ok(DenseLayer {
            weights: Tensor::new(vec![self.outputs, self.inputs], self.weights)?,
            bias: Tensor::new(vec![self.outputs], self.bias)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    scheme: ConceptScheme,
    classifier_variant: ClassifierVariant,
    predictor: Vec<LayerRecord>,
    classifier: Vec<LayerRecord>,
}

impl From<&CbmModel> for ModelFile {
    fn from(m: &CbmModel) -> Self {
        ModelFile {
            format_version: FORMAT_VERSION,
            scheme: m.scheme.clone(),
            classifier_variant: m.variant,
            predictor: m.predictor.iter().map(LayerRecord::from).collect(),
            classifier: m.classifier.iter().map(LayerRecord::from).collect(),
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<CbmModel> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!("unsupported format_version {}", self.format_version)));
        }
        let model = CbmModel {
            scheme: self.scheme,
            predictor: self.predictor.into_iter().map(LayerRecord::into_layer).collect::<Result<_>>()?,
            variant: self.classifier_variant,
            classifier: self.classifier.into_iter().map(LayerRecord::into_layer).collect::<Result<_>>()?,
        };
        model.validate()?;
        Ok(model)
    }
}
