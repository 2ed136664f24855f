//! Seeded training loop: forward, `ΔY`, loss assembly, AdamW, and
//! validation-based checkpoint selection.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::{align_loss_high, align_loss_low, delta_y_graph, total_loss, AlignMode, LossTerms, LossWeights};
use crate::autodiff::{Graph, Var};
use crate::cbm::{CbmModel, ClassifierVariant};
use crate::data::{batches, keyed_rng, Dataset};
use crate::error::{Error, Result};
use crate::eval::{macro_f1, predict};
use crate::io::{read_json, write_text};
use crate::knowledge::{randomize_importance, ImportanceMatrix};
use crate::nn::{cross_entropy, segmented_cross_entropy, AdamW, AdamWConfig};
use crate::FORMAT_VERSION;

const INIT_PART: u64 = 0x1417;

/// Where the importance matrix comes from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KnowledgeSource {
    /// No alignment terms; λ is forced to 0.
    #[default]
    None,
    Path(String),
    /// The task's own matrix with every class row shuffled by this seed.
    Random(u64),
}

impl fmt::Display for KnowledgeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KnowledgeSource::None => f.write_str("none"),
            KnowledgeSource::Path(p) => f.write_str(p),
            KnowledgeSource::Random(s) => write!(f, "random:{s}"),
        }
    }
}

impl FromStr for KnowledgeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(KnowledgeSource::None);
        }
        if let Some(seed) = s.strip_prefix("random:") {
            return seed
                .parse()
                .map(KnowledgeSource::Random)
                .map_err(|_| Error::config(format!("bad seed in knowledge source {s:?}")));
        }
        if s.is_empty() {
            return Err(Error::config("empty knowledge source"));
        }
        Ok(KnowledgeSource::Path(s.to_string()))
    }
}

impl TryFrom<String> for KnowledgeSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KnowledgeSource> for String {
    fn from(k: KnowledgeSource) -> String {
        k.to_string()
    }
}

impl KnowledgeSource {
    /// Loads or derives the matrix. `reference` is the task's own matrix,
    /// needed for `random:<seed>`.
    pub fn resolve(&self, reference: Option<&ImportanceMatrix>, scheme: &crate::cbm::ConceptScheme) -> Result<Option<ImportanceMatrix>> {
        match self {
            KnowledgeSource::None => Ok(None),
            KnowledgeSource::Path(p) => ImportanceMatrix::load(Path::new(p), scheme).map(Some),
            KnowledgeSource::Random(seed) => {
                let base = reference.ok_or_else(|| {
                    Error::config("random knowledge needs a reference importance matrix to permute")
                })?;
                base.check_scheme(scheme)?;
                Ok(Some(randomize_importance(base, *seed)))
            }
        }
    }
}

/// How the classifier sees concepts during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Classifier consumes predicted concepts; everything trains together.
    #[default]
    Joint,
    /// Classifier consumes ground-truth one-hot concepts.
    Sequential,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Regime::Joint),
            "sequential" => Ok(Regime::Sequential),
            other => Err(Error::config(format!("unknown training regime {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub format_version: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub phi: f64,
    pub lambda: f64,
    pub label_smoothing: f64,
    /// Also smooth the concept targets.
    pub smooth_concepts: bool,
    pub classifier: ClassifierVariant,
    pub align_mode: AlignMode,
    pub seed: u64,
    pub knowledge: KnowledgeSource,
    /// Hidden widths of the concept predictor.
    pub hidden: Vec<usize>,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            format_version: FORMAT_VERSION,
            epochs: 30,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.01,
            phi: 1.0,
            lambda: 1.0,
            label_smoothing: 0.3,
            smooth_concepts: false,
            classifier: ClassifierVariant::Mlp128,
            align_mode: AlignMode::Pairwise,
            seed: 0,
            knowledge: KnowledgeSource::None,
            hidden: vec![64],
            regime: Regime::Joint,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: TrainConfig = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::config(format!("unsupported train config format_version {}", self.format_version)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        for (name, v) in [("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label smoothing {} outside [0, 1]", self.label_smoothing)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        LossWeights::new(self.phi, self.lambda)?;
        Ok(())
    }

    /// λ actually applied: 0 when no knowledge is used.
    pub fn effective_lambda(&self) -> f64 {
        match self.knowledge {
            KnowledgeSource::None => 0.0,
            _ => self.lambda,
        }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Loss components of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub l_c: f64,
    pub l_y: f64,
    pub l_high: f64,
    pub l_low: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Batch means of the step components.
    pub mean: StepRecord,
    pub val_macro_f1: f64,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub effective_lambda: f64,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line<'a> {
    Epoch(&'a EpochRecord),
    Summary(&'a RunSummary),
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum OwnedLine {
    Epoch(EpochRecord),
    Summary(RunSummary),
}

impl RunRecord {
    /// One JSON object per epoch followed by a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&Line::Epoch(e))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&Line::Summary(&self.summary))?);
        out.push('\n');
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_jsonl()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let shown = path.display().to_string();
        let mut epochs = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: OwnedLine =
                serde_json::from_str(line).map_err(|e| Error::parse(&shown, Some(i + 1), e.to_string()))?;
            match parsed {
                OwnedLine::Epoch(e) => epochs.push(e),
                OwnedLine::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| Error::parse(&shown, None, "missing summary line"))?;
        Ok(RunRecord { epochs, summary })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters from the best validation epoch.
    pub model: CbmModel,
    pub record: RunRecord,
}

fn at_step(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Numeric { context, detail } => Error::Numeric {
            context: format!("epoch {epoch}, batch {batch}: {context}"),
            detail,
        },
        other => other,
    }
}

struct Step {
    record: StepRecord,
    grads: Vec<crate::autodiff::Tensor>,
}

fn run_step(
    g: &mut Graph,
    model: &CbmModel,
    config: &TrainConfig,
    knowledge: Option<&ImportanceMatrix>,
    data: &Dataset,
    idx: &[usize],
) -> Result<Step> {
    g.reset();
    let bound = model.bind(g, true)?;
    let segments = model.scheme.cardinalities();
    let x = g.constant(data.features(idx));
    let c = bound.predict_concepts(g, x)?;
    let concept_smoothing = if config.smooth_concepts { config.label_smoothing } else { 0.0 };
    let l_c = segmented_cross_entropy(g, c, &segments, &data.concept_targets(idx), concept_smoothing)?;
    let c_in = match config.regime {
        Regime::Joint => c,
        Regime::Sequential => g.constant(data.concept_one_hot(idx)),
    };
    let labels = data.labels(idx);
    let (y, align) = match knowledge {
        None => (bound.predict_class(g, c_in)?, None),
        Some(m) => {
            let dy = delta_y_graph(g, &bound, c_in)?;
            let high = align_loss_high(g, &dy, m, config.align_mode, &labels)?;
            let low = align_loss_low(g, &dy, m, config.align_mode, &labels)?;
            (dy.class_probs, Some((high, low)))
        }
    };
    let l_y = cross_entropy(g, y, &labels, config.label_smoothing, model.scheme.num_classes())?;
    let weights = LossWeights::new(config.phi, config.effective_lambda())?;
    let total = total_loss(g, LossTerms { concept: l_c, class: l_y, align }, weights)?;
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let record = StepRecord {
        l_c: value(g, Some(l_c)),
        l_y: value(g, Some(l_y)),
        l_high: value(g, align.map(|a| a.0)),
        l_low: value(g, align.map(|a| a.1)),
        total: value(g, Some(total)),
    };
    let grads = g.backward(total)?;
    let vars: Vec<Var> = bound
        .predictor_layers()
        .iter()
        .chain(bound.classifier_layers())
        .flat_map(|l| [l.weights, l.bias])
        .collect();
    Ok(Step {
        record,
        grads: vars.into_iter().map(|v| grads.get(v)).collect(),
    })
}

fn mean_record(steps: &[StepRecord]) -> StepRecord {
    let n = steps.len() as f64;
    let avg = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
    StepRecord {
        l_c: avg(|s| s.l_c),
        l_y: avg(|s| s.l_y),
        l_high: avg(|s| s.l_high),
        l_low: avg(|s| s.l_low),
        total: avg(|s| s.total),
    }
}

fn validation_f1(model: &CbmModel, val: &Dataset) -> Result<f64> {
    let (pred, _) = predict(model, val)?;
    Ok(macro_f1(&val.labels(&val.all_indices()), &pred, model.scheme.num_classes())?.macro_f1)
}

/// Fresh model for `config`, initialised from its seed.
pub fn init_model(config: &TrainConfig, data: &Dataset) -> Result<CbmModel> {
    let mut rng = keyed_rng(config.seed, INIT_PART, 0);
    CbmModel::new(data.scheme.clone(), data.feature_width(), &config.hidden, config.classifier, &mut rng)
}

/// Trains from a seeded initialisation. `knowledge` is ignored (and λ is 0)
/// when `config.knowledge` is `none`.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    knowledge: Option<&ImportanceMatrix>,
) -> Result<TrainOutput> {
    train_observed(config, train_set, val_set, knowledge, |_, _| {})
}

/// [`train`] with a callback after every epoch, given that epoch's record and
/// the current (not the best) parameters.
pub fn train_observed(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    knowledge: Option<&ImportanceMatrix>,
    mut observe: impl FnMut(&EpochRecord, &CbmModel),
) -> Result<TrainOutput> {
    config.validate()?;
    if train_set.scheme != val_set.scheme {
        return Err(Error::config("training and validation sets use different concept schemes"));
    }
    if train_set.feature_width() != val_set.feature_width() {
        return Err(Error::config("training and validation feature widths differ"));
    }
    let knowledge = match config.knowledge {
        KnowledgeSource::None => None,
        _ => Some(knowledge.ok_or_else(|| {
            Error::config(format!("knowledge source {} was not resolved to a matrix", config.knowledge))
        })?),
    };
    if let Some(m) = knowledge {
        m.check_scheme(&train_set.scheme)?;
    }

    let mut model = init_model(config, train_set)?;
    let mut opt = AdamW::new(config.optimizer(), model.parameters());
    let mut g = Graph::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, CbmModel)> = None;

    for epoch in 1..=config.epochs {
        let order = batches(train_set.len(), config.batch_size, config.seed, epoch as u64);
        let mut steps = Vec::with_capacity(order.len());
        for (b, idx) in order.iter().enumerate() {
            let step = run_step(&mut g, &model, config, knowledge, train_set, idx)
                .map_err(|e| at_step(e, epoch, b + 1))?;
            let mut params = model.parameters_mut();
            opt.step(&mut params, &step.grads).map_err(|e| at_step(e, epoch, b + 1))?;
            steps.push(step.record);
        }
        let val_macro_f1 = validation_f1(&model, val_set)?;
        if best.as_ref().is_none_or(|(_, f, _)| val_macro_f1 > *f) {
            best = Some((epoch, val_macro_f1, model.clone()));
        }
        let record = EpochRecord {
            epoch,
            mean: mean_record(&steps),
            val_macro_f1,
            steps,
        };
        observe(&record, &model);
        epochs.push(record);
    }

    let (best_epoch, best_val_macro_f1, model) = best.expect("at least one epoch");
    Ok(TrainOutput {
        model,
        record: RunRecord {
            epochs,
            summary: RunSummary {
                format_version: FORMAT_VERSION,
                best_epoch,
                best_val_macro_f1,
                effective_lambda: config.effective_lambda(),
                config: config.clone(),
            },
        },
    })
}

/// Model, run record and resolved config written into `dir`.
pub fn save_run(dir: &Path, out: &TrainOutput) -> Result<()> {
    out.model.save(&dir.join("model.json"))?;
    out.record.save(&dir.join("run_record.jsonl"))?;
    crate::io::write_json(&dir.join("config.json"), &out.record.summary.config)
}
