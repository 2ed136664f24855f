//! Macro F1, seed-level confidence intervals, and the `ΔY` importance audit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::delta_y;
use crate::cbm::CbmModel;
use crate::data::{Dataset, DomainTag};
use crate::error::{Error, Result};
use crate::io::{write_json, write_text};
use crate::knowledge::{Importance, ImportanceMatrix};
use crate::FORMAT_VERSION;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Recorded in every report that carries an interval.
pub const CI_METHOD: &str = "normal approximation: mean ± 1.96·s/√n (s = sample std, n-1 denominator)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub per_class: Vec<f64>,
}

/// Per-class F1 over all `num_classes` labels (F1 = 0 when precision and
/// recall are both zero) and their unweighted mean.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<F1Scores> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::usage(format!(
            "macro_f1 needs equal, non-empty label lists (got {} and {})",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::usage(format!("label outside 0..{num_classes}: true {t}, predicted {p}")));
        }
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<f64> = (0..num_classes)
        .map(|k| {
            let p = ratio(tp[k], tp[k] + fp[k]);
            let r = ratio(tp[k], tp[k] + fn_[k]);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok(F1Scores { macro_f1, per_class })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

/// 95% interval under the normal approximation.
pub fn confidence_interval(values: &[f64]) -> Result<ConfidenceInterval> {
    let n = values.len();
    if n < 2 {
        return Err(Error::usage(format!("a confidence interval needs at least 2 runs, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(ConfidenceInterval {
        mean,
        half_width: 1.96 * var.sqrt() / (n as f64).sqrt(),
        n,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub accuracy: f64,
    /// Fraction of samples whose most probable value matches, per concept.
    pub concept_accuracy: Vec<f64>,
    pub n: usize,
    pub domain: DomainTag,
    pub seed: Option<u64>,
    /// Resolved settings of the command that produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Class predictions and per-concept argmax values for every sample.
pub fn predict(model: &CbmModel, data: &Dataset) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    if model.scheme != data.scheme {
        return Err(Error::config("dataset scheme differs from the model's scheme"));
    }
    let cards = model.scheme.cardinalities();
    let mut classes = Vec::with_capacity(data.len());
    let mut concepts = Vec::with_capacity(data.len());
    for chunk in data.all_indices().chunks(EVAL_CHUNK) {
        let (c, y) = model.forward(&data.features(chunk))?;
        for r in 0..chunk.len() {
            classes.push(argmax(y.row(r)));
            let row = c.row(r);
            let mut off = 0;
            let mut vals = Vec::with_capacity(cards.len());
            for &n in &cards {
                vals.push(argmax(&row[off..off + n]));
                off += n;
            }
            concepts.push(vals);
        }
    }
    Ok((classes, concepts))
}

pub fn evaluate(model: &CbmModel, data: &Dataset, seed: Option<u64>, config: serde_json::Value) -> Result<MetricsReport> {
    let (pred, concept_pred) = predict(model, data)?;
    let truth = data.labels(&data.all_indices());
    let f1 = macro_f1(&truth, &pred, model.scheme.num_classes())?;
    let n = data.len();
    let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
    let concept_accuracy = (0..model.scheme.num_concepts())
        .map(|l| {
            let hits = data
                .samples
                .iter()
                .zip(&concept_pred)
                .filter(|(s, p)| s.concept_values[l] == p[l])
                .count();
            hits as f64 / n as f64
        })
        .collect();
    Ok(MetricsReport {
        format_version: FORMAT_VERSION,
        macro_f1: f1.macro_f1,
        per_class_f1: f1.per_class,
        accuracy: correct as f64 / n as f64,
        concept_accuracy,
        n,
        domain: data.domain,
        seed,
        config,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub format_version: u32,
    pub classes: Vec<String>,
    pub concepts: Vec<String>,
    /// Mean `ΔY`, one row per class.
    pub mean_delta_y: Vec<Vec<f64>>,
    /// Importance levels the heatmap is compared against.
    pub importance: Vec<Vec<Importance>>,
    pub mean_high: f64,
    pub mean_low: f64,
    /// `mean_high - mean_low`; an empty level set contributes 0.
    pub alignment_score: f64,
    pub n: usize,
    pub domain: DomainTag,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl HeatmapReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Rows = classes, columns = concepts.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("class");
        for c in &self.concepts {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(&self.mean_delta_y) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        write_text(path, &out)
    }
}

/// Mean `ΔY` over a dataset and how well it separates High from Low cells.
pub fn audit_delta_y(model: &CbmModel, data: &Dataset, matrix: &ImportanceMatrix) -> Result<HeatmapReport> {
    if model.scheme != data.scheme {
        return Err(Error::config("dataset scheme differs from the model's scheme"));
    }
    matrix.check_scheme(&model.scheme)?;
    let (k_n, l_n) = (model.scheme.num_classes(), model.scheme.num_concepts());
    let mut sum = vec![0.0; k_n * l_n];
    for chunk in data.all_indices().chunks(EVAL_CHUNK) {
        let c = model.predict_concepts(&data.features(chunk))?;
        let dy = delta_y(model, &c)?;
        for i in 0..dy.batch() {
            for (s, v) in sum.iter_mut().zip(dy.sample(i)) {
                *s += v;
            }
        }
    }
    let n = data.len() as f64;
    let mean: Vec<f64> = sum.into_iter().map(|v| v / n).collect();
    let level_mean = |level| {
        let cells = matrix.pairs(level);
        if cells.is_empty() {
            0.0
        } else {
            cells.iter().map(|&(k, l)| mean[k * l_n + l]).sum::<f64>() / cells.len() as f64
        }
    };
    let (mean_high, mean_low) = (level_mean(Importance::High), level_mean(Importance::Low));
    Ok(HeatmapReport {
        format_version: FORMAT_VERSION,
        classes: model.scheme.classes.clone(),
        concepts: model.scheme.concepts.iter().map(|c| c.name.clone()).collect(),
        mean_delta_y: mean.chunks(l_n).map(<[f64]>::to_vec).collect(),
        importance: (0..k_n).map(|k| matrix.row(k).to_vec()).collect(),
        mean_high,
        mean_low,
        alignment_score: mean_high - mean_low,
        n: data.len(),
        domain: data.domain,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbm::tests::{hand_model, scheme};
    use crate::cbm::ClassifierVariant;
    use crate::data::{Sample, Split};
    use crate::nn::DenseLayer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1, 0];
        let f = macro_f1(&y, &y, 3).unwrap();
        assert_eq!(f.macro_f1, 1.0);
    }

    #[test]
    fn hand_case() {
        let f = macro_f1(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2], 3).unwrap();
        assert!((f.per_class[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f.per_class[1] - 0.8).abs() < 1e-15);
        assert_eq!(f.per_class[2], 1.0);
        assert!((f.macro_f1 - 0.8222).abs() < 5e-5);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let f = macro_f1(&[0, 0, 1], &[0, 0, 1], 3).unwrap();
        assert_eq!(f.per_class, vec![1.0, 1.0, 0.0]);
        assert!((f.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f1_usage_errors() {
        assert!(matches!(macro_f1(&[0, 3], &[0, 1], 3), Err(Error::Usage(_))));
        assert!(matches!(macro_f1(&[0], &[0, 1], 3), Err(Error::Usage(_))));
        assert!(matches!(macro_f1(&[], &[], 3), Err(Error::Usage(_))));
    }

    #[test]
    fn interval_cases() {
        let ci = confidence_interval(&[0.6, 0.7, 0.8]).unwrap();
        assert!((ci.mean - 0.7).abs() < 1e-12);
        assert!((ci.half_width - 1.96 * 0.1 / 3f64.sqrt()).abs() < 1e-12);
        assert!((ci.half_width - 0.1132).abs() < 5e-5);
        assert!(confidence_interval(&[0.4, 0.4, 0.4]).unwrap().half_width < 1e-15);
        assert!(matches!(confidence_interval(&[0.5]), Err(Error::Usage(_))));
    }

    fn dataset_for(model: &CbmModel, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cards = model.scheme.cardinalities();
        let samples = (0..n)
            .map(|_| Sample {
                features: (0..model.input_width()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                concept_values: cards.iter().map(|&c| rng.random_range(0..c)).collect(),
                class: rng.random_range(0..model.scheme.num_classes()),
            })
            .collect();
        Dataset::new(model.scheme.clone(), samples, DomainTag::InDomain, Split::Test).unwrap()
    }

    #[test]
    fn zero_classifier_audit_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = CbmModel::new(scheme(3, &[2, 3]), 4, &[6], ClassifierVariant::Mlp20, &mut rng).unwrap();
        m.classifier[0] = DenseLayer::zeros(5, 20);
        m.classifier[1] = DenseLayer::zeros(20, 3);
        let d = dataset_for(&m, 10, 1);
        let matrix = ImportanceMatrix::new(
            &m.scheme,
            vec![vec![Importance::High, Importance::Low]; 3],
        )
        .unwrap();
        let h = audit_delta_y(&m, &d, &matrix).unwrap();
        assert!(h.mean_delta_y.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(h.alignment_score, 0.0);
    }

    #[test]
    fn single_sample_audit_equals_its_delta_y() {
        let m = hand_model();
        let mut d = dataset_for(&m, 1, 2);
        d.samples[0].features = vec![0.3, -0.2, 0.9, 0.1];
        let matrix = ImportanceMatrix::uniform(&m.scheme, Importance::Mid);
        let h = audit_delta_y(&m, &d, &matrix).unwrap();
        let c = m.predict_concepts(&d.features(&[0])).unwrap();
        let dy = delta_y(&m, &c).unwrap();
        let flat: Vec<f64> = h.mean_delta_y.concat();
        assert_eq!(flat, dy.sample(0));
    }

    #[test]
    fn audit_rejects_foreign_matrix() {
        let m = hand_model();
        let d = dataset_for(&m, 3, 2);
        let other = ImportanceMatrix::uniform(&scheme(3, &[2, 2]), Importance::High);
        assert!(matches!(audit_delta_y(&m, &d, &other), Err(Error::Config(_))));
    }

    #[test]
    fn heatmap_bounds_and_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = CbmModel::new(scheme(4, &[2, 3, 2]), 5, &[8], ClassifierVariant::Mlp128, &mut rng).unwrap();
        let d = dataset_for(&m, 40, 3);
        let matrix = ImportanceMatrix::new(
            &m.scheme,
            vec![vec![Importance::High, Importance::Mid, Importance::Low]; 4],
        )
        .unwrap();
        let h = audit_delta_y(&m, &d, &matrix).unwrap();
        assert!(h.mean_delta_y.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert!((-1.0..=1.0).contains(&h.alignment_score));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        h.save_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("class,concept0,concept1,concept2\n"));
    }

    #[test]
    fn evaluate_reports_consistent_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = CbmModel::new(scheme(3, &[2, 3]), 4, &[6], ClassifierVariant::Linear, &mut rng).unwrap();
        let d = dataset_for(&m, 300, 4);
        let r = evaluate(&m, &d, Some(1), serde_json::Value::Null).unwrap();
        let mean = r.per_class_f1.iter().sum::<f64>() / 3.0;
        assert_eq!(r.macro_f1, mean);
        assert_eq!(r.n, 300);
        assert_eq!(r.concept_accuracy.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn macro_f1_invariant_under_relabeling(
                pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
                perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
            ) {
                let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
                let a = macro_f1(&t, &p, 4).unwrap().macro_f1;
                let tp: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
                let pp: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
                let b = macro_f1(&tp, &pp, 4).unwrap().macro_f1;
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }

            #[test]
            fn interval_is_translation_invariant(vals in prop::collection::vec(-1.0f64..1.0, 2..8), shift in -5.0f64..5.0) {
                let a = confidence_interval(&vals).unwrap();
                let moved: Vec<f64> = vals.iter().map(|v| v + shift).collect();
                let b = confidence_interval(&moved).unwrap();
                prop_assert!((a.half_width - b.half_width).abs() < 1e-9);
            }
        }
    }
}
