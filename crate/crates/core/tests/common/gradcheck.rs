//! Central finite differences against the tape for the full training loss,
//! including the L removal branches behind the alignment terms.

use kgcbm::align::{align_loss_high, align_loss_low, delta_y_graph, total_loss, AlignMode, LossTerms, LossWeights};
use kgcbm::autodiff::{Graph, Tensor};
use kgcbm::cbm::{CbmModel, ClassifierVariant, Concept, ConceptScheme};
use kgcbm::knowledge::{Importance, ImportanceMatrix};
use kgcbm::nn::{cross_entropy, segmented_cross_entropy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    model: CbmModel,
    x: Tensor,
    labels: Vec<usize>,
    concepts: Vec<Vec<usize>>,
    matrix: ImportanceMatrix,
    mode: AlignMode,
    weights: LossWeights,
    smoothing: f64,
}

pub fn random_case(seed: u64, variant: ClassifierVariant) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    let cards: Vec<usize> = (0..rng.random_range(2..=4)).map(|_| rng.random_range(2..=4)).collect();
    let scheme = ConceptScheme::new(
        (0..k).map(|i| format!("c{i}")).collect(),
        cards
            .iter()
            .enumerate()
            .map(|(l, &n)| Concept {
                name: format!("x{l}"),
                values: (0..n).map(|v| format!("v{v}")).collect(),
            })
            .collect(),
    )
    .unwrap();
    let width = rng.random_range(3..=6);
    let batch = rng.random_range(1..=5);
    let model = CbmModel::new(scheme.clone(), width, &[5], variant, &mut rng).unwrap();
    let x: Vec<f64> = (0..batch * width).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    let concepts: Vec<Vec<usize>> = (0..batch)
        .map(|_| cards.iter().map(|&n| rng.random_range(0..n)).collect())
        .collect();
    let rows: Vec<Vec<Importance>> = (0..k)
        .map(|_| (0..cards.len()).map(|_| Importance::ALL[rng.random_range(0..3)]).collect())
        .collect();
    Case {
        model,
        x: Tensor::new(vec![batch, width], x).unwrap(),
        labels,
        concepts,
        matrix: ImportanceMatrix::new(&scheme, rows).unwrap(),
        mode: if rng.random_bool(0.5) { AlignMode::Pairwise } else { AlignMode::Column },
        weights: LossWeights::new(rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)).unwrap(),
        smoothing: rng.random_range(0.0..0.5),
    }
}

/// Full loss and, when `grads` is set, its gradient per parameter tensor.
fn loss(case: &Case, model: &CbmModel, grads: bool) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true).unwrap();
    let x = g.constant(case.x.clone());
    let c = bound.predict_concepts(&mut g, x).unwrap();
    let segments = model.scheme.cardinalities();
    let l_c = segmented_cross_entropy(&mut g, c, &segments, &case.concepts, 0.0).unwrap();
    let dy = delta_y_graph(&mut g, &bound, c).unwrap();
    let high = align_loss_high(&mut g, &dy, &case.matrix, case.mode, &case.labels).unwrap();
    let low = align_loss_low(&mut g, &dy, &case.matrix, case.mode, &case.labels).unwrap();
    let k = model.scheme.num_classes();
    let l_y = cross_entropy(&mut g, dy.class_probs, &case.labels, case.smoothing, k).unwrap();
    let terms = LossTerms {
        concept: l_c,
        class: l_y,
        align: Some((high, low)),
    };
    let total = total_loss(&mut g, terms, case.weights).unwrap();
    let value = g.value(total).item();
    if !grads {
        return (value, Vec::new());
    }
    let gr = g.backward(total).unwrap();
    let vars = bound
        .predictor_layers()
        .iter()
        .chain(bound.classifier_layers())
        .flat_map(|l| [l.weights, l.bias]);
    (value, vars.map(|v| gr.get(v)).collect())
}

fn numeric_derivative(case: &Case, p: usize, i: usize, h: f64) -> f64 {
    let at = |delta: f64| {
        let mut m = case.model.clone();
        m.parameters_mut()[p].data_mut()[i] += delta;
        loss(case, &m, false).0
    };
    (at(h) - at(-h)) / (2.0 * h)
}

/// The floor keeps stencil roundoff (about 1e-10 on losses of order 1) from
/// dominating when the true derivative is 0.
fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Worst relative error and the number of entries whose first stencil
/// straddled a ReLU or `|.|` kink. Those are re-measured with narrower
/// stencils; a genuinely wrong gradient disagrees at every step size.
pub fn worst_relative_error(case: &Case) -> (f64, usize, usize) {
    let (_, analytic) = loss(case, &case.model, true);
    let (mut worst, mut kinks, mut total) = (0.0f64, 0, 0);
    for (p, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.data().iter().enumerate() {
            let mut err = relative(a, numeric_derivative(case, p, i, 1e-5));
            if err > 1e-4 {
                kinks += 1;
                for h in [1e-6, 1e-7] {
                    err = err.min(relative(a, numeric_derivative(case, p, i, h)));
                }
            }
            worst = worst.max(err);
            total += 1;
        }
    }
    (worst, kinks, total)
}

/// Worst error over 10 random configurations per classifier variant, plus
/// the kink count and total entries checked.
pub fn check_all_variants() -> Vec<(ClassifierVariant, f64, usize, usize)> {
    [ClassifierVariant::Linear, ClassifierVariant::Mlp20, ClassifierVariant::Mlp128]
        .into_iter()
        .map(|variant| {
            let (mut worst, mut kinks, mut total) = (0.0f64, 0, 0);
            for seed in 0..10 {
                let case = random_case(seed * 31 + variant.hidden_width().unwrap_or(0) as u64, variant);
                let (err, k, n) = worst_relative_error(&case);
                worst = worst.max(err);
                kinks += k;
                total += n;
            }
            (variant, worst, kinks, total)
        })
        .collect()
}
