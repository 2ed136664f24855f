//! Perturbation importance (`ΔY`) and the losses that align it with an
//! [`ImportanceMatrix`].
//!
//! For a bottleneck `ĉ` the class head is evaluated once on `ĉ` and once per
//! concept with that concept's segment zero-filled:
//!
//! ```text
//! ΔY[k, l] = | ŷ_k - ŷ_(ĉ_l → 0)_k |
//! L_high   = Σ_(k,l) High |1 - ΔY[k, l]|
//! L_low    = Σ_(k,l) Low  |ΔY[k, l]|
//! L        = φ·L_c + L_y + λ·(L_low + L_high)
//! ```
//!
//! Gradients flow through the unperturbed head and every perturbed copy.
//! Sums are per sample and then averaged over the batch.
//!
//! Which cells enter the sums is selected by [`AlignMode`]. `Pairwise` uses
//! exactly the cells whose level matches. `Column` picks concepts by the
//! sample's true class row and sums the full class column for each.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::cbm::{BoundModel, CbmModel};
use crate::error::{Error, Result};
use crate::knowledge::{Importance, ImportanceMatrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    #[default]
    Pairwise,
    Column,
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::Pairwise => "pairwise",
            AlignMode::Column => "column",
        })
    }
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(AlignMode::Pairwise),
            "column" => Ok(AlignMode::Column),
            other => Err(Error::config(format!("unknown align mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub phi: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(phi: f64, lambda: f64) -> Result<Self> {
        let w = LossWeights { phi, lambda };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi >= 0.0 && self.phi.is_finite() && self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "loss weights must be finite and nonnegative (phi={}, lambda={})",
                self.phi, self.lambda
            )));
        }
        Ok(())
    }
}

/// Per-sample `K x L` matrices, row-major by class.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaY {
    pub classes: usize,
    pub concepts: usize,
    values: Vec<f64>,
}

impl DeltaY {
    pub fn batch(&self) -> usize {
        self.values.len() / (self.classes * self.concepts)
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.classes * self.concepts;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, k: usize, l: usize) -> f64 {
        self.sample(i)[k * self.concepts + l]
    }

    /// Batch-mean `K x L` matrix.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.classes * self.concepts;
        let mut out = vec![0.0; n];
        for i in 0..self.batch() {
            for (o, v) in out.iter_mut().zip(self.sample(i)) {
                *o += v;
            }
        }
        let b = self.batch() as f64;
        out.iter_mut().for_each(|v| *v /= b);
        out
    }
}

/// Differentiable `ΔY` for a batch: a `B x (L*K)` graph node laid out
/// concept-major (`l * K + k`).
#[derive(Clone, Copy, Debug)]
pub struct DeltaYVar {
    pub var: Var,
    /// Unperturbed class probabilities, `B x K`.
    pub class_probs: Var,
    pub classes: usize,
    pub concepts: usize,
}

impl DeltaYVar {
    /// Reads the node back as per-sample class-major matrices.
    pub fn to_delta_y(&self, g: &Graph) -> DeltaY {
        let t = g.value(self.var);
        let (k_n, l_n) = (self.classes, self.concepts);
        let mut values = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            for k in 0..k_n {
                for l in 0..l_n {
                    values.push(row[l * k_n + k]);
                }
            }
        }
        DeltaY {
            classes: k_n,
            concepts: l_n,
            values,
        }
    }
}

/// Records one unperturbed and `L` concept-removed class-head passes.
pub fn delta_y_graph(g: &mut Graph, model: &BoundModel, c: Var) -> Result<DeltaYVar> {
    let y = model.predict_class(g, c)?;
    let concepts = model.segments().len();
    let mut parts = Vec::with_capacity(concepts);
    for l in 0..concepts {
        let masked = model.remove_concept(g, c, l)?;
        let yl = model.predict_class(g, masked)?;
        let diff = g.sub(y, yl)?;
        parts.push(g.abs(diff)?);
    }
    let var = g.concat(&parts)?;
    Ok(DeltaYVar {
        var,
        class_probs: y,
        classes: g.value(y).cols(),
        concepts,
    })
}

/// `ΔY` of a frozen model for a `B x D` bottleneck batch.
pub fn delta_y(model: &CbmModel, c: &Tensor) -> Result<DeltaY> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false)?;
    let cv = g.constant(c.clone());
    let dy = delta_y_graph(&mut g, &bound, cv)?;
    Ok(dy.to_delta_y(&g))
}

/// Constant 0/1 selector laid out like [`DeltaYVar::var`].
fn selector(
    dy: &DeltaYVar,
    matrix: &ImportanceMatrix,
    level: Importance,
    mode: AlignMode,
    labels: &[usize],
    batch: usize,
) -> Result<Tensor> {
    let (k_n, l_n) = (dy.classes, dy.concepts);
    if matrix.num_classes() != k_n || matrix.num_concepts() != l_n {
        return Err(Error::config(format!(
            "importance matrix is {}x{}, ΔY is {k_n}x{l_n}",
            matrix.num_classes(),
            matrix.num_concepts()
        )));
    }
    match mode {
        AlignMode::Pairwise => {
            let mut m = vec![0.0; l_n * k_n];
            for (k, l) in matrix.pairs(level) {
                m[l * k_n + k] = 1.0;
            }
            Ok(Tensor::vector(m))
        }
        AlignMode::Column => {
            if labels.len() != batch {
                return Err(Error::config(format!(
                    "column mode needs one label per sample ({} labels, batch {batch})",
                    labels.len()
                )));
            }
            let mut m = vec![0.0; batch * l_n * k_n];
            for (i, &truth) in labels.iter().enumerate() {
                if truth >= k_n {
                    return Err(Error::config(format!("label {truth} outside 0..{k_n}")));
                }
                let row = &mut m[i * l_n * k_n..(i + 1) * l_n * k_n];
                for l in 0..l_n {
                    if matrix.get(truth, l) == level {
                        row[l * k_n..(l + 1) * k_n].fill(1.0);
                    }
                }
            }
            Tensor::new(vec![batch, l_n * k_n], m)
        }
    }
}

fn masked_batch_sum(g: &mut Graph, term: Var, mask: Tensor) -> Result<Var> {
    let batch = g.value(term).rows() as f64;
    let mask = g.constant(mask);
    let selected = g.mul(term, mask)?;
    let total = g.sum(selected)?;
    g.scale(total, 1.0 / batch)
}

/// Batch mean of `Σ |1 - ΔY|` over High cells. `labels` is only read in
/// column mode.
pub fn align_loss_high(
    g: &mut Graph,
    dy: &DeltaYVar,
    matrix: &ImportanceMatrix,
    mode: AlignMode,
    labels: &[usize],
) -> Result<Var> {
    let batch = g.value(dy.var).rows();
    let mask = selector(dy, matrix, Importance::High, mode, labels, batch)?;
    let neg = g.scale(dy.var, -1.0)?;
    let shifted = g.add_scalar(neg, 1.0)?;
    let term = g.abs(shifted)?;
    masked_batch_sum(g, term, mask)
}

/// Batch mean of `Σ |ΔY|` over Low cells.
pub fn align_loss_low(
    g: &mut Graph,
    dy: &DeltaYVar,
    matrix: &ImportanceMatrix,
    mode: AlignMode,
    labels: &[usize],
) -> Result<Var> {
    let batch = g.value(dy.var).rows();
    let mask = selector(dy, matrix, Importance::Low, mode, labels, batch)?;
    let term = g.abs(dy.var)?;
    masked_batch_sum(g, term, mask)
}

/// Loss components as graph nodes. `align` is `None` when no knowledge is used.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub concept: Var,
    pub class: Var,
    pub align: Option<(Var, Var)>,
}

/// `φ·L_c + L_y + λ·(L_low + L_high)`.
pub fn total_loss(g: &mut Graph, terms: LossTerms, weights: LossWeights) -> Result<Var> {
    weights.validate()?;
    let mut named = vec![("L_c", terms.concept), ("L_y", terms.class)];
    if let Some((high, low)) = terms.align {
        named.push(("L_high", high));
        named.push(("L_low", low));
    }
    for (name, v) in named {
        let t = g.value(v);
        if t.len() != 1 {
            return Err(Error::config(format!("{name} is not a scalar")));
        }
        if !t.item().is_finite() {
            return Err(Error::numeric(name, "non-finite loss component"));
        }
    }
    let concept = g.scale(terms.concept, weights.phi)?;
    let base = g.add(concept, terms.class)?;
    match terms.align {
        None => Ok(base),
        Some((high, low)) => {
            let align = g.add(low, high)?;
            let align = g.scale(align, weights.lambda)?;
            g.add(base, align)
        }
    }
}

/// Scalar twin of [`total_loss`], evaluated in the same order.
pub fn total_loss_value(l_c: f64, l_y: f64, l_high: f64, l_low: f64, weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    for (name, v) in [("L_c", l_c), ("L_y", l_y), ("L_high", l_high), ("L_low", l_low)] {
        if !v.is_finite() {
            return Err(Error::numeric(name, "non-finite loss component"));
        }
    }
    Ok(weights.phi * l_c + l_y + weights.lambda * (l_low + l_high))
}
