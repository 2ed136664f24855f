//! Dense layers, label-smoothed cross-entropy and AdamW on top of [`crate::autodiff`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Tensor,
    /// `out`
    pub bias: Tensor,
}

/// A [`DenseLayer`] whose parameters have been placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weights: Var,
    pub bias: Var,
    weights_t: Var,
}

impl DenseLayer {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        DenseLayer {
            weights: Tensor::new(vec![outputs, inputs], w).expect("layer shape"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            weights: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.rank() != 2 || self.bias.rank() != 1 || self.bias.len() != self.outputs() {
            return Err(Error::config(format!(
                "dense layer shapes {:?} / {:?} are inconsistent",
                self.weights.shape(),
                self.bias.shape()
            )));
        }
        if !self.weights.is_finite() || !self.bias.is_finite() {
            return Err(Error::numeric("dense layer", "non-finite parameter"));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundDense> {
        let (weights, bias) = if trainable {
            (g.param(self.weights.clone()), g.param(self.bias.clone()))
        } else {
            (g.constant(self.weights.clone()), g.constant(self.bias.clone()))
        };
        let weights_t = g.transpose(weights)?;
        Ok(BoundDense {
            weights,
            bias,
            weights_t,
        })
    }
}

impl BoundDense {
    /// `x W^T + b` for a `batch x in` input.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = g.matmul(x, self.weights_t)?;
        g.add(z, self.bias)
    }
}

/// Target distribution `(1 - s) * onehot + s / N` for each segment of each row.
///
/// `targets[r][j]` is the index of the true value in segment `j` of row `r`.
pub fn smoothed_targets(segments: &[usize], targets: &[Vec<usize>], smoothing: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&smoothing) {
        return Err(Error::config(format!("label smoothing {smoothing} outside [0, 1]")));
    }
    let width: usize = segments.iter().sum();
    let mut q = Vec::with_capacity(targets.len() * width);
    for (r, row) in targets.iter().enumerate() {
        if row.len() != segments.len() {
            return Err(Error::config(format!(
                "row {r} has {} targets for {} segments",
                row.len(),
                segments.len()
            )));
        }
        for (&n, &t) in segments.iter().zip(row) {
            if t >= n {
                return Err(Error::config(format!("target {t} outside 0..{n} in row {r}")));
            }
            let off = smoothing / n as f64;
            q.extend((0..n).map(|i| if i == t { 1.0 - smoothing + off } else { off }));
        }
    }
    Tensor::new(vec![targets.len(), width], q)
}

/// `-sum(q * ln max(p, floor))` divided by the batch size.
pub fn cross_entropy_with_targets(g: &mut Graph, probs: Var, q: Tensor) -> Result<Var> {
    let p = g.value(probs);
    if p.shape() != q.shape() {
        return Err(Error::config(format!(
            "cross-entropy: probabilities {:?} vs targets {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let batch = p.rows() as f64;
    let q = g.constant(q);
    let clamped = g.clamp_min(probs, PROB_FLOOR)?;
    let logp = g.log(clamped)?;
    let weighted = g.mul(logp, q)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0 / batch)
}

/// Batch-mean label-smoothed cross-entropy over `num_classes` probabilities.
pub fn cross_entropy(
    g: &mut Graph,
    probs: Var,
    targets: &[usize],
    smoothing: f64,
    num_classes: usize,
) -> Result<Var> {
    let width = g.value(probs).cols();
    if width != num_classes {
        return Err(Error::config(format!(
            "cross-entropy: {width} probabilities for {num_classes} classes"
        )));
    }
    if g.value(probs).rows() != targets.len() {
        return Err(Error::config("cross-entropy: batch size and target count differ"));
    }
    let rows: Vec<Vec<usize>> = targets.iter().map(|&t| vec![t]).collect();
    let q = smoothed_targets(&[num_classes], &rows, smoothing)?;
    cross_entropy_with_targets(g, probs, q)
}

/// Sum over segments of per-segment cross-entropy, averaged over the batch.
pub fn segmented_cross_entropy(
    g: &mut Graph,
    probs: Var,
    segments: &[usize],
    targets: &[Vec<usize>],
    smoothing: f64,
) -> Result<Var> {
    let q = smoothed_targets(segments, targets, smoothing)?;
    cross_entropy_with_targets(g, probs, q)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay:
/// `θ ← θ - lr·m̂/(√v̂ + ε) - lr·wd·θ`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    names: Vec<String>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        let (names, shapes): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .unzip();
        AdamW {
            config,
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            names,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are validated before anything is written.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(Error::usage(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.names.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(Error::config(format!("shape mismatch for parameter {}", self.names[i])));
            }
            if !g.is_finite() {
                return Err(Error::numeric(self.names[i].clone(), "non-finite gradient"));
            }
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (theta, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * *theta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ce(p: &[f64], t: usize, s: f64) -> f64 {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_rows(&[p]).unwrap());
        let l = cross_entropy(&mut g, pv, &[t], s, p.len()).unwrap();
        g.value(l).item()
    }

    #[test]
    fn uniform_probabilities_give_ln_k() {
        for k in 2..7 {
            let p = vec![1.0 / k as f64; k];
            for s in [0.0, 0.05, 0.3, 1.0] {
                assert!((ce(&p, 0, s) - (k as f64).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_values() {
        assert!((ce(&[0.8, 0.2], 0, 0.0) - 0.2231).abs() < 5e-5);
        assert!((ce(&[0.8, 0.2], 0, 1.0) - 0.9163).abs() < 5e-5);
        let expected = -0.5 * (0.8f64.ln() + 0.2f64.ln());
        assert!((ce(&[0.8, 0.2], 0, 1.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_rows(&[[0.5, 0.5]]).unwrap());
        assert!(matches!(cross_entropy(&mut g, pv, &[0], 0.0, 3), Err(Error::Config(_))));
        assert!(matches!(cross_entropy(&mut g, pv, &[0], 1.5, 2), Err(Error::Config(_))));
    }

    #[test]
    fn zero_probability_is_clamped() {
        let v = ce(&[1.0, 0.0], 1, 0.0);
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn segmented_loss_is_sum_of_segments() {
        let p = [0.7, 0.3, 0.2, 0.5, 0.3];
        let mut g = Graph::new();
        let pv = g.constant(Tensor::from_rows(&[p]).unwrap());
        let l = segmented_cross_entropy(&mut g, pv, &[2, 3], &[vec![0, 2]], 0.1).unwrap();
        let a = ce(&p[..2], 0, 0.1);
        let b = ce(&p[2..], 2, 0.1);
        assert!((g.value(l).item() - (a + b)).abs() < 1e-12);
    }

    fn run_adamw(cfg: AdamWConfig, theta: f64, grads: &[f64]) -> f64 {
        let mut p = Tensor::vector(vec![theta]);
        let mut opt = AdamW::new(cfg, [("p".to_string(), &p)]);
        for &g in grads {
            opt.step(&mut [&mut p], &[Tensor::vector(vec![g])]).unwrap();
        }
        p.data()[0]
    }

    #[test]
    fn hand_adamw_step() {
        let theta = run_adamw(AdamWConfig::default(), 1.0, &[1.0]);
        let expected = 1.0 - 1e-4 * (1.0 / (1.0 + 1e-8)) - 1e-6;
        assert!((theta - expected).abs() < 1e-15);
        // 1 - 1.0e-4 (Adam step) - 1.0e-6 (decay)
        assert!((theta - 0.999899).abs() < 1e-6);
    }

    /// Textbook AdamW written out independently.
    fn reference_adamw(cfg: AdamWConfig, mut theta: f64, grads: &[f64]) -> f64 {
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powf(t));
            let vh = v / (1.0 - cfg.beta2.powf(t));
            theta -= cfg.lr * cfg.weight_decay * theta;
            theta -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        theta
    }

    #[test]
    fn two_constant_steps_match_reference() {
        let cfg = AdamWConfig {
            lr: 0.05,
            ..AdamWConfig::default()
        };
        for (theta, g) in [(1.0, 1.0), (-0.3, 2.5), (4.0, -0.01)] {
            let a = run_adamw(cfg, theta, &[g, g]);
            let b = reference_adamw(cfg, theta, &[g, g]);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        assert_eq!(run_adamw(cfg, 0.37, &[0.0, 0.0, 0.0]), 0.37);
    }

    #[test]
    fn zero_lr_is_identity() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        assert_eq!(run_adamw(cfg, -1.25, &[0.3, -2.0, 7.0]), -1.25);
    }

    #[test]
    fn pure_decay_is_geometric() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let theta = run_adamw(cfg, 2.0, &[0.0; 5]);
        assert!((theta - 2.0 * 0.95f64.powi(5)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), [("classifier.0.bias".to_string(), &p)]);
        let err = opt.step(&mut [&mut p], &[Tensor::vector(vec![f64::NAN])]).unwrap_err();
        match err {
            Error::Numeric { context, .. } => assert_eq!(context, "classifier.0.bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = DenseLayer::init(10, 6, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(layer.weights.data().iter().all(|w| w.abs() <= bound));
        assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        layer.validate().unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cross_entropy_nonnegative(raw in prop::collection::vec(0.01f64..1.0, 2..6), s in 0.0f64..=1.0, t in 0usize..6) {
                let total: f64 = raw.iter().sum();
                let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
                let t = t % p.len();
                prop_assert!(ce(&p, t, s) >= 0.0);
            }
        }
    }
}
