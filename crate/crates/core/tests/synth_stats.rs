//! Statistical properties of the synthetic benchmark.

use kgcbm::data::{generate, Dataset, DomainTag, Split, SynthConfig};
use kgcbm::knowledge::Importance;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn contingency(d: &Dataset, l: usize, k: usize, n: usize) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; n]; k];
    for s in &d.samples {
        t[s.class][s.concept_values[l]] += 1.0;
    }
    t
}

fn chi_square_p(t: &[Vec<f64>]) -> f64 {
    let total: f64 = t.iter().flatten().sum();
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for (i, r) in t.iter().enumerate() {
        for (j, &o) in r.iter().enumerate() {
            let e = rows[i] * cols[j] / total;
            stat += (o - e) * (o - e) / e;
        }
    }
    let df = ((t.len() - 1) * (t[0].len() - 1)) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

/// Plug-in mutual information in nats.
fn mutual_information(t: &[Vec<f64>]) -> f64 {
    let total: f64 = t.iter().flatten().sum();
    let rows: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..t[0].len()).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, r) in t.iter().enumerate() {
        for (j, &o) in r.iter().enumerate() {
            if o > 0.0 {
                mi += o / total * (o * total / (rows[i] * cols[j])).ln();
            }
        }
    }
    mi
}

fn low_concepts(cfg: &SynthConfig) -> Vec<usize> {
    (0..cfg.num_concepts()).filter(|&l| cfg.roles[l] == Importance::Low).collect()
}

#[test]
fn low_concepts_are_independent_of_class_out_of_domain() {
    let mut tests = 0;
    let mut rejected = 0;
    for seed in 0..20 {
        let cfg = SynthConfig {
            n_test_ood: 10_000,
            seed,
            ..SynthConfig::default()
        };
        let d = generate(&cfg, DomainTag::OutOfDomain, Split::Test).unwrap();
        for l in low_concepts(&cfg) {
            let p = chi_square_p(&contingency(&d, l, cfg.num_classes, cfg.cardinalities[l]));
            tests += 1;
            if p < 0.01 {
                rejected += 1;
            }
        }
    }
    assert!(rejected * 20 <= tests, "{rejected} of {tests} chi-square tests rejected at 0.01");
}

#[test]
fn low_concepts_carry_class_information_in_domain() {
    let cfg = SynthConfig::default();
    let d = generate(&cfg, DomainTag::InDomain, Split::Train).unwrap();
    for l in low_concepts(&cfg) {
        let t = contingency(&d, l, cfg.num_classes, cfg.cardinalities[l]);
        let mi = mutual_information(&t);
        assert!(mi > 0.1, "concept {l}: mutual information {mi}");
        assert!(chi_square_p(&t) < 1e-6);
    }
}

#[test]
fn mid_concepts_agree_with_class_at_the_configured_rate() {
    let cfg = SynthConfig {
        n_train: 20_000,
        ..SynthConfig::default()
    };
    let d = generate(&cfg, DomainTag::InDomain, Split::Train).unwrap();
    for l in (0..cfg.num_concepts()).filter(|&l| cfg.roles[l] == Importance::Mid) {
        let n = cfg.cardinalities[l] as f64;
        // agreement, or a uniform draw that happens to land on the linked value
        let expected = cfg.mid_agreement + (1.0 - cfg.mid_agreement) / n;
        let hits = d.samples.iter().filter(|s| s.concept_values[l] == cfg.linked_value(s.class, l)).count();
        let rate = hits as f64 / d.len() as f64;
        let se = (expected * (1.0 - expected) / d.len() as f64).sqrt();
        assert!((rate - expected).abs() < 4.0 * se, "concept {l}: {rate} vs {expected}");
    }
}
