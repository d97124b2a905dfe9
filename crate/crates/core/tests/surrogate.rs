use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use stepstone::generation::{Landscape, SimulatedAgentGenome, SimulatedBackend, SimulatedParams};
use stepstone::rng::substream;

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Spearman correlation and its one-sided p-value for a positive association.
fn spearman(x: &[f64], y: &[f64]) -> (f64, f64) {
    let rho = pearson(&ranks(x), &ranks(y));
    let n = x.len() as f64;
    let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 2.0).unwrap();
    (rho, 1.0 - dist.cdf(t))
}

#[test]
fn improvement_rises_with_meta_capability() {
    let backend = SimulatedBackend::new(SimulatedParams::default(), Landscape::two_peak());
    let mut meta = Vec::new();
    let mut gain = Vec::new();
    let mut trial = 0u64;
    while meta.len() < 400 {
        let mut rng = substream(2024, "surrogate-property", trial, 0);
        trial += 1;
        let m: f64 = rng.random_range(0.0..=1.0);
        let parent = SimulatedAgentGenome {
            task_skill: vec![rng.random_range(-1.5..4.5), rng.random_range(-1.0..1.0)],
            meta_capability: m,
            compile_probability: 0.9,
            selection: None,
            broken: false,
        };
        let (child, _) = backend.modify(&parent, &parent, false, &mut rng);
        if child.broken {
            continue;
        }
        meta.push(m);
        gain.push(backend.landscape.fitness(&child.task_skill) - backend.landscape.fitness(&parent.task_skill));
    }
    let (rho, p) = spearman(&meta, &gain);
    assert!(rho > 0.0 && p < 0.01, "rho {rho}, p {p}");
}

#[test]
fn spearman_oracle_sanity() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!((spearman(&x, &[2.0, 4.0, 6.0, 8.0, 10.0]).0 - 1.0).abs() < 1e-12);
    assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).0 + 1.0).abs() < 1e-12);
    assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
}
