//! Oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use modcausal::graph::Dag;
use modcausal::nn::{MaskedMlp, HIDDEN};
use modcausal::scm::{Dataset, GroundTruthScm, InterventionSpec};
use modcausal::seed;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for per-coordinate relative error.
pub const FD_FLOOR: f64 = 1e-3;

/// Central-difference check of `MaskedMlp::backward` on one seeded case.
/// Returns the largest per-coordinate relative error.
pub fn gradient_case(case: u64) -> f64 {
    let mut rng = seed::stream(0xF1D, &[case]);
    let n = [3, 10][rng.gen_range(0..2)];
    let k = [3, 10][rng.gen_range(0..2)];
    let hidden = if rng.gen_bool(0.5) { HIDDEN } else { 16 };
    let mut mlp = MaskedMlp::glorot(n, k, hidden, &mut rng);
    let normal = Normal::new(0.0, 0.3).unwrap();
    for p in mlp.params_mut() {
        *p += normal.sample(&mut rng);
    }
    let target = rng.gen_range(0..n);
    let mask: Vec<bool> = (0..n).map(|j| j != target && rng.gen_bool(0.6)).collect();
    mlp.set_mask(&mask);
    let batch_len = rng.gen_range(1..=8);
    let rows: Vec<Vec<usize>> = (0..batch_len)
        .map(|_| (0..n).map(|_| rng.gen_range(0..k)).collect())
        .collect();
    let batch: Vec<&[usize]> = rows.iter().map(Vec::as_slice).collect();
    let (g, loss) = mlp.backward(&batch, target).unwrap();
    let mean_nll = |m: &MaskedMlp| batch.iter().map(|x| m.nll(x, target).unwrap()).sum::<f64>() / batch_len as f64;
    assert!((loss - mean_nll(&mlp)).abs() < 1e-12);
    let mut worst: f64 = 0.0;
    for p in 0..mlp.num_params() {
        let orig = mlp.params()[p];
        mlp.params_mut()[p] = orig + FD_STEP;
        let up = mean_nll(&mlp);
        mlp.params_mut()[p] = orig - FD_STEP;
        let down = mean_nll(&mlp);
        mlp.params_mut()[p] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = g.data[p];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// Exact joint over all `k^n` assignments, indexed with variable 0 as the
/// least significant digit.
pub fn exact_joint(scm: &GroundTruthScm, spec: Option<InterventionSpec>) -> Vec<f64> {
    let (n, k) = (scm.n(), scm.k);
    let cells = k.pow(n as u32);
    let mut x = vec![0usize; n];
    (0..cells)
        .map(|c| {
            let mut r = c;
            for v in x.iter_mut() {
                *v = r % k;
                r /= k;
            }
            (0..n)
                .map(|i| match spec {
                    Some(InterventionSpec::Fixed(iv)) if iv.target == i => f64::from(u8::from(x[i] == iv.value)),
                    Some(InterventionSpec::Uniform { target }) if target == i => 1.0 / k as f64,
                    _ => scm.cpd(i, &x).unwrap()[x[i]],
                })
                .product()
        })
        .collect()
}

pub fn empirical_joint(d: &Dataset) -> Vec<f64> {
    let (n, k) = (d.n(), d.k());
    let mut counts = vec![0.0; k.pow(n as u32)];
    for x in d.rows() {
        let idx = x.iter().rev().fold(0, |acc, &v| acc * k + v);
        counts[idx] += 1.0;
    }
    counts.iter().map(|c| c / d.len() as f64).collect()
}

/// Expected TV between a multinomial sample of size `m` and its source,
/// from the normal approximation of each cell count.
pub fn noise_tv(p: &[f64], m: usize) -> f64 {
    0.5 * p
        .iter()
        .map(|&q| (2.0 * q * (1.0 - q) / (std::f64::consts::PI * m as f64)).sqrt())
        .sum::<f64>()
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Small SCMs for the sampler oracle: (name, dag, k).
pub fn sampler_cases() -> Vec<(&'static str, Dag, usize)> {
    vec![
        ("chain3", Dag::from_edges(3, &[(0, 1), (1, 2)]).unwrap(), 3),
        ("collider3", Dag::from_edges(3, &[(0, 2), (1, 2)]).unwrap(), 4),
        ("fork4", Dag::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap(), 2),
        ("full4", Dag::from_edges(4, &[(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]).unwrap(), 3),
        ("chain4k4", Dag::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap(), 4),
    ]
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}
