//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vmp_core::expfam::{log_partition, moments_from_natural, FamilyId, NaturalParams};
use vmp_core::models::build_pca;
use vmp_core::{initialize_from_random, Graph};

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    (0..d).for_each(|i| m[i * d + i] = 1.0);
    m
}

pub fn scaled(m: &[f64], s: f64) -> Vec<f64> {
    m.iter().map(|v| v * s).collect()
}

/// A A^T + shift I with standard normal A.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, shift: f64) -> Vec<f64> {
    let a: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>();
        }
        m[i * d + i] += shift;
    }
    m
}

/// Naive Gauss-Jordan inverse, kept independent of the library's factorizations.
pub fn invert(m: &[f64], d: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let mut inv = identity(d);
    for c in 0..d {
        let p = (c..d)
            .max_by(|&i, &j| a[i * d + c].abs().total_cmp(&a[j * d + c].abs()))
            .unwrap();
        for k in 0..d {
            a.swap(c * d + k, p * d + k);
            inv.swap(c * d + k, p * d + k);
        }
        let piv = a[c * d + c];
        for k in 0..d {
            a[c * d + k] /= piv;
            inv[c * d + k] /= piv;
        }
        for r in (0..d).filter(|&r| r != c) {
            let f = a[r * d + c];
            for k in 0..d {
                a[r * d + k] -= f * a[c * d + k];
                inv[r * d + k] -= f * inv[c * d + k];
            }
        }
    }
    inv
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// A random valid natural parameter vector for `family`.
pub fn random_natural(family: FamilyId, rng: &mut ChaCha8Rng) -> NaturalParams {
    match family {
        FamilyId::Gaussian(d) => {
            let mean: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            NaturalParams::gaussian(&mean, &random_spd(rng, d, 0.5))
        }
        FamilyId::Gamma => NaturalParams::gamma(rng.random_range(0.5..10.0), rng.random_range(0.2..5.0)),
        FamilyId::Wishart(d) => {
            let n = d as f64 - 1.0 + rng.random_range(0.5..10.0);
            NaturalParams::wishart(n, &random_spd(rng, d, 0.5))
        }
        FamilyId::Dirichlet(k) => {
            let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..10.0)).collect();
            NaturalParams::dirichlet(&alpha)
        }
        FamilyId::Categorical(k) => {
            let phi: Vec<f64> = (0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            NaturalParams::new(family, vec![phi]).unwrap()
        }
    }
}

/// Largest error between the moments and central differences of the log
/// partition, relative to max(|moment|, 1).
pub fn gradient_error(phi: &NaturalParams) -> f64 {
    let u = moments_from_natural(phi).unwrap();
    let mut worst: f64 = 0.0;
    for (b, block) in phi.blocks.iter().enumerate() {
        for (i, &value) in block.iter().enumerate() {
            let h = 1e-6 * value.abs().max(1.0);
            let mut plus = phi.clone();
            plus.blocks[b][i] += h;
            let mut minus = phi.clone();
            minus.blocks[b][i] -= h;
            let fd = (log_partition(&plus).unwrap() - log_partition(&minus).unwrap()) / (2.0 * h);
            let want = u.blocks[b][i];
            worst = worst.max((fd - want).abs() / want.abs().max(1.0));
        }
    }
    worst
}

pub const GRADIENT_FAMILIES: [FamilyId; 9] = [
    FamilyId::Gaussian(1),
    FamilyId::Gaussian(3),
    FamilyId::Gamma,
    FamilyId::Wishart(1),
    FamilyId::Wishart(3),
    FamilyId::Dirichlet(2),
    FamilyId::Dirichlet(5),
    FamilyId::Categorical(2),
    FamilyId::Categorical(5),
];

fn normals(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Option<Vec<bool>> {
    if rng.random_bool(0.5) {
        return None;
    }
    let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
    m[0] = true;
    Some(m)
}

/// A small random model mixing every family, with data and random
/// initialization. Shapes and priors vary with `seed`; N stays at or below 50.
pub fn random_model(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(5..=50);
    match seed % 5 {
        0 => {
            // Gaussian mean and Wishart precision.
            let d = rng.random_range(1..=3);
            let mut g = Graph::new();
            let m0 = g.add_value(&[d], normals(&mut rng, d, 1.0)).unwrap();
            let p0 = g
                .add_value(&[d, d], scaled(&identity(d), rng.random_range(0.01..2.0)))
                .unwrap();
            let mu = g.add_stochastic(FamilyId::Gaussian(d), &[m0, p0], &[]).unwrap();
            let dof = g.add_value(&[], vec![d as f64 + rng.random_range(0.0..3.0)]).unwrap();
            let v = g.add_value(&[d, d], random_spd(&mut rng, d, 0.5)).unwrap();
            let lam = g.add_stochastic(FamilyId::Wishart(d), &[dof, v], &[]).unwrap();
            let y = g.add_stochastic(FamilyId::Gaussian(d), &[mu, lam], &[n]).unwrap();
            let spread = rng.random_range(0.5..3.0);
            let data = normals(&mut rng, n * d, spread);
            let mask = random_mask(&mut rng, n);
            g.observe(y, &data, mask.as_deref()).unwrap();
            g
        }
        1 => {
            // Gaussian mean with an isotropic Gamma precision.
            let d = rng.random_range(1..=3);
            let mut g = Graph::new();
            let m0 = g.add_value(&[d], vec![0.0; d]).unwrap();
            let p0 = g
                .add_value(&[d, d], scaled(&identity(d), rng.random_range(0.01..1.0)))
                .unwrap();
            let mu = g.add_stochastic(FamilyId::Gaussian(d), &[m0, p0], &[]).unwrap();
            let a = g.add_value(&[], vec![rng.random_range(0.01..3.0)]).unwrap();
            let b = g.add_value(&[], vec![rng.random_range(0.01..3.0)]).unwrap();
            let tau = g.add_stochastic(FamilyId::Gamma, &[a, b], &[]).unwrap();
            let y = g.add_stochastic(FamilyId::Gaussian(d), &[mu, tau], &[n]).unwrap();
            let spread = rng.random_range(0.3..3.0);
            let mut data = normals(&mut rng, n * d, spread);
            data.iter_mut().for_each(|x| *x += 1.5);
            g.observe(y, &data, None).unwrap();
            initialize_from_random(&mut g, mu, seed).unwrap();
            g
        }
        2 => {
            // Gaussian mixture with Wishart precisions.
            let (d, k) = (rng.random_range(1..=2), rng.random_range(2..=4));
            let mut g = Graph::new();
            let m0 = g.add_value(&[d], vec![0.0; d]).unwrap();
            let p0 = g.add_value(&[d, d], scaled(&identity(d), 0.1)).unwrap();
            let mu = g.add_stochastic(FamilyId::Gaussian(d), &[m0, p0], &[k]).unwrap();
            let dof = g.add_value(&[], vec![d as f64]).unwrap();
            let v = g.add_value(&[d, d], identity(d)).unwrap();
            let lam = g.add_stochastic(FamilyId::Wishart(d), &[dof, v], &[k]).unwrap();
            let c = g.add_value(&[k], vec![rng.random_range(0.01..2.0); k]).unwrap();
            let alpha = g.add_stochastic(FamilyId::Dirichlet(k), &[c], &[]).unwrap();
            let z = g.add_stochastic(FamilyId::Categorical(k), &[alpha], &[n]).unwrap();
            let y = g.add_mixture(z, FamilyId::Gaussian(d), &[mu, lam], &[n]).unwrap();
            let mut data = normals(&mut rng, n * d, 1.0);
            for (i, x) in data.iter_mut().enumerate() {
                *x += 3.0 * ((i / d) % 2) as f64;
            }
            let mask = random_mask(&mut rng, n);
            g.observe(y, &data, mask.as_deref()).unwrap();
            initialize_from_random(&mut g, z, seed).unwrap();
            g
        }
        3 => {
            // PCA through the sum-product node, possibly with missing cells.
            let (rows, dim, l) = (n.min(30), rng.random_range(2..=6), rng.random_range(1..=3));
            let data = normals(&mut rng, rows * dim, 1.5);
            let mask = random_mask(&mut rng, rows * dim);
            let mut m = build_pca(&data, mask.as_deref(), rows, dim, l).unwrap();
            initialize_from_random(&mut m.graph, m.x, seed).unwrap();
            m.graph
        }
        _ => {
            // Scalar mixture with Gamma precisions and a partially observed gate.
            let k = rng.random_range(2..=3);
            let mut g = Graph::new();
            let m0 = g.add_value(&[1], vec![0.0]).unwrap();
            let p0 = g.add_value(&[1, 1], vec![0.05]).unwrap();
            let mu = g.add_stochastic(FamilyId::Gaussian(1), &[m0, p0], &[k]).unwrap();
            let a = g.add_value(&[], vec![1.0]).unwrap();
            let b = g.add_value(&[], vec![rng.random_range(0.1..2.0)]).unwrap();
            let tau = g.add_stochastic(FamilyId::Gamma, &[a, b], &[k]).unwrap();
            let c = g.add_value(&[k], vec![1.0; k]).unwrap();
            let alpha = g.add_stochastic(FamilyId::Dirichlet(k), &[c], &[]).unwrap();
            let z = g.add_stochastic(FamilyId::Categorical(k), &[alpha], &[n]).unwrap();
            let y = g.add_mixture(z, FamilyId::Gaussian(1), &[mu, tau], &[n]).unwrap();
            let labels: Vec<f64> = (0..n).map(|i| (i % k) as f64).collect();
            let data: Vec<f64> = labels
                .iter()
                .map(|&l| 4.0 * l + rng.sample::<f64, _>(StandardNormal))
                .collect();
            g.observe(y, &data, None).unwrap();
            let known: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
            g.observe(z, &labels, Some(&known)).unwrap();
            initialize_from_random(&mut g, z, seed).unwrap();
            g
        }
    }
}

/// Largest drop between consecutive bounds, relative to the later bound.
pub fn worst_decrease(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[1].abs())
        .fold(f64::NEG_INFINITY, f64::max)
}
