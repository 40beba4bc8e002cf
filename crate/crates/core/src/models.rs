//! Reference models: the two-cluster Gaussian mixture demonstration and the
//! GMM/PCA benchmark configurations, with their synthetic data generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::initialize_from_random;
use crate::error::{Error, Result};
use crate::expfam::FamilyId;
use crate::graph::{Graph, NodeId};
use crate::linalg;

/// Seed used for benchmark data unless overridden.
pub const DATA_SEED: u64 = 20_140_601;

/// Node handles of a Gaussian mixture model.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub graph: Graph,
    pub mu: NodeId,
    pub lambda: NodeId,
    pub alpha: NodeId,
    pub z: NodeId,
    pub y: NodeId,
    pub clusters: usize,
}

impl GmmModel {
    /// Expected number of points per cluster, E[Σ_n z_nk].
    pub fn expected_counts(&self) -> Vec<f64> {
        let r = &self.graph.moments(self.z).expect("categorical node")[0];
        let mut counts = vec![0.0; self.clusters];
        for row in r.chunks(self.clusters) {
            counts.iter_mut().zip(row).for_each(|(c, v)| *c += v);
        }
        counts
    }

    /// Posterior mean of every cluster centre, row-major (K, D).
    pub fn cluster_means(&self) -> Vec<f64> {
        self.graph.moments(self.mu).expect("gaussian node")[0].clone()
    }

    /// Dirichlet posterior concentrations.
    pub fn concentrations(&self) -> Vec<f64> {
        self.graph.natural(self.alpha).expect("dirichlet node")[0]
            .iter()
            .map(|p| p + 1.0)
            .collect()
    }
}

/// 500 points in two dimensions: 200 around (2, 2) and 300 around the
/// origin, unit covariance.
pub fn two_cluster_data(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (500, 2);
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    data[..200 * d].iter_mut().for_each(|v| *v += 2.0);
    data
}

/// Gaussian mixture with the demonstration priors: cluster means
/// N(0, (0.01 I)^-1), precisions Wishart(D, D I), weights Dirichlet(0.01),
/// assignments categorical. `data` is row-major (N, D).
pub fn build_gmm(data: &[f64], dim: usize, clusters: usize) -> Result<GmmModel> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("{} values do not form rows of {dim}", data.len())));
    }
    let n = data.len() / dim;
    let (d, k) = (dim, clusters);
    let mut g = Graph::new();
    let zero = g.add_value(&[d], vec![0.0; d])?;
    let prior_prec = g.add_value(&[d, d], scaled_identity(d, 0.01))?;
    let mu = g.add_stochastic(FamilyId::Gaussian(d), &[zero, prior_prec], &[k])?;
    let dof = g.add_value(&[], vec![d as f64])?;
    let scale = g.add_value(&[d, d], scaled_identity(d, d as f64))?;
    let lambda = g.add_stochastic(FamilyId::Wishart(d), &[dof, scale], &[k])?;
    let conc = g.add_value(&[k], vec![0.01; k])?;
    let alpha = g.add_stochastic(FamilyId::Dirichlet(k), &[conc], &[])?;
    let z = g.add_stochastic(FamilyId::Categorical(k), &[alpha], &[n])?;
    let y = g.add_mixture(z, FamilyId::Gaussian(d), &[mu, lambda], &[n])?;
    g.observe(y, data, None)?;
    Ok(GmmModel {
        graph: g,
        mu,
        lambda,
        alpha,
        z,
        y,
        clusters: k,
    })
}

/// Node handles of the PCA model `Y = X W^T + noise`.
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub graph: Graph,
    pub x: NodeId,
    pub w: NodeId,
    pub f: NodeId,
    pub tau: NodeId,
    pub y: NodeId,
}

/// Probabilistic PCA: latent rows X (N, L) and loadings W (D, L) with unit
/// Gaussian priors, noise precision Gamma(1e-3, 1e-3). `data` is row-major
/// (N, D); `mask` marks observed cells.
pub fn build_pca(data: &[f64], mask: Option<&[bool]>, n: usize, dim: usize, latent: usize) -> Result<PcaModel> {
    if data.len() != n * dim {
        return Err(Error::Shape(format!("expected {} values, got {}", n * dim, data.len())));
    }
    let l = latent;
    let mut g = Graph::new();
    let zero = g.add_value(&[l], vec![0.0; l])?;
    let eye = g.add_value(&[l, l], linalg::identity(l))?;
    // W is declared first so the default update order starts from the
    // randomly initialized X.
    let w = g.add_stochastic(FamilyId::Gaussian(l), &[zero, eye], &[dim])?;
    let x = g.add_stochastic(FamilyId::Gaussian(l), &[zero, eye], &[n, 1])?;
    let f = g.add_sum_product(x, w, &[])?;
    let a = g.add_value(&[], vec![1e-3])?;
    let b = g.add_value(&[], vec![1e-3])?;
    let tau = g.add_stochastic(FamilyId::Gamma, &[a, b], &[])?;
    let y = g.add_stochastic(FamilyId::Gaussian(1), &[f, tau], &[n, dim])?;
    g.observe(y, data, mask)?;
    Ok(PcaModel {
        graph: g,
        x,
        w,
        f,
        tau,
        y,
    })
}

fn scaled_identity(d: usize, s: f64) -> Vec<f64> {
    let mut m = linalg::identity(d);
    m.iter_mut().for_each(|v| *v *= s);
    m
}

/// The benchmark configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Benchmark {
    GmmSmall,
    GmmLarge,
    PcaSmall,
    PcaLarge,
}

/// A benchmark model ready to fit.
#[derive(Debug, Clone)]
pub enum BenchmarkModel {
    Gmm(GmmModel),
    Pca(PcaModel),
}

impl BenchmarkModel {
    pub fn graph(&self) -> &Graph {
        match self {
            BenchmarkModel::Gmm(m) => &m.graph,
            BenchmarkModel::Pca(m) => &m.graph,
        }
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        match self {
            BenchmarkModel::Gmm(m) => &mut m.graph,
            BenchmarkModel::Pca(m) => &mut m.graph,
        }
    }
}

impl Benchmark {
    pub const ALL: [Benchmark; 4] = [
        Benchmark::GmmSmall,
        Benchmark::GmmLarge,
        Benchmark::PcaSmall,
        Benchmark::PcaLarge,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Benchmark::GmmSmall => "gmm-small",
            Benchmark::GmmLarge => "gmm-large",
            Benchmark::PcaSmall => "pca-small",
            Benchmark::PcaLarge => "pca-large",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    /// (clusters or latent dimension, observations, data dimension).
    pub fn sizes(&self) -> (usize, usize, usize) {
        match self {
            Benchmark::GmmSmall => (10, 200, 2),
            Benchmark::GmmLarge => (40, 2000, 10),
            Benchmark::PcaSmall => (10, 500, 20),
            Benchmark::PcaLarge => (40, 2000, 100),
        }
    }

    /// Synthetic data, row-major (N, D).
    ///
    /// GMM data come from K/2 unit-covariance clusters whose centres are
    /// drawn from N(0, 4 I); PCA data are `X W^T` plus unit noise with
    /// standard normal X and W.
    pub fn data(&self, seed: u64) -> Vec<f64> {
        let (k, n, d) = self.sizes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || -> f64 { rng.sample(StandardNormal) };
        match self {
            Benchmark::GmmSmall | Benchmark::GmmLarge => {
                let true_k = (k / 2).max(1);
                let centres: Vec<f64> = (0..true_k * d).map(|_| 2.0 * normal()).collect();
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    let c = i % true_k;
                    for j in 0..d {
                        out.push(centres[c * d + j] + normal());
                    }
                }
                out
            }
            Benchmark::PcaSmall | Benchmark::PcaLarge => {
                let x: Vec<f64> = (0..n * k).map(|_| normal()).collect();
                let w: Vec<f64> = (0..d * k).map(|_| normal()).collect();
                let mut out = Vec::with_capacity(n * d);
                for i in 0..n {
                    for j in 0..d {
                        let s: f64 = (0..k).map(|l| x[i * k + l] * w[j * k + l]).sum();
                        out.push(s + normal());
                    }
                }
                out
            }
        }
    }

    /// Build the model on `data` and break symmetry with `seed`.
    pub fn build(&self, data: &[f64], seed: u64) -> Result<BenchmarkModel> {
        let (k, n, d) = self.sizes();
        match self {
            Benchmark::GmmSmall | Benchmark::GmmLarge => {
                let mut m = build_gmm(data, d, k)?;
                initialize_from_random(&mut m.graph, m.z, seed)?;
                Ok(BenchmarkModel::Gmm(m))
            }
            Benchmark::PcaSmall | Benchmark::PcaLarge => {
                let mut m = build_pca(data, None, n, d, k)?;
                initialize_from_random(&mut m.graph, m.x, seed)?;
                Ok(BenchmarkModel::Pca(m))
            }
        }
    }
}
