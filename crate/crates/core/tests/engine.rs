mod common;

use common::*;
use vmp_core::expfam::FamilyId;
use vmp_core::models::{build_gmm, two_cluster_data, GmmModel, DATA_SEED};
use vmp_core::{
    initialize_from_random, run_annealed, run_svi, run_vb, AnnealingSchedule, Error, FitOptions, FitReport, Graph,
    SviSchedule,
};

fn gmm(seed: u64) -> GmmModel {
    let mut m = build_gmm(&two_cluster_data(DATA_SEED), 2, 5).unwrap();
    initialize_from_random(&mut m.graph, m.z, seed).unwrap();
    m
}

fn same_trace(a: &FitReport, b: &FitReport) -> bool {
    a.sweeps == b.sweeps
        && a.converged == b.converged
        && a.elbo
            .iter()
            .map(|v| v.to_bits())
            .eq(b.elbo.iter().map(|v| v.to_bits()))
}

#[test]
fn dirichlet_categorical_evidence() {
    let mut g = Graph::new();
    let c = g.add_value(&[2], vec![1.0, 1.0]).unwrap();
    let p = g.add_stochastic(FamilyId::Dirichlet(2), &[c], &[]).unwrap();
    let z = g.add_stochastic(FamilyId::Categorical(2), &[p], &[]).unwrap();
    g.observe(z, &[0.0], None).unwrap();
    let r = run_vb(
        &mut g,
        &FitOptions {
            max_sweeps: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((r.elbo[0] - 0.5f64.ln()).abs() < 1e-10);
}

#[test]
fn fully_observed_bound_is_log_density() {
    let mut g = Graph::new();
    let m = g.add_value(&[2], vec![1.0, -1.0]).unwrap();
    let prec = [2.0, 0.5, 0.5, 1.0];
    let l = g.add_value(&[2, 2], prec.to_vec()).unwrap();
    let y = g.add_stochastic(FamilyId::Gaussian(2), &[m, l], &[]).unwrap();
    g.observe(y, &[0.5, 0.25], None).unwrap();
    let r = [-0.5, 1.25];
    let quad = r[0] * (prec[0] * r[0] + prec[1] * r[1]) + r[1] * (prec[2] * r[0] + prec[3] * r[1]);
    let det = prec[0] * prec[3] - prec[1] * prec[2];
    let want = -(2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln() - 0.5 * quad;
    assert!((g.elbo().unwrap() - want).abs() < 1e-13);
}

#[test]
fn latent_node_at_prior_contributes_nothing() {
    let mut g = Graph::new();
    let a = g.add_value(&[], vec![2.0]).unwrap();
    let tau = g.add_stochastic(FamilyId::Gamma, &[a, a], &[3]).unwrap();
    let c = g.add_value(&[4], vec![0.5; 4]).unwrap();
    let p = g.add_stochastic(FamilyId::Dirichlet(4), &[c], &[]).unwrap();
    assert_eq!(g.node_elbo(tau).unwrap(), 0.0);
    assert_eq!(g.node_elbo(p).unwrap(), 0.0);
}

#[test]
fn demonstration_mixture_converges() {
    let mut m = gmm(2);
    let r = run_vb(&mut m.graph, &FitOptions::default()).unwrap();
    assert!(r.converged && r.sweeps < 200);
    assert_eq!(m.expected_counts().iter().filter(|&&c| c > 50.0).count(), 2);
    assert!(worst_decrease(&r.elbo) <= 1e-8);
}

#[test]
fn configuration_errors() {
    let mut g = Graph::new();
    let a = g.add_value(&[], vec![1.0]).unwrap();
    g.add_stochastic(FamilyId::Gamma, &[a, a], &[]).unwrap();
    let err = run_vb(&mut g, &FitOptions::default()).unwrap_err();
    assert!(matches!(err.error, Error::Configuration(_)));

    let mut m = gmm(0);
    let bad_order = FitOptions {
        order: Some(vec![m.mu, m.z]),
        ..Default::default()
    };
    assert!(matches!(
        run_vb(&mut m.graph, &bad_order).unwrap_err().error,
        Error::Configuration(_)
    ));
}

#[test]
fn infinite_tolerance_runs_one_sweep() {
    let mut m = gmm(0);
    let r = run_vb(
        &mut m.graph,
        &FitOptions {
            tol: f64::INFINITY,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!((r.sweeps, r.elbo.len(), r.converged), (1, 1, true));
}

#[test]
fn random_initialization() {
    let (a, b) = (gmm(5), gmm(5));
    assert_eq!(a.graph.natural(a.z).unwrap(), b.graph.natural(b.z).unwrap());
    for row in a.graph.moments(a.z).unwrap()[0].chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let (mut c, mut d) = (gmm(5), gmm(5));
    initialize_from_random(&mut c.graph, c.lambda, 8).unwrap();
    initialize_from_random(&mut d.graph, d.lambda, 8).unwrap();
    assert_eq!(c.graph.natural(c.lambda).unwrap(), d.graph.natural(d.lambda).unwrap());
    initialize_from_random(&mut d.graph, d.lambda, 9).unwrap();
    assert_ne!(c.graph.natural(c.lambda).unwrap(), d.graph.natural(d.lambda).unwrap());

    // Without symmetry breaking every cluster ends up identical.
    let mut m = build_gmm(&two_cluster_data(DATA_SEED), 2, 5).unwrap();
    run_vb(&mut m.graph, &FitOptions::default()).unwrap();
    let means = m.cluster_means();
    for k in 1..5 {
        assert_eq!(&means[2 * k..2 * k + 2], &means[..2]);
    }
}

#[test]
fn unit_annealing_is_plain_vb() {
    let (mut a, mut b) = (gmm(2), gmm(2));
    let opts = FitOptions {
        max_sweeps: 40,
        ..Default::default()
    };
    let schedule = AnnealingSchedule::new(vec![1.0; 10]).unwrap();
    let ra = run_vb(&mut a.graph, &opts).unwrap();
    let rb = run_annealed(&mut b.graph, &opts, &schedule).unwrap();
    assert!(same_trace(&ra, &rb));
    assert_eq!(a.graph.natural(a.mu).unwrap(), b.graph.natural(b.mu).unwrap());
}

#[test]
fn annealing_scales_likelihood_messages() {
    let m = gmm(1);
    let r0 = m.graph.moments(m.z).unwrap()[0].clone();
    let counts: Vec<f64> = (0..5).map(|k| r0.iter().skip(k).step_by(5).sum()).collect();
    let one = FitOptions {
        max_sweeps: 1,
        ..Default::default()
    };

    // alpha is updated before z, so it sees the initial responsibilities.
    let mut hot = m.clone();
    run_annealed(&mut hot.graph, &one, &AnnealingSchedule::new(vec![0.1, 1.0]).unwrap()).unwrap();
    let mut cold = m.clone();
    run_vb(&mut cold.graph, &one).unwrap();
    let (h, c) = (hot.concentrations(), cold.concentrations());
    for k in 0..5 {
        assert!(rel_err(h[k], 0.01 + 0.1 * counts[k]) < 1e-12);
        assert!(rel_err(c[k], 0.01 + counts[k]) < 1e-12);
        assert!(h[k] < c[k]);
    }
}

#[test]
fn annealing_schedule_validation() {
    assert!(matches!(
        AnnealingSchedule::new(vec![0.5, 0.2, 1.0]),
        Err(Error::Configuration(_))
    ));
    assert!(matches!(
        AnnealingSchedule::new(vec![0.5, 0.8]),
        Err(Error::Configuration(_))
    ));
    assert!(matches!(
        AnnealingSchedule::new(vec![0.0, 1.0]),
        Err(Error::Configuration(_))
    ));
    let g = AnnealingSchedule::geometric(0.01, 5).unwrap();
    assert_eq!(g.betas().len(), 5);
    assert_eq!(g.beta(4), 1.0);
    assert_eq!(g.beta(100), 1.0);
}

fn svi(m: &GmmModel, batch: usize, delay: f64, forgetting: f64) -> SviSchedule {
    SviSchedule {
        observed: m.y,
        axis: 0,
        batch_size: batch,
        delay,
        forgetting,
        globals: None,
    }
}

#[test]
fn full_batch_svi_step_is_vb_sweep() {
    let mut m = build_gmm(&two_cluster_data(DATA_SEED), 2, 5).unwrap();
    initialize_from_random(&mut m.graph, m.mu, 3).unwrap();
    let (mut a, mut b) = (m.clone(), m.clone());
    let one = FitOptions {
        max_sweeps: 1,
        ..Default::default()
    };
    run_svi(&mut a.graph, &one, &svi(&m, 500, 0.0, 1.0)).unwrap();
    let locals_first = FitOptions {
        order: Some(vec![m.z, m.mu, m.lambda, m.alpha]),
        ..one
    };
    run_vb(&mut b.graph, &locals_first).unwrap();
    for id in [m.mu, m.lambda, m.alpha] {
        let (p, q) = (a.graph.natural(id).unwrap(), b.graph.natural(id).unwrap());
        for (x, y) in p.iter().flatten().zip(q.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

#[test]
fn minibatch_rescaling_on_duplicated_data() {
    let build = || {
        let mut g = Graph::new();
        let zero = g.add_value(&[2], vec![0.0; 2]).unwrap();
        let prec = g.add_value(&[2, 2], identity(2)).unwrap();
        let mu = g.add_stochastic(FamilyId::Gaussian(2), &[zero, prec], &[]).unwrap();
        let y = g.add_stochastic(FamilyId::Gaussian(2), &[mu, prec], &[8]).unwrap();
        g.observe(y, &[1.5, -0.25].repeat(8), None).unwrap();
        (g, mu, y)
    };
    let (mut a, mu, y) = build();
    let (mut b, _, _) = build();
    let one = FitOptions {
        max_sweeps: 1,
        ..Default::default()
    };
    let schedule = SviSchedule {
        observed: y,
        axis: 0,
        batch_size: 4,
        delay: 0.0,
        forgetting: 1.0,
        globals: None,
    };
    run_svi(&mut a, &one, &schedule).unwrap();
    run_vb(&mut b, &one).unwrap();
    assert_eq!(a.natural(mu).unwrap(), b.natural(mu).unwrap());
}

#[test]
fn svi_is_deterministic_and_validated() {
    let m = gmm(0);
    let opts = FitOptions {
        max_sweeps: 30,
        seed: 11,
        ..Default::default()
    };
    let (mut a, mut b) = (m.clone(), m.clone());
    let ra = run_svi(&mut a.graph, &opts, &svi(&m, 125, 1.0, 0.7)).unwrap();
    let rb = run_svi(&mut b.graph, &opts, &svi(&m, 125, 1.0, 0.7)).unwrap();
    assert!(same_trace(&ra, &rb));
    assert_eq!(ra.sweeps, 30);

    let mut c = m.clone();
    let bad = SviSchedule {
        globals: Some(vec![m.z]),
        ..svi(&m, 125, 1.0, 0.7)
    };
    assert!(matches!(
        run_svi(&mut c.graph, &opts, &bad).unwrap_err().error,
        Error::Configuration(_)
    ));
    for bad in [svi(&m, 0, 1.0, 0.7), svi(&m, 501, 1.0, 0.7), svi(&m, 10, 1.0, 0.5)] {
        assert!(run_svi(&mut c.graph, &opts, &bad).is_err());
    }
}

#[test]
fn bound_never_decreases_on_random_models() {
    for seed in 1000..1025 {
        let mut g = random_model(seed);
        let r = run_vb(
            &mut g,
            &FitOptions {
                max_sweeps: 60,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(worst_decrease(&r.elbo) <= 1e-8, "model {seed}: {:?}", r.elbo);
    }
}

#[test]
fn conditionally_independent_latents_settle_in_one_sweep() {
    let mut g = Graph::new();
    let c = g.add_value(&[3], vec![1.0; 3]).unwrap();
    let p = g.add_stochastic(FamilyId::Dirichlet(3), &[c], &[]).unwrap();
    let z = g.add_stochastic(FamilyId::Categorical(3), &[p], &[5]).unwrap();
    g.observe(z, &[0.0, 1.0, 1.0, 2.0, 1.0], None).unwrap();
    let zero = g.add_value(&[2], vec![0.0; 2]).unwrap();
    let eye = g.add_value(&[2, 2], identity(2)).unwrap();
    let mu = g.add_stochastic(FamilyId::Gaussian(2), &[zero, eye], &[]).unwrap();
    let y = g.add_stochastic(FamilyId::Gaussian(2), &[mu, eye], &[2]).unwrap();
    g.observe(y, &[1.0, 2.0, 3.0, -1.0], None).unwrap();
    let r = run_vb(
        &mut g,
        &FitOptions {
            max_sweeps: 2,
            tol: 1e-300,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(r.elbo[0], r.elbo[1]);
    assert_eq!(g.update_node(p).unwrap(), 0.0);
    assert_eq!(g.update_node(mu).unwrap(), 0.0);
}

#[test]
fn fixed_point_does_not_depend_on_order() {
    let mut g = Graph::new();
    let zero = g.add_value(&[2], vec![0.0; 2]).unwrap();
    let p0 = g.add_value(&[2, 2], scaled(&identity(2), 0.1)).unwrap();
    let mu = g.add_stochastic(FamilyId::Gaussian(2), &[zero, p0], &[]).unwrap();
    let dof = g.add_value(&[], vec![3.0]).unwrap();
    let v = g.add_value(&[2, 2], identity(2)).unwrap();
    let lam = g.add_stochastic(FamilyId::Wishart(2), &[dof, v], &[]).unwrap();
    let y = g.add_stochastic(FamilyId::Gaussian(2), &[mu, lam], &[6]).unwrap();
    g.observe(y, &[1.0, 2.0, 0.5, 1.5, 2.5, 2.0, 1.0, 3.0, 0.0, 1.0, 1.5, 2.5], None)
        .unwrap();
    let tight = FitOptions {
        max_sweeps: 500,
        tol: 1e-300,
        ..Default::default()
    };
    let r = run_vb(&mut g, &tight).unwrap();
    let settled = r.final_elbo().unwrap();
    let again = run_vb(
        &mut g,
        &FitOptions {
            order: Some(vec![lam, mu]),
            max_sweeps: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((again.elbo[0] - settled).abs() < 1e-10);
}
