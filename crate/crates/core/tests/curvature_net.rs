//! Curvature probes applied to the real search network: the finite-difference
//! alpha-Hessian must be near-symmetric, deterministic under frozen draws,
//! and its dominant eigenvalue must agree across the two independent
//! eigenvalue routes.

use robustnas::bilevel::{SearchConfig, Searcher};
use robustnas::curvature::{alpha_hessian, dominant_eigenvalue, eigenspectrum, HessianReport};
use robustnas::data::{make_spirals, minibatches, DataConfig, Dataset};
use robustnas::linalg::power_iteration_max_eig;
use robustnas::rng::RngStream;
use robustnas::space::SpaceSpec;

fn trained_searcher(space: &str, epochs: usize, seed: u64) -> (Searcher, Dataset) {
    let data = make_spirals(&DataConfig {
        seed: 1,
        n_train: 96,
        n_valid: 96,
        n_test: 32,
        ..DataConfig::default()
    });
    let cfg = SearchConfig { epochs: epochs + 2, batch_size: 32, seed, ..SearchConfig::default() };
    let mut s = Searcher::new(SpaceSpec::preset(space).unwrap(), cfg).unwrap();
    for _ in 0..epochs {
        s.run_epoch(&data).unwrap();
    }
    (s, data)
}

fn net_hessian(s: &Searcher, data: &Dataset) -> HessianReport {
    let draws = s.eval_draws().split("hessian");
    let idx = minibatches(data.valid.len(), 64, &mut s.eval_draws().split("batch"))
        .into_iter()
        .next()
        .unwrap();
    let at = s.alpha.flatten();
    alpha_hessian(&at, None, |af| s.valid_alpha_grad(&data.valid, Some(&idx), af, &draws))
        .unwrap()
}

#[test]
fn network_hessian_is_nearly_symmetric_at_the_default_step() {
    let (s, data) = trained_searcher("T5", 4, 2);
    let rep = net_hessian(&s, &data);
    assert_eq!(rep.dim, 12);
    assert!(
        rep.max_asymmetry < 1e-4,
        "asymmetry {} exceeds the pinned bound",
        rep.max_asymmetry
    );
}

#[test]
fn both_eigenvalue_routes_agree_on_the_network_hessian() {
    for (space, seed) in [("T5", 2), ("T4", 3)] {
        let (s, data) = trained_searcher(space, 4, seed);
        let rep = net_hessian(&s, &data);
        let jac = dominant_eigenvalue(&rep.matrix, rep.dim).unwrap().value;
        let pow = power_iteration_max_eig(
            &rep.matrix,
            rep.dim,
            200_000,
            1e-14,
            &mut RngStream::from_seed(0),
        )
        .unwrap();
        assert!((jac - pow).abs() < 1e-6, "{space}: jacobi {jac} vs power {pow}");
    }
}

#[test]
fn frozen_draws_make_the_network_hessian_bitwise_deterministic() {
    // T4 exercises the stochastic Noise op: the frozen validation draws must
    // pin its features across all 2*dim gradient evaluations.
    let (s, data) = trained_searcher("T4", 3, 5);
    let a = net_hessian(&s, &data);
    let b = net_hessian(&s, &data);
    let bits = |m: &[f64]| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.matrix), bits(&b.matrix));
    assert_eq!(a.max_asymmetry.to_bits(), b.max_asymmetry.to_bits());
}

#[test]
fn network_spectrum_satisfies_the_trace_identity() {
    let (s, data) = trained_searcher("T5", 4, 2);
    let rep = net_hessian(&s, &data);
    let spec = eigenspectrum(&rep.matrix, rep.dim).unwrap();
    assert_eq!(spec.top.len(), 12);
    assert!(spec.trace_gap < 1e-8, "trace gap {}", spec.trace_gap);
}
