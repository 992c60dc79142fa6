//! Curvature probes for the architecture parameters: the validation-loss
//! Hessian with respect to alpha (central differences of the autodiff
//! gradient), its dominant eigenvalue and magnitude-sorted spectrum, trailing
//! averages of the per-epoch eigenvalue trace, and the early-stopping rule
//! driven by that trace.
//!
//! Everything here is pure given a gradient closure; freezing the stochastic
//! draws inside the closure is the caller's contract (clone one stream per
//! evaluation), which makes the Hessian deterministic and symmetric up to
//! truncation error.

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;

// ── the Hessian ─────────────────────────────────────────────────────────────

/// Number of leading magnitude-sorted eigenvalues a spectrum reports.
pub const SPECTRUM_TOP: usize = 30;

/// Default central-difference step: `1e-3 * max(1, ||alpha||_inf)`. Alpha
/// entries stay O(1) during search, so the step stays well scaled.
pub fn default_step(at: &[f64]) -> f64 {
    1e-3 * at.iter().fold(1.0_f64, |m, v| m.max(v.abs()))
}

/// A finite-difference Hessian, already symmetrized, with the asymmetry the
/// symmetrization removed.
#[derive(Debug, Clone)]
pub struct HessianReport {
    pub dim: usize,
    /// Row-major `dim x dim`, exactly symmetric.
    pub matrix: Vec<f64>,
    /// Step actually used.
    pub step: f64,
    /// `max_ij |H_ij - H_ji|` before symmetrization.
    pub max_asymmetry: f64,
}

/// Hessian of a scalar objective whose gradient is `grad`, by central
/// differences: column j is `(grad(x + h e_j) - grad(x - h e_j)) / (2h)`.
/// `2 * dim` gradient evaluations; the raw matrix is symmetrized as
/// `(H + H')/2`.
pub fn alpha_hessian<F>(at: &[f64], h: Option<f64>, grad: F) -> Result<HessianReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let dim = at.len();
    if dim == 0 {
        return Err(Error::config("hessian of a zero-dimensional point".to_string()));
    }
    let step = h.unwrap_or_else(|| default_step(at));
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config(format!("hessian step must be positive, got {step}")));
    }

    let mut raw = vec![0.0; dim * dim];
    for j in 0..dim {
        let mut plus = at.to_vec();
        plus[j] += step;
        let mut minus = at.to_vec();
        minus[j] -= step;
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        if gp.len() != dim || gm.len() != dim {
            return Err(Error::config(format!(
                "gradient closure returned length {} for dimension {dim}",
                gp.len().max(gm.len())
            )));
        }
        for i in 0..dim {
            let v = (gp[i] - gm[i]) / (2.0 * step);
            if !v.is_finite() {
                return Err(Error::non_finite(format!("hessian entry ({i}, {j})")));
            }
            raw[i * dim + j] = v;
        }
    }

    let mut max_asymmetry = 0.0_f64;
    let mut matrix = raw.clone();
    for i in 0..dim {
        for j in (i + 1)..dim {
            let a = raw[i * dim + j];
            let b = raw[j * dim + i];
            max_asymmetry = max_asymmetry.max((a - b).abs());
            let m = 0.5 * (a + b);
            matrix[i * dim + j] = m;
            matrix[j * dim + i] = m;
        }
    }
    Ok(HessianReport { dim, matrix, step, max_asymmetry })
}

// ── eigen summaries ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DominantEig {
    /// Largest algebraic eigenvalue.
    pub value: f64,
    /// Its unit eigenvector.
    pub vector: Vec<f64>,
}

/// Largest algebraic eigenvalue of a symmetric matrix via the full Jacobi
/// decomposition (dimensions here are two dozen at most). The independent
/// cross-check route is [`crate::linalg::power_iteration_max_eig`].
pub fn dominant_eigenvalue(h: &[f64], dim: usize) -> Result<DominantEig> {
    let eig = sym_eigen(h, dim)?;
    let (value, vector) = eig.dominant();
    Ok(DominantEig { value, vector })
}

/// Magnitude-sorted leading eigenvalues plus the diagnostics read off the
/// same decomposition.
#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Up to [`SPECTRUM_TOP`] eigenvalues, sorted by `|.|` descending.
    pub top: Vec<f64>,
    /// Negative eigenvalues across the whole spectrum.
    pub negative_count: usize,
    /// `|trace(H) - sum of all eigenvalues|`.
    pub trace_gap: f64,
}

pub fn eigenspectrum(h: &[f64], dim: usize) -> Result<Spectrum> {
    let eig = sym_eigen(h, dim)?;
    let mut top = eig.values_by_magnitude();
    top.truncate(SPECTRUM_TOP);
    let negative_count = eig.values.iter().filter(|v| **v < 0.0).count();
    let trace: f64 = (0..dim).map(|i| h[i * dim + i]).sum();
    let sum: f64 = eig.values.iter().sum();
    Ok(Spectrum { top, negative_count, trace_gap: (trace - sum).abs() })
}

// ── the per-epoch trace ─────────────────────────────────────────────────────

/// One completed epoch's curvature measurement.
#[derive(Debug, Clone)]
pub struct EigEntry {
    pub epoch: usize,
    pub lambda_max: f64,
    /// Which validation mini-batch the Hessian was computed on.
    pub batch_id: u64,
    /// Magnitude-sorted leading eigenvalues, when spectrum dumps are on.
    pub spectrum: Option<Vec<f64>>,
}

/// Append-only per-epoch trace of dominant eigenvalues.
#[derive(Debug, Clone, Default)]
pub struct EigTrace {
    entries: Vec<EigEntry>,
}

impl EigTrace {
    pub fn new() -> Self {
        EigTrace::default()
    }

    /// Entries arrive in epoch order, exactly one per epoch.
    pub fn push(&mut self, entry: EigEntry) -> Result<()> {
        if entry.epoch != self.entries.len() {
            return Err(Error::config(format!(
                "trace expects epoch {}, got {}",
                self.entries.len(),
                entry.epoch
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[EigEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The raw lambda_max series the stopping rule runs on.
    pub fn lambda_values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.lambda_max).collect()
    }
}

// ── trailing averages and the stopping rule ─────────────────────────────────

/// Trailing mean over the last `k` entries ending at index `i` (fewer when
/// the window sticks out past the start).
pub fn local_average(trace: &[f64], i: usize, k: usize) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::config("local average of an empty trace".to_string()));
    }
    if k == 0 {
        return Err(Error::config("local average needs a window of at least 1".to_string()));
    }
    if i >= trace.len() {
        return Err(Error::config(format!(
            "trace index {i} out of range for length {}",
            trace.len()
        )));
    }
    let lo = (i + 1).saturating_sub(k);
    let window = &trace[lo..=i];
    Ok(window.iter().sum::<f64>() / window.len() as f64)
}

/// Outcome of one stopping-rule evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCheck {
    /// Criterion fired; roll back to this epoch's snapshot.
    Stop { rollback: usize },
    Continue,
    /// The current window averaged to exactly zero; the ratio is undefined,
    /// treated as no-stop. Callers should surface this diagnostic.
    ZeroDenominator,
}

/// The curvature early-stopping rule: at epoch `i`, stop when the trailing
/// average from `k` epochs ago has fallen below `threshold` times the
/// current one, i.e. the smoothed eigenvalue grew by more than
/// `1/threshold` over the window.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopRule {
    pub k: usize,
    pub threshold: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { k: 5, threshold: 0.75 }
    }
}

/// A fired stopping rule: the epoch whose check fired and the epoch whose
/// snapshot to return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trigger {
    pub trigger_epoch: usize,
    pub rollback_epoch: usize,
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("stopping window k must be >= 1".to_string()));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::config("stopping threshold must be positive".to_string()));
        }
        Ok(())
    }

    /// Evaluate the rule at epoch `i` (0-based, `trace[i]` present). Epochs
    /// earlier than `k` never stop: the lagged window does not exist yet.
    pub fn check_at(&self, trace: &[f64], i: usize) -> Result<StopCheck> {
        self.validate()?;
        if i < self.k {
            return Ok(StopCheck::Continue);
        }
        let past = local_average(trace, i - self.k, self.k)?;
        let current = local_average(trace, i, self.k)?;
        if current == 0.0 {
            return Ok(StopCheck::ZeroDenominator);
        }
        if past / current < self.threshold {
            Ok(StopCheck::Stop { rollback: i - self.k })
        } else {
            Ok(StopCheck::Continue)
        }
    }

    /// [`StopRule::check_at`] reduced to the rollback epoch.
    pub fn should_stop(&self, trace: &[f64], i: usize) -> Result<Option<usize>> {
        Ok(match self.check_at(trace, i)? {
            StopCheck::Stop { rollback } => Some(rollback),
            StopCheck::Continue | StopCheck::ZeroDenominator => None,
        })
    }

    /// Scan a completed trace for the earliest epoch the rule would have
    /// fired at.
    pub fn first_trigger(&self, trace: &[f64]) -> Result<Option<Trigger>> {
        for i in 0..trace.len() {
            if let StopCheck::Stop { rollback } = self.check_at(trace, i)? {
                return Ok(Some(Trigger { trigger_epoch: i, rollback_epoch: rollback }));
            }
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::power_iteration_max_eig;
    use crate::rng::RngStream;

    fn planted_m4() -> Vec<f64> {
        vec![
            2.0, -0.5, 0.3, 0.0, //
            -0.5, 1.0, 0.7, -0.2, //
            0.3, 0.7, -1.5, 0.4, //
            0.0, -0.2, 0.4, 0.8,
        ]
    }

    // ── alpha_hessian ─────────────────────────────────────────────────────

    #[test]
    fn quadratic_bowl_gives_identity() {
        // Objective 1/2 ||x||^2, gradient x.
        let at = vec![0.3, -0.7, 1.2];
        let rep = alpha_hessian(&at, None, |x| Ok(x.to_vec())).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((rep.matrix[i * 3 + j] - expect).abs() < 1e-6);
            }
        }
        assert!(rep.max_asymmetry < 1e-12);
    }

    #[test]
    fn planted_quadratic_recovers_its_matrix() {
        let m = planted_m4();
        let at = vec![0.1, 0.2, -0.3, 0.4];
        let rep = alpha_hessian(&at, None, |x| Ok(crate::linalg::matvec(&m, 4, 4, x))).unwrap();
        for (got, want) in rep.matrix.iter().zip(&m) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn halving_the_step_quarters_the_error() {
        // Gradient x^3 per coordinate: the central-difference diagonal is
        // 3 x^2 + h^2, so the truncation error is exactly h^2.
        let at = vec![0.9, -1.1];
        let grad = |x: &[f64]| Ok(x.iter().map(|v| v.powi(3)).collect());
        let err_at = |h: f64| -> f64 {
            let rep = alpha_hessian(&at, Some(h), grad).unwrap();
            let mut worst = 0.0_f64;
            for (i, v) in at.iter().enumerate() {
                worst = worst.max((rep.matrix[i * 2 + i] - 3.0 * v * v).abs());
            }
            worst
        };
        let e1 = err_at(0.02);
        let e2 = err_at(0.01);
        assert!(e1 > 0.0);
        let ratio = e1 / e2;
        assert!(ratio >= 3.5, "halving h gave ratio {ratio}");
        assert!((ratio - 4.0).abs() < 0.1, "expected near-exact quartering, got {ratio}");
    }

    #[test]
    fn default_step_tracks_the_infinity_norm() {
        assert_eq!(default_step(&[0.1, -0.2]), 1e-3);
        assert_eq!(default_step(&[3.0, -5.0]), 5e-3);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let res = alpha_hessian(&[0.5], None, |_| Ok(vec![f64::NAN]));
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn wrong_gradient_length_is_rejected() {
        let res = alpha_hessian(&[0.5, 0.5], None, |_| Ok(vec![1.0]));
        assert!(res.is_err());
    }

    #[test]
    fn frozen_draws_make_the_hessian_deterministic() {
        // A closure with internal randomness frozen by cloning a stream per
        // call, the way network gradients freeze their draws.
        let base = RngStream::from_seed(40);
        let grad = |x: &[f64]| -> Result<Vec<f64>> {
            let mut rng = base.clone();
            let noise = rng.normal_vec(x.len());
            Ok(x.iter().zip(&noise).map(|(v, n)| v * (1.0 + 0.1 * n)).collect())
        };
        let at = vec![0.4, -0.8, 0.2];
        let a = alpha_hessian(&at, None, grad).unwrap();
        let b = alpha_hessian(&at, None, grad).unwrap();
        let bits = |m: &[f64]| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.matrix), bits(&b.matrix));
    }

    // ── eigen summaries ───────────────────────────────────────────────────

    #[test]
    fn dominant_is_largest_algebraic_not_magnitude() {
        let h = vec![
            3.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, -5.0,
        ];
        let d = dominant_eigenvalue(&h, 3).unwrap();
        assert!((d.value - 3.0).abs() < 1e-12);
        assert!((d.vector[0].abs() - 1.0).abs() < 1e-10);
        assert!(d.vector[1].abs() < 1e-10 && d.vector[2].abs() < 1e-10);
    }

    #[test]
    fn identity_has_unit_dominant_eigenvalue() {
        let mut h = vec![0.0; 16];
        for i in 0..4 {
            h[i * 4 + i] = 1.0;
        }
        let d = dominant_eigenvalue(&h, 4).unwrap();
        assert!((d.value - 1.0).abs() < 1e-12);
        let norm: f64 = d.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
    }

    #[test]
    fn jacobi_and_shifted_power_iteration_agree() {
        let mut rng = RngStream::from_seed(41);
        for trial in 0..20 {
            let n = 12;
            let raw = rng.normal_vec(n * n);
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
                }
            }
            let jac = dominant_eigenvalue(&h, n).unwrap().value;
            let pow =
                power_iteration_max_eig(&h, n, 200_000, 1e-14, &mut rng.split("start")).unwrap();
            assert!((jac - pow).abs() < 1e-6, "trial {trial}: jacobi {jac} vs power {pow}");
        }
    }

    #[test]
    fn rayleigh_quotients_never_exceed_the_dominant_value() {
        let mut rng = RngStream::from_seed(42);
        let m = planted_m4();
        let top = dominant_eigenvalue(&m, 4).unwrap().value;
        for _ in 0..50 {
            let mut v = rng.normal_vec(4);
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            let mv = crate::linalg::matvec(&m, 4, 4, &v);
            let rq: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
            assert!(top >= rq - 1e-8, "rayleigh {rq} exceeds lambda_max {top}");
        }
    }

    #[test]
    fn spectrum_sorts_by_magnitude_and_counts_negatives() {
        let h = vec![
            1.0, 0.0, 0.0, //
            0.0, -2.0, 0.0, //
            0.0, 0.0, 0.5,
        ];
        let s = eigenspectrum(&h, 3).unwrap();
        assert_eq!(s.top, vec![-2.0, 1.0, 0.5]);
        assert_eq!(s.negative_count, 1);
        assert!(s.trace_gap < 1e-8);
    }

    #[test]
    fn spectrum_trace_identity_on_random_matrices() {
        let mut rng = RngStream::from_seed(43);
        for _ in 0..10 {
            let n = 12;
            let raw = rng.normal_vec(n * n);
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
                }
            }
            let s = eigenspectrum(&h, n).unwrap();
            assert_eq!(s.top.len(), 12);
            assert!(s.trace_gap < 1e-8, "trace gap {}", s.trace_gap);
        }
    }

    // ── trace bookkeeping ─────────────────────────────────────────────────

    #[test]
    fn trace_enforces_epoch_order() {
        let mut t = EigTrace::new();
        t.push(EigEntry { epoch: 0, lambda_max: 0.5, batch_id: 3, spectrum: None }).unwrap();
        t.push(EigEntry { epoch: 1, lambda_max: 0.7, batch_id: 9, spectrum: None }).unwrap();
        assert!(t.push(EigEntry { epoch: 3, lambda_max: 0.9, batch_id: 1, spectrum: None })
            .is_err());
        assert_eq!(t.lambda_values(), vec![0.5, 0.7]);
        assert_eq!(t.len(), 2);
    }

    // ── local averages ────────────────────────────────────────────────────

    #[test]
    fn constant_trace_averages_to_the_constant() {
        let trace = vec![2.5; 9];
        for i in 0..9 {
            assert_eq!(local_average(&trace, i, 5).unwrap(), 2.5);
        }
    }

    #[test]
    fn trailing_window_example() {
        let trace = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(local_average(&trace, 13, 5).unwrap(), 3.0);
    }

    #[test]
    fn early_indices_truncate_the_window() {
        let trace = vec![1.0, 2.0, 6.0, 100.0];
        assert_eq!(local_average(&trace, 2, 5).unwrap(), 3.0);
        assert_eq!(local_average(&trace, 0, 5).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_average_inputs_error() {
        assert!(local_average(&[], 0, 5).is_err());
        assert!(local_average(&[1.0], 1, 5).is_err());
        assert!(local_average(&[1.0], 0, 0).is_err());
    }

    // ── stopping rule ─────────────────────────────────────────────────────

    #[test]
    fn constant_trace_never_stops() {
        let rule = StopRule::default();
        let trace = vec![1.3; 40];
        assert_eq!(rule.first_trigger(&trace).unwrap(), None);
    }

    #[test]
    fn decreasing_trace_never_stops() {
        let rule = StopRule::default();
        let trace: Vec<f64> = (0..30).map(|i| 10.0 - 0.3 * i as f64).collect();
        assert_eq!(rule.first_trigger(&trace).unwrap(), None);
    }

    #[test]
    fn rising_trace_triggers_at_the_derived_epoch() {
        // Nine flat epochs then growth: the first window pair whose ratio
        // drops below 0.75 is (past mean 1.0, current mean 1.6) at epoch 10,
        // rolling back to epoch 5.
        let rule = StopRule::default();
        let trace = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let trig = rule.first_trigger(&trace).unwrap().unwrap();
        assert_eq!(trig.trigger_epoch, 10);
        assert_eq!(trig.rollback_epoch, 5);
        assert!(trig.rollback_epoch < trig.trigger_epoch);
        // One epoch earlier the ratio is still above threshold.
        assert_eq!(rule.check_at(&trace, 9).unwrap(), StopCheck::Continue);
        assert_eq!(rule.should_stop(&trace, 10).unwrap(), Some(5));
    }

    #[test]
    fn rule_is_inert_before_the_lag_exists() {
        let rule = StopRule::default();
        let trace = vec![1.0, 100.0, 100.0, 100.0, 100.0];
        for i in 0..5 {
            assert_eq!(rule.check_at(&trace, i).unwrap(), StopCheck::Continue);
        }
    }

    #[test]
    fn zero_current_average_is_flagged_not_stopped() {
        let rule = StopRule::default();
        let trace = vec![0.0; 12];
        assert_eq!(rule.check_at(&trace, 11).unwrap(), StopCheck::ZeroDenominator);
        assert_eq!(rule.should_stop(&trace, 11).unwrap(), None);
        assert_eq!(rule.first_trigger(&trace).unwrap(), None);
    }

    #[test]
    fn bad_rule_parameters_error() {
        assert!(StopRule { k: 0, threshold: 0.75 }.check_at(&[1.0], 0).is_err());
        assert!(StopRule { k: 5, threshold: 0.0 }.check_at(&[1.0], 0).is_err());
    }
}
