//! Robustified search strategies built on the bi-level engine: plain search,
//! early stopping on the curvature trace, adaptive regularization with
//! rollback, multi-regularization search with selection by retraining, and
//! the random-search weight-sharing baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bilevel::{
    eval_split, train_genotype, EvalMetrics, RetrainConfig, SearchConfig, Searcher,
};
use crate::curvature::{
    alpha_hessian, dominant_eigenvalue, eigenspectrum, EigEntry, EigTrace, StopCheck, StopRule,
};
use crate::data::{minibatches, Dataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, RngStream};
use crate::space::{enumerate_space, ArchBinding, Genotype, SpaceSpec};

// ── eigenvalue sources ──────────────────────────────────────────────────────

/// Where a run's per-epoch dominant eigenvalue comes from. The synthetic
/// variants exist so the stopping logic can be driven deterministically in
/// tests without a curvature computation in the loop.
#[derive(Debug, Clone)]
pub enum EigSource {
    /// Finite-difference Hessian on a freshly sampled validation mini-batch
    /// each epoch; optionally keep the magnitude-sorted spectrum.
    Computed { batch_size: usize, spectrum: bool },
    /// Fixed series indexed by within-run epoch; running past its end is an
    /// error.
    Injected(Vec<f64>),
    /// The same value every epoch (never moves the stopping ratio off 1).
    Constant(f64),
}

impl EigSource {
    fn measure(&self, searcher: &Searcher, data: &Dataset, epoch: usize) -> Result<EigEntry> {
        match self {
            EigSource::Computed { batch_size, spectrum } => {
                let batch_stream = searcher.derived_stream("curvature/batch", epoch as u64);
                let draws = searcher.derived_stream("curvature/draws", epoch as u64);
                let indices = {
                    let mut s = batch_stream;
                    minibatches(data.valid.len(), *batch_size, &mut s)
                        .into_iter()
                        .next()
                        .ok_or_else(|| Error::config("empty validation split".to_string()))?
                };
                let at = searcher.alpha.flatten();
                let report = alpha_hessian(&at, None, |af| {
                    searcher.valid_alpha_grad(&data.valid, Some(&indices), af, &draws)
                })?;
                let lambda = dominant_eigenvalue(&report.matrix, report.dim)?.value;
                let spec = if *spectrum {
                    Some(eigenspectrum(&report.matrix, report.dim)?.top)
                } else {
                    None
                };
                Ok(EigEntry { epoch, lambda_max: lambda, batch_id: epoch as u64, spectrum: spec })
            }
            EigSource::Injected(series) => {
                let lambda = *series.get(epoch).ok_or_else(|| {
                    Error::config(format!(
                        "injected eigenvalue series of length {} has no epoch {epoch}",
                        series.len()
                    ))
                })?;
                Ok(EigEntry { epoch, lambda_max: lambda, batch_id: epoch as u64, spectrum: None })
            }
            EigSource::Constant(v) => {
                Ok(EigEntry { epoch, lambda_max: *v, batch_id: epoch as u64, spectrum: None })
            }
        }
    }
}

// ── per-epoch trace rows and run results ────────────────────────────────────

/// One epoch of a search run as written to the trace artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
    pub lambda_max: f64,
    pub drop_path_p: f64,
    pub l2: f64,
    /// True on the epoch whose stopping check fired.
    pub stop_flag: bool,
}

/// Everything one search run produced.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    /// Weights and alpha of the returned model (the rollback snapshot when
    /// the stopping rule fired, the final state otherwise).
    pub state: crate::bilevel::Snapshot,
    /// Epoch whose snapshot the returned genotype was taken from, when the
    /// stopping rule fired.
    pub stop_epoch: Option<usize>,
    /// Epoch at which the rule fired.
    pub trigger_epoch: Option<usize>,
    pub trace: Vec<TraceRow>,
    pub eig: EigTrace,
    pub config: SearchConfig,
    pub seed: u64,
    /// Stopping checks skipped because the current window averaged to zero.
    pub zero_denominator_events: usize,
    /// Wall-clock seconds; informational only, never serialized.
    pub wall_time_s: f64,
}

impl SearchOutcome {
    pub fn lambda_series(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.lambda_max).collect()
    }
}

// ── the shared run loop ─────────────────────────────────────────────────────

/// Drive an existing searcher for up to `budget` epochs, recording the
/// eigenvalue trace and (optionally) applying the stopping rule each epoch.
/// The searcher is left at its final state; rollback is the caller's move.
fn drive(
    searcher: &mut Searcher,
    data: &Dataset,
    budget: usize,
    eig: &EigSource,
    rule: Option<&StopRule>,
) -> Result<(Vec<TraceRow>, EigTrace, Option<crate::curvature::Trigger>, usize)> {
    let mut trace = Vec::with_capacity(budget);
    let mut eig_trace = EigTrace::new();
    let mut zero_denominator = 0usize;

    for e in 0..budget {
        let stats = searcher.run_epoch(data)?;
        let entry = eig.measure(searcher, data, e)?;
        let lambda = entry.lambda_max;
        eig_trace.push(entry)?;
        trace.push(TraceRow {
            epoch: e,
            train_loss: stats.train_loss,
            valid_loss: stats.valid_loss,
            valid_acc: stats.valid_acc,
            lambda_max: lambda,
            drop_path_p: stats.drop_path_p,
            l2: searcher.cfg.lambda_w,
            stop_flag: false,
        });

        if let Some(rule) = rule {
            let series: Vec<f64> = trace.iter().map(|r| r.lambda_max).collect();
            match rule.check_at(&series, e)? {
                StopCheck::Stop { rollback } => {
                    trace[e].stop_flag = true;
                    return Ok((
                        trace,
                        eig_trace,
                        Some(crate::curvature::Trigger {
                            trigger_epoch: e,
                            rollback_epoch: rollback,
                        }),
                        zero_denominator,
                    ));
                }
                StopCheck::ZeroDenominator => zero_denominator += 1,
                StopCheck::Continue => {}
            }
        }
    }
    Ok((trace, eig_trace, None, zero_denominator))
}

// ── plain search and early stopping ─────────────────────────────────────────

/// Plain differentiable search: run the full budget, discretize the final
/// alpha. The eigenvalue trace is recorded but never acted on.
pub fn darts_plain(
    spec: &SpaceSpec,
    cfg: &SearchConfig,
    data: &Dataset,
    eig: &EigSource,
) -> Result<SearchOutcome> {
    let start = Instant::now();
    let mut searcher = Searcher::new(spec.clone(), cfg.clone())?;
    let (trace, eig_trace, _, zero) = drive(&mut searcher, data, cfg.epochs, eig, None)?;
    Ok(SearchOutcome {
        genotype: searcher.genotype(),
        state: searcher.state(),
        stop_epoch: None,
        trigger_epoch: None,
        trace,
        eig: eig_trace,
        config: cfg.clone(),
        seed: cfg.seed,
        zero_denominator_events: zero,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Early-stopped search: after each epoch, evaluate the stopping rule on the
/// eigenvalue trace; on fire, return the genotype discretized from the
/// rollback epoch's snapshot. `rule = None` runs bit-identically to
/// [`darts_plain`].
pub fn darts_es(
    spec: &SpaceSpec,
    cfg: &SearchConfig,
    data: &Dataset,
    eig: &EigSource,
    rule: Option<&StopRule>,
) -> Result<SearchOutcome> {
    let start = Instant::now();
    let mut searcher = Searcher::new(spec.clone(), cfg.clone())?;
    let (trace, eig_trace, trigger, zero) = drive(&mut searcher, data, cfg.epochs, eig, rule)?;
    let (genotype, state, stop_epoch, trigger_epoch) = match trigger {
        Some(t) => {
            let snap = searcher.snapshots[t.rollback_epoch].clone();
            let genotype = crate::space::discretize(spec, &snap.alpha, spec.keep_per_node);
            (genotype, snap, Some(t.rollback_epoch), Some(t.trigger_epoch))
        }
        None => (searcher.genotype(), searcher.state(), None, None),
    };
    Ok(SearchOutcome {
        genotype,
        state,
        stop_epoch,
        trigger_epoch,
        trace,
        eig: eig_trace,
        config: cfg.clone(),
        seed: cfg.seed,
        zero_denominator_events: zero,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

// ── adaptive regularization ─────────────────────────────────────────────────

/// Which knob the adaptive and multi-run strategies scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    L2,
    DropPath,
}

impl RegKind {
    /// Default value ladder for the multi-run strategy.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            RegKind::L2 => vec![3e-4, 9e-4, 27e-4, 81e-4],
            RegKind::DropPath => vec![0.0, 0.2, 0.4, 0.6],
        }
    }

    /// Set this knob on a search config.
    pub fn apply(self, cfg: &mut SearchConfig, value: f64) {
        match self {
            RegKind::L2 => cfg.lambda_w = value,
            RegKind::DropPath => cfg.drop_path_max = value,
        }
    }
}

/// Adaptive-regularization schedule: start at `r`, multiply by `eta` on each
/// rollback, never train with a value above `r_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaConfig {
    pub r: f64,
    pub r_max: f64,
    pub eta: f64,
    pub reg_kind: RegKind,
}

impl Default for AdaConfig {
    fn default() -> Self {
        AdaConfig { r: 3e-4, r_max: 3e-2, eta: 10.0, reg_kind: RegKind::L2 }
    }
}

impl AdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 0.0 && self.r_max >= 0.0 && self.eta > 1.0) {
            return Err(Error::config(
                "adaptive regularization needs r, r_max >= 0 and eta > 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// One adaptive run: every segment it trained, in order.
#[derive(Debug, Clone)]
pub struct AdaOutcome {
    pub genotype: Genotype,
    /// Number of segments run (1 = no adaptation happened).
    pub depth: usize,
    /// Regularization value per segment.
    pub reg_values: Vec<f64>,
    /// Rollback epoch of each segment that fired.
    pub stop_epochs: Vec<usize>,
    pub segments: Vec<SearchOutcome>,
}

/// Search with adaptive regularization: run with the stopping rule; when it
/// fires at epoch `i` (rollback `r = i - k`), restore the rollback snapshot,
/// scale the regularization by `eta`, and continue in a fresh segment with
/// budget `E - (r + 1)` — but only when the scaled value still respects
/// `r_max`; otherwise the current segment keeps training to its full budget
/// with the rule retired. A starting value above `r_max` therefore runs
/// exactly once, unadapted.
pub fn darts_ada(
    spec: &SpaceSpec,
    base: &SearchConfig,
    data: &Dataset,
    eig: &EigSource,
    rule: &StopRule,
    ada: &AdaConfig,
) -> Result<AdaOutcome> {
    ada.validate()?;
    rule.validate()?;

    let mut reg = ada.r;
    let mut budget = base.epochs;
    let mut depth = 0usize;
    let mut reg_values = Vec::new();
    let mut stop_epochs = Vec::new();
    let mut segments = Vec::new();
    let mut resume: Option<crate::bilevel::Snapshot> = None;

    loop {
        depth += 1;
        let mut cfg = base.clone();
        cfg.epochs = budget;
        ada.reg_kind.apply(&mut cfg, reg);
        if depth > 1 {
            cfg.seed = derive_seed(base.seed, "ada", depth as u64);
        }
        reg_values.push(reg);

        let start = Instant::now();
        let mut searcher = Searcher::new(spec.clone(), cfg.clone())?;
        if let Some(snap) = resume.take() {
            searcher.restore(&snap);
        }
        // The rule is armed only while a scaled-up continuation is still
        // admissible; past the cap the segment trains out its budget.
        let armed = reg <= ada.r_max;
        let rule_opt = if armed { Some(rule) } else { None };
        let (mut trace, eig_trace, trigger, zero) =
            drive(&mut searcher, data, budget, eig, rule_opt)?;

        if let Some(t) = trigger {
            let next_reg = reg * ada.eta;
            if next_reg <= ada.r_max {
                let snap = searcher.snapshots[t.rollback_epoch].clone();
                stop_epochs.push(t.rollback_epoch);
                segments.push(SearchOutcome {
                    genotype: crate::space::discretize(
                        spec,
                        &snap.alpha,
                        spec.keep_per_node,
                    ),
                    state: snap.clone(),
                    stop_epoch: Some(t.rollback_epoch),
                    trigger_epoch: Some(t.trigger_epoch),
                    trace,
                    eig: eig_trace,
                    config: cfg.clone(),
                    seed: cfg.seed,
                    zero_denominator_events: zero,
                    wall_time_s: start.elapsed().as_secs_f64(),
                });
                budget -= t.rollback_epoch + 1;
                reg = next_reg;
                resume = Some(snap);
                continue;
            }
            // The scaled value would exceed the cap: ignore the fire and
            // train out the remaining epochs with the rule retired.
            let consumed = trace.len();
            if let Some(row) = trace.last_mut() {
                row.stop_flag = false;
            }
            let mut eig_trace = eig_trace;
            drive_continue(&mut searcher, data, budget, consumed, eig, &mut trace, &mut eig_trace)?;
            segments.push(SearchOutcome {
                genotype: searcher.genotype(),
                state: searcher.state(),
                stop_epoch: None,
                trigger_epoch: Some(t.trigger_epoch),
                trace,
                eig: eig_trace,
                config: cfg.clone(),
                seed: cfg.seed,
                zero_denominator_events: zero,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            break;
        }

        segments.push(SearchOutcome {
            genotype: searcher.genotype(),
            state: searcher.state(),
            stop_epoch: None,
            trigger_epoch: None,
            trace,
            eig: eig_trace,
            config: cfg.clone(),
            seed: cfg.seed,
            zero_denominator_events: zero,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        break;
    }

    let last = segments.last().expect("at least one segment ran");
    Ok(AdaOutcome {
        genotype: last.genotype.clone(),
        depth,
        reg_values,
        stop_epochs,
        segments,
    })
}

/// Continue an interrupted segment from `from_epoch` to `budget` with no
/// stopping rule, appending to the same within-segment epoch numbering.
fn drive_continue(
    searcher: &mut Searcher,
    data: &Dataset,
    budget: usize,
    from_epoch: usize,
    eig: &EigSource,
    trace: &mut Vec<TraceRow>,
    eig_trace: &mut EigTrace,
) -> Result<()> {
    for e in from_epoch..budget {
        let stats = searcher.run_epoch(data)?;
        let entry = eig.measure(searcher, data, e)?;
        let lambda = entry.lambda_max;
        eig_trace.push(entry)?;
        trace.push(TraceRow {
            epoch: e,
            train_loss: stats.train_loss,
            valid_loss: stats.valid_loss,
            valid_acc: stats.valid_acc,
            lambda_max: lambda,
            drop_path_p: stats.drop_path_p,
            l2: searcher.cfg.lambda_w,
            stop_flag: false,
        });
    }
    Ok(())
}

// ── selection by retraining ─────────────────────────────────────────────────

/// A candidate's selection score.
#[derive(Debug, Clone)]
pub struct CandidateScore {
    pub genotype: Genotype,
    pub valid_error: f64,
}

/// Outcome of retraining-based selection.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub winner_index: usize,
    pub scores: Vec<CandidateScore>,
    /// Retraining runs actually performed.
    pub retrain_calls: usize,
}

/// Retrain each candidate from fresh (shared-seed) initialization under the
/// fixed evaluation protocol and pick the lowest validation error; ties go
/// to the earlier candidate, so callers ordering candidates by ascending
/// regularization get the lower value on ties. A single candidate is
/// returned as-is without retraining.
pub fn select_by_retrain(
    spec: &SpaceSpec,
    candidates: &[Genotype],
    data: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<SelectionOutcome> {
    if candidates.is_empty() {
        return Err(Error::config("selection over an empty candidate list".to_string()));
    }
    if candidates.len() == 1 {
        return Ok(SelectionOutcome {
            winner_index: 0,
            scores: vec![CandidateScore { genotype: candidates[0].clone(), valid_error: f64::NAN }],
            retrain_calls: 0,
        });
    }
    let retrain_seed = derive_seed(seed, "select/retrain", 0);
    let cfg = RetrainConfig::evaluation(epochs, retrain_seed);
    let mut scores = Vec::with_capacity(candidates.len());
    for genotype in candidates {
        let weights = train_genotype(spec, genotype, data, &cfg)?;
        let m = eval_split(
            spec,
            &weights,
            ArchBinding::Discrete(genotype),
            &data.valid,
            &RngStream::from_seed(retrain_seed),
        )?;
        scores.push(CandidateScore { genotype: genotype.clone(), valid_error: m.error });
    }
    let winner_index = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.valid_error.total_cmp(&b.1.valid_error))
        .map(|(i, _)| i)
        .expect("nonempty scores");
    Ok(SelectionOutcome { winner_index, scores, retrain_calls: candidates.len() })
}

// ── multi-regularization search ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    pub reg_kind: RegKind,
    /// Regularization value per run, ascending; `None` → the kind's default
    /// four-value ladder.
    pub values: Option<Vec<f64>>,
    pub retrain_epochs: usize,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig { reg_kind: RegKind::L2, values: None, retrain_epochs: 25 }
    }
}

/// One constituent run of the multi-regularization strategy.
#[derive(Debug, Clone)]
pub struct RobustRun {
    pub reg_value: f64,
    pub seed: u64,
    pub outcome: SearchOutcome,
}

#[derive(Debug, Clone)]
pub struct RobustOutcome {
    pub genotype: Genotype,
    pub winner_reg: f64,
    pub runs: Vec<RobustRun>,
    pub selection: SelectionOutcome,
    /// Search runs performed (one per regularization value).
    pub search_calls: usize,
}

/// Run plain search once per regularization value — each with its own
/// derived seed — then pick the winner by retraining every candidate under
/// the fixed evaluation protocol. Ties in validation error resolve to the
/// lower regularization value.
pub fn robust_darts(
    spec: &SpaceSpec,
    base: &SearchConfig,
    data: &Dataset,
    eig: &EigSource,
    rcfg: &RobustConfig,
) -> Result<RobustOutcome> {
    let values = match &rcfg.values {
        Some(v) => v.clone(),
        None => rcfg.reg_kind.default_values(),
    };
    if values.is_empty() {
        return Err(Error::config("multi-run search needs at least one value".to_string()));
    }
    if values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config(
            "regularization values must be ascending so ties pick the lower".to_string(),
        ));
    }

    let mut runs = Vec::with_capacity(values.len());
    for (i, &reg) in values.iter().enumerate() {
        let mut cfg = base.clone();
        rcfg.reg_kind.apply(&mut cfg, reg);
        cfg.seed = derive_seed(base.seed, "robust/run", i as u64);
        let outcome = darts_plain(spec, &cfg, data, eig)?;
        runs.push(RobustRun { reg_value: reg, seed: cfg.seed, outcome });
    }

    let candidates: Vec<Genotype> = runs.iter().map(|r| r.outcome.genotype.clone()).collect();
    let selection =
        select_by_retrain(spec, &candidates, data, rcfg.retrain_epochs, base.seed)?;
    let winner = &runs[selection.winner_index];
    Ok(RobustOutcome {
        genotype: winner.outcome.genotype.clone(),
        winner_reg: winner.reg_value,
        search_calls: runs.len(),
        runs,
        selection,
    })
}

// ── random search with weight sharing ───────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RandomSearchOutcome {
    pub genotype: Genotype,
    /// Shared-weights validation metrics per evaluated genotype, in
    /// evaluation order.
    pub evaluated: Vec<(Genotype, EvalMetrics)>,
    pub trace: Vec<TraceRow>,
}

/// Random-search baseline over the same shared weights: every training batch
/// applies one momentum-SGD step through a uniformly sampled genotype; after
/// the budget, `num_samples` distinct genotypes (sampled without
/// replacement) are ranked by shared-weights validation error and the
/// first minimum wins. With zero epochs the shared weights stay at
/// initialization and the ranking degenerates to scoring random nets.
pub fn random_search_ws(
    spec: &SpaceSpec,
    cfg: &SearchConfig,
    data: &Dataset,
    num_samples: usize,
) -> Result<RandomSearchOutcome> {
    // Zero epochs is a legal degenerate here (no training phase), so the
    // epoch-count check is relaxed relative to a full search config.
    let mut vcfg = cfg.clone();
    vcfg.epochs = vcfg.epochs.max(1);
    vcfg.validate()?;
    let all = enumerate_space(spec, spec.keep_per_node)?;
    if num_samples == 0 || num_samples > all.len() {
        return Err(Error::config(format!(
            "num_samples must be in 1..={}, got {num_samples}",
            all.len()
        )));
    }

    let root = RngStream::from_seed(cfg.seed);
    let mut init = root.split("init/weights");
    let mut weights = crate::space::NetWeights::init(spec, &mut init);
    let mut sgd = crate::bilevel::MomentumSgd::new(&weights, cfg.momentum);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for e in 0..cfg.epochs {
        let lr = cfg.w_lr_at(e);
        let opts = crate::space::ForwardOpts {
            drop_path_p: cfg.drop_path_at(e),
            stem_mask_frac: cfg.input_mask_frac,
            train_side: true,
        };
        let estream = root.split_indexed("epoch", e as u64);
        let batches =
            minibatches(data.train.len(), cfg.batch_size, &mut estream.split("shuffle"));
        let mut arch_rng = estream.split("arch");
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let genotype = &all[arch_rng.below(all.len())];
            let (x, ys) = data.train.batch(idx);
            let draws = estream.split_indexed("draws", b as u64);
            let mut tape = crate::autodiff::Tape::new();
            let mut rng = draws.clone();
            let (loss, net) = crate::bilevel::inner_loss_graph(
                &mut tape,
                spec,
                &weights,
                ArchBinding::Discrete(genotype),
                &x,
                &ys,
                cfg.lambda_w,
                opts,
                &mut rng,
            )?;
            let value = tape.value(loss)[0];
            let grads = tape.backward(loss)?;
            let wgrads: Vec<Vec<f64>> =
                net.weight_vars.iter().map(|&v| grads.wrt(v).data).collect();
            sgd.step(&mut weights, &wgrads, lr);
            loss_sum += value;
        }
        let finite = weights.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::non_finite(format!("shared weights after epoch {e}")));
        }
        trace.push(TraceRow {
            epoch: e,
            train_loss: loss_sum / batches.len().max(1) as f64,
            valid_loss: f64::NAN,
            valid_acc: f64::NAN,
            lambda_max: f64::NAN,
            drop_path_p: opts.drop_path_p,
            l2: cfg.lambda_w,
            stop_flag: false,
        });
    }

    let mut order: Vec<usize> = (0..all.len()).collect();
    root.split("sample").shuffle(&mut order);
    let mut evaluated = Vec::with_capacity(num_samples);
    let eval_draws = root.split("eval");
    for &gi in order.iter().take(num_samples) {
        let m = eval_split(
            spec,
            &weights,
            ArchBinding::Discrete(&all[gi]),
            &data.valid,
            &eval_draws,
        )?;
        evaluated.push((all[gi].clone(), m));
    }
    let best = evaluated
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.error.total_cmp(&b.1 .1.error))
        .map(|(i, _)| i)
        .expect("nonempty evaluations");
    Ok(RandomSearchOutcome { genotype: evaluated[best].0.clone(), evaluated, trace })
}
