//! Experiment orchestration: JSON experiment configs, the exhaustively
//! retrained oracle table, regret and discretization metrics, run
//! directories with CSV/JSON artifacts, regularization sweeps, and the
//! joined report with the curvature-regret correlation.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilevel::{eval_split, train_genotype, RetrainConfig, SearchConfig, Snapshot};
use crate::curvature::{EigTrace, StopRule};
use crate::data::{make_spirals, DataConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, RngStream};
use crate::robustify::{
    darts_ada, darts_es, darts_plain, random_search_ws, robust_darts, AdaConfig, EigSource,
    RegKind, RobustConfig, SearchOutcome, TraceRow,
};
use crate::space::{
    discretize, enumerate_space, ArchBinding, ArchParams, Genotype, SpaceSpec,
};

/// Version stamp every persisted config and result carries.
pub const SCHEMA_VERSION: u32 = 1;

// ── experiment configs ──────────────────────────────────────────────────────

/// Which search procedure a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Darts,
    DartsEs,
    DartsAda,
    RDarts,
    RsWs,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Darts => "darts",
            Strategy::DartsEs => "darts_es",
            Strategy::DartsAda => "darts_ada",
            Strategy::RDarts => "r_darts",
            Strategy::RsWs => "rs_ws",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "darts" => Strategy::Darts,
            "darts_es" => Strategy::DartsEs,
            "darts_ada" => Strategy::DartsAda,
            "r_darts" => Strategy::RDarts,
            "rs_ws" => Strategy::RsWs,
            other => {
                return Err(Error::config(format!(
                    "unknown strategy `{other}` (darts|darts_es|darts_ada|r_darts|rs_ws)"
                )))
            }
        })
    }
}

/// Grid axes for [`sweep`]; exactly one may be non-empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub l2: Vec<f64>,
    pub drop_path: Vec<f64>,
}

/// Everything a run (or sweep) needs, as one versioned JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Space preset name (`T2`/`T3`/`T4`/`T5`).
    pub space: String,
    pub strategy: Strategy,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub search: SearchConfig,
    /// Early-stopping rule for `darts_es` and `darts_ada`.
    #[serde(default)]
    pub stop_rule: StopRule,
    #[serde(default)]
    pub ada: AdaConfig,
    #[serde(default)]
    pub robust: RobustConfig,
    /// Shared-weights random search: genotypes scored after training;
    /// `None` ranks the whole space.
    #[serde(default)]
    pub rs_samples: Option<usize>,
    /// Validation mini-batch size for the per-epoch Hessian.
    #[serde(default = "default_eig_batch")]
    pub eig_batch: usize,
    /// Also dump the magnitude-sorted eigenspectrum per epoch.
    #[serde(default)]
    pub spectrum: bool,
    #[serde(default)]
    pub sweep: SweepAxes,
    /// Seeds for sweep runs; single runs use `search.seed`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Oracle table to compute regret against, when present.
    #[serde(default)]
    pub oracle: Option<PathBuf>,
    /// Default output directory when the CLI gets no `--out`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_eig_batch() -> usize {
    64
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            space: "T5".to_string(),
            strategy: Strategy::Darts,
            data: DataConfig::default(),
            search: SearchConfig::default(),
            stop_rule: StopRule::default(),
            ada: AdaConfig::default(),
            robust: RobustConfig::default(),
            rs_samples: None,
            eig_batch: default_eig_batch(),
            spectrum: false,
            sweep: SweepAxes::default(),
            seeds: Vec::new(),
            oracle: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "config schema version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        SpaceSpec::preset(&self.space)?;
        self.search.validate()?;
        self.stop_rule.validate()?;
        self.ada.validate()?;
        if self.eig_batch == 0 {
            return Err(Error::config("eig_batch must be at least 1".to_string()));
        }
        if self.rs_samples == Some(0) {
            return Err(Error::config("rs_samples must be at least 1".to_string()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The exact bytes a run directory echoes; parsing them back yields an
    /// identical config, so a rerun re-echoes identical bytes.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

// ── the oracle table ────────────────────────────────────────────────────────

/// One genotype's ground-truth errors under the fixed evaluation protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub genotype: String,
    pub mean_valid: f64,
    pub mean_test: f64,
    /// Per-seed errors, in the table's seed order.
    pub valid_errors: Vec<f64>,
    pub test_errors: Vec<f64>,
}

/// Exhaustive genotype -> error map for a finite space; the ground truth
/// regret is measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTable {
    pub retrain_epochs: usize,
    pub seeds: Vec<u64>,
    /// Evaluation-protocol regularization, recorded for provenance.
    pub lambda_w: f64,
    pub drop_path_max: f64,
    pub input_mask_frac: f64,
    pub rows: Vec<OracleRow>,
}

impl OracleTable {
    pub fn min_mean_test(&self) -> f64 {
        self.rows.iter().map(|r| r.mean_test).fold(f64::INFINITY, f64::min)
    }

    /// The global optimum: lowest mean test error, ties broken by genotype
    /// string order (ascending), which makes the argmin unique.
    pub fn optimum(&self) -> &OracleRow {
        self.rows
            .iter()
            .min_by(|a, b| {
                a.mean_test.total_cmp(&b.mean_test).then_with(|| a.genotype.cmp(&b.genotype))
            })
            .expect("oracle tables are never empty")
    }

    pub fn lookup(&self, genotype: &str) -> Option<&OracleRow> {
        self.rows.iter().find(|r| r.genotype == genotype)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["genotype".to_string(), "mean_valid".to_string(), "mean_test".to_string()];
        h.extend(self.seeds.iter().map(|s| format!("valid_s{s}")));
        h.extend(self.seeds.iter().map(|s| format!("test_s{s}")));
        h
    }

    /// Persist as CSV: `# key=value` metadata lines, a header row, one row
    /// per genotype. Floats are written shortest-round-trip, so a
    /// save/load/save cycle is byte-identical.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        writeln!(file, "# retrain_epochs={}", self.retrain_epochs)?;
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(file, "# seeds={}", seeds.join("|"))?;
        writeln!(file, "# lambda_w={}", self.lambda_w)?;
        writeln!(file, "# drop_path_max={}", self.drop_path_max)?;
        writeln!(file, "# input_mask_frac={}", self.input_mask_frac)?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(self.header())?;
        for row in &self.rows {
            let mut rec =
                vec![row.genotype.clone(), row.mean_valid.to_string(), row.mean_test.to_string()];
            rec.extend(row.valid_errors.iter().map(f64::to_string));
            rec.extend(row.test_errors.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load and check against the space: exactly one row per enumerated
    /// genotype, every error in [0, 1], means consistent with the per-seed
    /// columns.
    pub fn load(path: &Path, spec: &SpaceSpec) -> Result<OracleTable> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let mut meta = HashMap::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| -> Result<&String> {
            meta.get(k).ok_or_else(|| Error::artifact(format!("oracle table missing `# {k}=`")))
        };
        let parse_err = |k: &str| Error::artifact(format!("oracle metadata `{k}` is malformed"));
        let retrain_epochs: usize =
            field("retrain_epochs")?.parse().map_err(|_| parse_err("retrain_epochs"))?;
        let seeds: Vec<u64> = field("seeds")?
            .split('|')
            .map(|s| s.parse().map_err(|_| parse_err("seeds")))
            .collect::<Result<_>>()?;
        let lambda_w: f64 = field("lambda_w")?.parse().map_err(|_| parse_err("lambda_w"))?;
        let drop_path_max: f64 =
            field("drop_path_max")?.parse().map_err(|_| parse_err("drop_path_max"))?;
        let input_mask_frac: f64 =
            field("input_mask_frac")?.parse().map_err(|_| parse_err("input_mask_frac"))?;

        let mut table = OracleTable {
            retrain_epochs,
            seeds,
            lambda_w,
            drop_path_max,
            input_mask_frac,
            rows: Vec::new(),
        };
        let k = table.seeds.len();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        let expected = table.header();
        if headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::artifact(format!(
                "oracle header mismatch: expected {expected:?}"
            )));
        }
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 + 2 * k {
                return Err(Error::artifact(format!(
                    "oracle row has {} fields, expected {}",
                    rec.len(),
                    3 + 2 * k
                )));
            }
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| {
                    Error::artifact(format!("oracle field `{}` is not a number", &rec[i]))
                })
            };
            let row = OracleRow {
                genotype: rec[0].to_string(),
                mean_valid: num(1)?,
                mean_test: num(2)?,
                valid_errors: (0..k).map(|i| num(3 + i)).collect::<Result<_>>()?,
                test_errors: (0..k).map(|i| num(3 + k + i)).collect::<Result<_>>()?,
            };
            table.rows.push(row);
        }
        table.validate(spec)?;
        Ok(table)
    }

    fn validate(&self, spec: &SpaceSpec) -> Result<()> {
        let genos = enumerate_space(spec, spec.keep_per_node)?;
        if self.rows.len() != genos.len() {
            return Err(Error::artifact(format!(
                "oracle table has {} rows, space `{}` has {} genotypes",
                self.rows.len(),
                spec.name,
                genos.len()
            )));
        }
        let mut seen: Vec<&str> = self.rows.iter().map(|r| r.genotype.as_str()).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.rows.len() {
            return Err(Error::artifact("oracle table has duplicate genotypes".to_string()));
        }
        for g in &genos {
            let key = g.to_string();
            if self.lookup(&key).is_none() {
                return Err(Error::artifact(format!("oracle table is missing `{key}`")));
            }
        }
        for row in &self.rows {
            let k = self.seeds.len();
            if row.valid_errors.len() != k || row.test_errors.len() != k {
                return Err(Error::artifact(format!(
                    "row `{}` has per-seed columns for the wrong seed count",
                    row.genotype
                )));
            }
            let all = row
                .valid_errors
                .iter()
                .chain(&row.test_errors)
                .chain([&row.mean_valid, &row.mean_test]);
            for &e in all {
                if !(0.0..=1.0).contains(&e) {
                    return Err(Error::artifact(format!(
                        "row `{}` has error {e} outside [0, 1]",
                        row.genotype
                    )));
                }
            }
            let mv = mean(&row.valid_errors);
            let mt = mean(&row.test_errors);
            if (mv - row.mean_valid).abs() > 1e-12 || (mt - row.mean_test).abs() > 1e-12 {
                return Err(Error::artifact(format!(
                    "row `{}` means disagree with per-seed columns",
                    row.genotype
                )));
            }
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Train every genotype in the space from scratch, once per seed, under the
/// given protocol; errors are measured on the validation and test splits.
/// `jobs = 0` uses every core; results are ordered by enumeration index
/// regardless of parallelism.
pub fn build_oracle(
    spec: &SpaceSpec,
    data: &Dataset,
    protocol: &RetrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<OracleTable> {
    if seeds.is_empty() {
        return Err(Error::config("oracle build needs at least one seed".to_string()));
    }
    let genos = enumerate_space(spec, spec.keep_per_node)?;
    let eval_one = |g: &Genotype| -> Result<OracleRow> {
        let mut valid_errors = Vec::with_capacity(seeds.len());
        let mut test_errors = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let mut cfg = protocol.clone();
            cfg.seed = s;
            let weights = train_genotype(spec, g, data, &cfg)?;
            let draws = RngStream::from_seed(s);
            let v = eval_split(spec, &weights, ArchBinding::Discrete(g), &data.valid, &draws)?;
            let t = eval_split(spec, &weights, ArchBinding::Discrete(g), &data.test, &draws)?;
            valid_errors.push(v.error);
            test_errors.push(t.error);
        }
        Ok(OracleRow {
            genotype: g.to_string(),
            mean_valid: mean(&valid_errors),
            mean_test: mean(&test_errors),
            valid_errors,
            test_errors,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let rows: Vec<OracleRow> =
        pool.install(|| genos.par_iter().map(eval_one).collect::<Result<_>>())?;
    let table = OracleTable {
        retrain_epochs: protocol.epochs,
        seeds: seeds.to_vec(),
        lambda_w: protocol.lambda_w,
        drop_path_max: protocol.drop_path_max,
        input_mask_frac: protocol.input_mask_frac,
        rows,
    };
    table.validate(spec)?;
    Ok(table)
}

/// Mean test error of `genotype` minus the table's minimum; never negative.
pub fn test_regret(genotype: &Genotype, table: &OracleTable) -> Result<f64> {
    let key = genotype.to_string();
    let row = table
        .lookup(&key)
        .ok_or_else(|| Error::artifact(format!("genotype `{key}` not in oracle table")))?;
    Ok(row.mean_test - table.min_mean_test())
}

// ── discretization drop ─────────────────────────────────────────────────────

/// The mixture network and its one-hot projection evaluated at the same
/// shared weights on the same draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationDrop {
    pub acc_mixture: f64,
    pub acc_discrete: f64,
    /// `acc_mixture - acc_discrete`; positive means discretizing hurt.
    pub acc_drop: f64,
    pub loss_mixture: f64,
    pub loss_discrete: f64,
    /// `loss_discrete - loss_mixture`.
    pub loss_delta: f64,
}

/// Evaluate a search state on `valid` twice: once with the mixture alpha,
/// once with alpha saturated toward its own discretization. Both runs see
/// identical draws, so an already-saturated alpha reports a drop of zero.
pub fn discretization_drop(
    spec: &SpaceSpec,
    state: &Snapshot,
    valid: &Split,
    draws: &RngStream,
) -> Result<DiscretizationDrop> {
    let mix = eval_split(spec, &state.weights, ArchBinding::Mixture(&state.alpha), valid, draws)?;
    let genotype = discretize(spec, &state.alpha, spec.keep_per_node);
    let sat = ArchParams::saturated(spec, &genotype)?;
    let disc = eval_split(spec, &state.weights, ArchBinding::Mixture(&sat), valid, draws)?;
    Ok(DiscretizationDrop {
        acc_mixture: mix.accuracy,
        acc_discrete: disc.accuracy,
        acc_drop: mix.accuracy - disc.accuracy,
        loss_mixture: mix.loss,
        loss_discrete: disc.loss,
        loss_delta: disc.loss - mix.loss,
    })
}

// ── correlation ─────────────────────────────────────────────────────────────

/// Sample Pearson correlation; needs at least three points and nonzero
/// variance on both sides.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::config(format!(
            "pearson over mismatched lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::config("pearson needs at least 3 points".to_string()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("pearson input".to_string()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::config("pearson over a zero-variance side".to_string()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

// ── run directories ─────────────────────────────────────────────────────────

/// Contents of a run's `result.json`. Strategy-specific fields stay `None`
/// where they do not apply; wall-clock time is deliberately absent so
/// reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub space: String,
    pub seed: u64,
    pub genotype: String,
    pub epochs_run: usize,
    /// Epoch whose snapshot was returned, when early stopping fired.
    pub stop_epoch: Option<usize>,
    pub trigger_epoch: Option<usize>,
    /// Last epoch's dominant eigenvalue (absent for `rs_ws`).
    pub final_lambda_max: Option<f64>,
    /// Present when the config names an oracle table.
    pub test_regret: Option<f64>,
    /// Absent for `rs_ws`, which has no mixture alpha.
    pub discretization: Option<DiscretizationDrop>,
    pub ada_depth: Option<usize>,
    pub ada_reg_values: Option<Vec<f64>>,
    pub winner_reg: Option<f64>,
    pub zero_denominator_events: usize,
}

/// A completed run: its directory plus the parsed result.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub result: RunResult,
}

/// What each strategy hands back to the artifact writer.
struct Driven {
    genotype: Genotype,
    trace: Vec<TraceRow>,
    /// (epoch, magnitude-sorted eigenvalues) pairs for spectrum.csv.
    spectra: Vec<(usize, Vec<f64>)>,
    state: Option<Snapshot>,
    stop_epoch: Option<usize>,
    trigger_epoch: Option<usize>,
    ada_depth: Option<usize>,
    ada_reg_values: Option<Vec<f64>>,
    winner_reg: Option<f64>,
    zero_denominator_events: usize,
}

fn spectra_of(eig: &EigTrace) -> Vec<(usize, Vec<f64>)> {
    eig.entries()
        .iter()
        .filter_map(|e| e.spectrum.as_ref().map(|s| (e.epoch, s.clone())))
        .collect()
}

/// Concatenate per-segment traces into one run-level trace with a global
/// epoch counter; spectra are renumbered the same way.
fn concat_segments(segments: &[SearchOutcome]) -> (Vec<TraceRow>, Vec<(usize, Vec<f64>)>) {
    let mut trace = Vec::new();
    let mut spectra = Vec::new();
    let mut offset = 0usize;
    for seg in segments {
        for row in &seg.trace {
            let mut row = row.clone();
            row.epoch += offset;
            trace.push(row);
        }
        for (e, s) in spectra_of(&seg.eig) {
            spectra.push((e + offset, s));
        }
        offset += seg.trace.len();
    }
    (trace, spectra)
}

fn drive_strategy(cfg: &ExperimentConfig, spec: &SpaceSpec, data: &Dataset) -> Result<Driven> {
    let eig = EigSource::Computed { batch_size: cfg.eig_batch, spectrum: cfg.spectrum };
    match cfg.strategy {
        Strategy::Darts => {
            let o = darts_plain(spec, &cfg.search, data, &eig)?;
            Ok(Driven {
                genotype: o.genotype,
                spectra: spectra_of(&o.eig),
                trace: o.trace,
                state: Some(o.state),
                stop_epoch: None,
                trigger_epoch: None,
                ada_depth: None,
                ada_reg_values: None,
                winner_reg: None,
                zero_denominator_events: o.zero_denominator_events,
            })
        }
        Strategy::DartsEs => {
            let o = darts_es(spec, &cfg.search, data, &eig, Some(&cfg.stop_rule))?;
            Ok(Driven {
                genotype: o.genotype,
                spectra: spectra_of(&o.eig),
                trace: o.trace,
                state: Some(o.state),
                stop_epoch: o.stop_epoch,
                trigger_epoch: o.trigger_epoch,
                ada_depth: None,
                ada_reg_values: None,
                winner_reg: None,
                zero_denominator_events: o.zero_denominator_events,
            })
        }
        Strategy::DartsAda => {
            let o = darts_ada(spec, &cfg.search, data, &eig, &cfg.stop_rule, &cfg.ada)?;
            let (trace, spectra) = concat_segments(&o.segments);
            let last = o.segments.last().expect("at least one segment ran");
            Ok(Driven {
                genotype: o.genotype,
                trace,
                spectra,
                state: Some(last.state.clone()),
                stop_epoch: None,
                trigger_epoch: None,
                ada_depth: Some(o.depth),
                ada_reg_values: Some(o.reg_values.clone()),
                winner_reg: None,
                zero_denominator_events: o
                    .segments
                    .iter()
                    .map(|s| s.zero_denominator_events)
                    .sum(),
            })
        }
        Strategy::RDarts => {
            let o = robust_darts(spec, &cfg.search, data, &eig, &cfg.robust)?;
            let winner = &o.runs[o.selection.winner_index];
            Ok(Driven {
                genotype: o.genotype,
                trace: winner.outcome.trace.clone(),
                spectra: spectra_of(&winner.outcome.eig),
                state: Some(winner.outcome.state.clone()),
                stop_epoch: None,
                trigger_epoch: None,
                ada_depth: None,
                ada_reg_values: None,
                winner_reg: Some(o.winner_reg),
                zero_denominator_events: winner.outcome.zero_denominator_events,
            })
        }
        Strategy::RsWs => {
            let all = enumerate_space(spec, spec.keep_per_node)?;
            let samples = cfg.rs_samples.unwrap_or(all.len());
            let o = random_search_ws(spec, &cfg.search, data, samples)?;
            Ok(Driven {
                genotype: o.genotype,
                trace: o.trace,
                spectra: Vec::new(),
                state: None,
                stop_epoch: None,
                trigger_epoch: None,
                ada_depth: None,
                ada_reg_values: None,
                winner_reg: None,
                zero_denominator_events: 0,
            })
        }
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    // An empty trace still gets its header so the artifact is well-formed.
    if rows.is_empty() {
        w.write_record(["epoch", "train_loss", "valid_loss", "valid_acc", "lambda_max",
            "drop_path_p", "l2", "stop_flag"])?;
        let mut inner = w.into_inner().map_err(|e| Error::artifact(e.to_string()))?;
        inner.flush()?;
        return Ok(());
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

fn write_spectra(path: &Path, spectra: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "rank", "value"])?;
    for (epoch, values) in spectra {
        for (i, v) in values.iter().enumerate() {
            w.write_record(&[epoch.to_string(), (i + 1).to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Execute one run into `dir`: echo the config, run the strategy, write
/// `trace.csv` (and `spectrum.csv` when enabled), compute regret against the
/// oracle when configured, and write `result.json`. The directory is
/// created and written to before any compute so an unusable target fails
/// fast.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.canonical_json()?)?;

    let spec = SpaceSpec::preset(&cfg.space)?;
    let oracle = match &cfg.oracle {
        Some(p) => Some(OracleTable::load(p, &spec)?),
        None => None,
    };
    let data = make_spirals(&cfg.data);
    let driven = drive_strategy(cfg, &spec, &data)?;

    write_trace(&dir.join("trace.csv"), &driven.trace)?;
    if cfg.spectrum {
        write_spectra(&dir.join("spectrum.csv"), &driven.spectra)?;
    }

    let regret = match &oracle {
        Some(table) => Some(test_regret(&driven.genotype, table)?),
        None => None,
    };
    let drop = match &driven.state {
        Some(state) => {
            let draws = RngStream::from_seed(derive_seed(cfg.search.seed, "drop/draws", 0));
            Some(discretization_drop(&spec, state, &data.valid, &draws)?)
        }
        None => None,
    };
    let final_lambda =
        driven.trace.last().map(|r| r.lambda_max).filter(|v| v.is_finite());

    let result = RunResult {
        schema_version: SCHEMA_VERSION,
        strategy: cfg.strategy,
        space: cfg.space.clone(),
        seed: cfg.search.seed,
        genotype: driven.genotype.to_string(),
        epochs_run: driven.trace.len(),
        stop_epoch: driven.stop_epoch,
        trigger_epoch: driven.trigger_epoch,
        final_lambda_max: final_lambda,
        test_regret: regret,
        discretization: drop,
        ada_depth: driven.ada_depth,
        ada_reg_values: driven.ada_reg_values,
        winner_reg: driven.winner_reg,
        zero_denominator_events: driven.zero_denominator_events,
    };
    fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    Ok(RunArtifacts { dir: dir.to_path_buf(), result })
}

// ── sweeps ──────────────────────────────────────────────────────────────────

/// One row of a sweep's `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub reg: f64,
    pub seed: u64,
    pub dir: String,
    pub genotype: String,
    pub test_regret: Option<f64>,
    pub final_lambda_max: Option<f64>,
    pub stop_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub summary_path: PathBuf,
}

/// Expand the config's single sweep axis against its seed list, run every
/// cell into its own subdirectory of `base`, and join the results into
/// `summary.csv`. Each subdirectory is a self-contained single-run config.
/// `jobs = 0` uses every core; row order is the (value, seed) grid order
/// regardless of parallelism.
pub fn sweep(cfg: &ExperimentConfig, base: &Path, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let (kind, values): (RegKind, Vec<f64>) =
        match (cfg.sweep.l2.is_empty(), cfg.sweep.drop_path.is_empty()) {
            (false, true) => (RegKind::L2, cfg.sweep.l2.clone()),
            (true, false) => (RegKind::DropPath, cfg.sweep.drop_path.clone()),
            (true, true) => {
                return Err(Error::config("sweep needs a non-empty l2 or drop_path axis"))
            }
            (false, false) => {
                return Err(Error::config("sweep takes one axis at a time".to_string()))
            }
        };
    let seeds = if cfg.seeds.is_empty() { vec![cfg.search.seed] } else { cfg.seeds.clone() };
    let tag = match kind {
        RegKind::L2 => "l2",
        RegKind::DropPath => "drop",
    };

    let mut tasks = Vec::new();
    for &v in &values {
        for &s in &seeds {
            let mut c = cfg.clone();
            c.sweep = SweepAxes::default();
            c.seeds = Vec::new();
            c.out_dir = None;
            c.search.seed = s;
            kind.apply(&mut c.search, v);
            let name = format!("{tag}_{v}_seed_{s}");
            tasks.push((v, s, name, c));
        }
    }

    fs::create_dir_all(base)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let results: Vec<RunArtifacts> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(_, _, name, c)| run(c, &base.join(name)))
            .collect::<Result<_>>()
    })?;

    let rows: Vec<SweepRow> = tasks
        .iter()
        .zip(&results)
        .map(|((v, s, name, _), art)| SweepRow {
            reg: *v,
            seed: *s,
            dir: name.clone(),
            genotype: art.result.genotype.clone(),
            test_regret: art.result.test_regret,
            final_lambda_max: art.result.final_lambda_max,
            stop_epoch: art.result.stop_epoch,
        })
        .collect();

    let summary_path = base.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(SweepOutcome { rows, summary_path })
}

// ── reports ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dir: String,
    pub genotype: String,
    pub test_regret: Option<f64>,
    pub final_lambda_max: Option<f64>,
    /// Stop marker, straight from the run's `result.json`.
    pub stop_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub rows: Vec<ReportRow>,
    /// Artifact files that were absent; reported, never fatal.
    pub missing: Vec<String>,
    /// `(r, sample size)` of Pearson(final lambda_max, test regret) over
    /// runs carrying both; needs three such runs and nonzero variance.
    pub correlation: Option<(f64, usize)>,
}

/// Join run directories into scatter/trace data: one row per completed run,
/// final-epoch eigenvalue from `trace.csv`, stop markers and regret from
/// `result.json`, plus the correlation between curvature and regret.
pub fn report(dirs: &[PathBuf], out: Option<&Path>) -> Result<ReportOutcome> {
    if dirs.is_empty() {
        return Err(Error::config("report needs at least one run directory".to_string()));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for dir in dirs {
        let result_path = dir.join("result.json");
        if !result_path.is_file() {
            missing.push(result_path.display().to_string());
            continue;
        }
        let result: RunResult = serde_json::from_str(&fs::read_to_string(&result_path)?)?;
        let trace_path = dir.join("trace.csv");
        let final_lambda = if trace_path.is_file() {
            read_trace(&trace_path)?.last().map(|r| r.lambda_max).filter(|v| v.is_finite())
        } else {
            missing.push(trace_path.display().to_string());
            None
        };
        rows.push(ReportRow {
            dir: dir.display().to_string(),
            genotype: result.genotype,
            test_regret: result.test_regret,
            final_lambda_max: final_lambda,
            stop_epoch: result.stop_epoch,
        });
    }

    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.final_lambda_max.zip(r.test_regret))
        .collect();
    let correlation = if pairs.len() >= 3 {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        pearson(&xs, &ys).ok().map(|r| (r, pairs.len()))
    } else {
        None
    };

    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(ReportOutcome { rows, missing, correlation })
}

// ── selfcheck ───────────────────────────────────────────────────────────────

/// One line of the built-in oracle battery.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> CheckLine {
    CheckLine { name, pass, detail }
}

/// Run the analytic oracles and cross-checks that need no dataset: the
/// quadratic hypergradient against numeric differentiation, the
/// finite-difference correction's O(eps^2) shrinkage, Jacobi against
/// shifted power iteration, the hand-derived stopping trace, and the pinned
/// correlation value.
pub fn selfcheck() -> Vec<CheckLine> {
    let mut lines = Vec::new();

    // Exact quadratic hypergradient vs central differences of the reduced
    // objective.
    {
        let mut rng = RngStream::from_seed(41);
        let mut worst = 0.0f64;
        let mut ok = true;
        for i in 0..20 {
            let n = 2 + (i % 5); // dims 2..=6
            let m = 2 + (i % 3);
            let q = crate::bilevel::quadratic::random_instance(n, m, &mut rng);
            let y = rng.normal_vec(m);
            let run = || -> Result<f64> {
                let exact = q.exact_hypergradient(&y)?;
                let h = 1e-5;
                let mut err = 0.0f64;
                for j in 0..m {
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[j] += h;
                    ym[j] -= h;
                    let fd = (q.reduced_objective(&yp)? - q.reduced_objective(&ym)?) / (2.0 * h);
                    err = err.max((fd - exact[j]).abs());
                }
                Ok(err)
            };
            match run() {
                Ok(err) => worst = worst.max(err),
                Err(e) => {
                    ok = false;
                    worst = f64::INFINITY;
                    lines.push(check("quadratic_hypergradient", false, format!("{e}")));
                    break;
                }
            }
        }
        if ok {
            lines.push(check(
                "quadratic_hypergradient",
                worst < 1e-8,
                format!("max |exact - fd| = {worst:.3e} over 20 instances (tol 1e-8)"),
            ));
        }
    }

    // The finite-difference correction converges at O(eps^2): halving eps
    // shrinks the error at least 3.5x on the quartic scalar model.
    {
        let model = crate::bilevel::scalar_model::ScalarModel { c: 1.0 };
        let (alpha, theta, xi) = (0.7, 0.9, 0.05);
        let err_at = |eps: f64| {
            let (fd, exact) = model.correction_fd_and_exact(alpha, theta, xi, eps);
            (fd - exact).abs()
        };
        let ratio = err_at(2e-3) / err_at(1e-3);
        lines.push(check(
            "fd_correction_order",
            ratio >= 3.5,
            format!("error ratio on halving eps = {ratio:.3} (needs >= 3.5)"),
        ));
    }

    // Jacobi vs shifted power iteration on random symmetric matrices.
    {
        let mut rng = RngStream::from_seed(42);
        let dim = 12;
        let mut worst = 0.0f64;
        let mut fail: Option<String> = None;
        for _ in 0..100 {
            let mut a = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..=i {
                    let v = rng.standard_normal();
                    a[i * dim + j] = v;
                    a[j * dim + i] = v;
                }
            }
            let jac = crate::curvature::dominant_eigenvalue(&a, dim).map(|d| d.value);
            let pow =
                crate::linalg::power_iteration_max_eig(&a, dim, 10_000, 1e-12, &mut rng);
            match (jac, pow) {
                (Ok(j), Ok(p)) => worst = worst.max((j - p).abs()),
                (j, p) => {
                    fail = Some(format!("solver error: jacobi {j:?}, power {p:?}"));
                    break;
                }
            }
        }
        match fail {
            Some(msg) => lines.push(check("eigen_cross_check", false, msg)),
            None => lines.push(check(
                "eigen_cross_check",
                worst < 1e-6,
                format!("max |jacobi - power| = {worst:.3e} over 100 matrices (tol 1e-6)"),
            )),
        }
    }

    // The hand-derived stopping trace and its non-firing controls.
    {
        let rule = StopRule::default();
        let rising = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let constant = [2.0; 13];
        let decreasing: Vec<f64> = (0..13).map(|i| 13.0 - i as f64).collect();
        let fired = rule.first_trigger(&rising);
        let pass = matches!(
            &fired,
            Ok(Some(t)) if t.trigger_epoch == 10 && t.rollback_epoch == 5
        ) && matches!(rule.first_trigger(&constant), Ok(None))
            && matches!(rule.first_trigger(&decreasing), Ok(None));
        lines.push(check(
            "early_stop_trace",
            pass,
            format!("rising trace -> {fired:?}; constant/decreasing never fire"),
        ));
    }

    // Correlation pinned against a by-hand computation: for xs = 1..5 and
    // ys = (2,4,5,8,10), sums are Sxy = 20, Sxx = 10, Syy = 40.8, so
    // r = 20 / sqrt(408).
    {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 4.0, 5.0, 8.0, 10.0];
        let pinned = 20.0 / 408.0f64.sqrt();
        let pass = match pearson(&xs, &ys) {
            Ok(r) => (r - pinned).abs() < 1e-15,
            Err(_) => false,
        };
        lines.push(check(
            "pearson_pinned",
            pass,
            format!("r = {pinned:.12} reproduced within 1e-15"),
        ));
    }

    lines
}
