//! Bi-level search optimization: alternating updates of the shared weights
//! (inner problem, momentum SGD on the training split) and the architecture
//! parameters (outer problem, adaptive-moment steps on the validation split),
//! with first- and second-order architecture gradients.
//!
//! The module also carries two closed-form oracles used by the test suite:
//! a quadratic bi-level family whose exact hypergradient is available through
//! a linear solve, and a scalar model exposing the finite-difference error of
//! the one-step architecture gradient in isolation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{accuracy, minibatches, Dataset, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_solve, matvec};
use crate::rng::RngStream;
use crate::space::{
    discretize, network_forward, ArchBinding, ArchParams, BoundNet, ForwardOpts, Genotype,
    NetWeights, SpaceSpec,
};

// ── configuration ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

/// Hyperparameters of one search run.
///
/// The weight learning rate follows a cosine from `w_lr_max` at epoch 0 to
/// `w_lr_min` at the final epoch. Drop-path ramps linearly as
/// `drop_path_max * epoch / epochs`. `xi = None` ties the virtual-step rate
/// to the current weight learning rate; `Some(v)` pins it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr_max: f64,
    pub w_lr_min: f64,
    pub momentum: f64,
    /// Inner L2 factor on the shared weights, as an explicit loss term.
    pub lambda_w: f64,
    pub alpha_lr: f64,
    /// Coupled decay applied inside the alpha optimizer step.
    pub alpha_l2: f64,
    pub xi: Option<f64>,
    pub order: Order,
    pub drop_path_max: f64,
    pub input_mask_frac: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 50,
            batch_size: 64,
            w_lr_max: 0.025,
            w_lr_min: 0.001,
            momentum: 0.9,
            lambda_w: 3e-4,
            alpha_lr: 3e-4,
            alpha_l2: 1e-3,
            xi: None,
            order: Order::Second,
            drop_path_max: 0.0,
            input_mask_frac: 0.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive".to_string()));
        }
        if self.w_lr_max < 0.0 || self.w_lr_min < 0.0 || self.w_lr_min > self.w_lr_max {
            return Err(Error::config("need 0 <= w_lr_min <= w_lr_max".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)".to_string()));
        }
        if self.lambda_w < 0.0 || self.alpha_lr < 0.0 || self.alpha_l2 < 0.0 {
            return Err(Error::config("regularizers and learning rates must be >= 0".to_string()));
        }
        if let Some(xi) = self.xi {
            if xi < 0.0 {
                return Err(Error::config("xi must be >= 0".to_string()));
            }
            if self.order == Order::Second && xi == 0.0 {
                return Err(Error::config("second-order gradients require xi > 0".to_string()));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path_max) {
            return Err(Error::config("drop_path_max must lie in [0, 1)".to_string()));
        }
        if !(0.0..=1.0).contains(&self.input_mask_frac) {
            return Err(Error::config("input_mask_frac must lie in [0, 1]".to_string()));
        }
        Ok(())
    }

    /// Cosine-annealed weight learning rate at a 0-based epoch.
    pub fn w_lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.w_lr_max;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.w_lr_min
            + 0.5 * (self.w_lr_max - self.w_lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Linearly ramped drop-path probability at a 0-based epoch.
    pub fn drop_path_at(&self, epoch: usize) -> f64 {
        self.drop_path_max * epoch as f64 / self.epochs as f64
    }

    fn train_opts(&self, epoch: usize) -> ForwardOpts {
        ForwardOpts {
            drop_path_p: self.drop_path_at(epoch),
            stem_mask_frac: self.input_mask_frac,
            train_side: true,
        }
    }
}

// ── optimizers ─────────────────────────────────────────────────────────────

/// Momentum SGD over the canonical weight-tensor list:
/// `v <- momentum*v + g`, `w <- w - lr*v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(weights: &NetWeights, momentum: f64) -> Self {
        let velocity = weights.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        MomentumSgd { momentum, velocity }
    }

    pub fn step(&mut self, weights: &mut NetWeights, grads: &[Vec<f64>], lr: f64) {
        for (v, g) in self.velocity.iter_mut().zip(grads) {
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.momentum * *vi + gi;
            }
        }
        weights.axpy(-lr, &self.velocity);
    }
}

/// Adam with coupled L2 (`g <- g + l2*p` before the moment updates).
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    /// The architecture-optimizer variant: betas (0.5, 0.999).
    pub fn new(dim: usize) -> Self {
        Adam { beta1: 0.5, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; dim], v: vec![0.0; dim] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, l2: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] + l2 * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ── losses and gradients ───────────────────────────────────────────────────

/// Training loss graph: cross-entropy plus `lambda_w/2 * sum ||w||^2`.
pub fn inner_loss_graph(
    tape: &mut Tape,
    spec: &SpaceSpec,
    weights: &NetWeights,
    arch: ArchBinding,
    x: &Tensor,
    ys: &[usize],
    lambda_w: f64,
    opts: ForwardOpts,
    rng: &mut RngStream,
) -> Result<(Var, BoundNet)> {
    let net = network_forward(tape, spec, weights, arch, x, opts, rng)?;
    let ce = tape.cross_entropy(net.logits, ys)?;
    let loss = if lambda_w > 0.0 {
        let sq: Vec<Var> =
            net.weight_vars.iter().map(|&v| tape.sq_l2(v)).collect::<Result<_>>()?;
        let total = tape.add_n(&sq)?;
        let reg = tape.scale(total, lambda_w / 2.0)?;
        tape.add(ce, reg)?
    } else {
        ce
    };
    Ok((loss, net))
}

/// Validation loss graph: plain cross-entropy, no training-side regularizers.
pub fn outer_loss_graph(
    tape: &mut Tape,
    spec: &SpaceSpec,
    weights: &NetWeights,
    alpha: &ArchParams,
    x: &Tensor,
    ys: &[usize],
    rng: &mut RngStream,
) -> Result<(Var, BoundNet)> {
    let net = network_forward(
        tape,
        spec,
        weights,
        ArchBinding::Mixture(alpha),
        x,
        ForwardOpts::default(),
        rng,
    )?;
    let ce = tape.cross_entropy(net.logits, ys)?;
    Ok((ce, net))
}

fn weight_grad_vecs(tape: &Tape, grads: &crate::autodiff::Gradients, net: &BoundNet) -> Vec<Vec<f64>> {
    let _ = tape;
    net.weight_vars.iter().map(|&v| grads.wrt(v).data).collect()
}

fn alpha_grad_flat(grads: &crate::autodiff::Gradients, net: &BoundNet) -> Vec<f64> {
    let [a_n, a_r] = net.alpha_vars.expect("mixture binding carries alpha leaves");
    let mut flat = grads.wrt(a_n).data;
    flat.extend(grads.wrt(a_r).data);
    flat
}

fn flat_l2_norm(vecs: &[Vec<f64>]) -> f64 {
    vecs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Training loss value and weight gradients on one batch.
pub fn train_loss_and_grads(
    spec: &SpaceSpec,
    weights: &NetWeights,
    alpha: &ArchParams,
    x: &Tensor,
    ys: &[usize],
    lambda_w: f64,
    opts: ForwardOpts,
    draws: &RngStream,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut rng = draws.clone();
    let (loss, net) = inner_loss_graph(
        &mut tape,
        spec,
        weights,
        ArchBinding::Mixture(alpha),
        x,
        ys,
        lambda_w,
        opts,
        &mut rng,
    )?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    Ok((value, weight_grad_vecs(&tape, &grads, &net)))
}

/// One plain gradient step on the training loss: `w* = w - xi * grad`.
/// The input weights are untouched; momentum plays no part here.
pub fn virtual_step(
    spec: &SpaceSpec,
    weights: &NetWeights,
    alpha: &ArchParams,
    x: &Tensor,
    ys: &[usize],
    lambda_w: f64,
    xi: f64,
    opts: ForwardOpts,
    draws: &RngStream,
) -> Result<NetWeights> {
    let mut out = weights.clone();
    if xi == 0.0 {
        return Ok(out);
    }
    let (_, grads) = train_loss_and_grads(spec, weights, alpha, x, ys, lambda_w, opts, draws)?;
    out.axpy(-xi, &grads);
    Ok(out)
}

/// Architecture gradient of one paired batch, flattened in `ArchParams`
/// order, plus the diagnostics the invariants are stated over.
#[derive(Debug, Clone)]
pub struct ArchGrad {
    pub grad: Vec<f64>,
    /// Finite-difference radius actually used (second order, nonzero norm).
    pub epsilon: Option<f64>,
    /// `||grad_w L_valid(alpha, w*)||_2` when second order.
    pub valid_grad_norm: Option<f64>,
    /// Training-batch gradient evaluations consumed by this call.
    pub train_grad_evals: usize,
    /// Second-order correction skipped because the validation gradient
    /// vanished.
    pub degenerate: bool,
}

/// First order: the validation gradient at the current weights. Second
/// order: the one-step unrolled gradient
/// `grad_alpha L_valid(alpha, w*) - xi/(2 eps) (grad_alpha L_train(alpha, w+)
///  - grad_alpha L_train(alpha, w-))` with `w* = w - xi grad_w L_train`,
/// `w± = w ± eps grad_w L_valid(alpha, w*)`, `eps = 0.01 / ||grad_w
/// L_valid(alpha, w*)||`.
#[allow(clippy::too_many_arguments)]
pub fn arch_gradient(
    spec: &SpaceSpec,
    weights: &NetWeights,
    alpha: &ArchParams,
    train: (&Tensor, &[usize]),
    valid: (&Tensor, &[usize]),
    cfg: &SearchConfig,
    current_w_lr: f64,
    train_opts: ForwardOpts,
    draws_train: &RngStream,
    draws_valid: &RngStream,
) -> Result<ArchGrad> {
    let outer_grad_at = |w: &NetWeights| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let mut rng = draws_valid.clone();
        let (loss, net) = outer_loss_graph(&mut tape, spec, w, alpha, valid.0, valid.1, &mut rng)?;
        let grads = tape.backward(loss)?;
        Ok((alpha_grad_flat(&grads, &net), weight_grad_vecs(&tape, &grads, &net)))
    };

    if cfg.order == Order::First {
        let (grad, _) = outer_grad_at(weights)?;
        return Ok(ArchGrad {
            grad,
            epsilon: None,
            valid_grad_norm: None,
            train_grad_evals: 0,
            degenerate: false,
        });
    }

    let xi = cfg.xi.unwrap_or(current_w_lr);
    if xi <= 0.0 {
        return Err(Error::config("second-order gradients require xi > 0".to_string()));
    }

    // Gradient of the training loss with respect to alpha at given weights,
    // under the same frozen draws as the virtual step.
    let inner_alpha_grad_at = |w: &NetWeights| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = draws_train.clone();
        let (loss, net) = inner_loss_graph(
            &mut tape,
            spec,
            w,
            ArchBinding::Mixture(alpha),
            train.0,
            train.1,
            cfg.lambda_w,
            train_opts,
            &mut rng,
        )?;
        let grads = tape.backward(loss)?;
        Ok(alpha_grad_flat(&grads, &net))
    };

    let mut train_grad_evals = 1;
    let w_star = virtual_step(
        spec, weights, alpha, train.0, train.1, cfg.lambda_w, xi, train_opts, draws_train,
    )?;
    let (outer_alpha, outer_w) = outer_grad_at(&w_star)?;
    let norm = flat_l2_norm(&outer_w);
    if norm == 0.0 {
        return Ok(ArchGrad {
            grad: outer_alpha,
            epsilon: None,
            valid_grad_norm: Some(0.0),
            train_grad_evals,
            degenerate: true,
        });
    }
    let eps = 0.01 / norm;

    let mut w_plus = weights.clone();
    w_plus.axpy(eps, &outer_w);
    let mut w_minus = weights.clone();
    w_minus.axpy(-eps, &outer_w);
    let g_plus = inner_alpha_grad_at(&w_plus)?;
    let g_minus = inner_alpha_grad_at(&w_minus)?;
    train_grad_evals += 2;

    let scale = xi / (2.0 * eps);
    let grad = outer_alpha
        .iter()
        .zip(g_plus.iter().zip(&g_minus))
        .map(|(o, (p, m))| o - scale * (p - m))
        .collect();
    Ok(ArchGrad {
        grad,
        epsilon: Some(eps),
        valid_grad_norm: Some(norm),
        train_grad_evals,
        degenerate: false,
    })
}

/// The unrolled objective `L_valid(alpha, w - xi grad_w L_train(alpha, w))`
/// as a plain number; the outer finite-difference oracle for
/// [`arch_gradient`].
#[allow(clippy::too_many_arguments)]
pub fn unrolled_valid_loss(
    spec: &SpaceSpec,
    weights: &NetWeights,
    alpha: &ArchParams,
    train: (&Tensor, &[usize]),
    valid: (&Tensor, &[usize]),
    lambda_w: f64,
    xi: f64,
    train_opts: ForwardOpts,
    draws_train: &RngStream,
    draws_valid: &RngStream,
) -> Result<f64> {
    let w_star = virtual_step(
        spec, weights, alpha, train.0, train.1, lambda_w, xi, train_opts, draws_train,
    )?;
    let mut tape = Tape::new();
    let mut rng = draws_valid.clone();
    let (loss, _) = outer_loss_graph(&mut tape, spec, &w_star, alpha, valid.0, valid.1, &mut rng)?;
    Ok(tape.value(loss)[0])
}

// ── evaluation ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub error: f64,
}

/// Full-split cross-entropy and accuracy with evaluation-side semantics
/// (no masking, no drop-path).
pub fn eval_split(
    spec: &SpaceSpec,
    weights: &NetWeights,
    arch: ArchBinding,
    split: &Split,
    draws: &RngStream,
) -> Result<EvalMetrics> {
    let (x, ys) = split.full_batch();
    let mut tape = Tape::new();
    let mut rng = draws.clone();
    let net = network_forward(tape_ref(&mut tape), spec, weights, arch, &x, ForwardOpts::default(), &mut rng)?;
    let loss = tape.cross_entropy(net.logits, &ys)?;
    let acc = accuracy(tape.value(net.logits), NUM_CLASSES, &ys);
    Ok(EvalMetrics { loss: tape.value(loss)[0], accuracy: acc, error: 1.0 - acc })
}

fn tape_ref(tape: &mut Tape) -> &mut Tape {
    tape
}

// ── the search driver ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub alpha: ArchParams,
    pub weights: NetWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
    pub w_lr: f64,
    pub xi: f64,
    pub drop_path_p: f64,
    /// Second-order correction skips (vanishing validation gradient) this
    /// epoch.
    pub degenerate_eps_events: usize,
}

/// One search run's mutable state: weights, alpha, optimizers, per-epoch
/// snapshots, and the derived random streams.
pub struct Searcher {
    pub spec: SpaceSpec,
    pub cfg: SearchConfig,
    pub weights: NetWeights,
    pub alpha: ArchParams,
    pub epoch: usize,
    pub snapshots: Vec<Snapshot>,
    sgd: MomentumSgd,
    adam: Adam,
    root: RngStream,
}

impl Searcher {
    pub fn new(spec: SpaceSpec, cfg: SearchConfig) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        let root = RngStream::from_seed(cfg.seed);
        let mut init = root.split("init/weights");
        let weights = NetWeights::init(&spec, &mut init);
        let alpha = ArchParams::zeros(&spec);
        let sgd = MomentumSgd::new(&weights, cfg.momentum);
        let adam = Adam::new(spec.alpha_dim());
        Ok(Searcher { spec, cfg, weights, alpha, epoch: 0, snapshots: Vec::new(), sgd, adam, root })
    }

    pub fn genotype(&self) -> Genotype {
        discretize(&self.spec, &self.alpha, self.spec.keep_per_node)
    }

    /// Restore weights and alpha from a snapshot and reset both optimizers;
    /// the epoch counter is not touched.
    pub fn restore(&mut self, snap: &Snapshot) {
        self.weights = snap.weights.clone();
        self.alpha = snap.alpha.clone();
        self.sgd = MomentumSgd::new(&self.weights, self.cfg.momentum);
        self.adam = Adam::new(self.spec.alpha_dim());
    }

    /// Frozen draw stream for out-of-band evaluations at the current epoch.
    pub fn eval_draws(&self) -> RngStream {
        self.root.split_indexed("eval", self.epoch as u64)
    }

    /// The current weights and alpha as a snapshot.
    pub fn state(&self) -> Snapshot {
        Snapshot { alpha: self.alpha.clone(), weights: self.weights.clone() }
    }

    /// Labeled, indexed stream derived from this run's root; how callers
    /// (curvature probes, auditors) get reproducible draws tied to the run.
    pub fn derived_stream(&self, label: &str, index: u64) -> RngStream {
        self.root.split_indexed(label, index)
    }

    /// Validation metrics of the mixture network.
    pub fn evaluate_valid(&self, data: &Dataset) -> Result<EvalMetrics> {
        eval_split(
            &self.spec,
            &self.weights,
            ArchBinding::Mixture(&self.alpha),
            &data.valid,
            &self.eval_draws(),
        )
    }

    /// Flat gradient of the full-split validation loss with respect to a
    /// flattened alpha, under caller-frozen draws; the curvature probe.
    pub fn valid_alpha_grad(
        &self,
        split: &Split,
        indices: Option<&[usize]>,
        alpha_flat: &[f64],
        draws: &RngStream,
    ) -> Result<Vec<f64>> {
        let alpha = ArchParams::from_flat(&self.spec, alpha_flat);
        let (x, ys) = match indices {
            Some(idx) => split.batch(idx),
            None => split.full_batch(),
        };
        let mut tape = Tape::new();
        let mut rng = draws.clone();
        let (loss, net) =
            outer_loss_graph(&mut tape, &self.spec, &self.weights, &alpha, &x, &ys, &mut rng)?;
        let grads = tape.backward(loss)?;
        Ok(alpha_grad_flat(&grads, &net))
    }

    /// Run one epoch of alternating updates over paired train/valid batches
    /// and push a snapshot of the post-epoch state.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        let e = self.epoch;
        if e >= self.cfg.epochs {
            return Err(Error::config(format!(
                "epoch {e} out of budget {}",
                self.cfg.epochs
            )));
        }
        let w_lr = self.cfg.w_lr_at(e);
        let xi = self.cfg.xi.unwrap_or(w_lr);
        let opts = self.cfg.train_opts(e);
        let estream = self.root.split_indexed("epoch", e as u64);
        let train_batches =
            minibatches(data.train.len(), self.cfg.batch_size, &mut estream.split("shuffle/train"));
        let valid_batches =
            minibatches(data.valid.len(), self.cfg.batch_size, &mut estream.split("shuffle/valid"));

        let mut train_loss_sum = 0.0;
        let mut steps = 0usize;
        let mut degenerate = 0usize;
        for (b, (ti, vi)) in train_batches.iter().zip(&valid_batches).enumerate() {
            let (tx, ty) = data.train.batch(ti);
            let (vx, vy) = data.valid.batch(vi);
            let draws_t = estream.split_indexed("draws/train", b as u64);
            let draws_v = estream.split_indexed("draws/valid", b as u64);

            let ag = arch_gradient(
                &self.spec,
                &self.weights,
                &self.alpha,
                (&tx, &ty),
                (&vx, &vy),
                &self.cfg,
                w_lr,
                opts,
                &draws_t,
                &draws_v,
            )?;
            degenerate += usize::from(ag.degenerate);
            let mut flat = self.alpha.flatten();
            self.adam.step(&mut flat, &ag.grad, self.cfg.alpha_lr, self.cfg.alpha_l2);
            self.alpha = ArchParams::from_flat(&self.spec, &flat);

            let (loss, wgrads) = train_loss_and_grads(
                &self.spec,
                &self.weights,
                &self.alpha,
                &tx,
                &ty,
                self.cfg.lambda_w,
                opts,
                &draws_t,
            )?;
            self.sgd.step(&mut self.weights, &wgrads, w_lr);
            train_loss_sum += loss;
            steps += 1;
        }
        self.check_finite(e)?;

        let valid = eval_split(
            &self.spec,
            &self.weights,
            ArchBinding::Mixture(&self.alpha),
            &data.valid,
            &estream.split("eval"),
        )?;
        self.epoch += 1;
        self.snapshots.push(Snapshot { alpha: self.alpha.clone(), weights: self.weights.clone() });
        Ok(EpochStats {
            epoch: e,
            train_loss: train_loss_sum / steps.max(1) as f64,
            valid_loss: valid.loss,
            valid_acc: valid.accuracy,
            w_lr,
            xi,
            drop_path_p: opts.drop_path_p,
            degenerate_eps_events: degenerate,
        })
    }

    fn check_finite(&self, epoch: usize) -> Result<()> {
        let weights_ok = self.weights.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()));
        let alpha_ok = self.alpha.flatten().iter().all(|v| v.is_finite());
        if weights_ok && alpha_ok {
            Ok(())
        } else {
            Err(Error::non_finite(format!("search state after epoch {epoch}")))
        }
    }
}

// ── retraining a discrete genotype ─────────────────────────────────────────

/// Hyperparameters for training a fixed genotype from scratch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr_max: f64,
    pub w_lr_min: f64,
    pub momentum: f64,
    pub lambda_w: f64,
    pub drop_path_max: f64,
    pub input_mask_frac: f64,
    pub seed: u64,
}

impl RetrainConfig {
    /// The fixed evaluation protocol: every genotype is judged under the
    /// same regularization (lambda_w 3e-4, one-of-eight input masking,
    /// drop-path max 0.2) regardless of the search-time settings.
    pub fn evaluation(epochs: usize, seed: u64) -> Self {
        RetrainConfig {
            epochs,
            batch_size: 64,
            w_lr_max: 0.025,
            w_lr_min: 0.001,
            momentum: 0.9,
            lambda_w: 3e-4,
            drop_path_max: 0.2,
            input_mask_frac: 0.125,
            seed,
        }
    }

    fn as_search(&self) -> SearchConfig {
        SearchConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            w_lr_max: self.w_lr_max,
            w_lr_min: self.w_lr_min,
            momentum: self.momentum,
            lambda_w: self.lambda_w,
            drop_path_max: self.drop_path_max,
            input_mask_frac: self.input_mask_frac,
            ..SearchConfig::default()
        }
    }
}

/// Train a discrete genotype from fresh init on the training split.
pub fn train_genotype(
    spec: &SpaceSpec,
    genotype: &Genotype,
    data: &Dataset,
    cfg: &RetrainConfig,
) -> Result<NetWeights> {
    let scfg = cfg.as_search();
    scfg.validate()?;
    let root = RngStream::from_seed(cfg.seed);
    let mut init = root.split("retrain/init");
    let mut weights = NetWeights::init(spec, &mut init);
    let mut sgd = MomentumSgd::new(&weights, cfg.momentum);
    for e in 0..cfg.epochs {
        let lr = scfg.w_lr_at(e);
        let opts = scfg.train_opts(e);
        let estream = root.split_indexed("retrain/epoch", e as u64);
        let batches = minibatches(data.train.len(), cfg.batch_size, &mut estream.split("shuffle"));
        for (b, idx) in batches.iter().enumerate() {
            let (x, ys) = data.train.batch(idx);
            let draws = estream.split_indexed("draws", b as u64);
            let mut tape = Tape::new();
            let mut rng = draws.clone();
            let (loss, net) = inner_loss_graph(
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
            let grads = tape.backward(loss)?;
            let wgrads = weight_grad_vecs(&tape, &grads, &net);
            sgd.step(&mut weights, &wgrads, lr);
        }
        let finite = weights.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::non_finite(format!("retrain weights after epoch {e}")));
        }
    }
    Ok(weights)
}

// ── closed-form oracles ────────────────────────────────────────────────────

/// Quadratic bi-level family with an exact hypergradient:
/// inner `f(y, th) = 1/2 th' A th - th' B y`, outer
/// `F(th) = 1/2 (th - target)' C (th - target)`.
pub mod quadratic {
    use super::*;

    #[derive(Debug, Clone)]
    pub struct QuadraticBilevel {
        pub n: usize,
        pub m: usize,
        /// Row-major `n x n`, symmetric positive definite.
        pub a: Vec<f64>,
        /// Row-major `n x m`.
        pub b: Vec<f64>,
        /// Row-major `n x n`, symmetric.
        pub c: Vec<f64>,
        pub target: Vec<f64>,
    }

    impl QuadraticBilevel {
        /// `th*(y) = A^-1 B y`.
        pub fn best_response(&self, y: &[f64]) -> Result<Vec<f64>> {
            let by = self.b_times(y);
            cholesky_solve(&self.a, self.n, &by)
        }

        /// `F(th*(y))`.
        pub fn reduced_objective(&self, y: &[f64]) -> Result<f64> {
            let theta = self.best_response(y)?;
            let d: Vec<f64> = theta.iter().zip(&self.target).map(|(t, g)| t - g).collect();
            let cd = matvec(&self.c, self.n, self.n, &d);
            Ok(0.5 * d.iter().zip(&cd).map(|(a, b)| a * b).sum::<f64>())
        }

        /// Exact hypergradient `dF/dy = B' A^-1 C (th* - target)` from the
        /// implicit-function form; errors on singular `A`.
        pub fn exact_hypergradient(&self, y: &[f64]) -> Result<Vec<f64>> {
            let theta = self.best_response(y)?;
            let d: Vec<f64> = theta.iter().zip(&self.target).map(|(t, g)| t - g).collect();
            let cd = matvec(&self.c, self.n, self.n, &d);
            let z = cholesky_solve(&self.a, self.n, &cd)?;
            Ok(self.bt_times(&z))
        }

        /// The one-step approximation evaluated in closed form:
        /// `xi B' C (w* - target)` with `w* = th0 - xi (A th0 - B y)`.
        pub fn one_step_hypergradient(&self, y: &[f64], theta0: &[f64], xi: f64) -> Vec<f64> {
            let w_star = self.one_step_point(y, theta0, xi);
            let d: Vec<f64> = w_star.iter().zip(&self.target).map(|(t, g)| t - g).collect();
            let cd = matvec(&self.c, self.n, self.n, &d);
            self.bt_times(&cd).iter().map(|v| xi * v).collect()
        }

        /// `||one_step - exact||_2`; the floor this converges to as
        /// `theta0 -> th*` is `||B'(xi I - A^-1) C (th* - target)||`.
        pub fn one_step_error(&self, y: &[f64], theta0: &[f64], xi: f64) -> Result<f64> {
            let exact = self.exact_hypergradient(y)?;
            let approx = self.one_step_hypergradient(y, theta0, xi);
            Ok(linalg::l2_norm(
                &exact.iter().zip(&approx).map(|(a, b)| a - b).collect::<Vec<_>>(),
            ))
        }

        fn one_step_point(&self, y: &[f64], theta0: &[f64], xi: f64) -> Vec<f64> {
            let grad: Vec<f64> = matvec(&self.a, self.n, self.n, theta0)
                .iter()
                .zip(&self.b_times(y))
                .map(|(at, by)| at - by)
                .collect();
            theta0.iter().zip(&grad).map(|(t, g)| t - xi * g).collect()
        }

        fn b_times(&self, y: &[f64]) -> Vec<f64> {
            matvec(&self.b, self.n, self.m, y)
        }

        fn bt_times(&self, v: &[f64]) -> Vec<f64> {
            let mut out = vec![0.0; self.m];
            for i in 0..self.n {
                for j in 0..self.m {
                    out[j] += self.b[i * self.m + j] * v[i];
                }
            }
            out
        }
    }

    /// Random SPD instance (`A = G G' + n I`), random `B`/`C`/target.
    pub fn random_instance(n: usize, m: usize, rng: &mut RngStream) -> QuadraticBilevel {
        let g = rng.normal_vec(n * n);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += g[i * n + k] * g[j * n + k];
                }
                a[i * n + j] = s + if i == j { n as f64 } else { 0.0 };
            }
        }
        let c_half = rng.normal_vec(n * n);
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += c_half[i * n + k] * c_half[j * n + k];
                }
                c[i * n + j] = s;
            }
        }
        QuadraticBilevel { n, m, a, b: rng.normal_vec(n * m), c, target: rng.normal_vec(n) }
    }
}

/// Scalar model isolating the finite-difference step of the one-step
/// gradient: inner `L_train(alpha, th) = alpha (th^2 + c th^4)`, outer
/// `L_valid(th) = (th - 1)^2`. With `c = 0` the inner alpha-gradient is
/// quadratic in `th`, so central differences are exact; `c > 0` produces the
/// O(eps^2) truncation error.
pub mod scalar_model {
    #[derive(Debug, Clone, Copy)]
    pub struct ScalarModel {
        pub c: f64,
    }

    impl ScalarModel {
        pub fn train_loss(&self, alpha: f64, theta: f64) -> f64 {
            alpha * (theta * theta + self.c * theta.powi(4))
        }

        pub fn train_grad_theta(&self, alpha: f64, theta: f64) -> f64 {
            alpha * (2.0 * theta + 4.0 * self.c * theta.powi(3))
        }

        pub fn train_grad_alpha(&self, theta: f64) -> f64 {
            theta * theta + self.c * theta.powi(4)
        }

        /// `d^2 L_train / d alpha d theta`.
        pub fn mixed_second(&self, theta: f64) -> f64 {
            2.0 * theta + 4.0 * self.c * theta.powi(3)
        }

        pub fn valid_grad_theta(theta: f64) -> f64 {
            2.0 * (theta - 1.0)
        }

        /// `th - xi dL_train/dth`.
        pub fn virtual_step(&self, alpha: f64, theta: f64, xi: f64) -> f64 {
            theta - xi * self.train_grad_theta(alpha, theta)
        }

        /// The finite-difference estimate of the correction term
        /// `xi * v * mixed_second(theta)` at radius `eps`, where
        /// `v = dL_valid/dth(w*)`, alongside its exact value.
        pub fn correction_fd_and_exact(
            &self,
            alpha: f64,
            theta: f64,
            xi: f64,
            eps: f64,
        ) -> (f64, f64) {
            let w_star = self.virtual_step(alpha, theta, xi);
            let v = Self::valid_grad_theta(w_star);
            let fd = xi * (self.train_grad_alpha(theta + eps * v)
                - self.train_grad_alpha(theta - eps * v))
                / (2.0 * eps);
            let exact = xi * v * self.mixed_second(theta);
            (fd, exact)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::quadratic::{random_instance, QuadraticBilevel};
    use super::scalar_model::ScalarModel;
    use super::*;
    use crate::data::DataConfig;
    use crate::space::CELL_TYPES;

    fn t5() -> SpaceSpec {
        SpaceSpec::preset("T5").unwrap()
    }

    fn small_data(seed: u64) -> Dataset {
        crate::data::make_spirals(&DataConfig {
            n_train: 96,
            n_valid: 96,
            n_test: 64,
            seed,
            ..DataConfig::default()
        })
    }

    fn tiny_cfg() -> SearchConfig {
        SearchConfig { epochs: 2, batch_size: 32, ..SearchConfig::default() }
    }

    // ── schedules and config ────────────────────────────────────────────

    #[test]
    fn cosine_schedule_hits_both_endpoints() {
        let cfg = SearchConfig { epochs: 50, ..SearchConfig::default() };
        assert_eq!(cfg.w_lr_at(0), 0.025);
        assert!((cfg.w_lr_at(49) - 0.001).abs() < 1e-15);
        assert!(cfg.w_lr_at(25) < cfg.w_lr_at(10));
        let one = SearchConfig { epochs: 1, ..SearchConfig::default() };
        assert_eq!(one.w_lr_at(0), 0.025);
    }

    #[test]
    fn drop_path_ramps_linearly() {
        let cfg =
            SearchConfig { epochs: 10, drop_path_max: 0.2, ..SearchConfig::default() };
        assert_eq!(cfg.drop_path_at(0), 0.0);
        assert!((cfg.drop_path_at(5) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = SearchConfig::default();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SearchConfig::default();
        cfg.xi = Some(0.0);
        cfg.order = Order::Second;
        assert!(cfg.validate().is_err());
        cfg.order = Order::First;
        assert!(cfg.validate().is_ok());
    }

    // ── losses ──────────────────────────────────────────────────────────

    #[test]
    fn l2_term_contributes_exactly_its_formula() {
        let spec = t5();
        let mut rng = RngStream::from_seed(8);
        let weights = NetWeights::init(&spec, &mut rng);
        let alpha = ArchParams::zeros(&spec);
        let x = Tensor::matrix(4, 2, rng.normal_vec(8));
        let ys = vec![0, 1, 0, 1];

        let loss_at = |lambda: f64| -> f64 {
            let mut tape = Tape::new();
            let mut draws = RngStream::from_seed(1);
            let (loss, _) = inner_loss_graph(
                &mut tape,
                &spec,
                &weights,
                ArchBinding::Mixture(&alpha),
                &x,
                &ys,
                lambda,
                ForwardOpts::default(),
                &mut draws,
            )
            .unwrap();
            tape.value(loss)[0]
        };
        let gap = loss_at(3e-4) - loss_at(0.0);
        let expect = 3e-4 / 2.0 * weights.sq_norm();
        assert!((gap - expect).abs() < 1e-12, "gap {gap} vs {expect}");
    }

    #[test]
    fn zero_weights_make_l2_vanish() {
        let spec = t5();
        let mut rng = RngStream::from_seed(9);
        let mut weights = NetWeights::init(&spec, &mut rng);
        for t in weights.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(weights.sq_norm(), 0.0);
    }

    // ── virtual step ────────────────────────────────────────────────────

    #[test]
    fn virtual_step_identity_at_zero_xi_and_norm_identity() {
        let spec = t5();
        let mut rng = RngStream::from_seed(31);
        let weights = NetWeights::init(&spec, &mut rng);
        let alpha = ArchParams::zeros(&spec);
        let x = Tensor::matrix(8, 2, rng.normal_vec(16));
        let ys = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let draws = RngStream::from_seed(2);

        let same = virtual_step(
            &spec, &weights, &alpha, &x, &ys, 0.0, 0.0, ForwardOpts::default(), &draws,
        )
        .unwrap();
        assert_eq!(same, weights);

        let xi = 0.05;
        let stepped = virtual_step(
            &spec, &weights, &alpha, &x, &ys, 0.0, xi, ForwardOpts::default(), &draws,
        )
        .unwrap();
        let (_, grads) = train_loss_and_grads(
            &spec, &weights, &alpha, &x, &ys, 0.0, ForwardOpts::default(), &draws,
        )
        .unwrap();
        let grad_norm = flat_l2_norm(&grads);
        let moved: f64 = stepped
            .tensors()
            .iter()
            .zip(weights.tensors())
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt();
        assert!((moved - xi * grad_norm).abs() < 1e-10, "{moved} vs {}", xi * grad_norm);
    }

    // ── arch gradient ───────────────────────────────────────────────────

    #[test]
    fn first_order_is_plain_valid_gradient_with_no_train_evals() {
        let spec = t5();
        let mut rng = RngStream::from_seed(55);
        let weights = NetWeights::init(&spec, &mut rng);
        let alpha = ArchParams::zeros(&spec);
        let tx = Tensor::matrix(8, 2, rng.normal_vec(16));
        let ty = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let vx = Tensor::matrix(8, 2, rng.normal_vec(16));
        let vy = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let cfg = SearchConfig { order: Order::First, ..SearchConfig::default() };
        let dt = RngStream::from_seed(3);
        let dv = RngStream::from_seed(4);

        let ag = arch_gradient(
            &spec, &weights, &alpha, (&tx, &ty), (&vx, &vy), &cfg, 0.025,
            ForwardOpts::default(), &dt, &dv,
        )
        .unwrap();
        assert_eq!(ag.train_grad_evals, 0);
        assert_eq!(ag.epsilon, None);

        let mut tape = Tape::new();
        let mut draws = dv.clone();
        let (loss, net) =
            outer_loss_graph(&mut tape, &spec, &weights, &alpha, &vx, &vy, &mut draws).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(ag.grad, alpha_grad_flat(&grads, &net));
    }

    #[test]
    fn epsilon_rule_reproduces_the_constant() {
        let spec = t5();
        let mut rng = RngStream::from_seed(56);
        let weights = NetWeights::init(&spec, &mut rng);
        let alpha = ArchParams::zeros(&spec);
        let tx = Tensor::matrix(8, 2, rng.normal_vec(16));
        let ty = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let vx = Tensor::matrix(8, 2, rng.normal_vec(16));
        let vy = vec![1, 0, 1, 0, 1, 0, 1, 0];
        let cfg = SearchConfig::default();

        let ag = arch_gradient(
            &spec, &weights, &alpha, (&tx, &ty), (&vx, &vy), &cfg, 0.025,
            ForwardOpts::default(), &RngStream::from_seed(3), &RngStream::from_seed(4),
        )
        .unwrap();
        assert_eq!(ag.train_grad_evals, 3);
        let eps = ag.epsilon.unwrap();
        let norm = ag.valid_grad_norm.unwrap();
        assert!(((eps * norm - 0.01) / 0.01).abs() < 1e-15, "eps*norm = {}", eps * norm);
    }

    #[test]
    fn second_order_matches_outer_finite_differences() {
        let spec = t5();
        let mut rng = RngStream::from_seed(57);
        let weights = NetWeights::init(&spec, &mut rng);
        let mut alpha = ArchParams::zeros(&spec);
        for ct in CELL_TYPES {
            for row in alpha.cell_mut(ct).iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.uniform_in(-0.5, 0.5);
                }
            }
        }
        let tx = Tensor::matrix(12, 2, rng.normal_vec(24));
        let ty: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let vx = Tensor::matrix(12, 2, rng.normal_vec(24));
        let vy: Vec<usize> = (0..12).map(|i| (i + 1) % 2).collect();
        let cfg = SearchConfig { xi: Some(0.05), ..SearchConfig::default() };
        let dt = RngStream::from_seed(5);
        let dv = RngStream::from_seed(6);

        let ag = arch_gradient(
            &spec, &weights, &alpha, (&tx, &ty), (&vx, &vy), &cfg, 0.025,
            ForwardOpts::default(), &dt, &dv,
        )
        .unwrap();

        let flat = alpha.flatten();
        let h = 1e-5;
        for (i, g) in ag.grad.iter().enumerate() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let phi = |f: &[f64]| -> f64 {
                unrolled_valid_loss(
                    &spec,
                    &weights,
                    &ArchParams::from_flat(&spec, f),
                    (&tx, &ty),
                    (&vx, &vy),
                    cfg.lambda_w,
                    0.05,
                    ForwardOpts::default(),
                    &dt,
                    &dv,
                )
                .unwrap()
            };
            let numeric = (phi(&plus) - phi(&minus)) / (2.0 * h);
            assert!(
                (g - numeric).abs() < 1e-3,
                "coordinate {i}: analytic {g} vs unrolled fd {numeric}"
            );
        }
    }

    // ── epochs ──────────────────────────────────────────────────────────

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let data = small_data(0);
        let cfg = SearchConfig {
            epochs: 1,
            batch_size: 32,
            w_lr_max: 0.0,
            w_lr_min: 0.0,
            alpha_lr: 0.0,
            xi: Some(0.01),
            ..SearchConfig::default()
        };
        let mut s = Searcher::new(t5(), cfg).unwrap();
        let w0 = s.weights.clone();
        let a0 = s.alpha.clone();
        s.run_epoch(&data).unwrap();
        assert_eq!(s.weights, w0);
        assert_eq!(s.alpha, a0);
        assert_eq!(s.epoch, 1);
    }

    #[test]
    fn epochs_are_seed_deterministic() {
        let data = small_data(3);
        let run = || {
            let mut s = Searcher::new(t5(), SearchConfig { seed: 11, ..tiny_cfg() }).unwrap();
            s.run_epoch(&data).unwrap();
            s.run_epoch(&data).unwrap();
            (s.alpha.flatten(), s.weights.sq_norm())
        };
        let (a1, w1) = run();
        let (a2, w2) = run();
        assert_eq!(
            a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(w1.to_bits(), w2.to_bits());
    }

    #[test]
    fn snapshots_accumulate_densely() {
        let data = small_data(5);
        let mut s = Searcher::new(t5(), tiny_cfg()).unwrap();
        s.run_epoch(&data).unwrap();
        assert_eq!(s.snapshots.len(), 1);
        s.run_epoch(&data).unwrap();
        assert_eq!(s.snapshots.len(), 2);
        assert!(s.run_epoch(&data).is_err(), "over budget must fail");
    }

    #[test]
    fn one_epoch_decreases_train_loss_on_separable_data() {
        // A linearly separable micro-problem: class = sign of x1.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..32 {
            let v = (i as f64 + 1.0) / 16.0;
            xs.push([v, 0.3 * v]);
            ys.push(0);
            xs.push([-v, -0.2 * v]);
            ys.push(1);
        }
        let split = Split { xs: xs.clone(), ys: ys.clone() };
        let data = Dataset {
            config: DataConfig::default(),
            train: split.clone(),
            valid: split.clone(),
            test: split,
        };
        let cfg = SearchConfig {
            epochs: 1,
            batch_size: 64,
            w_lr_max: 0.01,
            w_lr_min: 0.01,
            lambda_w: 0.0,
            alpha_lr: 0.0,
            seed: 7,
            ..SearchConfig::default()
        };
        let mut s = Searcher::new(t5(), cfg).unwrap();
        let before = eval_split(
            &s.spec,
            &s.weights,
            ArchBinding::Mixture(&s.alpha),
            &data.train,
            &RngStream::from_seed(0),
        )
        .unwrap();
        s.run_epoch(&data).unwrap();
        let after = eval_split(
            &s.spec,
            &s.weights,
            ArchBinding::Mixture(&s.alpha),
            &data.train,
            &RngStream::from_seed(0),
        )
        .unwrap();
        assert!(
            after.loss < before.loss,
            "train loss must drop: {} -> {}",
            before.loss,
            after.loss
        );
    }

    #[test]
    fn restore_rewinds_parameters() {
        let data = small_data(9);
        let mut s = Searcher::new(t5(), tiny_cfg()).unwrap();
        s.run_epoch(&data).unwrap();
        let snap_alpha = s.snapshots[0].alpha.clone();
        s.run_epoch(&data).unwrap();
        let snap = s.snapshots[0].clone();
        s.restore(&snap);
        assert_eq!(s.alpha, snap_alpha);
    }

    // ── retraining ──────────────────────────────────────────────────────

    #[test]
    fn retrained_genotype_beats_chance_on_spirals() {
        let data = crate::data::make_spirals(&DataConfig { seed: 1, ..DataConfig::default() });
        let genotype: Genotype = "n:LinearTanh@0,LinearTanh@1|r:LinearTanh@0,LinearTanh@1"
            .parse()
            .unwrap();
        let cfg = RetrainConfig::evaluation(25, 5);
        let weights = train_genotype(&t5(), &genotype, &data, &cfg).unwrap();
        let m = eval_split(
            &t5(),
            &weights,
            ArchBinding::Discrete(&genotype),
            &data.valid,
            &RngStream::from_seed(0),
        )
        .unwrap();
        assert!(m.error < 0.45, "valid error {}", m.error);
    }

    #[test]
    fn retraining_is_deterministic() {
        let data = small_data(2);
        let genotype: Genotype = "n:Skip@0,LinearTanh@1|r:AvgPair@0,Skip@1".parse().unwrap();
        let cfg = RetrainConfig::evaluation(5, 3);
        let a = train_genotype(&t5(), &genotype, &data, &cfg).unwrap();
        let b = train_genotype(&t5(), &genotype, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    // ── quadratic oracle ────────────────────────────────────────────────

    #[test]
    fn identity_instance_has_identity_hypergradient() {
        // A=I, B=I, F = 1/2 ||th||^2: th* = y and dF/dy = y.
        let n = 3;
        let mut a = vec![0.0; 9];
        let mut b = vec![0.0; 9];
        let mut c = vec![0.0; 9];
        for i in 0..n {
            a[i * n + i] = 1.0;
            b[i * n + i] = 1.0;
            c[i * n + i] = 1.0;
        }
        let q = QuadraticBilevel { n, m: n, a, b, c, target: vec![0.0; n] };
        let y = vec![0.3, -1.2, 2.0];
        assert_eq!(q.best_response(&y).unwrap(), y);
        let g = q.exact_hypergradient(&y).unwrap();
        for (gi, yi) in g.iter().zip(&y) {
            assert!((gi - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coupling_gives_zero_hypergradient() {
        let mut rng = RngStream::from_seed(70);
        let mut q = random_instance(4, 2, &mut rng);
        q.b.iter_mut().for_each(|v| *v = 0.0);
        let g = q.exact_hypergradient(&[0.4, -0.7]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exact_hypergradient_matches_numeric_differences() {
        let mut rng = RngStream::from_seed(71);
        for trial in 0..5 {
            let q = random_instance(4, 3, &mut rng);
            let y = rng.normal_vec(3);
            let g = q.exact_hypergradient(&y).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                let mut p = y.clone();
                p[i] += h;
                let mut m = y.clone();
                m[i] -= h;
                let numeric =
                    (q.reduced_objective(&p).unwrap() - q.reduced_objective(&m).unwrap())
                        / (2.0 * h);
                assert!(
                    (g[i] - numeric).abs() < 1e-8,
                    "trial {trial} coord {i}: {} vs {numeric}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn singular_inner_matrix_is_rejected() {
        let q = QuadraticBilevel {
            n: 2,
            m: 1,
            a: vec![1.0, 1.0, 1.0, 1.0],
            b: vec![1.0, 0.0],
            c: vec![1.0, 0.0, 0.0, 1.0],
            target: vec![0.0, 0.0],
        };
        assert!(matches!(q.exact_hypergradient(&[1.0]), Err(Error::Singular { .. })));
    }

    #[test]
    fn one_step_error_converges_to_its_floor() {
        let mut rng = RngStream::from_seed(72);
        let q = random_instance(4, 2, &mut rng);
        let y = vec![0.8, -0.4];
        let xi = 0.05;
        let theta_star = q.best_response(&y).unwrap();
        let floor = q.one_step_error(&y, &theta_star, xi).unwrap();

        // Walk theta0 toward theta*; the error must approach the floor.
        let far: Vec<f64> = theta_star.iter().map(|t| t + 2.0).collect();
        let mut last_gap = f64::INFINITY;
        for k in 1..=4 {
            let blend: Vec<f64> = far
                .iter()
                .zip(&theta_star)
                .map(|(f, t)| t + (f - t) * 0.1f64.powi(k))
                .collect();
            let err = q.one_step_error(&y, &blend, xi).unwrap();
            let gap = (err - floor).abs();
            assert!(gap <= last_gap + 1e-12, "gap must shrink: {last_gap} -> {gap}");
            last_gap = gap;
        }
    }

    #[test]
    fn one_step_is_exact_when_xi_inverts_a_scalar_matrix() {
        // A = lambda I and xi = 1/lambda: one step lands exactly on th*,
        // and xi B' C d equals B' A^-1 C d.
        let lambda = 2.5;
        let n = 3;
        let mut rng = RngStream::from_seed(73);
        let mut q = random_instance(n, 2, &mut rng);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = lambda;
        }
        q.a = a;
        let y = vec![1.1, -0.6];
        let theta0 = rng.normal_vec(n);
        let err = q.one_step_error(&y, &theta0, 1.0 / lambda).unwrap();
        assert!(err < 1e-12, "error {err}");
    }

    // ── scalar model ────────────────────────────────────────────────────

    #[test]
    fn scalar_virtual_step_matches_hand_value() {
        // L_train = 1/2 th^2 corresponds to alpha = 1/2, c = 0:
        // th = 2, xi = 0.1 -> 1.8.
        let m = ScalarModel { c: 0.0 };
        let stepped = m.virtual_step(0.5, 2.0, 0.1);
        assert!((stepped - 1.8).abs() < 1e-15);
    }

    #[test]
    fn bilinear_correction_is_exact_at_any_radius() {
        let m = ScalarModel { c: 0.0 };
        for eps in [0.5, 0.05, 0.005] {
            let (fd, exact) = m.correction_fd_and_exact(0.7, 1.3, 0.1, eps);
            assert!((fd - exact).abs() < 1e-12, "eps {eps}: {fd} vs {exact}");
        }
    }

    #[test]
    fn quartic_correction_error_is_second_order_in_eps() {
        let m = ScalarModel { c: 1.0 };
        let (alpha, theta, xi) = (0.7, 1.3, 0.1);
        let err_at = |eps: f64| {
            let (fd, exact) = m.correction_fd_and_exact(alpha, theta, xi, eps);
            (fd - exact).abs()
        };
        let e1 = err_at(0.08);
        let e2 = err_at(0.04);
        assert!(e1 > 0.0);
        let ratio = e1 / e2;
        assert!(ratio >= 3.5, "halving eps gave ratio {ratio}");
        assert!((ratio - 4.0).abs() < 0.2, "expected near-exact quartering, got {ratio}");
    }
}
