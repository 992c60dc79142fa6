//! Cross-checks the tape-built network against a plain-`f64`
//! reimplementation that shares none of the autodiff machinery, and checks
//! network-level gradients against central differences.

use robustnas::autodiff::{Tape, Tensor, GRAD_CHECK_H};
use robustnas::data::{stem_mask_vec, INPUT_DIM};
use robustnas::rng::RngStream;
use robustnas::space::{
    network_forward, ArchBinding, ArchParams, CellType, ForwardOpts, Genotype, NetWeights,
    OpKind, SpaceSpec, CELL_TYPES,
};

// ── tape-free reference implementation ─────────────────────────────────────

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = *t.shape.last().unwrap();
    t.data.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn affine(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (wr, wc) = (w.shape[0], w.shape[1]);
    x.iter()
        .map(|row| {
            (0..wc)
                .map(|c| {
                    b.data[c] + (0..wr).map(|r| row[r] * w.data[r * wc + c]).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn apply_op_ref(
    op: OpKind,
    x: &[Vec<f64>],
    w: &Tensor,
    b: &Tensor,
    width: usize,
    rng: &mut RngStream,
) -> Vec<Vec<f64>> {
    match op {
        OpKind::LinearTanh => affine(x, w, b)
            .into_iter()
            .map(|row| row.into_iter().map(f64::tanh).collect())
            .collect(),
        OpKind::Skip => x.to_vec(),
        OpKind::Zero => vec![vec![0.0; width]; x.len()],
        OpKind::Noise => {
            let flat = rng.normal_vec(x.len() * width);
            flat.chunks(width).map(<[f64]>::to_vec).collect()
        }
        OpKind::AvgPair => x
            .iter()
            .map(|row| {
                (0..width).map(|k| 0.5 * (row[k] + row[(k + 1) % width])).collect()
            })
            .collect(),
    }
}

fn scale_rows(x: &mut [Vec<f64>], c: f64) {
    for row in x {
        for v in row {
            *v *= c;
        }
    }
}

enum RefArch<'a> {
    Mixture(&'a ArchParams),
    Discrete(&'a Genotype),
}

/// Mirrors `network_forward`, consuming RNG draws in the same order:
/// stem mask first, then per cell / edge / op (Noise features, then one
/// drop-path coin for every non-Skip op when training).
fn forward_ref(
    spec: &SpaceSpec,
    weights: &NetWeights,
    arch: &RefArch,
    x: &Tensor,
    opts: ForwardOpts,
    rng: &mut RngStream,
) -> Vec<Vec<f64>> {
    let width = spec.topology.width;
    let batch = x.shape[0];
    let mut stem = affine(&rows(x), &weights.stem_w, &weights.stem_b);
    if opts.train_side && opts.stem_mask_frac > 0.0 {
        let mask = stem_mask_vec(batch, width, opts.stem_mask_frac, rng);
        for (i, row) in stem.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= mask[i * width + j];
            }
        }
    }

    let drop_ref = |y: &mut Vec<Vec<f64>>, op: OpKind, rng: &mut RngStream| {
        if !opts.train_side || opts.drop_path_p <= 0.0 || op == OpKind::Skip {
            return;
        }
        let p = opts.drop_path_p;
        if rng.uniform() < p {
            scale_rows(y, 0.0);
        } else {
            scale_rows(y, 1.0 / (1.0 - p));
        }
    };

    let mut cell_out = stem.clone();
    for ct in CELL_TYPES {
        let inputs = match ct {
            CellType::Normal => [stem.clone(), stem.clone()],
            CellType::Reduction => [stem.clone(), cell_out.clone()],
        };
        let lin = &weights.cells[ct.index()].lin;
        let mut node = vec![vec![0.0; width]; batch];
        for edge in spec.topology.edges() {
            let from = &inputs[edge.from];
            match arch {
                RefArch::Mixture(alpha) => {
                    let w = softmax_row(&alpha.cell(ct)[edge.index]);
                    for (o, &op) in spec.ops.iter().enumerate() {
                        let mut y = apply_op_ref(
                            op,
                            from,
                            &lin[edge.index].w,
                            &lin[edge.index].b,
                            width,
                            rng,
                        );
                        drop_ref(&mut y, op, rng);
                        for (acc, yr) in node.iter_mut().zip(&y) {
                            for (a, v) in acc.iter_mut().zip(yr) {
                                *a += w[o] * v;
                            }
                        }
                    }
                }
                RefArch::Discrete(geno) => {
                    if let Some(op) = geno.op_on_edge(ct, edge.index) {
                        let mut y = apply_op_ref(
                            op,
                            from,
                            &lin[edge.index].w,
                            &lin[edge.index].b,
                            width,
                            rng,
                        );
                        drop_ref(&mut y, op, rng);
                        for (acc, yr) in node.iter_mut().zip(&y) {
                            for (a, v) in acc.iter_mut().zip(yr) {
                                *a += v;
                            }
                        }
                    }
                }
            }
        }
        // Single intermediate node: the cell mean is the node itself.
        cell_out = node;
    }
    affine(&cell_out, &weights.head_w, &weights.head_b)
}

fn tape_logits(
    spec: &SpaceSpec,
    weights: &NetWeights,
    arch: ArchBinding,
    x: &Tensor,
    opts: ForwardOpts,
    rng: &mut RngStream,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let net = network_forward(&mut tape, spec, weights, arch, x, opts, rng).unwrap();
    tape.value(net.logits).to_vec()
}

fn assert_close(tape: &[f64], reference: &[Vec<f64>], tol: f64) {
    let flat: Vec<f64> = reference.iter().flatten().copied().collect();
    assert_eq!(tape.len(), flat.len());
    for (i, (a, b)) in tape.iter().zip(&flat).enumerate() {
        assert!((a - b).abs() < tol, "entry {i}: tape {a} vs reference {b}");
    }
}

// ── forward agreement ───────────────────────────────────────────────────────

#[test]
fn mixture_forward_matches_reference_with_noise_ops() {
    let spec = SpaceSpec::preset("T4").unwrap();
    let mut init = RngStream::from_seed(401);
    let weights = NetWeights::init(&spec, &mut init);
    let x = Tensor::matrix(6, INPUT_DIM, init.normal_vec(6 * INPUT_DIM));
    let mut alpha = ArchParams::zeros(&spec);
    for row in alpha.normal.iter_mut().chain(alpha.reduction.iter_mut()) {
        for v in row.iter_mut() {
            *v = init.uniform_in(-1.0, 1.0);
        }
    }

    let draws = RngStream::from_seed(77);
    let got = tape_logits(
        &spec,
        &weights,
        ArchBinding::Mixture(&alpha),
        &x,
        ForwardOpts::default(),
        &mut draws.clone(),
    );
    let want =
        forward_ref(&spec, &weights, &RefArch::Mixture(&alpha), &x, ForwardOpts::default(), &mut draws.clone());
    assert_close(&got, &want, 1e-9);
}

#[test]
fn discrete_forward_matches_reference_on_every_t5_genotype() {
    let spec = SpaceSpec::preset("T5").unwrap();
    let mut init = RngStream::from_seed(402);
    let weights = NetWeights::init(&spec, &mut init);
    let x = Tensor::matrix(4, INPUT_DIM, init.normal_vec(4 * INPUT_DIM));

    for genotype in robustnas::space::enumerate_space(&spec, 2).unwrap() {
        let draws = RngStream::from_seed(5);
        let got = tape_logits(
            &spec,
            &weights,
            ArchBinding::Discrete(&genotype),
            &x,
            ForwardOpts::default(),
            &mut draws.clone(),
        );
        let want = forward_ref(
            &spec,
            &weights,
            &RefArch::Discrete(&genotype),
            &x,
            ForwardOpts::default(),
            &mut draws.clone(),
        );
        assert_close(&got, &want, 1e-9);
    }
}

#[test]
fn training_side_regularizers_match_reference() {
    // Masking, drop-path coins, and noise draws all consume the stream in
    // the same documented order on both implementations.
    let spec = SpaceSpec::preset("T4").unwrap();
    let mut init = RngStream::from_seed(403);
    let weights = NetWeights::init(&spec, &mut init);
    let x = Tensor::matrix(5, INPUT_DIM, init.normal_vec(5 * INPUT_DIM));
    let alpha = ArchParams::zeros(&spec);
    let opts = ForwardOpts { drop_path_p: 0.4, stem_mask_frac: 0.5, train_side: true };

    for seed in [1u64, 2, 3, 4, 5] {
        let draws = RngStream::from_seed(seed);
        let got = tape_logits(
            &spec,
            &weights,
            ArchBinding::Mixture(&alpha),
            &x,
            opts,
            &mut draws.clone(),
        );
        let want =
            forward_ref(&spec, &weights, &RefArch::Mixture(&alpha), &x, opts, &mut draws.clone());
        assert_close(&got, &want, 1e-9);
    }
}

#[test]
fn eval_side_ignores_training_regularizers() {
    let spec = SpaceSpec::preset("T5").unwrap();
    let mut init = RngStream::from_seed(404);
    let weights = NetWeights::init(&spec, &mut init);
    let x = Tensor::matrix(4, INPUT_DIM, init.normal_vec(4 * INPUT_DIM));
    let alpha = ArchParams::zeros(&spec);

    let plain = tape_logits(
        &spec,
        &weights,
        ArchBinding::Mixture(&alpha),
        &x,
        ForwardOpts::default(),
        &mut RngStream::from_seed(1),
    );
    let eval_side = tape_logits(
        &spec,
        &weights,
        ArchBinding::Mixture(&alpha),
        &x,
        ForwardOpts { drop_path_p: 0.9, stem_mask_frac: 0.9, train_side: false },
        &mut RngStream::from_seed(1),
    );
    assert_eq!(plain, eval_side);
}

// ── gradient agreement ──────────────────────────────────────────────────────

/// Cross-entropy of the T5 mixture network as a function of the flat alpha
/// vector, for finite differencing.
fn loss_of_alpha(
    spec: &SpaceSpec,
    weights: &NetWeights,
    x: &Tensor,
    ys: &[usize],
    flat: &Tensor,
) -> f64 {
    let alpha = ArchParams::from_flat(spec, &flat.data);
    let mut tape = Tape::new();
    let mut rng = RngStream::from_seed(0);
    let net = network_forward(
        &mut tape,
        spec,
        weights,
        ArchBinding::Mixture(&alpha),
        x,
        ForwardOpts::default(),
        &mut rng,
    )
    .unwrap();
    let loss = tape.cross_entropy(net.logits, ys).unwrap();
    tape.value(loss)[0]
}

#[test]
fn alpha_gradient_matches_central_differences() {
    let spec = SpaceSpec::preset("T5").unwrap();
    let mut init = RngStream::from_seed(405);
    let weights = NetWeights::init(&spec, &mut init);
    let x = Tensor::matrix(6, INPUT_DIM, init.normal_vec(6 * INPUT_DIM));
    let ys = vec![0, 1, 0, 1, 1, 0];
    let mut alpha = ArchParams::zeros(&spec);
    for row in alpha.normal.iter_mut().chain(alpha.reduction.iter_mut()) {
        for v in row.iter_mut() {
            *v = init.uniform_in(-0.8, 0.8);
        }
    }

    // Analytic gradient from one tape pass.
    let mut tape = Tape::new();
    let mut rng = RngStream::from_seed(0);
    let net = network_forward(
        &mut tape,
        &spec,
        &weights,
        ArchBinding::Mixture(&alpha),
        &x,
        ForwardOpts::default(),
        &mut rng,
    )
    .unwrap();
    let loss = tape.cross_entropy(net.logits, &ys).unwrap();
    let grads = tape.backward(loss).unwrap();
    let [a_n, a_r] = net.alpha_vars.unwrap();
    let mut analytic = grads.wrt(a_n).data;
    analytic.extend(grads.wrt(a_r).data);

    let flat = alpha.flatten();
    assert_eq!(analytic.len(), flat.len());
    for (i, a) in analytic.iter().enumerate() {
        let step = GRAD_CHECK_H * flat[i].abs().max(1.0);
        let mut plus = Tensor::vector(flat.clone());
        plus.data[i] += step;
        let mut minus = Tensor::vector(flat.clone());
        minus.data[i] -= step;
        let n = (loss_of_alpha(&spec, &weights, &x, &ys, &plus)
            - loss_of_alpha(&spec, &weights, &x, &ys, &minus))
            / (2.0 * step);
        let rel = (a - n).abs() / n.abs().max(1.0);
        assert!(rel < 1e-7, "alpha grad {i}: analytic {a} vs numeric {n}");
    }
}

#[test]
fn stem_weight_gradient_matches_central_differences() {
    let spec = SpaceSpec::preset("T5").unwrap();
    let mut init = RngStream::from_seed(406);
    let weights = NetWeights::init(&spec, &mut init);
    let x = Tensor::matrix(5, INPUT_DIM, init.normal_vec(5 * INPUT_DIM));
    let ys = vec![1, 0, 1, 0, 1];
    let alpha = ArchParams::zeros(&spec);

    let loss_of_weights = |w: &NetWeights| -> f64 {
        let mut tape = Tape::new();
        let mut rng = RngStream::from_seed(0);
        let net = network_forward(
            &mut tape,
            &spec,
            w,
            ArchBinding::Mixture(&alpha),
            &x,
            ForwardOpts::default(),
            &mut rng,
        )
        .unwrap();
        let loss = tape.cross_entropy(net.logits, &ys).unwrap();
        tape.value(loss)[0]
    };

    let mut tape = Tape::new();
    let mut rng = RngStream::from_seed(0);
    let net = network_forward(
        &mut tape,
        &spec,
        &weights,
        ArchBinding::Mixture(&alpha),
        &x,
        ForwardOpts::default(),
        &mut rng,
    )
    .unwrap();
    let loss = tape.cross_entropy(net.logits, &ys).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.wrt(net.weight_vars[0]).data;

    for (i, a) in analytic.iter().enumerate() {
        let step = GRAD_CHECK_H * weights.stem_w.data[i].abs().max(1.0);
        let mut plus = weights.clone();
        plus.stem_w.data[i] += step;
        let mut minus = weights.clone();
        minus.stem_w.data[i] -= step;
        let n = (loss_of_weights(&plus) - loss_of_weights(&minus)) / (2.0 * step);
        let rel = (a - n).abs() / n.abs().max(1.0);
        assert!(rel < 1e-7, "stem grad {i}: analytic {a} vs numeric {n}");
    }
}
