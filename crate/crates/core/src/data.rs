//! Two-spiral dataset: generation, splits, label noise, minibatches, and
//! the input-mask regularizer applied to stem features.
//!
//! Points are generated in one seeded pass (train, then valid, then test),
//! so splits are disjoint by construction index and any split can be
//! regenerated bit-for-bit from the config alone.

use std::io::{BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const INPUT_DIM: usize = 2;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Std-dev of Gaussian jitter added to both coordinates.
    pub coord_noise: f64,
    /// Fraction of train and valid labels flipped (test stays clean).
    pub label_noise: f64,
    /// Spiral turns; 1.0 keeps the arms separable by a width-8 net.
    pub turns: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 400,
            n_valid: 400,
            n_test: 2000,
            coord_noise: 0.05,
            label_noise: 0.10,
            turns: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub xs: Vec<[f64; 2]>,
    pub ys: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Materialize the rows at `indices` as a `[b, 2]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * INPUT_DIM);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.xs[i]);
            ys.push(self.ys[i]);
        }
        (Tensor::matrix(indices.len(), INPUT_DIM, data), ys)
    }

    /// The whole split as one batch.
    pub fn full_batch(&self) -> (Tensor, Vec<usize>) {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

/// Generate the dataset described by `config`. Deterministic in the seed.
pub fn make_spirals(config: &DataConfig) -> Dataset {
    let root = RngStream::from_seed(config.seed);
    let mut points = root.split("points");

    let mut gen_split = |n: usize| -> Split {
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % NUM_CLASSES;
            let t = points.uniform();
            let theta = config.turns * 2.0 * std::f64::consts::PI * t
                + class as f64 * std::f64::consts::PI;
            // Radius capped near 1 so Glorot-initialized tanh layers start
            // in their active region.
            let r = 0.25 + 0.85 * t;
            let x = r * theta.cos() + config.coord_noise * points.standard_normal();
            let y = r * theta.sin() + config.coord_noise * points.standard_normal();
            xs.push([x, y]);
            ys.push(class);
        }
        Split { xs, ys }
    };

    let mut train = gen_split(config.n_train);
    let mut valid = gen_split(config.n_valid);
    let test = gen_split(config.n_test);

    flip_labels(&mut train, config.label_noise, root.split("label_noise/train"));
    flip_labels(&mut valid, config.label_noise, root.split("label_noise/valid"));

    Dataset { config: config.clone(), train, valid, test }
}

/// Flip exactly `round(p * n)` distinct labels.
fn flip_labels(split: &mut Split, p: f64, mut rng: RngStream) {
    let n = split.len();
    let flips = (p * n as f64).round() as usize;
    if flips == 0 {
        return;
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    for &i in order.iter().take(flips) {
        split.ys[i] = (split.ys[i] + 1) % NUM_CLASSES;
    }
}

/// Shuffled minibatch index lists; a short final batch is kept.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    assert!(batch_size > 0);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Per-sample circular block mask over stem features: `round(frac * width)`
/// consecutive features (mod width) are zeroed per sample, a fresh start
/// index per row. Returns a flat `[batch * width]` multiplier vector.
pub fn stem_mask_vec(batch: usize, width: usize, frac: f64, rng: &mut RngStream) -> Vec<f64> {
    let block = ((frac * width as f64).round() as usize).min(width);
    let mut mask = vec![1.0; batch * width];
    if block == 0 {
        return mask;
    }
    for b in 0..batch {
        let start = rng.below(width);
        for off in 0..block {
            mask[b * width + (start + off) % width] = 0.0;
        }
    }
    mask
}

/// Mean 0/1 accuracy of row-argmax predictions (ties resolve to the lower
/// class index).
pub fn accuracy(logits: &[f64], classes: usize, ys: &[usize]) -> f64 {
    assert_eq!(logits.len(), ys.len() * classes);
    let mut correct = 0usize;
    for (i, &y) in ys.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / ys.len() as f64
}

// ── persistence ────────────────────────────────────────────────────────────

const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

impl Dataset {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["x1", "x2", "label", "split"])?;
        for (split, name) in [&self.train, &self.valid, &self.test].iter().zip(SPLIT_NAMES) {
            for (x, y) in split.xs.iter().zip(&split.ys) {
                out.write_record([x[0].to_string(), x[1].to_string(), y.to_string(), name.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Read splits back from [`Dataset::write_csv`] output. Float fields are
    /// shortest-round-trip decimal, so the loaded tensors are bit-identical.
    pub fn read_csv(r: impl Read) -> Result<(Split, Split, Split)> {
        let mut splits = [
            Split { xs: vec![], ys: vec![] },
            Split { xs: vec![], ys: vec![] },
            Split { xs: vec![], ys: vec![] },
        ];
        let mut reader = csv::Reader::from_reader(BufReader::new(r));
        for record in reader.records() {
            let record = record?;
            if record.len() != 4 {
                return Err(Error::artifact(format!("dataset row has {} fields", record.len())));
            }
            let parse = |i: usize| -> Result<f64> {
                record[i]
                    .parse()
                    .map_err(|e| Error::artifact(format!("bad float {:?}: {e}", &record[i])))
            };
            let x = [parse(0)?, parse(1)?];
            let y: usize = record[2]
                .parse()
                .map_err(|e| Error::artifact(format!("bad label {:?}: {e}", &record[2])))?;
            let which = SPLIT_NAMES
                .iter()
                .position(|n| *n == &record[3])
                .ok_or_else(|| Error::artifact(format!("unknown split {:?}", &record[3])))?;
            splits[which].xs.push(x);
            splits[which].ys.push(y);
        }
        let [train, valid, test] = splits;
        Ok((train, valid, test))
    }
}

/// Load splits from a CSV file on disk.
pub fn read_dataset_csv(path: &std::path::Path) -> Result<(Split, Split, Split)> {
    Dataset::read_csv(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = DataConfig::default();
        let a = make_spirals(&cfg);
        let b = make_spirals(&cfg);
        assert_eq!(a, b);
        let c = make_spirals(&DataConfig { seed: 1, ..cfg });
        assert_ne!(a.train.xs, c.train.xs);
    }

    #[test]
    fn split_sizes_and_balance() {
        let data = make_spirals(&DataConfig::default());
        assert_eq!(data.train.len(), 400);
        assert_eq!(data.valid.len(), 400);
        assert_eq!(data.test.len(), 2000);
        // Labels are assigned by index parity before noise, so the clean
        // test split is exactly balanced.
        let ones = data.test.ys.iter().sum::<usize>();
        assert_eq!(ones, 1000);
        // Noisy splits stay within +-5% of balance: 40 of 400 flips worst
        // case moves the count by at most 40.
        let train_ones = data.train.ys.iter().sum::<usize>() as f64;
        assert!((train_ones / 400.0 - 0.5).abs() <= 0.05 + 40.0 / 400.0);
    }

    #[test]
    fn label_noise_flips_exactly_forty_of_four_hundred() {
        let cfg = DataConfig::default();
        let noisy = make_spirals(&cfg);
        let clean = make_spirals(&DataConfig { label_noise: 0.0, ..cfg });
        assert_eq!(noisy.train.xs, clean.train.xs);
        let train_flips = noisy.train.ys.iter().zip(&clean.train.ys).filter(|(a, b)| a != b).count();
        let valid_flips = noisy.valid.ys.iter().zip(&clean.valid.ys).filter(|(a, b)| a != b).count();
        assert_eq!(train_flips, 40);
        assert_eq!(valid_flips, 40);
        assert_eq!(noisy.test.ys, clean.test.ys);
    }

    #[test]
    fn minibatch_arithmetic() {
        let mut rng = RngStream::from_seed(4);
        let batches = minibatches(400, 64, &mut rng);
        assert_eq!(batches.len(), 7);
        assert!(batches[..6].iter().all(|b| b.len() == 64));
        assert_eq!(batches[6].len(), 16);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..400).collect::<Vec<_>>());
    }

    #[test]
    fn stem_mask_zeroes_a_circular_block() {
        let mut rng = RngStream::from_seed(9);
        let mask = stem_mask_vec(16, 8, 0.5, &mut rng);
        for row in mask.chunks(8) {
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 4);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 4);
        }
        let empty = stem_mask_vec(4, 8, 0.0, &mut rng);
        assert!(empty.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = vec![2.0, 1.0, 0.0, 3.0, 1.0, 1.0];
        assert_eq!(accuracy(&logits, 2, &[0, 1, 1]), 2.0 / 3.0);
    }

    #[test]
    fn csv_round_trip_is_bit_identical() {
        let data = make_spirals(&DataConfig { n_train: 20, n_valid: 10, n_test: 15, ..Default::default() });
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let (train, valid, test) = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(train, data.train);
        assert_eq!(valid, data.valid);
        assert_eq!(test, data.test);
    }

    #[test]
    fn batch_materialization() {
        let data = make_spirals(&DataConfig::default());
        let (x, ys) = data.train.batch(&[3, 7]);
        assert_eq!(x.shape, vec![2, 2]);
        assert_eq!(x.data[0], data.train.xs[3][0]);
        assert_eq!(ys, vec![data.train.ys[3], data.train.ys[7]]);
    }
}
