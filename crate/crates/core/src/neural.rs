//! Fully connected ReLU networks trained with Adam on mean-squared error.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer shapes considered in architecture search.
pub const DEFAULT_ARCHITECTURES: [&[usize]; 7] = [&[], &[2], &[20], &[5, 10], &[10, 10], &[20, 20], &[5, 5]];

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const FULL_BATCH_LIMIT: usize = 1000;
const MINI_BATCH: usize = 128;

/// Dense network; parameters are stored flat, per layer the weight matrix
/// (row-major, `out × in`) followed by the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnnModel {
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub params: Vec<f64>,
}

impl FfnnModel {
    pub fn zeros(input_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut m = Self {
            hidden: hidden.to_vec(),
            input_dim,
            output_dim,
            params: Vec::new(),
        };
        m.params = vec![0.0; m.param_count()];
        Ok(m)
    }

    /// He-style uniform initialization `U(−√(6/fan_in), √(6/fan_in))`, zero biases.
    pub fn random(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(input_dim, hidden, output_dim)?;
        let mut offset = 0;
        for (fan_in, fan_out) in m.layer_dims() {
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut m.params[offset..offset + fan_in * fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(m)
    }

    /// `(in, out)` per layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.output_dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ffnn_forward(self, x)
    }
}

pub fn ffnn_forward(model: &FfnnModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim {
        return Err(Error::shape(model.input_dim, x.len()));
    }
    let dims = model.layer_dims();
    let mut a = x.to_vec();
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &model.params[offset..offset + fan_in * fan_out];
        let b = &model.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        let last = l + 1 == dims.len();
        a = (0..fan_out)
            .map(|o| {
                let z = b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(&a).map(|(p, q)| p * q).sum::<f64>();
                if last { z } else { z.max(0.0) }
            })
            .collect();
        offset += fan_in * fan_out + fan_out;
    }
    Ok(a)
}

fn check_batch(model: &FfnnModel, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::shape(xs.len(), ys.len()));
    }
    for (x, y) in xs.iter().zip(ys) {
        if x.len() != model.input_dim {
            return Err(Error::shape(model.input_dim, x.len()));
        }
        if y.len() != model.output_dim {
            return Err(Error::shape(model.output_dim, y.len()));
        }
    }
    Ok(())
}

/// Mean over samples and outputs of the squared error.
pub fn mse(model: &FfnnModel, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    check_batch(model, xs, ys)?;
    let mut s = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let f = ffnn_forward(model, x)?;
        s += f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(s / (xs.len() * model.output_dim) as f64)
}

/// Loss and exact gradient of [`mse`] with respect to the flat parameters.
/// The ReLU derivative at zero is taken as zero.
pub fn ffnn_gradient(model: &FfnnModel, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let refs: Vec<usize> = (0..xs.len()).collect();
    check_batch(model, xs, ys)?;
    Ok(gradient_on(model, xs, ys, &refs))
}

fn gradient_on(model: &FfnnModel, xs: &[Vec<f64>], ys: &[Vec<f64>], idx: &[usize]) -> (f64, Vec<f64>) {
    let dims = model.layer_dims();
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(i, o) in &dims {
        offsets.push(off);
        off += i * o + o;
    }
    let scale = 1.0 / (idx.len() * model.output_dim) as f64;
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(dims.len() + 1);
    for &s in idx {
        acts.clear();
        acts.push(xs[s].clone());
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &model.params[offsets[l]..offsets[l] + fan_in * fan_out];
            let b = &model.params[offsets[l] + fan_in * fan_out..offsets[l] + fan_in * fan_out + fan_out];
            let prev = &acts[l];
            let last = l + 1 == dims.len();
            let next = (0..fan_out)
                .map(|o| {
                    let z = b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(prev).map(|(p, q)| p * q).sum::<f64>();
                    if last { z } else { z.max(0.0) }
                })
                .collect();
            acts.push(next);
        }
        let out = acts.last().expect("at least one layer");
        let mut delta: Vec<f64> = out.iter().zip(&ys[s]).map(|(f, y)| f - y).collect();
        loss += delta.iter().map(|d| d * d).sum::<f64>();
        delta.iter_mut().for_each(|d| *d *= 2.0 * scale);
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let (wo, bo) = (offsets[l], offsets[l] + fan_in * fan_out);
            let input = &acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[bo + o] += d;
                for (g, a) in grad[wo + o * fan_in..wo + (o + 1) * fan_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let w = &model.params[wo..bo];
                delta = (0..fan_in)
                    .map(|i| {
                        if input[i] > 0.0 {
                            (0..fan_out).map(|o| w[o * fan_in + i] * delta[o]).sum()
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
    }
    (loss * scale, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub max_steps: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainSchedule {
    /// Step budget and patience by total dataset size; full batches up to
    /// 1000 training samples, 128 beyond.
    pub fn for_dataset(total: usize, train_size: usize, seed: u64) -> Self {
        let (max_steps, patience) = if total <= 50 {
            (400_000, 100_000)
        } else if total < 5000 {
            (200_000, 50_000)
        } else {
            (100_000, 20_000)
        };
        Self {
            max_steps,
            patience,
            batch_size: if train_size <= FULL_BATCH_LIMIT { train_size.max(1) } else { MINI_BATCH },
            learning_rate: 1e-3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps, patience and batch size must be positive".into()));
        }
        if self.patience > self.max_steps {
            return Err(Error::Config("patience must not exceed max_steps".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedFfnn {
    pub model: FfnnModel,
    pub best_validation_loss: f64,
    pub initial_validation_loss: f64,
    pub best_step: usize,
    pub steps_run: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
}

/// Adam with early stopping on validation loss; returns the best snapshot.
pub fn ffnn_train(train: Split, validation: Split, hidden: &[usize], schedule: &TrainSchedule) -> Result<TrainedFfnn> {
    schedule.validate()?;
    if train.inputs.is_empty() || validation.inputs.is_empty() {
        return Err(Error::Training("train and validation splits must be nonempty".into()));
    }
    let input_dim = train.inputs[0].len();
    let output_dim = train.targets.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut model = FfnnModel::random(input_dim, hidden, output_dim, &mut rng)?;
    check_batch(&model, train.inputs, train.targets)?;
    check_batch(&model, validation.inputs, validation.targets)?;

    let initial = mse(&model, validation.inputs, validation.targets)?;
    let mut best = (initial, model.params.clone(), 0usize);
    let p = model.params.len();
    let (mut m1, mut m2) = (vec![0.0; p], vec![0.0; p]);
    let n = train.inputs.len();
    let batch = schedule.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut steps = 0;
    for t in 1..=schedule.max_steps {
        let idx: &[usize] = if batch == n {
            &order
        } else {
            if cursor + batch > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            &order[cursor - batch..cursor]
        };
        let (loss, grad) = gradient_on(&model, train.inputs, train.targets, idx);
        if !loss.is_finite() {
            return Err(Error::Training(format!("training loss became non-finite at step {t}")));
        }
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t as i32), 1.0 - ADAM_BETA2.powi(t as i32));
        for i in 0..p {
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * grad[i];
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            model.params[i] -= schedule.learning_rate * (m1[i] / c1) / ((m2[i] / c2).sqrt() + ADAM_EPS);
        }
        steps = t;
        let val = mse(&model, validation.inputs, validation.targets)?;
        if !val.is_finite() {
            return Err(Error::Training(format!("validation loss became non-finite at step {t}")));
        }
        if val < best.0 {
            best = (val, model.params.clone(), t);
        } else if t - best.2 >= schedule.patience {
            break;
        }
    }
    model.params = best.1;
    Ok(TrainedFfnn {
        model,
        best_validation_loss: best.0,
        initial_validation_loss: initial,
        best_step: best.2,
        steps_run: steps,
    })
}

/// Trains every candidate shape (concurrently, candidate `k` seeded with
/// `seed + k`) and keeps the lowest validation loss
/// (earlier candidates win ties).
pub fn ffnn_architecture_search(
    train: Split,
    validation: Split,
    candidates: &[&[usize]],
    schedule: &TrainSchedule,
) -> Result<TrainedFfnn> {
    let runs: Vec<Result<TrainedFfnn>> = candidates
        .par_iter()
        .enumerate()
        .map(|(k, hidden)| {
            let schedule = TrainSchedule {
                seed: schedule.seed.wrapping_add(k as u64),
                ..*schedule
            };
            ffnn_train(train, validation, hidden, &schedule)
        })
        .collect();
    let mut best: Option<TrainedFfnn> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.best_validation_loss < b.best_validation_loss) {
            best = Some(run);
        }
    }
    best.ok_or_else(|| Error::Training("no architecture candidates".into()))
}
