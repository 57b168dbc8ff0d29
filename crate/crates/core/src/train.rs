//! End-to-end supervised training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::io::SplitRanges;
use crate::curation::{CuratedDataset, FeatureTable, Sensor, Standardizer};
use crate::error::{Error, Result};
use crate::fusion::{mse_on_tape, Batch, FusionModel, ModelConfig, OutputScaling};
use crate::lstm::Mode;
use crate::tensor::{Matrix, ParamStore, Tape};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters; also the on-disk `key = value` config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of adding it
    /// to the gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub split: [f64; 3],
    pub seed: u64,
    pub window_len: usize,
    pub stride: usize,
    pub history: usize,
    pub bidirectional: bool,
    pub sensors: Vec<Sensor>,
    pub validation_interval: usize,
    /// Validation checks without improvement before stopping; 0 disables.
    pub patience: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub mlp_hidden: Vec<usize>,
    pub peephole: bool,
    /// Training windows re-scored in eval mode for the loss history.
    pub train_probe_windows: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            batch_size: 128,
            max_iterations: 10_000,
            split: [0.8, 0.1, 0.1],
            seed: 0,
            window_len: 10,
            stride: 1,
            history: 1,
            bidirectional: false,
            sensors: vec![Sensor::Rssi, Sensor::Uwb, Sensor::Imu],
            validation_interval: 250,
            patience: 5,
            hidden_dim: 256,
            num_layers: 2,
            dropout: 0.2,
            mlp_hidden: vec![128],
            peephole: true,
            train_probe_windows: 512,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_fractions(&self.split)?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.validation_interval == 0 {
            return Err(Error::Config("validation_interval must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, input_dims: Vec<usize>) -> ModelConfig {
        ModelConfig {
            sensors: self.sensors.clone(),
            input_dims,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            bidirectional: self.bidirectional,
            dropout: self.dropout,
            history: self.history,
            window_len: self.window_len,
            mlp_hidden: self.mlp_hidden.clone(),
            peephole: self.peephole,
        }
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {f:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

/// Moment estimates for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One Adam update from the gradients accumulated in `store`.
///
/// With `decoupled == false` the decay is classic L2: `g ← g + wd·θ`.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decoupled: bool,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match parameters"));
    }
    for p in store.iter() {
        if let Some(i) = p.grad.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in `{}` at entry {i}",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let theta = p.value.as_mut_slice();
        let grad = p.grad.as_slice();
        let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
        for i in 0..theta.len() {
            let mut g = grad[i];
            if !decoupled {
                g += weight_decay * theta[i];
            }
            ms[i] = b1 * ms[i] + (1.0 - b1) * g;
            vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
            let m_hat = ms[i] / c1;
            let v_hat = vs[i] / c2;
            if decoupled {
                theta[i] -= lr * weight_decay * theta[i];
            }
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Contiguous train/val/test blocks in time order.
pub fn split_dataset(num_windows: usize, fractions: [f64; 3]) -> Result<SplitRanges> {
    check_fractions(&fractions)?;
    let n = num_windows as f64;
    let n_train = (fractions[0] * n).round() as usize;
    let n_val = ((fractions[1] * n).round() as usize).min(num_windows - n_train.min(num_windows));
    let n_train = n_train.min(num_windows);
    let n_test = num_windows - n_train - n_val;
    for (name, frac, count) in [
        ("train", fractions[0], n_train),
        ("validation", fractions[1], n_val),
        ("test", fractions[2], n_test),
    ] {
        if frac > 0.0 && count == 0 {
            return Err(Error::invalid(format!(
                "{num_windows} windows are too few for a non-empty {name} split"
            )));
        }
    }
    Ok(SplitRanges {
        train: (0, n_train),
        val: (n_train, n_train + n_val),
        test: (n_train + n_val, num_windows),
    })
}

/// Curated per-sensor tables with window offsets and their split.
#[derive(Clone, Debug)]
pub struct WindowedData {
    pub sensors: Vec<Sensor>,
    pub tables: Vec<FeatureTable>,
    pub targets: Vec<[f64; 2]>,
    pub window_len: usize,
    pub starts: Vec<usize>,
    pub split: SplitRanges,
}

impl WindowedData {
    pub fn new(
        dataset: &CuratedDataset,
        sensors: &[Sensor],
        window_len: usize,
        starts: Vec<usize>,
        split: SplitRanges,
    ) -> Self {
        Self {
            sensors: sensors.to_vec(),
            tables: sensors.iter().map(|&s| dataset.table(s)).collect(),
            targets: dataset.targets(),
            window_len,
            starts,
            split,
        }
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.dim).collect()
    }

    pub fn range(&self, r: (usize, usize)) -> Vec<usize> {
        (r.0..r.1).collect()
    }

    pub fn target(&self, window: usize) -> [f64; 2] {
        self.targets[self.starts[window] + self.window_len - 1]
    }

    /// Samples covered by the training windows.
    pub fn train_rows(&self) -> std::ops::Range<usize> {
        let (a, b) = self.split.train;
        if a == b {
            return 0..0;
        }
        self.starts[a]..self.starts[b - 1] + self.window_len
    }

    /// Standardization statistics from the training samples only.
    pub fn fit_standardizers(&self) -> Result<Vec<Standardizer>> {
        let rows = self.train_rows();
        self.tables.iter().map(|t| Standardizer::fit(t, rows.clone())).collect()
    }

    pub fn batch(&self, windows: &[usize]) -> Batch {
        let b = windows.len();
        let t_len = self.window_len;
        let streams = self
            .tables
            .iter()
            .map(|table| {
                (0..t_len)
                    .map(|t| {
                        let mut m = Matrix::zeros(table.dim, b);
                        let data = m.as_mut_slice();
                        for (c, &w) in windows.iter().enumerate() {
                            let row = table.row(self.starts[w] + t);
                            for (r, v) in row.iter().enumerate() {
                                data[r * b + c] = *v;
                            }
                        }
                        m
                    })
                    .collect()
            })
            .collect();
        let targets = Matrix::from_fn(2, b, |r, c| self.target(windows[c])[r]);
        Batch { streams, targets }
    }
}

fn target_scaling(data: &WindowedData, windows: &[usize]) -> OutputScaling {
    let n = windows.len().max(1) as f64;
    let mut mean = [0.0; 2];
    for &w in windows {
        let t = data.target(w);
        mean[0] += t[0] / n;
        mean[1] += t[1] / n;
    }
    let mut var = [0.0; 2];
    for &w in windows {
        let t = data.target(w);
        var[0] += (t[0] - mean[0]).powi(2) / n;
        var[1] += (t[1] - mean[1]).powi(2) / n;
    }
    let sd = |v: f64| if v.sqrt() < 1e-12 { 1.0 } else { v.sqrt() };
    OutputScaling {
        mean,
        std: [sd(var[0]), sd(var[1])],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub best_iteration: usize,
    pub best_val_mse: Option<f64>,
    pub iterations_run: usize,
}

/// Eval-mode predictions and importance weights for the given windows.
pub fn predict_windows(
    model: &FusionModel,
    data: &WindowedData,
    windows: &[usize],
    batch_size: usize,
) -> Result<(Vec<[f64; 2]>, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(windows.len());
    let mut alphas = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch_size.max(1)) {
        let (p, a) = model.infer_batch(&data.batch(chunk))?;
        preds.extend(p);
        alphas.extend(a);
    }
    Ok((preds, alphas))
}

pub fn mse_over(model: &FusionModel, data: &WindowedData, windows: &[usize], batch_size: usize) -> Result<f64> {
    let (preds, _) = predict_windows(model, data, windows, batch_size)?;
    let truths: Vec<[f64; 2]> = windows.iter().map(|&w| data.target(w)).collect();
    crate::fusion::mse_loss(&preds, &truths)
}

/// Builds a model for `data`, sets its input/output normalization from the
/// training split and trains it.
pub fn fit(data: &WindowedData, config: &TrainConfig) -> Result<(FusionModel, TrainOutcome)> {
    config.validate()?;
    if data.sensors != config.sensors {
        return Err(Error::Config(format!(
            "data streams {:?} differ from configured sensors {:?}",
            data.sensors, config.sensors
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FusionModel::new(config.model_config(data.input_dims()), &mut rng)?;
    model.input_norm = data.fit_standardizers()?;
    model.output_scaling = target_scaling(data, &data.range(data.split.train));
    let outcome = train(&mut model, data, config, &mut rng)?;
    Ok((model, outcome))
}

/// Mini-batch training loop. Keeps the parameters with the best validation
/// MSE (or the final ones when there is no validation split).
pub fn train(
    model: &mut FusionModel,
    data: &WindowedData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_ids = data.range(data.split.train);
    let val_ids = data.range(data.split.val);
    if train_ids.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    let probe: Vec<usize> = train_ids
        .iter()
        .copied()
        .step_by((train_ids.len() / config.train_probe_windows.max(1)).max(1))
        .take(config.train_probe_windows.max(1))
        .collect();

    let mut adam = AdamState::new(&model.store);
    let mut order = train_ids.clone();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut iterations_run = 0;

    let evaluate = |model: &FusionModel, it: usize| -> Result<LossRecord> {
        let train_mse = mse_over(model, data, &probe, config.eval_batch_size)?;
        let val_mse = if val_ids.is_empty() {
            None
        } else {
            Some(mse_over(model, data, &val_ids, config.eval_batch_size)?)
        };
        Ok(LossRecord {
            iteration: it,
            train_mse,
            val_mse,
        })
    };

    for it in 1..=config.max_iterations {
        let mut ids = Vec::with_capacity(config.batch_size);
        while ids.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            ids.push(order[cursor]);
            cursor += 1;
        }
        let batch = data.batch(&ids);
        let mut tape = Tape::new();
        let fv = model.forward_on_tape(&mut tape, &batch, Mode::Train, rng)?;
        let loss = mse_on_tape(&mut tape, fv.prediction, &batch.targets)?;
        let loss_value = tape.value(loss).get(0, 0);
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("batch loss {loss_value}"),
            });
        }
        model.store.zero_grad();
        tape.backward(loss, &mut model.store)?;
        adam_step(
            &mut model.store,
            &mut adam,
            config.learning_rate,
            config.weight_decay,
            config.decoupled_weight_decay,
        )
        .map_err(|e| Error::Diverged {
            iteration: it,
            detail: e.to_string(),
        })?;
        iterations_run = it;

        if it % config.validation_interval == 0 || it == config.max_iterations {
            let rec = evaluate(model, it)?;
            if !rec.train_mse.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: "non-finite training MSE".into(),
                });
            }
            log::info!(
                "iter {it}: train_mse {:.5} val_mse {}",
                rec.train_mse,
                rec.val_mse.map_or("-".into(), |v| format!("{v:.5}"))
            );
            if let Some(v) = rec.val_mse {
                if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                    best = Some((v, it, model.store.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            history.push(rec);
            if config.patience > 0 && stale >= config.patience {
                log::info!("validation plateau, stopping at iteration {it}");
                break;
            }
        }
    }

    if config.max_iterations == 0 {
        history.push(evaluate(model, 0)?);
    }

    let (best_val_mse, best_iteration) = match best {
        Some((v, it, store)) => {
            model.store = store;
            (Some(v), it)
        }
        None => (None, iterations_run),
    };
    Ok(TrainOutcome {
        history,
        best_iteration,
        best_val_mse,
        iterations_run,
    })
}

/// Writes `iteration,train_mse,val_mse`.
pub fn write_loss_csv(path: &std::path::Path, history: &[LossRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = String::from("iteration,train_mse,val_mse\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{}\n",
            r.iteration,
            r.train_mse,
            r.val_mse.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_no_decay_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::column(vec![0.3, -2.0]).unwrap());
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.1, 0.0, false).unwrap();
        assert_eq!(store.value(id).as_slice(), &[0.3, -2.0]);
    }

    #[test]
    fn adam_single_step_on_quadratic() {
        // f(w) = w², w = 1 → g = 2, m̂ = 2, v̂ = 4, step = 0.1 · 2 / (2 + ε)
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::column(vec![1.0]).unwrap());
        store.zero_grad();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.sum_squares(w).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.1, 0.0, false).unwrap();
        let expect = 1.0 - 0.1 * 2.0 / (4f64.sqrt() + ADAM_EPS);
        assert!((store.value(id).get(0, 0) - expect).abs() < 1e-15);
        assert!((store.value(id).get(0, 0) - 0.9).abs() < 1e-4);
    }

    #[test]
    fn adam_moves_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::column(vec![0.5, 0.5, 0.5]).unwrap());
        let grads = [3.0, -0.001, 0.0];
        store.iter_mut().next().unwrap().grad = Matrix::column(grads.to_vec()).unwrap();
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.01, 0.0, false).unwrap();
        let v = store.value(id).as_slice();
        assert!(v[0] < 0.5 && v[1] > 0.5 && v[2] == 0.5);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        for decoupled in [false, true] {
            let mut store = ParamStore::new();
            let id = store.add("w", Matrix::column(vec![2.0, -3.0]).unwrap());
            let mut st = AdamState::new(&store);
            for _ in 0..3 {
                adam_step(&mut store, &mut st, 0.01, 1e-2, decoupled).unwrap();
            }
            let v = store.value(id).as_slice();
            assert!(v[0].abs() < 2.0 && v[1].abs() < 3.0);
        }
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut store = ParamStore::new();
        store.add("layer.w", Matrix::column(vec![1.0]).unwrap());
        store.iter_mut().next().unwrap().grad = Matrix::from_raw(1, 1, vec![f64::NAN]);
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut store, &mut st, 0.1, 0.0, false).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }

    #[test]
    fn split_examples() {
        let s = split_dataset(100, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!((s.train, s.val, s.test), ((0, 80), (80, 90), (90, 100)));
        let s = split_dataset(37, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!((s.train, s.val, s.test), ((0, 37), (37, 37), (37, 37)));
        assert!(split_dataset(3, [0.8, 0.1, 0.1]).is_err());
        assert!(split_dataset(10, [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn split_partitions_in_time_order() {
        for n in [10usize, 57, 100, 1001] {
            let s = split_dataset(n, [0.8, 0.1, 0.1]).unwrap();
            assert_eq!(s.train.0, 0);
            assert_eq!(s.train.1, s.val.0);
            assert_eq!(s.val.1, s.test.0);
            assert_eq!(s.test.1, n);
            for (got, frac) in [(s.train.1 - s.train.0, 0.8), (s.val.1 - s.val.0, 0.1), (s.test.1 - s.test.0, 0.1)] {
                assert!((got as f64 - frac * n as f64).abs() <= 1.0);
            }
        }
    }
}
