//! Multi-stream recurrent fusion.
//!
//! Every sensor stream is encoded by its own [`StreamEncoder`]. For window
//! end `t`, each stream's uncertainty head looks at the `F` states strictly
//! before `t`,
//!
//! ```text
//! u_m = σ(w_u · [h_{t-F}; …; h_{t-1}] + b_u)
//! ```
//!
//! the scores are softmax-normalized into importance weights `α`, and the
//! states at `t` are blended as `Σ α_m h^m_t`. A ReLU MLP with a linear final
//! layer maps the blend to `(x, y)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{MultiModalWindow, Sensor, Standardizer};
use crate::error::{Error, Result};
use crate::lstm::{Mode, StreamEncoder};
use crate::tensor::{softmax, Matrix, ParamId, ParamStore, Tape, Var};

pub const MAX_STREAMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sensors: Vec<Sensor>,
    pub input_dims: Vec<usize>,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub bidirectional: bool,
    pub dropout: f64,
    /// Number of preceding states fed to each uncertainty head (F).
    pub history: usize,
    /// Window length (T).
    pub window_len: usize,
    /// Widths of the hidden MLP layers; the output layer is added on top.
    pub mlp_hidden: Vec<usize>,
    pub peephole: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.sensors.len();
        if m == 0 || m > MAX_STREAMS {
            return Err(Error::Config(format!("between 1 and {MAX_STREAMS} streams required, got {m}")));
        }
        if self.input_dims.len() != m {
            return Err(Error::Config(format!(
                "{} input sizes given for {m} streams",
                self.input_dims.len()
            )));
        }
        for (i, s) in self.sensors.iter().enumerate() {
            if self.sensors[..i].contains(s) {
                return Err(Error::Config(format!("stream `{s}` configured twice")));
            }
        }
        if self.history == 0 {
            return Err(Error::Config("uncertainty history F must be >= 1".into()));
        }
        if self.window_len < self.history + 1 {
            return Err(Error::Config(format!(
                "history F={} needs windows of at least F+1 steps, got T={}",
                self.history, self.window_len
            )));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(Error::Config("MLP layer widths must be non-zero".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyHead {
    pub history: usize,
    /// `1 x (F * state_dim)` row vector.
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Affine map from network output to meters: `mean + std ⊙ y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for OutputScaling {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }
}

/// Per-window importance weights, one per stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights(pub Vec<f64>);

impl ImportanceWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Mini-batch of windows: per stream, `T` matrices of `d x B` (curated,
/// unstandardized), plus `2 x B` targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub streams: Vec<Vec<Matrix>>,
    pub targets: Matrix,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.targets.cols()
    }

    /// Packs windows, ordering streams as in `sensors`.
    pub fn from_windows(windows: &[&MultiModalWindow], sensors: &[Sensor]) -> Result<Self> {
        let b = windows.len();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let t = windows[0].len();
        let mut streams = Vec::with_capacity(sensors.len());
        for &sensor in sensors {
            let mats: Vec<&Matrix> = windows
                .iter()
                .map(|w| w.stream(sensor).ok_or_else(|| Error::MissingStream(sensor.to_string())))
                .collect::<Result<_>>()?;
            let d = mats[0].cols();
            if let Some(bad) = mats.iter().find(|m| m.shape() != (t, d)) {
                return Err(Error::Shape {
                    op: "Batch::from_windows",
                    lhs: (t, d),
                    rhs: bad.shape(),
                });
            }
            streams.push(
                (0..t)
                    .map(|step| Matrix::from_fn(d, b, |r, c| mats[c].get(step, r)))
                    .collect(),
            );
        }
        let targets = Matrix::from_fn(2, b, |r, c| windows[c].target[r]);
        Ok(Self { streams, targets })
    }
}

/// Tape handles produced by one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `2 x B` coordinates in meters.
    pub prediction: Var,
    /// `M x B` importance weights.
    pub alpha: Var,
    /// `M x B` raw uncertainty scores.
    pub uncertainty: Var,
    /// Fused state, `state_dim x B`.
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<StreamEncoder>,
    pub heads: Vec<UncertaintyHead>,
    pub mlp: Vec<Dense>,
    pub input_norm: Vec<Standardizer>,
    pub output_scaling: OutputScaling,
}

impl FusionModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut encoders = Vec::new();
        let mut heads = Vec::new();
        let state = config.state_dim();
        for (sensor, &d) in config.sensors.iter().zip(&config.input_dims) {
            encoders.push(StreamEncoder::init(
                &mut store,
                sensor.name(),
                d,
                config.hidden_dim,
                config.num_layers,
                config.bidirectional,
                config.dropout,
                config.peephole,
                rng,
            )?);
            let fan_in = config.history * state;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Matrix::from_fn(1, fan_in, |_, _| rng.gen_range(-bound..bound));
            heads.push(UncertaintyHead {
                history: config.history,
                weight: store.add(format!("{sensor}.head.weight"), w),
                bias: store.add(format!("{sensor}.head.bias"), Matrix::zeros(1, 1)),
            });
        }
        let mut mlp = Vec::new();
        let mut width = state;
        let outs: Vec<usize> = config.mlp_hidden.iter().copied().chain([2]).collect();
        for (q, &out) in outs.iter().enumerate() {
            let bound = 1.0 / (width as f64).sqrt();
            let w = Matrix::from_fn(out, width, |_, _| rng.gen_range(-bound..bound));
            let b = Matrix::from_fn(out, 1, |_, _| rng.gen_range(-bound..bound));
            mlp.push(Dense {
                weight: store.add(format!("mlp.{q}.weight"), w),
                bias: store.add(format!("mlp.{q}.bias"), b),
            });
            width = out;
        }
        let input_norm = config.input_dims.iter().map(|&d| Standardizer::identity(d)).collect();
        Ok(Self {
            config,
            store,
            encoders,
            heads,
            mlp,
            input_norm,
            output_scaling: OutputScaling::default(),
        })
    }

    pub fn num_streams(&self) -> usize {
        self.config.sensors.len()
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.config.sensors
    }

    /// Records the batched forward pass on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<ForwardVars> {
        let m = self.num_streams();
        let t_len = self.config.window_len;
        if batch.streams.len() != m {
            return Err(Error::Config(format!(
                "batch has {} streams, model expects {m}",
                batch.streams.len()
            )));
        }
        let b = batch.size();
        let mut current = Vec::with_capacity(m);
        let mut scores = Vec::with_capacity(m);
        for (s, steps) in batch.streams.iter().enumerate() {
            if steps.len() != t_len {
                return Err(Error::Config(format!(
                    "stream `{}` has {} steps, model expects T={t_len}",
                    self.config.sensors[s],
                    steps.len()
                )));
            }
            let norm = &self.input_norm[s];
            let inputs: Vec<Var> = steps
                .iter()
                .map(|x| {
                    if x.shape() != (norm.dim(), b) {
                        return Err(Error::Shape {
                            op: "forward",
                            lhs: (norm.dim(), b),
                            rhs: x.shape(),
                        });
                    }
                    let z = Matrix::from_fn(x.rows(), b, |r, c| (x.get(r, c) - norm.mean[r]) / norm.std[r]);
                    Ok(tape.input(z))
                })
                .collect::<Result<_>>()?;
            let states = self.encoders[s].run_on_tape(tape, &self.store, &inputs, mode, rng)?;
            let head = &self.heads[s];
            let f = head.history;
            let past = tape.concat_rows(&states[t_len - 1 - f..t_len - 1])?;
            let w = tape.param(&self.store, head.weight);
            let bias = tape.param(&self.store, head.bias);
            let z = tape.matmul(w, past)?;
            let z = tape.add_col(z, bias)?;
            scores.push(tape.sigmoid(z)?);
            current.push(states[t_len - 1]);
        }
        let uncertainty = tape.concat_rows(&scores)?;
        let alpha = tape.softmax_cols(uncertainty)?;
        let mut fused = None;
        for (s, &h) in current.iter().enumerate() {
            let a = tape.slice_rows(alpha, s, 1)?;
            let term = tape.mul_row(h, a)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let fused = fused.expect("at least one stream");
        let out = self.mlp_on_tape(tape, fused)?;
        Ok(ForwardVars {
            prediction: out,
            alpha,
            uncertainty,
            fused,
        })
    }

    fn mlp_on_tape(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut v = input;
        let last = self.mlp.len() - 1;
        for (q, layer) in self.mlp.iter().enumerate() {
            let w = tape.param(&self.store, layer.weight);
            let b = tape.param(&self.store, layer.bias);
            let z = tape.matmul(w, v)?;
            let z = tape.add_col(z, b)?;
            v = if q == last { z } else { tape.relu(z)? };
        }
        let std = tape.input(Matrix::from_raw(2, 1, self.output_scaling.std.to_vec()));
        let mean = tape.input(Matrix::from_raw(2, 1, self.output_scaling.mean.to_vec()));
        let scaled = tape.mul_col(v, std)?;
        tape.add_col(scaled, mean)
    }

    /// Coordinate head applied to a fused state.
    pub fn predict(&self, fused: &[f64]) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let v = tape.input(Matrix::column(fused.to_vec())?);
        let out = self.mlp_on_tape(&mut tape, v)?;
        let o = tape.value(out);
        Ok([o.get(0, 0), o.get(1, 0)])
    }

    /// Runs one window end to end, returning the estimate and the
    /// importance weights used for it.
    pub fn forward(
        &self,
        window: &MultiModalWindow,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<([f64; 2], ImportanceWeights)> {
        let batch = Batch::from_windows(&[window], &self.config.sensors)?;
        let mut tape = Tape::new();
        let fv = self.forward_on_tape(&mut tape, &batch, mode, rng)?;
        let p = tape.value(fv.prediction);
        let alpha = tape.value(fv.alpha).col_vec(0);
        Ok(([p.get(0, 0), p.get(1, 0)], ImportanceWeights(alpha)))
    }

    /// Eval-mode estimate and importance weights for one window.
    pub fn predict_window(&self, window: &MultiModalWindow) -> Result<([f64; 2], ImportanceWeights)> {
        self.forward(window, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))
    }

    /// Eval-mode predictions and importance weights for a batch.
    pub fn infer_batch(&self, batch: &Batch) -> Result<(Vec<[f64; 2]>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        // Eval mode draws no random numbers.
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fv = self.forward_on_tape(&mut tape, batch, Mode::Eval, &mut rng)?;
        let p = tape.value(fv.prediction);
        let a = tape.value(fv.alpha);
        let preds = (0..p.cols()).map(|c| [p.get(0, c), p.get(1, c)]).collect();
        let alphas = (0..a.cols()).map(|c| a.col_vec(c)).collect();
        Ok((preds, alphas))
    }
}

/// Batched mean squared error node: mean over the batch of
/// `((x̂-x)² + (ŷ-y)²) / 2`.
pub fn mse_on_tape(tape: &mut Tape, prediction: Var, targets: &Matrix) -> Result<Var> {
    let b = targets.cols();
    let t = tape.input(targets.clone());
    let diff = tape.sub(prediction, t)?;
    let ss = tape.sum_squares(diff)?;
    tape.scale(ss, 1.0 / (2.0 * b as f64))
}

pub fn mse_loss(estimates: &[[f64; 2]], truths: &[[f64; 2]]) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::invalid(format!(
            "mse over {} estimates and {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let total: f64 = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2)) / 2.0)
        .sum();
    Ok(total / estimates.len() as f64)
}

/// Uncertainty score of one stream from its `F` preceding states (oldest
/// first).
pub fn uncertainty(store: &ParamStore, head: &UncertaintyHead, past_states: &[Vec<f64>]) -> Result<f64> {
    if past_states.len() != head.history {
        return Err(Error::Config(format!(
            "head expects {} preceding states, got {}",
            head.history,
            past_states.len()
        )));
    }
    let mut tape = Tape::new();
    let stacked = Matrix::column(past_states.concat())?;
    let x = tape.input(stacked);
    let w = tape.param(store, head.weight);
    let b = tape.param(store, head.bias);
    let z = tape.matmul(w, x)?;
    let z = tape.add_col(z, b)?;
    let u = tape.sigmoid(z)?;
    Ok(tape.value(u).get(0, 0))
}

pub fn importance_weights(scores: &[f64]) -> Result<ImportanceWeights> {
    softmax(scores).map(ImportanceWeights)
}

/// `Σ α_m h_m`.
pub fn fuse(states: &[Vec<f64>], alpha: &ImportanceWeights) -> Result<Vec<f64>> {
    let first = states
        .first()
        .ok_or_else(|| Error::invalid("fuse needs at least one state"))?;
    if alpha.0.len() != states.len() {
        return Err(Error::Shape {
            op: "fuse",
            lhs: (states.len(), first.len()),
            rhs: (alpha.0.len(), 1),
        });
    }
    let mut out = vec![0.0; first.len()];
    for (h, a) in states.iter().zip(&alpha.0) {
        if h.len() != out.len() {
            return Err(Error::Shape {
                op: "fuse",
                lhs: (first.len(), 1),
                rhs: (h.len(), 1),
            });
        }
        for (o, v) in out.iter_mut().zip(h) {
            *o += a * v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(sensors: Vec<Sensor>, dims: Vec<usize>) -> ModelConfig {
        ModelConfig {
            sensors,
            input_dims: dims,
            hidden_dim: 4,
            num_layers: 1,
            bidirectional: false,
            dropout: 0.0,
            history: 1,
            window_len: 4,
            mlp_hidden: vec![5],
            peephole: true,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(vec![Sensor::Imu], vec![9]);
        c.history = 4;
        assert!(c.validate().is_err());
        c.history = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(vec![Sensor::Imu, Sensor::Imu], vec![9, 9]);
        assert!(c.validate().is_err());
        c.sensors = vec![];
        c.input_dims = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let mut store = ParamStore::new();
        let head = UncertaintyHead {
            history: 2,
            weight: store.add("w", Matrix::zeros(1, 6)),
            bias: store.add("b", Matrix::zeros(1, 1)),
        };
        let states = vec![vec![0.3, -0.2, 0.9], vec![0.1, 0.5, -0.7]];
        assert_eq!(uncertainty(&store, &head, &states).unwrap(), 0.5);
        store.set_value(head.bias, Matrix::filled(1, 1, 20.0)).unwrap();
        assert!((uncertainty(&store, &head, &states).unwrap() - 1.0).abs() < 1e-8);
        assert!(uncertainty(&store, &head, &states[..1]).is_err());
    }

    #[test]
    fn importance_examples() {
        assert_eq!(importance_weights(&[0.7]).unwrap().0, vec![1.0]);
        let w = importance_weights(&[0.4; 3]).unwrap();
        assert!(w.0.iter().all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        let w = importance_weights(&[0.2, 0.8]).unwrap();
        assert!((w.0[0] - 0.35434).abs() < 1e-5 && (w.0[1] - 0.64566).abs() < 1e-5);
    }

    #[test]
    fn fuse_examples() {
        let h1 = vec![0.2, -0.4];
        assert_eq!(fuse(&[h1.clone()], &ImportanceWeights(vec![1.0])).unwrap(), h1);
        let h2 = vec![0.9, 0.1];
        assert_eq!(
            fuse(&[h1.clone(), h2.clone()], &ImportanceWeights(vec![1.0, 0.0])).unwrap(),
            h1
        );
        let f = fuse(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &ImportanceWeights(vec![0.5, 0.5]),
        )
        .unwrap();
        assert_eq!(f, vec![0.5, 0.5]);
        assert!(fuse(&[h1, vec![1.0]], &ImportanceWeights(vec![0.5, 0.5])).is_err());
    }

    #[test]
    fn predict_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = FusionModel::new(tiny_config(vec![Sensor::Imu], vec![9]), &mut rng).unwrap();
        let zeros = vec![0.0; model.store.num_scalars()];
        model.store.set_flat_values(&zeros).unwrap();
        let last = model.mlp.last().unwrap().bias;
        model
            .store
            .set_value(last, Matrix::column(vec![3.0, 4.0]).unwrap())
            .unwrap();
        assert_eq!(model.predict(&[0.5, -0.1, 0.3, 0.9]).unwrap(), [3.0, 4.0]);

        // Hidden stage fully negative: ReLU kills it, output is the final bias.
        let first = model.mlp[0].bias;
        model.store.set_value(first, Matrix::filled(5, 1, -1.0)).unwrap();
        let w0 = model.mlp[1].weight;
        model.store.set_value(w0, Matrix::filled(2, 5, 0.7)).unwrap();
        assert_eq!(model.predict(&[0.5, -0.1, 0.3, 0.9]).unwrap(), [3.0, 4.0]);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[[1.0, 2.0]], &[[1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[[1.0, 1.0]], &[[0.0, 0.0]]).unwrap(), 1.0);
        assert!(mse_loss(&[], &[]).is_err());
    }

    fn window(sensors: &[(Sensor, usize)], t: usize, seed: u64) -> MultiModalWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiModalWindow {
            streams: sensors
                .iter()
                .map(|&(s, d)| (s, Matrix::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0))))
                .collect(),
            timestamps: (0..t).map(|i| i as f64).collect(),
            target: [1.0, 2.0],
        }
    }

    #[test]
    fn missing_stream_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = FusionModel::new(tiny_config(vec![Sensor::Uwb], vec![3]), &mut rng).unwrap();
        let w = window(&[(Sensor::Imu, 9)], 4, 0);
        let err = model.forward(&w, Mode::Eval, &mut rng).unwrap_err();
        assert!(matches!(err, Error::MissingStream(ref s) if s == "uwb"));
    }

    #[test]
    fn duplicated_stream_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let single = FusionModel::new(tiny_config(vec![Sensor::Rssi], vec![3]), &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut double =
            FusionModel::new(tiny_config(vec![Sensor::Rssi, Sensor::Uwb], vec![3, 3]), &mut rng).unwrap();
        // Copy the single model's encoder/head into both streams and its MLP.
        for (prefix_dst, prefix_src) in [("rssi", "rssi"), ("uwb", "rssi")] {
            for p in single.store.iter() {
                let name = p.name.replacen(prefix_src, prefix_dst, 1);
                if p.name.starts_with(prefix_src) || p.name.starts_with("mlp") {
                    let id = double.store.find(&name).unwrap();
                    double.store.set_value(id, p.value.clone()).unwrap();
                }
            }
        }
        let mut w = window(&[(Sensor::Rssi, 3)], 4, 9);
        let rssi = w.streams[0].1.clone();
        w.streams.push((Sensor::Uwb, rssi));
        let (p1, a1) = single.forward(&w, Mode::Eval, &mut rng).unwrap();
        let (p2, a2) = double.forward(&w, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a1.0, vec![1.0]);
        assert!(a2.0.iter().all(|a| (a - 0.5).abs() < 1e-15));
        for k in 0..2 {
            assert!((p1[k] - p2[k]).abs() < 1e-12);
        }
    }
}
