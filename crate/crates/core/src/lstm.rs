//! Per-sensor recurrent encoder.
//!
//! The cell follows the gate order candidate, forget, input, output, with an
//! elementwise peephole from the *current* cell state into the output gate:
//!
//! ```text
//! c~_t = tanh(W_xc x_t + W_hc h_{t-1} + b_c)
//! f_t  = σ(W_xf x_t + W_hf h_{t-1} + b_f)
//! i_t  = σ(W_xi x_t + W_hi h_{t-1} + b_i)
//! c_t  = f_t ⊙ c_{t-1} + i_t ⊙ c~_t
//! o_t  = σ(W_xo x_t + W_ho h_{t-1} + w_co ⊙ c_t + b_o)
//! h_t  = o_t ⊙ tanh(c_t)
//! ```
//!
//! The four input matrices are stored stacked as one `4H x d` parameter (and
//! likewise the recurrent matrices and biases), row blocks in the order
//! above, so a whole batch needs two matrix products per step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamId, ParamStore, Tape, Var};

pub const GATES: usize = 4;
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    Candidate = 0,
    Forget = 1,
    Input = 2,
    Output = 3,
}

/// Parameter handles of one LSTM cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub peephole: Option<ParamId>,
}

impl LstmParams {
    /// Registers a freshly initialized cell: weights uniform in ±1/√H,
    /// forget-gate bias 1.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        peephole: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut uniform = |r, c| Matrix::from_fn(r, c, |_, _| rng.gen_range(-bound..bound));
        let wx = uniform(GATES * hidden_dim, input_dim);
        let wh = uniform(GATES * hidden_dim, hidden_dim);
        let mut b = uniform(GATES * hidden_dim, 1);
        let pp = uniform(hidden_dim, 1);
        for r in hidden_dim..2 * hidden_dim {
            b.as_mut_slice()[r] = FORGET_BIAS_INIT;
        }
        Self {
            input_dim,
            hidden_dim,
            w_input: store.add(format!("{prefix}.w_input"), wx),
            w_hidden: store.add(format!("{prefix}.w_hidden"), wh),
            bias: store.add(format!("{prefix}.bias"), b),
            peephole: peephole.then(|| store.add(format!("{prefix}.peephole"), pp)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundLstm {
        BoundLstm {
            hidden_dim: self.hidden_dim,
            w_input: tape.param(store, self.w_input),
            w_hidden: tape.param(store, self.w_hidden),
            bias: tape.param(store, self.bias),
            peephole: self.peephole.map(|p| tape.param(store, p)),
        }
    }
}

/// An [`LstmParams`] whose parameters have been placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    hidden_dim: usize,
    w_input: Var,
    w_hidden: Var,
    bias: Var,
    peephole: Option<Var>,
}

impl BoundLstm {
    /// One step given the precomputed input projection `W_x x_t` (4H x B).
    pub fn step(&self, tape: &mut Tape, input_proj: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden_dim;
        let rec = tape.matmul(self.w_hidden, h)?;
        let z = tape.add(input_proj, rec)?;
        let z = tape.add_col(z, self.bias)?;

        let zc = tape.slice_rows(z, Gate::Candidate as usize * n, n)?;
        let candidate = tape.tanh(zc)?;
        let zf = tape.slice_rows(z, Gate::Forget as usize * n, n)?;
        let forget = tape.sigmoid(zf)?;
        let zi = tape.slice_rows(z, Gate::Input as usize * n, n)?;
        let input = tape.sigmoid(zi)?;

        let kept = tape.mul(forget, c)?;
        let written = tape.mul(input, candidate)?;
        let cell = tape.add(kept, written)?;

        let mut zo = tape.slice_rows(z, Gate::Output as usize * n, n)?;
        if let Some(p) = self.peephole {
            let peek = tape.mul_col(cell, p)?;
            zo = tape.add(zo, peek)?;
        }
        let output = tape.sigmoid(zo)?;
        let squashed = tape.tanh(cell)?;
        let hidden = tape.mul(output, squashed)?;
        Ok((hidden, cell))
    }

    /// Runs the cell over `inputs` (each d x B) from zero state, returning
    /// the hidden state at every step.
    pub fn run(&self, tape: &mut Tape, inputs: &[Var], reverse: bool) -> Result<Vec<Var>> {
        let steps = inputs.len();
        if steps == 0 {
            return Ok(Vec::new());
        }
        let batch = tape.shape(inputs[0]).1;
        let all = tape.concat_cols(inputs)?;
        let proj = tape.matmul(self.w_input, all)?;
        let mut h = tape.input(Matrix::zeros(self.hidden_dim, batch));
        let mut c = tape.input(Matrix::zeros(self.hidden_dim, batch));
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let zx = tape.slice_cols(proj, t * batch, batch)?;
            (h, c) = self.step(tape, zx, h, c)?;
            out[t] = h;
        }
        Ok(out)
    }
}

/// Hidden and cell state of one cell for a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
        }
    }
}

/// Single cell update for one example.
pub fn lstm_step(
    store: &ParamStore,
    params: &LstmParams,
    x: &[f64],
    prev: &LstmState,
) -> Result<LstmState> {
    let n = params.hidden_dim;
    if x.len() != params.input_dim || prev.h.len() != n || prev.c.len() != n {
        return Err(Error::Shape {
            op: "lstm_step",
            lhs: (params.input_dim, n),
            rhs: (x.len(), prev.h.len().max(prev.c.len())),
        });
    }
    let mut tape = Tape::new();
    let cell = params.bind(&mut tape, store);
    let xv = tape.input(Matrix::column(x.to_vec())?);
    let hv = tape.input(Matrix::column(prev.h.clone())?);
    let cv = tape.input(Matrix::column(prev.c.clone())?);
    let proj = tape.matmul(cell.w_input, xv)?;
    let (h, c) = cell.step(&mut tape, proj, hv, cv)?;
    Ok(LstmState {
        h: tape.value(h).as_slice().to_vec(),
        c: tape.value(c).as_slice().to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub forward: LstmParams,
    pub backward: Option<LstmParams>,
}

/// Stacked, optionally bidirectional LSTM for one sensor stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEncoder {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub bidirectional: bool,
    pub dropout: f64,
    pub layers: Vec<LstmLayer>,
}

impl StreamEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        bidirectional: bool,
        dropout: f64,
        peephole: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_layers == 0 || hidden_dim == 0 || input_dim == 0 {
            return Err(Error::Config(format!(
                "encoder `{prefix}` needs non-zero layers, input and hidden sizes"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let width = if bidirectional { 2 * hidden_dim } else { hidden_dim };
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d = if l == 0 { input_dim } else { width };
            let forward = LstmParams::init(store, &format!("{prefix}.l{l}.fwd"), d, hidden_dim, peephole, rng);
            let backward = bidirectional
                .then(|| LstmParams::init(store, &format!("{prefix}.l{l}.bwd"), d, hidden_dim, peephole, rng));
            layers.push(LstmLayer { forward, backward });
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            bidirectional,
            dropout,
            layers,
        })
    }

    /// Width of each per-step output: H, or 2H when bidirectional.
    pub fn output_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }

    /// Runs every layer over `inputs` (T matrices of d x B) and returns the
    /// top layer's output at each step. In training mode each layer's
    /// outputs pass through inverted dropout.
    pub fn run_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var>> {
        let mut seq = inputs.to_vec();
        for layer in &self.layers {
            let fwd = layer.forward.bind(tape, store).run(tape, &seq, false)?;
            seq = match &layer.backward {
                Some(bp) => {
                    let bwd = bp.bind(tape, store).run(tape, &seq, true)?;
                    fwd.iter()
                        .zip(&bwd)
                        .map(|(&f, &b)| tape.concat_rows(&[f, b]))
                        .collect::<Result<Vec<_>>>()?
                }
                None => fwd,
            };
            if mode == Mode::Train && self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                seq = seq
                    .into_iter()
                    .map(|v| {
                        let (r, c) = tape.shape(v);
                        let mask = Matrix::from_fn(r, c, |_, _| {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        tape.mul_const(v, mask)
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
        }
        Ok(seq)
    }

    fn run_single(
        &self,
        store: &ParamStore,
        inputs: &Matrix,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<f64>>> {
        if inputs.cols() != self.input_dim {
            return Err(Error::Shape {
                op: "run_sequence",
                lhs: (inputs.rows(), self.input_dim),
                rhs: inputs.shape(),
            });
        }
        if inputs.rows() == 0 {
            return Err(Error::invalid("sequence must have at least one step"));
        }
        let mut tape = Tape::new();
        let steps: Vec<Var> = (0..inputs.rows())
            .map(|t| Matrix::column(inputs.row(t).to_vec()).map(|m| tape.input(m)))
            .collect::<Result<_>>()?;
        let out = self.run_on_tape(&mut tape, store, &steps, mode, rng)?;
        Ok(out
            .into_iter()
            .map(|v| tape.value(v).as_slice().to_vec())
            .collect())
    }
}

/// Top-layer hidden states h_1..h_T for one `T x d` sequence.
pub fn run_sequence(
    store: &ParamStore,
    encoder: &StreamEncoder,
    inputs: &Matrix,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    encoder.run_single(store, inputs, mode, rng)
}

/// Per-step `[forward h_t ; backward h_t]` of a bidirectional encoder.
pub fn run_bidirectional(
    store: &ParamStore,
    encoder: &StreamEncoder,
    inputs: &Matrix,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    if !encoder.bidirectional {
        return Err(Error::Config("encoder was built unidirectional".into()));
    }
    encoder.run_single(store, inputs, mode, rng)
}
