//! LSTM and convolutional LSTM cells with peephole connections.
//!
//! Both cells compute, in this order,
//!
//! ```text
//! i = σ(Wxi·x + Whi·h' + Wci∘c' + bi)
//! f = σ(Wxf·x + Whf·h' + Wcf∘c' + bf)
//! c = f∘c' + i∘tanh(Wxc·x + Whc·h' + bc)
//! o = σ(Wxo·x + Who·h' + Wco∘c + bo)
//! h = o∘tanh(c)
//! ```
//!
//! where `'` marks the previous step and `·` is a matrix product for the
//! dense cell and a 3x3 same-padded convolution for the convolutional one.
//! The dense cell is a plain forward implementation kept as a reference; the
//! convolutional cell runs on a [`Tape`] so it can be trained.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

/// Hidden and cell state passed from one step to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T: Real = f32> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Real> CellState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        CellState {
            hidden: Tensor::zeros(shape),
            cell: Tensor::zeros(shape),
        }
    }
}

/// Gate activations of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateActivations<T: Real = f32> {
    pub input: Tensor<T>,
    pub forget: Tensor<T>,
    pub output: Tensor<T>,
    pub candidate: Tensor<T>,
}

/// Dense LSTM weights. Matrices are `[hidden, input]` or `[hidden, hidden]`;
/// peepholes and biases are `[hidden]` vectors. Gate arrays are ordered
/// input, forget, candidate, output; peepholes input, forget, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmWeights<T: Real = f64> {
    pub input: [Tensor<T>; 4],
    pub hidden: [Tensor<T>; 4],
    pub peephole: [Tensor<T>; 3],
    pub bias: [Tensor<T>; 4],
}

impl<T: Real> LstmWeights<T> {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        LstmWeights {
            input: std::array::from_fn(|_| Tensor::zeros(&[hidden_size, input_size])),
            hidden: std::array::from_fn(|_| Tensor::zeros(&[hidden_size, hidden_size])),
            peephole: std::array::from_fn(|_| Tensor::zeros(&[hidden_size])),
            bias: std::array::from_fn(|_| Tensor::zeros(&[hidden_size])),
        }
    }

    pub fn random<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-scale..scale)));
        LstmWeights {
            input: std::array::from_fn(|_| draw(&[hidden_size, input_size])),
            hidden: std::array::from_fn(|_| draw(&[hidden_size, hidden_size])),
            peephole: std::array::from_fn(|_| draw(&[hidden_size])),
            bias: std::array::from_fn(|_| draw(&[hidden_size])),
        }
    }

    pub fn input_size(&self) -> usize {
        self.input[0].shape()[1]
    }

    pub fn hidden_size(&self) -> usize {
        self.input[0].shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let (n_in, n_h) = (self.input_size(), self.hidden_size());
        let check = |t: &Tensor<T>, expected: &[usize], axis: &'static str| -> Result<()> {
            if t.shape() != expected {
                return Err(Error::Dimension {
                    op: "lstm_step",
                    axis,
                    expected: expected.iter().product(),
                    actual: t.numel(),
                });
            }
            Ok(())
        };
        for w in &self.input {
            check(w, &[n_h, n_in], "input_weights")?;
        }
        for w in &self.hidden {
            check(w, &[n_h, n_h], "hidden_weights")?;
        }
        for w in &self.peephole {
            check(w, &[n_h], "peephole")?;
        }
        for b in &self.bias {
            check(b, &[n_h], "bias")?;
        }
        Ok(())
    }
}

fn matvec<T: Real>(m: &Tensor<T>, v: &[T]) -> Vec<T> {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect()
}

/// One step of the dense peephole LSTM.
pub fn lstm_step<T: Real>(
    x: &Tensor<T>,
    prev: &CellState<T>,
    w: &LstmWeights<T>,
) -> Result<(CellState<T>, GateActivations<T>)> {
    w.validate()?;
    let n_h = w.hidden_size();
    if x.numel() != w.input_size() {
        return Err(Error::Dimension {
            op: "lstm_step",
            axis: "input",
            expected: w.input_size(),
            actual: x.numel(),
        });
    }
    for (axis, t) in [("hidden", &prev.hidden), ("cell", &prev.cell)] {
        if t.numel() != n_h {
            return Err(Error::Dimension {
                op: "lstm_step",
                axis,
                expected: n_h,
                actual: t.numel(),
            });
        }
    }
    let (h_prev, c_prev) = (prev.hidden.data(), prev.cell.data());
    let pre = |g: usize| -> Vec<T> {
        let a = matvec(&w.input[g], x.data());
        let b = matvec(&w.hidden[g], h_prev);
        a.iter()
            .zip(&b)
            .zip(w.bias[g].data())
            .map(|((&a, &b), &bias)| a + b + bias)
            .collect()
    };
    let sig = crate::tensor::Activation::Sigmoid;
    let (pi, pf, pc, po) = (pre(0), pre(1), pre(2), pre(3));
    let (wci, wcf, wco) = (w.peephole[0].data(), w.peephole[1].data(), w.peephole[2].data());

    let mut i = vec![T::zero(); n_h];
    let mut f = vec![T::zero(); n_h];
    let mut g = vec![T::zero(); n_h];
    let mut c = vec![T::zero(); n_h];
    let mut o = vec![T::zero(); n_h];
    let mut h = vec![T::zero(); n_h];
    for k in 0..n_h {
        i[k] = sig.apply(pi[k] + wci[k] * c_prev[k]);
        f[k] = sig.apply(pf[k] + wcf[k] * c_prev[k]);
        g[k] = pc[k].tanh();
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        o[k] = sig.apply(po[k] + wco[k] * c[k]);
        h[k] = o[k] * c[k].tanh();
    }
    let shape = [n_h];
    Ok((
        CellState {
            hidden: Tensor::new(&shape, h)?,
            cell: Tensor::new(&shape, c)?,
        },
        GateActivations {
            input: Tensor::new(&shape, i)?,
            forget: Tensor::new(&shape, f)?,
            output: Tensor::new(&shape, o)?,
            candidate: Tensor::new(&shape, g)?,
        },
    ))
}

/// How peephole weights are shaped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PeepholeMode {
    /// One weight per channel and position, `[C, H, W]`.
    #[default]
    Full,
    /// One weight per channel, `[C]`, shared across positions.
    PerChannel,
}

/// Convolutional LSTM weights. Input kernels are `[C_h, C_in, 3, 3]`, hidden
/// kernels `[C_h, C_h, 3, 3]`, biases `[C_h]`. Gate order as in [`LstmWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClstmWeights<T: Real = f32> {
    pub input: [Tensor<T>; 4],
    pub hidden: [Tensor<T>; 4],
    pub peephole: [Tensor<T>; 3],
    pub bias: [Tensor<T>; 4],
}

/// Shape of a convolutional LSTM layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClstmShape {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub peephole: PeepholeMode,
}

impl ClstmShape {
    pub fn input_kernel(&self) -> [usize; 4] {
        [self.hidden_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn hidden_kernel(&self) -> [usize; 4] {
        [self.hidden_channels, self.hidden_channels, self.kernel, self.kernel]
    }

    pub fn peephole_shape(&self) -> Vec<usize> {
        match self.peephole {
            PeepholeMode::Full => vec![self.hidden_channels, self.height, self.width],
            PeepholeMode::PerChannel => vec![self.hidden_channels],
        }
    }

    pub fn state_shape(&self) -> [usize; 3] {
        [self.hidden_channels, self.height, self.width]
    }

    /// Trainable scalars: 4 input kernels, 4 hidden kernels, 3 peepholes, 4 biases.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let ch = self.hidden_channels;
        4 * ch * self.in_channels * k2
            + 4 * ch * ch * k2
            + 3 * self.peephole_shape().iter().product::<usize>()
            + 4 * ch
    }
}

impl<T: Real> ClstmWeights<T> {
    pub fn zeros(shape: &ClstmShape) -> Self {
        ClstmWeights {
            input: std::array::from_fn(|_| Tensor::zeros(&shape.input_kernel())),
            hidden: std::array::from_fn(|_| Tensor::zeros(&shape.hidden_kernel())),
            peephole: std::array::from_fn(|_| Tensor::zeros(&shape.peephole_shape())),
            bias: std::array::from_fn(|_| Tensor::zeros(&[shape.hidden_channels])),
        }
    }

    /// Kernels uniform in `±1/sqrt(fan_in)`, peepholes zero, forget bias 1,
    /// other biases 0.
    pub fn init<R: Rng + ?Sized>(shape: &ClstmShape, rng: &mut R) -> Self {
        let mut w = Self::zeros(shape);
        let k2 = shape.kernel * shape.kernel;
        let si = 1.0 / ((shape.in_channels * k2) as f64).sqrt();
        let sh = 1.0 / ((shape.hidden_channels * k2) as f64).sqrt();
        for t in &mut w.input {
            uniform_fill(t, si, rng);
        }
        for t in &mut w.hidden {
            uniform_fill(t, sh, rng);
        }
        w.bias[1] = Tensor::ones(&[shape.hidden_channels]);
        w
    }

    pub fn shape(&self, height: usize, width: usize) -> ClstmShape {
        let k = self.input[0].shape();
        ClstmShape {
            in_channels: k[1],
            hidden_channels: k[0],
            height,
            width,
            kernel: k[2],
            peephole: if self.peephole[0].rank() == 1 {
                PeepholeMode::PerChannel
            } else {
                PeepholeMode::Full
            },
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.input
            .iter()
            .chain(&self.hidden)
            .chain(&self.peephole)
            .chain(&self.bias)
    }

    /// Record all weights on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<ClstmVars> {
        let input = self.input.clone().map(|t| tape.param(t));
        let hidden = self.hidden.clone().map(|t| tape.param(t));
        let peephole = self.peephole.clone().map(|t| tape.param(t));
        let bias = self.bias.clone().map(|t| tape.param(t));
        ClstmVars::fuse(tape, input, hidden, peephole, bias)
    }
}

pub(crate) fn uniform_fill<T: Real, R: Rng + ?Sized>(t: &mut Tensor<T>, scale: f64, rng: &mut R) {
    for v in t.data_mut() {
        *v = T::from_f64(rng.gen_range(-scale..scale));
    }
}

/// Convolutional LSTM weights recorded on a tape. The four gate kernels are
/// concatenated once per binding so each step runs one convolution per operand.
#[derive(Clone, Debug)]
pub struct ClstmVars {
    pub input: [Var; 4],
    pub hidden: [Var; 4],
    pub peephole: [Var; 3],
    pub bias: [Var; 4],
    fused_input: Var,
    fused_hidden: Var,
    fused_bias: Var,
}

impl ClstmVars {
    pub fn fuse<T: Real>(
        tape: &mut Tape<T>,
        input: [Var; 4],
        hidden: [Var; 4],
        peephole: [Var; 3],
        bias: [Var; 4],
    ) -> Result<Self> {
        let fused_input = tape.concat(&input)?;
        let fused_hidden = tape.concat(&hidden)?;
        let fused_bias = tape.concat(&bias)?;
        Ok(ClstmVars {
            input,
            hidden,
            peephole,
            bias,
            fused_input,
            fused_hidden,
            fused_bias,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.input
            .iter()
            .chain(&self.hidden)
            .chain(&self.peephole)
            .chain(&self.bias)
            .copied()
    }
}

/// Hidden and cell state as tape variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateVars {
    pub hidden: Var,
    pub cell: Var,
}

impl StateVars {
    pub fn constant<T: Real>(tape: &mut Tape<T>, state: &CellState<T>) -> Self {
        StateVars {
            hidden: tape.constant(state.hidden.clone()),
            cell: tape.constant(state.cell.clone()),
        }
    }

    pub fn zeros<T: Real>(tape: &mut Tape<T>, shape: &[usize]) -> Self {
        Self::constant(tape, &CellState::zeros(shape))
    }

    /// Current values, detached from the tape.
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> CellState<T> {
        CellState {
            hidden: tape.value(self.hidden).clone(),
            cell: tape.value(self.cell).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub input: Var,
    pub forget: Var,
    pub output: Var,
    pub candidate: Var,
}

fn peephole_term<T: Real>(tape: &mut Tape<T>, w: Var, c: Var) -> Result<Var> {
    if tape.shape(w).len() == 1 {
        tape.mul_channel(c, w)
    } else {
        tape.mul(w, c)
    }
}

/// One convolutional LSTM step on a tape. `x` is `[C_in, H, W]`; the state is `[C_h, H, W]`.
pub fn clstm_step_on<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    prev: StateVars,
    w: &ClstmVars,
) -> Result<(StateVars, GateVars)> {
    let (xs, hs) = (tape.shape(x).to_vec(), tape.shape(prev.cell).to_vec());
    if xs.len() != 3 || hs.len() != 3 {
        return Err(Error::Rank {
            op: "clstm_step",
            expected: 3,
            shape: if xs.len() != 3 { xs } else { hs },
        });
    }
    for (i, axis) in [(1, "height"), (2, "width")] {
        if xs[i] != hs[i] {
            return Err(Error::Dimension {
                op: "clstm_step",
                axis,
                expected: hs[i],
                actual: xs[i],
            });
        }
    }
    if tape.shape(prev.hidden) != hs.as_slice() {
        return Err(Error::param("hidden and cell state shapes differ"));
    }
    let ch = hs[0];
    let gx = tape.conv2d(x, w.fused_input, Some(w.fused_bias), 1, Padding::Same)?;
    let gh = tape.conv2d(prev.hidden, w.fused_hidden, None, 1, Padding::Same)?;
    let pre = tape.add(gx, gh)?;
    let pi = tape.narrow(pre, 0, ch)?;
    let pf = tape.narrow(pre, ch, ch)?;
    let pc = tape.narrow(pre, 2 * ch, ch)?;
    let po = tape.narrow(pre, 3 * ch, ch)?;

    let peep_i = peephole_term(tape, w.peephole[0], prev.cell)?;
    let zi = tape.add(pi, peep_i)?;
    let i = tape.sigmoid(zi);
    let peep_f = peephole_term(tape, w.peephole[1], prev.cell)?;
    let zf = tape.add(pf, peep_f)?;
    let f = tape.sigmoid(zf);
    let g = tape.tanh(pc);
    let keep = tape.mul(f, prev.cell)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let peep_o = peephole_term(tape, w.peephole[2], c)?;
    let zo = tape.add(po, peep_o)?;
    let o = tape.sigmoid(zo);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((
        StateVars { hidden: h, cell: c },
        GateVars {
            input: i,
            forget: f,
            output: o,
            candidate: g,
        },
    ))
}

/// Forward-only convenience wrapper around [`clstm_step_on`].
pub fn clstm_step<T: Real>(
    x: &Tensor<T>,
    prev: &CellState<T>,
    w: &ClstmWeights<T>,
) -> Result<(CellState<T>, GateActivations<T>)> {
    let mut tape = Tape::new();
    let vars = w.bind(&mut tape)?;
    let xv = tape.constant(x.clone());
    let state = StateVars::constant(&mut tape, prev);
    let (next, gates) = clstm_step_on(&mut tape, xv, state, &vars)?;
    Ok((
        next.values(&tape),
        GateActivations {
            input: tape.value(gates.input).clone(),
            forget: tape.value(gates.forget).clone(),
            output: tape.value(gates.output).clone(),
            candidate: tape.value(gates.candidate).clone(),
        },
    ))
}

/// Thread the state through `sequence` in order; returns every hidden state and the final state.
pub fn clstm_rollout_on<T: Real>(
    tape: &mut Tape<T>,
    sequence: &[Var],
    w: &ClstmVars,
    initial: StateVars,
) -> Result<(Vec<Var>, StateVars)> {
    let first = sequence
        .first()
        .ok_or_else(|| Error::param("rollout over an empty sequence"))?;
    let shape = tape.shape(*first).to_vec();
    let mut state = initial;
    let mut hidden = Vec::with_capacity(sequence.len());
    for (index, &x) in sequence.iter().enumerate() {
        if tape.shape(x) != shape.as_slice() {
            return Err(Error::ShapeDrift {
                index,
                expected: shape,
                actual: tape.shape(x).to_vec(),
            });
        }
        let (next, _) = clstm_step_on(tape, x, state, w)?;
        hidden.push(next.hidden);
        state = next;
    }
    Ok((hidden, state))
}

/// Forward-only rollout from `initial`.
pub fn clstm_rollout<T: Real>(
    sequence: &[Tensor<T>],
    w: &ClstmWeights<T>,
    initial: &CellState<T>,
) -> Result<(Vec<Tensor<T>>, CellState<T>)> {
    let mut tape = Tape::new();
    let vars = w.bind(&mut tape)?;
    let xs: Vec<Var> = sequence.iter().map(|x| tape.constant(x.clone())).collect();
    let init = StateVars::constant(&mut tape, initial);
    let (hidden, last) = clstm_rollout_on(&mut tape, &xs, &vars, init)?;
    let out = hidden.iter().map(|&h| tape.value(h).clone()).collect();
    Ok((out, last.values(&tape)))
}

/// What happens to the state at a truncation boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoundaryPolicy {
    /// Carry the state values forward, but treat them as constants.
    #[default]
    CarryStateDetachGrad,
}

/// Gradients from one truncation window.
#[derive(Clone, Debug)]
pub struct WindowGrads<T: Real> {
    pub loss: f64,
    pub weights: ClstmWeights<T>,
    /// Gradient for every slice of the full sequence; zero outside the window.
    pub inputs: Vec<Tensor<T>>,
    /// State carried into the next window.
    pub carried: CellState<T>,
}

/// Truncated backpropagation through time. The sequence is cut into windows of
/// `window` steps; `loss` maps the hidden states of one window (and its
/// index) to a scalar. Each window is differentiated on its own tape.
pub fn truncated_bptt<T, L>(
    sequence: &[Tensor<T>],
    w: &ClstmWeights<T>,
    initial: &CellState<T>,
    window: usize,
    _policy: BoundaryPolicy,
    loss: L,
) -> Result<Vec<WindowGrads<T>>>
where
    T: Real,
    L: Fn(&mut Tape<T>, usize, &[Var]) -> Result<Var>,
{
    if sequence.is_empty() || window == 0 {
        return Err(Error::param("truncated_bptt needs a non-empty sequence and window"));
    }
    let mut carried = initial.clone();
    let mut out = Vec::new();
    for (index, chunk) in sequence.chunks(window).enumerate() {
        let mut tape = Tape::new();
        let vars = w.bind(&mut tape)?;
        let xs: Vec<Var> = chunk.iter().map(|x| tape.param(x.clone())).collect();
        let init = StateVars::constant(&mut tape, &carried);
        let (hidden, last) = clstm_rollout_on(&mut tape, &xs, &vars, init)?;
        let l = loss(&mut tape, index, &hidden)?;
        tape.backward(l)?;
        let grad_or_zero = |v: Var, t: &Tape<T>| {
            t.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape(v)))
        };
        let weights = ClstmWeights {
            input: vars.input.map(|v| grad_or_zero(v, &tape)),
            hidden: vars.hidden.map(|v| grad_or_zero(v, &tape)),
            peephole: vars.peephole.map(|v| grad_or_zero(v, &tape)),
            bias: vars.bias.map(|v| grad_or_zero(v, &tape)),
        };
        let start = index * window;
        let inputs = sequence
            .iter()
            .enumerate()
            .map(|(t, x)| {
                if t >= start && t < start + chunk.len() {
                    grad_or_zero(xs[t - start], &tape)
                } else {
                    Tensor::zeros(x.shape())
                }
            })
            .collect();
        carried = last.values(&tape);
        out.push(WindowGrads {
            loss: tape.value(l).item().as_f64(),
            weights,
            inputs,
            carried: carried.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::{grad_check_with, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| r.gen_range(-scale..scale))
    }

    fn random_clstm(shape: &ClstmShape, r: &mut ChaCha8Rng) -> ClstmWeights<f64> {
        let mut w = ClstmWeights::zeros(shape);
        for t in w.input.iter_mut().chain(&mut w.hidden).chain(&mut w.peephole).chain(&mut w.bias) {
            uniform_fill(t, 0.5, r);
        }
        w
    }

    #[test]
    fn zero_lstm_gives_half_gates_and_zero_state() {
        let w = LstmWeights::<f64>::zeros(3, 4);
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let (s, g) = lstm_step(&x, &CellState::zeros(&[4]), &w).unwrap();
        for gate in [&g.input, &g.forget, &g.output] {
            assert!(gate.data().iter().all(|&v| v == 0.5));
        }
        assert!(s.cell.data().iter().all(|&v| v == 0.0));
        assert!(s.hidden.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut w = LstmWeights::<f64>::zeros(2, 3);
        w.bias[1] = Tensor::full(&[3], 20.0);
        let prev = CellState {
            hidden: Tensor::zeros(&[3]),
            cell: Tensor::new(&[3], vec![0.7, -1.2, 3.0]).unwrap(),
        };
        let (s, _) = lstm_step(&Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), &prev, &w).unwrap();
        assert!(s.cell.max_abs_diff(&prev.cell) < 1e-8);
    }

    #[test]
    fn lstm_matches_direct_transcription() {
        let mut r = rng(11);
        for _ in 0..20 {
            let w = LstmWeights::<f64>::random(5, 4, 0.8, &mut r);
            let x = random_tensor(&[5], 1.0, &mut r);
            let prev = CellState {
                hidden: random_tensor(&[4], 1.0, &mut r),
                cell: random_tensor(&[4], 1.0, &mut r),
            };
            let (s, _) = lstm_step(&x, &prev, &w).unwrap();
            let (h, c) = oracle::lstm_reference(&w, x.data(), prev.hidden.data(), prev.cell.data());
            for k in 0..4 {
                assert!((s.hidden.data()[k] - h[k]).abs() < 1e-12);
                assert!((s.cell.data()[k] - c[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lstm_rejects_bad_input_size() {
        let w = LstmWeights::<f64>::zeros(3, 2);
        assert!(matches!(
            lstm_step(&Tensor::zeros(&[4]), &CellState::zeros(&[2]), &w),
            Err(Error::Dimension { axis: "input", .. })
        ));
    }

    #[test]
    fn zero_clstm_outputs_zero() {
        let shape = ClstmShape {
            in_channels: 2,
            hidden_channels: 3,
            height: 5,
            width: 4,
            kernel: 3,
            peephole: PeepholeMode::Full,
        };
        let w = ClstmWeights::<f64>::zeros(&shape);
        let x = random_tensor(&[2, 5, 4], 3.0, &mut rng(1));
        let (s, g) = clstm_step(&x, &CellState::zeros(&[3, 5, 4]), &w).unwrap();
        assert!(s.hidden.data().iter().all(|&v| v == 0.0));
        assert!(s.cell.data().iter().all(|&v| v == 0.0));
        assert!(g.input.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gates_stay_in_open_intervals() {
        let shape = ClstmShape {
            in_channels: 2,
            hidden_channels: 2,
            height: 4,
            width: 4,
            kernel: 3,
            peephole: PeepholeMode::Full,
        };
        let mut r = rng(5);
        let w = random_clstm(&shape, &mut r);
        let x = random_tensor(&[2, 4, 4], 2.0, &mut r);
        let prev = CellState {
            hidden: random_tensor(&[2, 4, 4], 1.0, &mut r),
            cell: random_tensor(&[2, 4, 4], 1.0, &mut r),
        };
        let (_, g) = clstm_step(&x, &prev, &w).unwrap();
        for gate in [&g.input, &g.forget, &g.output] {
            assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(g.candidate.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn spatial_mismatch_is_a_dimension_error() {
        let shape = ClstmShape {
            in_channels: 1,
            hidden_channels: 2,
            height: 4,
            width: 4,
            kernel: 3,
            peephole: PeepholeMode::Full,
        };
        let w = ClstmWeights::<f64>::zeros(&shape);
        let err = clstm_step(&Tensor::zeros(&[1, 4, 5]), &CellState::zeros(&[2, 4, 4]), &w).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "width", .. }));
    }

    #[test]
    fn center_tap_clstm_reduces_to_lstm() {
        let mut r = rng(77);
        for _ in 0..10 {
            let dense = LstmWeights::<f64>::random(3, 4, 0.9, &mut r);
            let conv = oracle::clstm_from_lstm(&dense);
            let x = random_tensor(&[3], 1.0, &mut r);
            let prev = CellState {
                hidden: random_tensor(&[4], 1.0, &mut r),
                cell: random_tensor(&[4], 1.0, &mut r),
            };
            let (ds, _) = lstm_step(&x, &prev, &dense).unwrap();
            let as_map = |t: &Tensor<f64>| t.clone().reshape(&[t.numel(), 1, 1]).unwrap();
            let (cs, _) = clstm_step(
                &as_map(&x),
                &CellState {
                    hidden: as_map(&prev.hidden),
                    cell: as_map(&prev.cell),
                },
                &conv,
            )
            .unwrap();
            assert!(cs.hidden.max_abs_diff(&as_map(&ds.hidden)) <= 1e-12);
            assert!(cs.cell.max_abs_diff(&as_map(&ds.cell)) <= 1e-12);
        }
    }

    #[test]
    fn interior_is_translation_invariant() {
        let shape = ClstmShape {
            in_channels: 2,
            hidden_channels: 3,
            height: 9,
            width: 9,
            kernel: 3,
            peephole: PeepholeMode::Full,
        };
        let mut r = rng(8);
        let mut w = random_clstm(&shape, &mut r);
        // spatially constant peepholes keep the cell translation invariant
        for p in &mut w.peephole {
            let vals: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
            *p = Tensor::from_fn(&[3, 9, 9], |i| vals[i / 81]);
        }
        let x = Tensor::from_fn(&[2, 9, 9], |i| if i < 81 { 0.7 } else { -0.4 });
        let prev = CellState {
            hidden: Tensor::from_fn(&[3, 9, 9], |i| [0.2, -0.1, 0.5][i / 81]),
            cell: Tensor::from_fn(&[3, 9, 9], |i| [-0.3, 0.9, 0.1][i / 81]),
        };
        let (s, _) = clstm_step(&x, &prev, &w).unwrap();
        for c in 0..3 {
            let reference = s.hidden.at3(c, 4, 4);
            for y in 2..7 {
                for xx in 2..7 {
                    assert!((s.hidden.at3(c, y, xx) - reference).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn rollout_of_one_equals_step_and_rejects_empty() {
        let shape = ClstmShape {
            in_channels: 1,
            hidden_channels: 2,
            height: 4,
            width: 4,
            kernel: 3,
            peephole: PeepholeMode::PerChannel,
        };
        let mut r = rng(3);
        let w = random_clstm(&shape, &mut r);
        let x = random_tensor(&[1, 4, 4], 1.0, &mut r);
        let init = CellState::zeros(&[2, 4, 4]);
        let (hs, last) = clstm_rollout(std::slice::from_ref(&x), &w, &init).unwrap();
        let (s, _) = clstm_step(&x, &init, &w).unwrap();
        assert_eq!(hs[0], s.hidden);
        assert_eq!(last, s);
        assert!(clstm_rollout(&[], &w, &init).is_err());
        let zero = ClstmWeights::zeros(&shape);
        let (hs, _) = clstm_rollout(&[x.clone(), x], &zero, &init).unwrap();
        assert!(hs.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rollout_gradients_match_finite_differences() {
        let shape = ClstmShape {
            in_channels: 1,
            hidden_channels: 2,
            height: 8,
            width: 8,
            kernel: 3,
            peephole: PeepholeMode::Full,
        };
        let mut r = rng(21);
        let w = random_clstm(&shape, &mut r);
        let seq: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&[1, 8, 8], 1.0, &mut r)).collect();
        let target = random_tensor(&[2, 8, 8], 1.0, &mut r);
        let points: Vec<Tensor<f64>> = w.tensors().cloned().collect();
        let report = grad_check_with(
            |tape, v| {
                let vars = ClstmVars::fuse(
                    tape,
                    [v[0], v[1], v[2], v[3]],
                    [v[4], v[5], v[6], v[7]],
                    [v[8], v[9], v[10]],
                    [v[11], v[12], v[13], v[14]],
                )?;
                let xs: Vec<Var> = seq.iter().map(|x| tape.constant(x.clone())).collect();
                let init = StateVars::zeros(tape, &[2, 8, 8]);
                let (hs, _) = clstm_rollout_on(tape, &xs, &vars, init)?;
                let t = tape.constant(target.clone());
                let mut acc = None;
                for h in hs {
                    let p = tape.mul(h, t)?;
                    let s = tape.sum(p);
                    acc = Some(match acc {
                        None => s,
                        Some(a) => tape.add(a, s)?,
                    });
                }
                Ok(acc.unwrap())
            },
            &points,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn window_loss(tape: &mut Tape<f64>, _index: usize, hs: &[Var]) -> Result<Var> {
        let mut acc = tape.sum(hs[0]);
        for &h in &hs[1..] {
            let sq = tape.mul(h, h)?;
            let s = tape.sum(sq);
            acc = tape.add(acc, s)?;
        }
        Ok(acc)
    }

    fn bptt_fixture() -> (Vec<Tensor<f64>>, ClstmWeights<f64>, CellState<f64>) {
        let shape = ClstmShape {
            in_channels: 1,
            hidden_channels: 2,
            height: 4,
            width: 4,
            kernel: 3,
            peephole: PeepholeMode::Full,
        };
        let mut r = rng(99);
        let w = random_clstm(&shape, &mut r);
        let seq = (0..6).map(|_| random_tensor(&[1, 4, 4], 1.0, &mut r)).collect();
        (seq, w, CellState::zeros(&[2, 4, 4]))
    }

    #[test]
    fn single_window_equals_full_bptt() {
        let (seq, w, init) = bptt_fixture();
        let windows = truncated_bptt(&seq, &w, &init, 6, BoundaryPolicy::default(), window_loss).unwrap();
        assert_eq!(windows.len(), 1);

        let mut tape = Tape::new();
        let vars = w.bind(&mut tape).unwrap();
        let xs: Vec<Var> = seq.iter().map(|x| tape.param(x.clone())).collect();
        let s0 = StateVars::constant(&mut tape, &init);
        let (hs, _) = clstm_rollout_on(&mut tape, &xs, &vars, s0).unwrap();
        let l = window_loss(&mut tape, 0, &hs).unwrap();
        tape.backward(l).unwrap();
        for (v, g) in vars.input.iter().zip(&windows[0].weights.input) {
            assert_eq!(tape.grad(*v).unwrap(), g);
        }
        for (v, g) in xs.iter().zip(&windows[0].inputs) {
            assert_eq!(tape.grad(*v).unwrap(), g);
        }
    }

    #[test]
    fn later_windows_do_not_reach_earlier_slices() {
        let (seq, w, init) = bptt_fixture();
        let windows = truncated_bptt(&seq, &w, &init, 3, BoundaryPolicy::default(), window_loss).unwrap();
        assert_eq!(windows.len(), 2);
        for t in 0..3 {
            assert!(windows[1].inputs[t].data().iter().all(|&v| v == 0.0));
        }
        assert!(windows[1].inputs[3].data().iter().any(|&v| v != 0.0));

        // without truncation the second window's loss does reach the first slices
        let mut tape = Tape::new();
        let vars = w.bind(&mut tape).unwrap();
        let xs: Vec<Var> = seq.iter().map(|x| tape.param(x.clone())).collect();
        let s0 = StateVars::constant(&mut tape, &init);
        let (hs, _) = clstm_rollout_on(&mut tape, &xs, &vars, s0).unwrap();
        let l = window_loss(&mut tape, 1, &hs[3..]).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(xs[0]).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn carried_state_matches_untruncated_forward() {
        let (seq, w, init) = bptt_fixture();
        let windows = truncated_bptt(&seq, &w, &init, 2, BoundaryPolicy::default(), window_loss).unwrap();
        let (hs, last) = clstm_rollout(&seq, &w, &init).unwrap();
        assert_eq!(windows.last().unwrap().carried, last);
        let (hs_first, mid) = clstm_rollout(&seq[..4], &w, &init).unwrap();
        assert_eq!(windows[1].carried, mid);
        assert_eq!(hs_first[3], hs[3]);
    }

    #[test]
    fn parameter_count_closed_form() {
        let shape = ClstmShape {
            in_channels: 8,
            hidden_channels: 8,
            height: 16,
            width: 16,
            kernel: 3,
            peephole: PeepholeMode::Full,
        };
        let w = ClstmWeights::<f32>::init(&shape, &mut rng(0));
        let counted: usize = w.tensors().map(|t| t.numel()).sum();
        assert_eq!(counted, shape.parameter_count());
        assert_eq!(counted, 4 * 576 + 4 * 576 + 3 * 2048 + 4 * 8);
        assert!(w.bias[1].data().iter().all(|&v| v == 1.0));
        assert!(w.bias[0].data().iter().all(|&v| v == 0.0));
    }
}
