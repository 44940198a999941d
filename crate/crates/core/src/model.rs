//! Recurrent U-net and its plain U-net counterpart.
//!
//! Parameters live in one flat list in declaration order (encoder levels top
//! to bottom, then decoder levels bottom to top, then the output head). The
//! layer layout is a pure function of the [`NetworkSpec`], so a spec plus the
//! flat list is enough to rebuild a model.

use std::collections::BTreeSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::recurrent::{clstm_step_on, uniform_fill, CellState, ClstmShape, ClstmVars, PeepholeMode, StateVars};
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

/// Declarative network description.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Number of resolution levels.
    pub depth: usize,
    /// Channels at full resolution; doubled at each level below.
    pub base_filters: usize,
    /// 1-based levels whose second layer is a convolutional LSTM, in both
    /// the encoder and the decoder. Level 1 is full resolution.
    pub clstm_levels: BTreeSet<usize>,
    /// Slice height and width.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub dropout_rate: f64,
    pub peephole: PeepholeMode,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            depth: 5,
            base_filters: 32,
            clstm_levels: odd_levels(5),
            input_size: (256, 256),
            in_channels: 1,
            dropout_rate: 0.3,
            peephole: PeepholeMode::Full,
        }
    }
}

/// `{1, 3, 5, ...}` up to `depth`.
pub fn odd_levels(depth: usize) -> BTreeSet<usize> {
    (1..=depth).step_by(2).collect()
}

impl NetworkSpec {
    /// Small configuration for desk-scale runs.
    pub fn desk(input_size: (usize, usize)) -> Self {
        NetworkSpec {
            depth: 3,
            base_filters: 8,
            clstm_levels: odd_levels(3),
            input_size,
            ..Self::default()
        }
    }

    pub fn is_recurrent(&self) -> bool {
        !self.clstm_levels.is_empty()
    }

    pub fn without_recurrence(&self) -> Self {
        NetworkSpec {
            clstm_levels: BTreeSet::new(),
            ..self.clone()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << (level - 1)
    }

    pub fn level_size(&self, level: usize) -> (usize, usize) {
        (self.input_size.0 >> (level - 1), self.input_size.1 >> (level - 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_filters == 0 || self.in_channels == 0 {
            return Err(Error::config("depth, base_filters and in_channels must be positive"));
        }
        if self.depth > 12 {
            return Err(Error::config(format!("depth {} is too large", self.depth)));
        }
        let div = 1usize << (self.depth - 1);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "input size {h}x{w} must be divisible by {div} (2^(depth-1)) at depth {}",
                self.depth
            )));
        }
        if let Some(&l) = self.clstm_levels.iter().find(|&&l| l == 0 || l > self.depth) {
            return Err(Error::config(format!("recurrent level {l} outside 1..={}", self.depth)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn clstm_shape(&self, level: usize, in_channels: usize) -> ClstmShape {
        let (height, width) = self.level_size(level);
        ClstmShape {
            in_channels,
            hidden_channels: self.channels(level),
            height,
            width,
            kernel: 3,
            peephole: self.peephole,
        }
    }
}

/// Second layer of a block.
#[derive(Clone, Debug, PartialEq)]
enum SecondLayer {
    Conv { weight: usize, bias: usize },
    /// Index of the first of 15 parameters, plus the cell's slot among all cells.
    Clstm { first: usize, cell: usize, shape: ClstmShape },
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv_weight: usize,
    conv_bias: usize,
    second: SecondLayer,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoder: Vec<Block>,
    /// `(up weight, up bias, block)` from the level above the bottom upwards.
    decoder: Vec<(usize, usize, Block)>,
    head_weight: usize,
    head_bias: usize,
    /// Name and shape of every parameter in declaration order.
    params: Vec<(String, Vec<usize>)>,
    cells: Vec<ClstmShape>,
}

impl Layout {
    fn new(spec: &NetworkSpec) -> Self {
        let mut params: Vec<(String, Vec<usize>)> = Vec::new();
        let mut cells = Vec::new();
        let push = |params: &mut Vec<(String, Vec<usize>)>, name: String, shape: Vec<usize>| {
            params.push((name, shape));
            params.len() - 1
        };
        let block = |params: &mut Vec<(String, Vec<usize>)>, cells: &mut Vec<ClstmShape>, tag: &str, level: usize, cin: usize| {
            let c = spec.channels(level);
            let conv_weight = push(params, format!("{tag}.conv1.weight"), vec![c, cin, 3, 3]);
            let conv_bias = push(params, format!("{tag}.conv1.bias"), vec![c]);
            let second = if spec.clstm_levels.contains(&level) {
                let shape = spec.clstm_shape(level, c);
                let first = params.len();
                for g in ["i", "f", "c", "o"] {
                    push(params, format!("{tag}.clstm.input_{g}"), shape.input_kernel().to_vec());
                }
                for g in ["i", "f", "c", "o"] {
                    push(params, format!("{tag}.clstm.hidden_{g}"), shape.hidden_kernel().to_vec());
                }
                for g in ["i", "f", "o"] {
                    push(params, format!("{tag}.clstm.peephole_{g}"), shape.peephole_shape());
                }
                for g in ["i", "f", "c", "o"] {
                    push(params, format!("{tag}.clstm.bias_{g}"), vec![c]);
                }
                cells.push(shape);
                SecondLayer::Clstm {
                    first,
                    cell: cells.len() - 1,
                    shape,
                }
            } else {
                SecondLayer::Conv {
                    weight: push(params, format!("{tag}.conv2.weight"), vec![c, c, 3, 3]),
                    bias: push(params, format!("{tag}.conv2.bias"), vec![c]),
                }
            };
            Block {
                conv_weight,
                conv_bias,
                second,
            }
        };

        let mut encoder = Vec::new();
        for level in 1..=spec.depth {
            let cin = if level == 1 { spec.in_channels } else { spec.channels(level - 1) };
            encoder.push(block(&mut params, &mut cells, &format!("enc{level}"), level, cin));
        }
        let mut decoder = Vec::new();
        for level in (1..spec.depth).rev() {
            let c = spec.channels(level);
            let up_w = push(&mut params, format!("dec{level}.up.weight"), vec![c, spec.channels(level + 1), 3, 3]);
            let up_b = push(&mut params, format!("dec{level}.up.bias"), vec![c]);
            let b = block(&mut params, &mut cells, &format!("dec{level}"), level, 2 * c);
            decoder.push((up_w, up_b, b));
        }
        let head_weight = push(&mut params, "head.weight".into(), vec![1, spec.channels(1), 1, 1]);
        let head_bias = push(&mut params, "head.bias".into(), vec![1]);
        Layout {
            encoder,
            decoder,
            head_weight,
            head_bias,
            params,
            cells,
        }
    }
}

/// A network: its spec, derived layout, and parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    spec: NetworkSpec,
    layout: Layout,
    params: Vec<Tensor<T>>,
}

/// Recurrent state of every cell in the network, in declaration order.
pub type NetState<T> = Vec<CellState<T>>;

/// Model parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub params: Vec<Var>,
    cells: Vec<ClstmVars>,
}

/// Build a network with parameters drawn from `seed`.
pub fn build_runet<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Model<T>> {
    Model::init(spec, seed)
}

/// [`build_runet`] with every recurrent layer replaced by a convolution.
pub fn build_unet<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<Model<T>> {
    Model::init(&spec.without_recurrence(), seed)
}

/// Total number of trainable scalars.
pub fn count_parameters<T: Real>(model: &Model<T>) -> usize {
    model.params.iter().map(Tensor::numel).sum()
}

/// Same spec without recurrence, with the base width whose parameter count is
/// closest to that of `spec`.
pub fn parameter_matched_unet(spec: &NetworkSpec) -> Result<NetworkSpec> {
    spec.validate()?;
    let target = Model::<f32>::parameter_count(spec) as i64;
    let mut best = spec.without_recurrence();
    let mut best_gap = i64::MAX;
    for base in 1..=spec.base_filters * 4 {
        let candidate = NetworkSpec {
            base_filters: base,
            ..spec.without_recurrence()
        };
        let gap = (Model::<f32>::parameter_count(&candidate) as i64 - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best = candidate;
        }
    }
    Ok(best)
}

impl<T: Real> Model<T> {
    /// Convolutions use He-uniform initialization, recurrent cells their own
    /// scheme (see [`ClstmShape`]); all biases start at zero except the
    /// forget gate's.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(spec);
        let mut params: Vec<Tensor<T>> = layout.params.iter().map(|(_, s)| Tensor::zeros(s)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |t: &mut Tensor<T>, rng: &mut ChaCha8Rng| {
            let s = t.shape();
            let fan_in = s[1] * s[2] * s[3];
            uniform_fill(t, (6.0 / fan_in as f64).sqrt(), rng);
        };
        let blocks = layout.encoder.iter().map(|b| (None, b)).chain(
            layout.decoder.iter().map(|(w, _, b)| (Some(*w), b)),
        );
        for (up, block) in blocks {
            if let Some(w) = up {
                he(&mut params[w], &mut rng);
            }
            he(&mut params[block.conv_weight], &mut rng);
            match &block.second {
                SecondLayer::Conv { weight, .. } => he(&mut params[*weight], &mut rng),
                SecondLayer::Clstm { first, shape, .. } => {
                    let k2 = (shape.kernel * shape.kernel) as f64;
                    let si = 1.0 / (shape.in_channels as f64 * k2).sqrt();
                    let sh = 1.0 / (shape.hidden_channels as f64 * k2).sqrt();
                    for g in 0..4 {
                        uniform_fill(&mut params[first + g], si, &mut rng);
                    }
                    for g in 4..8 {
                        uniform_fill(&mut params[first + g], sh, &mut rng);
                    }
                    params[first + 12] = Tensor::ones(&[shape.hidden_channels]);
                }
            }
        }
        let head_fan = spec.channels(1) as f64;
        uniform_fill(&mut params[layout.head_weight], 1.0 / head_fan.sqrt(), &mut rng);
        Ok(Model {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    /// Rebuild from a spec and parameter values in declaration order.
    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.params.len() {
            return Err(Error::param(format!(
                "spec declares {} parameter tensors, got {}",
                layout.params.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in layout.params.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::param(format!("{name}: expected shape {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(Model { spec, layout, params })
    }

    /// Shape of every parameter tensor in declaration order.
    pub fn parameter_shapes(spec: &NetworkSpec) -> Vec<Vec<usize>> {
        Layout::new(spec).params.into_iter().map(|(_, s)| s).collect()
    }

    /// Closed-form parameter count of the network `spec` would build.
    pub fn parameter_count(spec: &NetworkSpec) -> usize {
        Layout::new(spec).params.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// All-zero state for the start of a sequence.
    pub fn zero_state(&self) -> NetState<T> {
        self.layout
            .cells
            .iter()
            .map(|s| CellState::zeros(&s.state_shape()))
            .collect()
    }

    /// Record the parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<BoundModel> {
        let vars = self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect();
        self.bind_vars(tape, vars)
    }

    /// Use existing tape variables as the parameters.
    pub fn bind_vars(&self, tape: &mut Tape<T>, params: Vec<Var>) -> Result<BoundModel> {
        if params.len() != self.params.len() {
            return Err(Error::param("parameter variable count does not match the model"));
        }
        let mut cells = Vec::with_capacity(self.layout.cells.len());
        let blocks = self
            .layout
            .encoder
            .iter()
            .chain(self.layout.decoder.iter().map(|(_, _, b)| b));
        for block in blocks {
            if let SecondLayer::Clstm { first, .. } = block.second {
                let p = |k: usize| params[first + k];
                cells.push(ClstmVars::fuse(
                    tape,
                    [p(0), p(1), p(2), p(3)],
                    [p(4), p(5), p(6), p(7)],
                    [p(8), p(9), p(10)],
                    [p(11), p(12), p(13), p(14)],
                )?);
            }
        }
        Ok(BoundModel { params, cells })
    }

    fn check_slice(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.spec.input_size;
        let expected = [self.spec.in_channels, h, w];
        for (i, axis) in ["channels", "height", "width"].into_iter().enumerate() {
            if shape.get(i) != Some(&expected[i]) || shape.len() != 3 {
                return Err(Error::Dimension {
                    op: "forward_slice",
                    axis,
                    expected: expected[i],
                    actual: shape.get(i).copied().unwrap_or(0),
                });
            }
        }
        Ok(())
    }

    fn block_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        block: &Block,
        x: Var,
        state: &mut [StateVars],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p = &bound.params;
        let rate = self.spec.dropout_rate;
        let mut drop = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            match rng {
                Some(r) => tape.dropout(v, rate, true, &mut **r),
                None => Ok(v),
            }
        };
        let h = tape.conv2d(x, p[block.conv_weight], Some(p[block.conv_bias]), 1, Padding::Same)?;
        let h = tape.relu(h);
        let h = drop(tape, h)?;
        let h = match &block.second {
            SecondLayer::Conv { weight, bias } => tape.conv2d(h, p[*weight], Some(p[*bias]), 1, Padding::Same)?,
            SecondLayer::Clstm { cell, .. } => {
                let (next, _) = clstm_step_on(tape, h, state[*cell], &bound.cells[*cell])?;
                state[*cell] = next;
                next.hidden
            }
        };
        let h = tape.relu(h);
        drop(tape, h)
    }

    /// One slice `[C, H, W]` through the network, updating `state` in place.
    /// Dropout is active iff `rng` is given. Returns the `[1, H, W]` probability map.
    pub fn forward_slice(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        x: Var,
        state: &mut [StateVars],
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_slice(tape.shape(x))?;
        if state.len() != self.layout.cells.len() {
            return Err(Error::param("state does not match the network's recurrent cells"));
        }
        let p = &bound.params;
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut h = x;
        for (i, block) in self.layout.encoder.iter().enumerate() {
            h = self.block_forward(tape, bound, block, h, state, &mut rng)?;
            if i + 1 < self.layout.encoder.len() {
                skips.push(h);
                h = tape.maxpool2d(h)?;
            }
        }
        for (up_w, up_b, block) in &self.layout.decoder {
            let up = tape.conv_transpose2d(h, p[*up_w], Some(p[*up_b]))?;
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = tape.concat_channels(skip, up)?;
            h = self.block_forward(tape, bound, block, cat, state, &mut rng)?;
        }
        let logits = tape.conv2d(h, p[self.layout.head_weight], Some(p[self.layout.head_bias]), 1, Padding::Same)?;
        Ok(tape.sigmoid(logits))
    }

    /// Run a whole slice sequence from a zero state. Each slice gets its own
    /// tape with the incoming state recorded as constants.
    pub fn forward_volume(&self, slices: &[Tensor<T>], training: bool, seed: u64) -> Result<Vec<Tensor<T>>> {
        let first = slices
            .first()
            .ok_or_else(|| Error::param("forward over an empty slice sequence"))?;
        self.check_slice(first.shape())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.zero_state();
        let mut out = Vec::with_capacity(slices.len());
        for (index, slice) in slices.iter().enumerate() {
            if slice.shape() != first.shape() {
                return Err(Error::ShapeDrift {
                    index,
                    expected: first.shape().to_vec(),
                    actual: slice.shape().to_vec(),
                });
            }
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false)?;
            let mut vars: Vec<StateVars> = state.iter().map(|s| StateVars::constant(&mut tape, s)).collect();
            let x = tape.constant(slice.clone());
            let r: Option<&mut dyn RngCore> = if training { Some(&mut rng) } else { None };
            let y = self.forward_slice(&mut tape, &bound, x, &mut vars, r)?;
            state = vars.iter().map(|v| v.values(&tape)).collect();
            out.push(tape.value(y).clone());
        }
        Ok(out)
    }
}

/// Draw a slice-shaped tensor; convenience for tests and smoke runs.
pub fn random_slice<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(0.0..1.0)))
}
