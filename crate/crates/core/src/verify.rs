//! Self-check suite: gradient checks against finite differences, the
//! recurrent-cell reduction, and fast kernels against the slow oracles.
//!
//! Every check returns its measured error together with the tolerance it was
//! judged against, so callers can print or assert on the numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{dsi, surface_distances, BinaryVolume};
use crate::model::{build_runet, random_slice, NetworkSpec};
use crate::oracle;
use crate::recurrent::{
    clstm_rollout_on, clstm_step, clstm_step_on, lstm_step, uniform_fill, CellState, ClstmShape, ClstmVars,
    ClstmWeights, LstmWeights, PeepholeMode, StateVars,
};
use crate::tensor::{
    conv2d, conv_transpose2d, grad_check_with, maxpool2d, ConvKernel, Fault, GradCheckOptions, Padding, Tape,
    Tensor, Var,
};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const REDUCTION_TOLERANCE: f64 = 1e-12;
pub const CONV_TOLERANCE: f64 = 1e-10;
pub const ADJOINT_TOLERANCE: f64 = 1e-8;
pub const DISTANCE_TOLERANCE: f64 = 1e-9;

/// Which group a check belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Gradients,
    Reduction,
    Oracles,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub group: Group,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(group: Group, name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check {
            group,
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// Fault injected into every tape the gradient checks build.
    pub fault: Option<Fault>,
    pub seed: u64,
    /// Random weight draws for the recurrent-cell reduction.
    pub reduction_draws: usize,
    /// Random shape pairs for the metric oracles.
    pub metric_cases: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            fault: None,
            seed: 2024,
            reduction_draws: 100,
            metric_cases: 30,
        }
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for checks through a ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ r ⊙ y` with a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

type Body<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>;

/// Reverse-mode gradients of each primitive, the recurrent cell, a short
/// rollout and a small network, against central differences.
pub fn gradient_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fault = opts.fault;
    let gopts = GradCheckOptions::default();
    let mut out = Vec::new();
    let mut run = |name: &str, body: Body<'_>, points: Vec<Tensor<f64>>, tol: f64| -> Result<()> {
        let report = grad_check_with(
            |tape, v| {
                tape.inject_fault(fault);
                body(tape, v)
            },
            &points,
            gopts,
        )?;
        out.push(Check::at_most(Group::Gradients, name, report.max_rel_error, tol));
        Ok(())
    };

    let r8 = uniform(&[3, 6, 6], -1.0, 1.0, &mut rng);
    run(
        "conv2d same padding",
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)?;
            project(t, y, &r8)
        }),
        vec![uniform(&[2, 6, 6], -1.0, 1.0, &mut rng), uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng), uniform(&[3], -1.0, 1.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;
    let r_s2 = uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
    run(
        "conv2d stride 2",
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, Padding::Same)?;
            project(t, y, &r_s2)
        }),
        vec![uniform(&[2, 6, 6], -1.0, 1.0, &mut rng), uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;
    let r_up = uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
    run(
        "conv_transpose2d",
        Box::new(|t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]))?;
            project(t, y, &r_up)
        }),
        vec![uniform(&[3, 4, 4], -1.0, 1.0, &mut rng), uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng), uniform(&[2], -1.0, 1.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;
    let r_pool = uniform(&[2, 3, 3], -1.0, 1.0, &mut rng);
    run(
        "maxpool2d",
        Box::new(|t, v| {
            let y = t.maxpool2d(v[0])?;
            project(t, y, &r_pool)
        }),
        vec![uniform(&[2, 6, 6], -1.0, 1.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;
    let r_act = uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
    for (name, kind) in [("sigmoid", 0), ("tanh", 1), ("relu", 2)] {
        let r = r_act.clone();
        run(
            name,
            Box::new(move |t, v| {
                let y = match kind {
                    0 => t.sigmoid(v[0]),
                    1 => t.tanh(v[0]),
                    _ => t.relu(v[0]),
                };
                project(t, y, &r)
            }),
            vec![off_kink(&[2, 4, 4], &mut rng)],
            PRIMITIVE_TOLERANCE,
        )?;
    }
    run(
        "add and mul",
        Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[1])?;
            project(t, p, &r_act)
        }),
        vec![uniform(&[2, 4, 4], -1.0, 1.0, &mut rng), uniform(&[2, 4, 4], -1.0, 1.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;
    run(
        "mul_channel and scale",
        Box::new(|t, v| {
            let y = t.mul_channel(v[0], v[1])?;
            let y = t.scale(y, -1.7);
            project(t, y, &r_act)
        }),
        vec![uniform(&[2, 4, 4], -1.0, 1.0, &mut rng), uniform(&[2], -1.0, 1.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;
    let r_cat = uniform(&[5, 4, 4], -1.0, 1.0, &mut rng);
    let r_narrow = uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
    run(
        "concat, concat_channels and narrow",
        Box::new(|t, v| {
            let a = t.concat(&[v[0], v[1]])?;
            let b = t.concat_channels(a, v[0])?;
            let y = project(t, b, &r_cat)?;
            let n = t.narrow(b, 1, 2)?;
            let z = project(t, n, &r_narrow)?;
            t.add(y, z)
        }),
        vec![uniform(&[1, 4, 4], -1.0, 1.0, &mut rng), uniform(&[3, 4, 4], -1.0, 1.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;
    run(
        "dropout (fixed mask)",
        Box::new(|t, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            let y = t.dropout(v[0], 0.3, true, &mut mask_rng)?;
            project(t, y, &r_act)
        }),
        vec![uniform(&[2, 4, 4], -1.0, 1.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;
    let target = Tensor::from_fn(&[2, 4, 4], |_| rng.gen_bool(0.4) as u8 as f64);
    let mask = Tensor::from_fn(&[2, 4, 4], |_| rng.gen_bool(0.7) as u8 as f64);
    run(
        "masked dice loss",
        Box::new(|t, v| {
            let p = t.sigmoid(v[0]);
            t.dice_loss(p, &target, &mask, 1e-6)
        }),
        vec![uniform(&[2, 4, 4], -2.0, 2.0, &mut rng)],
        PRIMITIVE_TOLERANCE,
    )?;

    let shape = ClstmShape {
        in_channels: 2,
        hidden_channels: 2,
        height: 6,
        width: 6,
        kernel: 3,
        peephole: PeepholeMode::Full,
    };
    let mut w = ClstmWeights::<f64>::init(&shape, &mut rng);
    for t in w.peephole.iter_mut().chain(w.bias.iter_mut()) {
        uniform_fill(t, 0.5, &mut rng);
    }
    let weights: Vec<Tensor<f64>> = w.tensors().cloned().collect();
    let fuse = |t: &mut Tape<f64>, v: &[Var]| {
        ClstmVars::fuse(t, [v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]], [v[8], v[9], v[10]], [v[11], v[12], v[13], v[14]])
    };
    let x0 = uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let h0 = uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let c0 = uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let r_h = uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let r_c = uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let mut step_points = weights.clone();
    step_points.extend([x0, h0, c0]);
    run(
        "convolutional LSTM step",
        Box::new(|t, v| {
            let vars = fuse(t, v)?;
            let prev = StateVars { hidden: v[16], cell: v[17] };
            let (next, _) = clstm_step_on(t, v[15], prev, &vars)?;
            let a = project(t, next.hidden, &r_h)?;
            let b = project(t, next.cell, &r_c)?;
            t.add(a, b)
        }),
        step_points,
        PRIMITIVE_TOLERANCE,
    )?;
    let seq: Vec<Tensor<f64>> = (0..3).map(|_| uniform(&[2, 6, 6], -1.0, 1.0, &mut rng)).collect();
    run(
        "convolutional LSTM rollout of 3 slices",
        Box::new(|t, v| {
            let vars = fuse(t, v)?;
            let xs: Vec<Var> = seq.iter().map(|x| t.constant(x.clone())).collect();
            let init = StateVars::zeros(t, &[2, 6, 6]);
            let (hs, _) = clstm_rollout_on(t, &xs, &vars, init)?;
            let mut acc = project(t, hs[0], &r_h)?;
            for &h in &hs[1..] {
                let s = project(t, h, &r_c)?;
                acc = t.add(acc, s)?;
            }
            Ok(acc)
        }),
        weights,
        PRIMITIVE_TOLERANCE,
    )?;

    let spec = NetworkSpec {
        depth: 2,
        base_filters: 2,
        clstm_levels: [1].into(),
        input_size: (8, 8),
        in_channels: 1,
        dropout_rate: 0.0,
        peephole: PeepholeMode::Full,
    };
    let mut net = build_runet::<f64>(&spec, opts.seed)?;
    // zero-initialized biases leave whole regions sitting exactly on a ReLU kink
    let names: Vec<String> = net.param_names().map(String::from).collect();
    for (name, p) in names.iter().zip(net.params_mut()) {
        if name.contains("bias") {
            uniform_fill(p, 0.2, &mut rng);
        }
    }
    let slices: Vec<Tensor<f64>> = (0..3).map(|_| random_slice(&[1, 8, 8], &mut rng)).collect();
    let net_target = Tensor::from_fn(&[1, 8, 8], |_| rng.gen_bool(0.3) as u8 as f64);
    let params = net.params().to_vec();
    run(
        "RU-net depth 2 on 8x8 slices",
        Box::new(|t, v| {
            let bound = net.bind_vars(t, v.to_vec())?;
            let mut state: Vec<StateVars> = net.zero_state().iter().map(|c| StateVars::constant(t, c)).collect();
            let mut total = None;
            for x in &slices {
                let xv = t.constant(x.clone());
                let y = net.forward_slice(t, &bound, xv, &mut state, None)?;
                let l = t.dice_loss(y, &net_target, &Tensor::ones(&[1, 8, 8]), 1e-6)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => t.add(acc, l)?,
                });
            }
            Ok(total.expect("three slices"))
        }),
        params,
        NETWORK_TOLERANCE,
    )?;
    Ok(out)
}

/// At 1x1 spatial extent with centre-tap kernels the convolutional cell must
/// reproduce the dense peephole LSTM. Reports the largest deviation over all draws.
pub fn reduction_check(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for draw in 0..opts.reduction_draws {
        let (n_in, n_h) = (1 + draw % 4, 1 + (draw / 4) % 5);
        let dense = LstmWeights::<f64>::random(n_in, n_h, 1.5, &mut rng);
        let conv = oracle::clstm_from_lstm(&dense);
        let x = uniform(&[n_in], -2.0, 2.0, &mut rng);
        let prev = CellState {
            hidden: uniform(&[n_h], -1.0, 1.0, &mut rng),
            cell: uniform(&[n_h], -2.0, 2.0, &mut rng),
        };
        let (ds, dg) = lstm_step(&x, &prev, &dense)?;
        let map = |t: &Tensor<f64>| t.clone().reshape(&[t.numel(), 1, 1]);
        let (cs, cg) = clstm_step(
            &map(&x)?,
            &CellState {
                hidden: map(&prev.hidden)?,
                cell: map(&prev.cell)?,
            },
            &conv,
        )?;
        for (a, b) in [
            (&cs.hidden, &ds.hidden),
            (&cs.cell, &ds.cell),
            (&cg.input, &dg.input),
            (&cg.forget, &dg.forget),
            (&cg.output, &dg.output),
            (&cg.candidate, &dg.candidate),
        ] {
            worst = worst.max(a.max_abs_diff(&map(b)?));
        }
    }
    Ok(vec![Check::at_most(
        Group::Reduction,
        format!("centre-tap cell equals dense LSTM over {} draws", opts.reduction_draws),
        worst,
        REDUCTION_TOLERANCE,
    )])
}

fn random_shape(dims: [usize; 3], rng: &mut ChaCha8Rng) -> BinaryVolume {
    let mut b = BinaryVolume::empty(dims);
    for _ in 0..rng.gen_range(1..4) {
        let c: Vec<f64> = dims.iter().map(|&d| rng.gen_range(0.0..d as f64)).collect();
        let r = rng.gen_range(0.8..3.2);
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                    if d2 <= r * r {
                        b.set(x, y, z, true);
                    }
                }
            }
        }
    }
    b
}

/// Fast kernels and metrics against the brute-force implementations.
pub fn oracle_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x0dac);
    let mut out = Vec::new();

    let mut conv_err = 0.0f64;
    for (c, o, h, w, k, stride) in [(1, 1, 5, 5, 1, 1), (2, 3, 7, 6, 3, 1), (3, 2, 8, 8, 3, 2), (4, 5, 9, 7, 5, 1), (2, 2, 6, 9, 5, 2)] {
        let x = uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let wt = uniform(&[o, c, k, k], -1.0, 1.0, &mut rng);
        let b = uniform(&[o], -1.0, 1.0, &mut rng);
        let fast = conv2d(&x, &ConvKernel::new(wt.clone(), b.clone(), stride, Padding::Same)?)?;
        let slow = oracle::conv2d(&x, &wt, Some(&b), stride, k / 2);
        conv_err = conv_err.max(fast.max_abs_diff(&slow));
        let fast = conv2d(&x, &ConvKernel::new(wt.clone(), b.clone(), stride, Padding::Valid)?)?;
        let slow = oracle::conv2d(&x, &wt, Some(&b), stride, 0);
        conv_err = conv_err.max(fast.max_abs_diff(&slow));
    }
    out.push(Check::at_most(Group::Oracles, "conv2d vs sliding-window loops", conv_err, CONV_TOLERANCE));

    let mut pool_mismatch = 0usize;
    for _ in 0..10 {
        let c = rng.gen_range(1..4);
        let (h, w) = (2 * rng.gen_range(1..6), 2 * rng.gen_range(1..6));
        // a coarse grid makes ties common
        let x = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0..4) as f64);
        let (fast, idx) = maxpool2d(&x)?;
        let (slow, slow_idx) = oracle::window_max(&x);
        pool_mismatch += fast.data().iter().zip(slow.data()).filter(|(a, b)| a != b).count();
        pool_mismatch += idx.iter().zip(&slow_idx).filter(|(a, b)| a != b).count();
    }
    out.push(Check::at_most(Group::Oracles, "maxpool vs window scan (mismatches)", pool_mismatch as f64, 0.0));

    let mut adj_err = 0.0f64;
    for (i, o, h, w) in [(1, 1, 1, 1), (3, 2, 4, 5), (4, 3, 6, 6), (2, 5, 3, 7)] {
        let x = uniform(&[i, h, w], -1.0, 1.0, &mut rng);
        let wt = uniform(&[o, i, 3, 3], -1.0, 1.0, &mut rng);
        let y = uniform(&[o, 2 * h, 2 * w], -1.0, 1.0, &mut rng);
        let up = conv_transpose2d(&x, &ConvKernel::new(wt.clone(), Tensor::zeros(&[o]), 2, Padding::Same)?)?;
        let lhs = up.dot(&y);
        let rhs = x.dot(&oracle::conv_transpose_adjoint(&y, &wt));
        adj_err = adj_err.max((lhs - rhs).abs() / (1.0 + lhs.abs().max(rhs.abs())));
    }
    out.push(Check::at_most(Group::Oracles, "transposed conv adjointness (scaled)", adj_err, ADJOINT_TOLERANCE));

    let (mut dist_err, mut dsi_mismatch, mut cases) = (0.0f64, 0usize, 0usize);
    while cases < opts.metric_cases {
        let dims = [rng.gen_range(6..14), rng.gen_range(6..14), rng.gen_range(6..14)];
        let a = random_shape(dims, &mut rng);
        let b = random_shape(dims, &mut rng);
        let m = random_shape(dims, &mut rng);
        let too_big = |s: &BinaryVolume| crate::eval::surface(s).count() > 500;
        if a.is_empty() || b.is_empty() || too_big(&a) || too_big(&b) {
            continue;
        }
        cases += 1;
        let (mad, hdd) = surface_distances(&a, &b)?;
        let (omad, ohdd) = oracle::surface_distances(a.voxels(), b.voxels(), dims).expect("non-empty");
        dist_err = dist_err.max((mad - omad).abs()).max((hdd - ohdd).abs());
        for mask in [None, Some(&m)] {
            let all = vec![true; a.voxels().len()];
            let set_mask = mask.map_or(all.as_slice(), |m| m.voxels());
            if dsi(&a, &b, mask)? != oracle::set_dsi(a.voxels(), b.voxels(), set_mask) {
                dsi_mismatch += 1;
            }
        }
    }
    out.push(Check::at_most(Group::Oracles, "MAD/HDD vs all-pairs surface distances", dist_err, DISTANCE_TOLERANCE));
    out.push(Check::at_most(Group::Oracles, "DSI vs set arithmetic (mismatches)", dsi_mismatch as f64, 0.0));
    Ok(out)
}

/// All groups in order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = gradient_checks(opts)?;
    checks.extend(reduction_check(opts)?);
    checks.extend(oracle_checks(opts)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let checks = run_all(&VerifyOptions::default()).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(checks.len() >= 18);
    }

    #[test]
    fn perturbed_conv_backward_is_caught() {
        let opts = VerifyOptions {
            fault: Some(Fault::ConvWeightGrad),
            ..VerifyOptions::default()
        };
        let checks = gradient_checks(&opts).unwrap();
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert!(failed.contains(&"conv2d same padding"), "{failed:?}");
        assert!(failed.contains(&"RU-net depth 2 on 8x8 slices"), "{failed:?}");
        assert!(!failed.contains(&"maxpool2d"));
    }
}
