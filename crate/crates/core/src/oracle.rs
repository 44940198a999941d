//! Slow, direct reference implementations used to cross-check the fast paths.
//!
//! Nothing here shares code with the kernels it checks: convolutions are
//! plain nested loops, pooling scans windows, distances compare every pair,
//! and the LSTM is transcribed gate by gate.

use std::collections::BTreeSet;

use crate::recurrent::{ClstmWeights, LstmWeights};
use crate::tensor::Tensor;

/// Sliding-window cross-correlation of `x[C, H, W]` with `w[O, C, k, k]`,
/// zero padding `pad` on every side.
pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(ic * h + iy as usize) * wd + ix as usize];
                            acc += w.data()[((oc * c + ic) * k + ky) * k + kx] * xv;
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(&[o, oh, ow], out).expect("oracle output shape")
}

/// Stride-2 correlation of `y[O, 2H, 2W]` with the `[O, I, k, k]` weights of a
/// transposed convolution, giving `[I, H, W]`: the adjoint of that transposed
/// convolution.
pub fn conv_transpose_adjoint(y: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let (o, h2, w2) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let (i_c, k) = (w.shape()[1], w.shape()[2]);
    let pad = (k / 2) as isize;
    let (h, wd) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; i_c * h * wd];
    for ic in 0..i_c {
        for iy in 0..h {
            for ix in 0..wd {
                let mut acc = 0.0;
                for oc in 0..o {
                    for ky in 0..k {
                        for kx in 0..k {
                            let yy = 2 * iy as isize + ky as isize - pad;
                            let yx = 2 * ix as isize + kx as isize - pad;
                            if yy < 0 || yx < 0 || yy >= h2 as isize || yx >= w2 as isize {
                                continue;
                            }
                            acc += w.data()[((oc * i_c + ic) * k + ky) * k + kx]
                                * y.data()[(oc * h2 + yy as usize) * w2 + yx as usize];
                        }
                    }
                }
                out[(ic * h + iy) * wd + ix] = acc;
            }
        }
    }
    Tensor::new(&[i_c, h, wd], out).expect("oracle output shape")
}

/// 2x2 window maxima of `x[C, H, W]`, scanning each window row by row and
/// keeping the first of equal maxima. Returns values and flat argmax indices.
pub fn window_max(x: &Tensor<f64>) -> (Tensor<f64>, Vec<usize>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut vals = Vec::new();
    let mut idx = Vec::new();
    for ch in 0..c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut best: Option<(f64, usize)> = None;
                for y in 2 * oy..2 * oy + 2 {
                    for xx in 2 * ox..2 * ox + 2 {
                        let flat = (ch * h + y) * w + xx;
                        let v = x.data()[flat];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, flat));
                        }
                    }
                }
                let (v, i) = best.expect("non-empty window");
                vals.push(v);
                idx.push(i);
            }
        }
    }
    (Tensor::new(&[c, h / 2, w / 2], vals).expect("oracle output shape"), idx)
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gate-by-gate transcription of one peephole LSTM step. Returns `(h, c)`.
pub fn lstm_reference(w: &LstmWeights<f64>, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = w.hidden_size();
    let row = |m: &Tensor<f64>, r: usize, v: &[f64]| -> f64 {
        let cols = m.shape()[1];
        (0..cols).map(|j| m.data()[r * cols + j] * v[j]).sum()
    };
    let mut h = vec![0.0; n];
    let mut c = vec![0.0; n];
    for k in 0..n {
        let input_gate = logistic(
            row(&w.input[0], k, x) + row(&w.hidden[0], k, h_prev) + w.peephole[0].data()[k] * c_prev[k] + w.bias[0].data()[k],
        );
        let forget_gate = logistic(
            row(&w.input[1], k, x) + row(&w.hidden[1], k, h_prev) + w.peephole[1].data()[k] * c_prev[k] + w.bias[1].data()[k],
        );
        let candidate = (row(&w.input[2], k, x) + row(&w.hidden[2], k, h_prev) + w.bias[2].data()[k]).tanh();
        c[k] = forget_gate * c_prev[k] + input_gate * candidate;
        let output_gate = logistic(
            row(&w.input[3], k, x) + row(&w.hidden[3], k, h_prev) + w.peephole[2].data()[k] * c[k] + w.bias[3].data()[k],
        );
        h[k] = output_gate * c[k].tanh();
    }
    (h, c)
}

/// Embed dense LSTM weights as 3x3 centre-tap kernels over a 1x1 map.
pub fn clstm_from_lstm(w: &LstmWeights<f64>) -> ClstmWeights<f64> {
    let centre = |m: &Tensor<f64>| {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let mut k = Tensor::zeros(&[rows, cols, 3, 3]);
        for r in 0..rows {
            for c in 0..cols {
                k.data_mut()[(r * cols + c) * 9 + 4] = m.data()[r * cols + c];
            }
        }
        k
    };
    let n = w.hidden_size();
    ClstmWeights {
        input: std::array::from_fn(|g| centre(&w.input[g])),
        hidden: std::array::from_fn(|g| centre(&w.hidden[g])),
        peephole: std::array::from_fn(|g| w.peephole[g].clone().reshape(&[n, 1, 1]).expect("vector")),
        bias: w.bias.clone(),
    }
}

/// Dice index from explicit index sets; 1 when both sets are empty.
pub fn set_dsi(a: &[bool], b: &[bool], mask: &[bool]) -> f64 {
    let pick = |v: &[bool]| -> BTreeSet<usize> { (0..v.len()).filter(|&i| v[i] && mask[i]).collect() };
    let (sa, sb) = (pick(a), pick(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Foreground voxels of a `[X, Y, Z]` grid that touch background across a
/// face, with everything outside the grid counted as background.
pub fn surface_points(v: &[bool], dims: [usize; 3]) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = dims;
    let at = |x: isize, y: isize, z: isize| -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && v[((x as usize) * ny + y as usize) * nz + z as usize]
    };
    let mut pts = Vec::new();
    for x in 0..nx as isize {
        for y in 0..ny as isize {
            for z in 0..nz as isize {
                if !at(x, y, z) {
                    continue;
                }
                let faces = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if faces.iter().any(|&(dx, dy, dz)| !at(x + dx, y + dy, z + dz)) {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
    }
    pts
}

/// `(mean, max)` of symmetric surface distances by comparing every pair.
/// `None` if either volume is empty.
pub fn surface_distances(a: &[bool], b: &[bool], dims: [usize; 3]) -> Option<(f64, f64)> {
    let (pa, pb) = (surface_points(a, dims), surface_points(b, dims));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[[f64; 3]], to: &[[f64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let (dab, dba) = (directed(&pa, &pb), directed(&pb, &pa));
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let max = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
    Some(((mean(&dab) + mean(&dba)) / 2.0, max(&dab).max(max(&dba))))
}
