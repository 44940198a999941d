//! Forward-only entry points for the primitives, plus the shape validation the
//! tape shares with them.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero fill so that stride 1 preserves the spatial shape.
    Same,
    Valid,
}

/// Square convolution kernel `[out_channels, in_channels, k, k]` with bias `[out_channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T: Real = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, padding: Padding) -> Result<Self> {
        validate_kernel("conv_kernel", weights.shape(), Some(bias.shape()))?;
        if !(stride == 1 || stride == 2) {
            return Err(Error::param(format!("unsupported stride {stride}; expected 1 or 2")));
        }
        Ok(ConvKernel {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }
}

pub(crate) fn validate_kernel(op: &'static str, w: &[usize], bias: Option<&[usize]>) -> Result<()> {
    if w.len() != 4 {
        return Err(Error::Rank {
            op,
            expected: 4,
            shape: w.to_vec(),
        });
    }
    if w[2] != w[3] {
        return Err(Error::Dimension {
            op,
            axis: "kernel_width",
            expected: w[2],
            actual: w[3],
        });
    }
    if w[2].is_multiple_of(2) {
        return Err(Error::param(format!("{op}: kernel size {} must be odd", w[2])));
    }
    if let Some(b) = bias {
        if b != [w[0]] {
            return Err(Error::Dimension {
                op,
                axis: "bias",
                expected: w[0],
                actual: b.iter().product(),
            });
        }
    }
    Ok(())
}

/// Validate a convolution and return its geometry.
pub(crate) fn conv_geom(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if x.len() != 3 {
        return Err(Error::Rank {
            op,
            expected: 3,
            shape: x.to_vec(),
        });
    }
    validate_kernel(op, w, bias)?;
    if x[0] != w[1] {
        return Err(Error::Dimension {
            op,
            axis: "in_channels",
            expected: w[1],
            actual: x[0],
        });
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::param(format!("{op}: unsupported stride {stride}")));
    }
    let k = w[2];
    let pad = match padding {
        Padding::Same => k / 2,
        Padding::Valid => 0,
    };
    for (axis, extent) in [("height", x[1]), ("width", x[2])] {
        if extent + 2 * pad < k {
            return Err(Error::Dimension {
                op,
                axis,
                expected: k,
                actual: extent,
            });
        }
    }
    Ok(ConvGeom::new(x[0], x[1], x[2], k, stride, pad))
}

pub(crate) fn conv_transpose_check(
    op: &'static str,
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
) -> Result<()> {
    if stride != 2 {
        return Err(Error::param(format!("{op}: transposed convolution requires stride 2, got {stride}")));
    }
    if x.len() != 3 {
        return Err(Error::Rank {
            op,
            expected: 3,
            shape: x.to_vec(),
        });
    }
    validate_kernel(op, w, bias)?;
    // Transposed kernels are stored `[out, in, k, k]` like forward ones.
    if x[0] != w[1] {
        return Err(Error::Dimension {
            op,
            axis: "in_channels",
            expected: w[1],
            actual: x[0],
        });
    }
    Ok(())
}

pub(crate) fn pool_check(x: &[usize]) -> Result<()> {
    if x.len() != 3 {
        return Err(Error::Rank {
            op: "maxpool2d",
            expected: 3,
            shape: x.to_vec(),
        });
    }
    for (axis, extent) in [("height", x[1]), ("width", x[2])] {
        if extent % 2 != 0 {
            return Err(Error::Dimension {
                op: "maxpool2d",
                axis,
                expected: extent + 1,
                actual: extent,
            });
        }
    }
    Ok(())
}

pub(crate) fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Rank {
            op,
            expected: a.len(),
            shape: b.to_vec(),
        });
    }
    const AXES: [&str; 4] = ["axis0", "axis1", "axis2", "axis3"];
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::Dimension {
                op,
                axis: AXES.get(i).copied().unwrap_or("axis"),
                expected: x,
                actual: y,
            });
        }
    }
    Ok(())
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`.
pub(crate) fn dropout_mask<T: Real, R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    let g = conv_geom(
        "conv2d",
        input.shape(),
        kernel.weights.shape(),
        Some(kernel.bias.shape()),
        kernel.stride,
        kernel.padding,
    )?;
    let o = kernel.out_channels();
    let y = kernels::conv2d_forward(input.data(), &g, o, kernel.weights.data(), Some(kernel.bias.data()));
    Tensor::new(&[o, g.oh, g.ow], y)
}

/// Stride-2 transposed convolution `[C_in, H, W] -> [C_out, 2H, 2W]`; the
/// adjoint of the stride-2 same-padded convolution with the same kernel.
pub fn conv_transpose2d<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    conv_transpose_check(
        "conv_transpose2d",
        input.shape(),
        kernel.weights.shape(),
        Some(kernel.bias.shape()),
        kernel.stride,
    )?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let o = kernel.out_channels();
    let y = kernels::conv_transpose2d_forward(
        input.data(),
        c,
        h,
        w,
        o,
        kernel.size(),
        kernel.weights.data(),
        Some(kernel.bias.data()),
    );
    Tensor::new(&[o, 2 * h, 2 * w], y)
}

/// 2x2 stride-2 max-pool; the second value holds the flat input index of each maximum.
pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    pool_check(input.shape())?;
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (y, arg) = kernels::maxpool2x2(input.data(), c, h, w);
    Ok((Tensor::new(&[c, h / 2, w / 2], y)?, arg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Derivative expressed through the activation output `y`.
    pub(crate) fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    input.map(|v| kind.apply(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Add,
    Hadamard,
}

pub fn pointwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: Pointwise) -> Result<Tensor<T>> {
    same_shape("pointwise", a.shape(), b.shape())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match op {
            Pointwise::Add => x + y,
            Pointwise::Hadamard => x * y,
        })
        .collect();
    Tensor::new(a.shape(), data)
}

/// Channel concatenation `[C1, H, W] ++ [C2, H, W] -> [C1 + C2, H, W]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank("concat_channels", 3)?;
    b.expect_rank("concat_channels", 3)?;
    spatial_match("concat_channels", a.shape(), b.shape())?;
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&[a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]], data)
}

pub(crate) fn spatial_match(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    for (i, axis) in [(1, "height"), (2, "width")] {
        if a[i] != b[i] {
            return Err(Error::Dimension {
                op,
                axis,
                expected: a[i],
                actual: b[i],
            });
        }
    }
    Ok(())
}

/// Inverted dropout. Identity when `training` is false or `rate` is zero.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask: Vec<T> = dropout_mask(input.numel(), rate, rng);
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Tensor::new(input.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kernel3(weights: Vec<f64>) -> ConvKernel<f64> {
        ConvKernel::new(
            Tensor::new(&[1, 1, 3, 3], weights).unwrap(),
            Tensor::zeros(&[1]),
            1,
            Padding::Same,
        )
        .unwrap()
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::<f64>::ones(&[1, 3, 3]);
        let y = conv2d(&x, &kernel3(vec![1.0; 9])).unwrap();
        assert_eq!(y.at3(0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at3(0, r, c), 4.0);
        }
        assert_eq!(y.at3(0, 0, 1), 6.0);
    }

    #[test]
    fn center_tap_is_identity() {
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let x = Tensor::<f64>::from_fn(&[1, 5, 4], |i| (i as f64 * 0.37).sin());
        assert_eq!(conv2d(&x, &kernel3(w)).unwrap(), x);
    }

    #[test]
    fn same_padding_preserves_shape() {
        for h in 1..7 {
            for w in 1..7 {
                let x = Tensor::<f32>::ones(&[2, h, w]);
                let k = ConvKernel::new(Tensor::ones(&[3, 2, 3, 3]), Tensor::zeros(&[3]), 1, Padding::Same)
                    .unwrap();
                assert_eq!(conv2d(&x, &k).unwrap().shape(), &[3, h, w]);
            }
        }
    }

    #[test]
    fn valid_padding_shrinks_and_rejects_small_inputs() {
        let k = ConvKernel::new(Tensor::<f32>::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1, Padding::Valid)
            .unwrap();
        assert_eq!(conv2d(&Tensor::ones(&[1, 5, 4]), &k).unwrap().shape(), &[1, 3, 2]);
        assert!(matches!(
            conv2d(&Tensor::ones(&[1, 2, 4]), &k),
            Err(Error::Dimension { axis: "height", .. })
        ));
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let k = kernel3(vec![0.0; 9]);
        let err = conv2d(&Tensor::ones(&[2, 3, 3]), &k).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "in_channels", expected: 1, actual: 2, .. }));
    }

    #[test]
    fn transposed_conv_single_input_fills_patch() {
        let k = ConvKernel::new(Tensor::<f64>::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 2, Padding::Same)
            .unwrap();
        let y = conv_transpose2d(&Tensor::full(&[1, 1, 1], 2.5), &k).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
        let y = conv_transpose2d(&Tensor::ones(&[1, 2, 2]), &k).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
    }

    #[test]
    fn transposed_conv_requires_stride_two() {
        let k = ConvKernel::new(Tensor::<f64>::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1, Padding::Same)
            .unwrap();
        assert!(matches!(conv_transpose2d(&Tensor::ones(&[1, 2, 2]), &k), Err(Error::Parameter(_))));
    }

    #[test]
    fn maxpool_basics() {
        let x = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (y, arg) = maxpool2d(&Tensor::<f64>::full(&[1, 4, 4], 7.0)).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        // first element of each window in row-major scan
        assert_eq!(arg, vec![0, 2, 8, 10]);
        assert!(maxpool2d(&Tensor::<f64>::ones(&[1, 3, 4])).is_err());
    }

    #[test]
    fn activation_values() {
        let x = Tensor::<f64>::new(&[3], vec![0.0, -3.2, 3.2]).unwrap();
        assert_eq!(activation(&x, Activation::Sigmoid).data()[0], 0.5);
        assert_eq!(activation(&x, Activation::Tanh).data()[0], 0.0);
        let r = activation(&x, Activation::Relu);
        assert_eq!(r.data(), &[0.0, 0.0, 3.2]);
        assert_eq!(Activation::Relu.derivative_from_output(0.0f64), 0.0);
    }

    #[test]
    fn pointwise_identities() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5);
        assert_eq!(pointwise(&x, &Tensor::ones(&[2, 3]), Pointwise::Hadamard).unwrap(), x);
        assert_eq!(pointwise(&x, &Tensor::zeros(&[2, 3]), Pointwise::Add).unwrap(), x);
        assert!(pointwise(&x, &Tensor::zeros(&[3, 2]), Pointwise::Add).is_err());
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = Tensor::<f64>::from_fn(&[2, 4, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[3, 4, 4], |i| -(i as f64));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[5, 4, 4]);
        assert_eq!(c.narrow0(0, 2).unwrap(), a);
        assert_eq!(c.narrow0(2, 3).unwrap(), b);
        let err = concat_channels(&a, &Tensor::zeros(&[1, 4, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "width", .. }));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn(&[10], |i| i as f32);
        assert_eq!(dropout(&x, 0.3, false, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let x = Tensor::<f64>::ones(&[n]);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let y = dropout(&x, 0.3, true, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.7).abs() < 0.01, "survivor fraction {survivors}");
        let mean = y.sum() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        let again = dropout(&x, 0.3, true, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap();
        assert_eq!(y, again);
    }
}
