use ndarray::Array2;

use crate::float::Float;
use crate::graph::{Graph, Var, PAD_INDEX};

/// Time-major 1-D convolution with "same" zero padding.
///
/// `x` is `[len × c_in]`, `weight` is `[kernel·c_in × c_out]` with rows ordered
/// tap-major (`tap·c_in + channel`), `bias` is `[1 × c_out]`. `kernel` must be odd.
pub fn conv1d<T: Float>(g: &mut Graph<T>, x: Var, weight: Var, bias: Option<Var>, kernel: usize, dilation: usize) -> Var {
    assert!(kernel % 2 == 1, "conv1d: kernel must be odd");
    let (len, c_in) = g.shape(x);
    assert_eq!(g.shape(weight).0, kernel * c_in, "conv1d: weight rows != kernel·c_in");
    let cols = if kernel == 1 {
        x
    } else {
        let pad = dilation * (kernel - 1) / 2;
        let mut index = Vec::with_capacity(len * kernel * c_in);
        for t in 0..len {
            for tap in 0..kernel {
                let src = (t + tap * dilation) as isize - pad as isize;
                if src < 0 || src as usize >= len {
                    index.extend(std::iter::repeat_n(PAD_INDEX, c_in));
                } else {
                    let base = src as usize * c_in;
                    index.extend(base..base + c_in);
                }
            }
        }
        g.gather(x, index, (len, kernel * c_in))
    };
    let y = g.matmul(cols, weight);
    match bias {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// Output length of [`conv_transpose1d`]: `len · stride`.
pub fn conv_transpose1d_len(len: usize, stride: usize) -> usize {
    len * stride
}

/// Time-major transposed 1-D convolution that upsamples by exactly `stride`.
///
/// `x` is `[len × c_in]`, `weight` is `[c_in × kernel·c_out]` (column
/// `tap·c_out + channel`), `bias` is `[1 × c_out]`. The full output of length
/// `(len-1)·stride + kernel` is cropped by `(kernel-stride)/2` on the left to
/// `len·stride` samples.
pub fn conv_transpose1d<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    kernel: usize,
    stride: usize,
) -> Var {
    assert!(kernel >= stride, "conv_transpose1d: kernel must cover the stride");
    let (len, _) = g.shape(x);
    let c_out = g.shape(weight).1 / kernel;
    assert_eq!(g.shape(weight).1, kernel * c_out, "conv_transpose1d: weight width");
    let z = g.matmul(x, weight);
    let out_len = conv_transpose1d_len(len, stride);
    let offset = (kernel - stride) / 2;
    let mut index = Vec::with_capacity(len * kernel * c_out);
    for l in 0..len {
        for tap in 0..kernel {
            let pos = (l * stride + tap) as isize - offset as isize;
            if pos < 0 || pos as usize >= out_len {
                index.extend(std::iter::repeat_n(PAD_INDEX, c_out));
            } else {
                let base = pos as usize * c_out;
                index.extend(base..base + c_out);
            }
        }
    }
    let y = g.scatter_add(z, index, (out_len, c_out));
    match bias {
        Some(b) => g.add_row(y, b),
        None => y,
    }
}

/// Rows of `table` picked by `ids`.
pub fn embedding<T: Float>(g: &mut Graph<T>, table: Var, ids: &[usize]) -> Var {
    g.select_rows(table, ids)
}

/// Standard sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions<T: Float>(len: usize, dim: usize) -> Array2<T> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
