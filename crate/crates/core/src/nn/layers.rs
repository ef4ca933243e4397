//! Per-layer forward and backward kernels. Both layer kinds are a single
//! matrix product with the stored weight; convolutions go through im2col.

use super::spec::{Conv2dSpec, LayerSpec};
use crate::linalg::Matrix;

pub(crate) struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub input: Matrix,
}

pub(crate) fn forward(spec: &LayerSpec, weight: &Matrix, bias: &[f64], x: &Matrix) -> Matrix {
    match spec {
        LayerSpec::Dense { .. } => {
            let mut out = x.matmul_t(weight).expect("validated shapes");
            for i in 0..out.rows() {
                for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                    *o += b;
                }
            }
            out
        }
        LayerSpec::Conv2d(c) => conv_forward(c, weight, bias, x),
    }
}

/// `d_out` is the gradient with respect to the layer's pre-activation output.
pub(crate) fn backward(spec: &LayerSpec, weight: &Matrix, x: &Matrix, d_out: &Matrix) -> LayerGrads {
    match spec {
        LayerSpec::Dense { .. } => {
            let w_grad = d_out.t_matmul(x).expect("validated shapes");
            let mut bias = vec![0.0; weight.rows()];
            for i in 0..d_out.rows() {
                for (b, d) in bias.iter_mut().zip(d_out.row(i)) {
                    *b += d;
                }
            }
            let input = d_out.matmul(weight).expect("validated shapes");
            LayerGrads {
                weight: w_grad,
                bias,
                input,
            }
        }
        LayerSpec::Conv2d(c) => conv_backward(c, weight, x, d_out),
    }
}

/// Patch matrix of one CHW sample: one row per output location, one column
/// per (channel, ky, kx) in the weight's column order.
pub(crate) fn im2col(c: &Conv2dSpec, sample: &[f64]) -> Matrix {
    let (oh, ow) = (c.output_h(), c.output_w());
    let k = c.patch_len();
    let mut patches = Matrix::zeros(oh * ow, k);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = patches.row_mut(oy * ow + ox);
            for ch in 0..c.in_channels {
                for ky in 0..c.kernel_h {
                    let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                    if iy < 0 || iy >= c.input_h as isize {
                        continue;
                    }
                    for kx in 0..c.kernel_w {
                        let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                        if ix < 0 || ix >= c.input_w as isize {
                            continue;
                        }
                        row[(ch * c.kernel_h + ky) * c.kernel_w + kx] =
                            sample[(ch * c.input_h + iy as usize) * c.input_w + ix as usize];
                    }
                }
            }
        }
    }
    patches
}

fn col2im_add(c: &Conv2dSpec, d_patches: &Matrix, d_sample: &mut [f64]) {
    let (oh, ow) = (c.output_h(), c.output_w());
    for oy in 0..oh {
        for ox in 0..ow {
            let row = d_patches.row(oy * ow + ox);
            for ch in 0..c.in_channels {
                for ky in 0..c.kernel_h {
                    let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                    if iy < 0 || iy >= c.input_h as isize {
                        continue;
                    }
                    for kx in 0..c.kernel_w {
                        let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                        if ix < 0 || ix >= c.input_w as isize {
                            continue;
                        }
                        d_sample[(ch * c.input_h + iy as usize) * c.input_w + ix as usize] +=
                            row[(ch * c.kernel_h + ky) * c.kernel_w + kx];
                    }
                }
            }
        }
    }
}

fn conv_forward(c: &Conv2dSpec, weight: &Matrix, bias: &[f64], x: &Matrix) -> Matrix {
    let locs = c.output_h() * c.output_w();
    let mut out = Matrix::zeros(x.rows(), c.out_channels * locs);
    for s in 0..x.rows() {
        let patches = im2col(c, x.row(s));
        let o = patches.matmul_t(weight).expect("validated shapes");
        let dst = out.row_mut(s);
        for l in 0..locs {
            for ch in 0..c.out_channels {
                dst[ch * locs + l] = o[(l, ch)] + bias[ch];
            }
        }
    }
    out
}

fn conv_backward(c: &Conv2dSpec, weight: &Matrix, x: &Matrix, d_out: &Matrix) -> LayerGrads {
    let locs = c.output_h() * c.output_w();
    let mut w_grad = Matrix::zeros(weight.rows(), weight.cols());
    let mut bias = vec![0.0; c.out_channels];
    let mut input = Matrix::zeros(x.rows(), x.cols());
    for s in 0..x.rows() {
        let d = d_out.row(s);
        let d_o = Matrix::from_fn(locs, c.out_channels, |l, ch| d[ch * locs + l]);
        for (ch, b) in bias.iter_mut().enumerate() {
            *b += d[ch * locs..(ch + 1) * locs].iter().sum::<f64>();
        }
        let patches = im2col(c, x.row(s));
        w_grad
            .add_assign(&d_o.t_matmul(&patches).expect("validated shapes"))
            .expect("same shape");
        let d_patches = d_o.matmul(weight).expect("validated shapes");
        col2im_add(c, &d_patches, input.row_mut(s));
    }
    LayerGrads {
        weight: w_grad,
        bias,
        input,
    }
}
