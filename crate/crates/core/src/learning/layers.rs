//! Layer kernels with hand-written backward passes: stride-1 "same"
//! convolution and transposed convolution, ReLU, 2x2 max-pooling with
//! switches, and unpooling to remembered switch locations.

use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};

/// Weights `(out, in, k, k)` and biases `(out)` of a convolution. Transposed
/// convolutions use the same layout: `weight[o][c]` connects input channel
/// `c` to output channel `o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel)
    }

    #[inline]
    fn w(&self, o: usize, c: usize, dy: usize, dx: usize) -> f64 {
        self.weight[((o * self.in_channels + c) * self.kernel + dy) * self.kernel + dx]
    }

    #[inline]
    fn w_index(&self, o: usize, c: usize, dy: usize, dx: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel + dy) * self.kernel + dx
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn add_assign(&mut self, other: &ConvParams) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= factor);
    }
}

/// Calls `f(dst_start, src_start, len)` for the valid span of a row shifted
/// by `offset` (output index `i` reads input index `i + offset`).
#[inline]
fn shifted_span(len: usize, offset: isize) -> Option<(usize, usize, usize)> {
    let len = len as isize;
    let dst0 = (-offset).max(0);
    let dst1 = (len - offset).min(len);
    (dst1 > dst0).then(|| (dst0 as usize, (dst0 + offset) as usize, (dst1 - dst0) as usize))
}

/// `out[o][y][x] += Σ_{dy,dx} w(o,c,dy,dx) * inp[c][y + dy - r][x + dx - r]`
/// for one `(o, c)` pair, zero padded.
#[inline]
fn correlate_plane(out: &mut [f64], inp: &[f64], h: usize, w: usize, kernel: usize, weight: impl Fn(usize, usize) -> f64) {
    let r = (kernel / 2) as isize;
    for dy in 0..kernel {
        for dx in 0..kernel {
            let wt = weight(dy, dx);
            if wt == 0.0 {
                continue;
            }
            let (oy, ox) = (dy as isize - r, dx as isize - r);
            let (Some((y0, sy0, ny)), Some((x0, sx0, nx))) = (shifted_span(h, oy), shifted_span(w, ox)) else {
                continue;
            };
            for k in 0..ny {
                let orow = &mut out[(y0 + k) * w + x0..(y0 + k) * w + x0 + nx];
                let irow = &inp[(sy0 + k) * w + sx0..(sy0 + k) * w + sx0 + nx];
                for (o, i) in orow.iter_mut().zip(irow) {
                    *o += wt * i;
                }
            }
        }
    }
}

/// `Σ_{y,x} a[y][x] * b[y + oy][x + ox]` over the overlapping region.
#[inline]
fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, oy: isize, ox: isize) -> f64 {
    let (Some((y0, sy0, ny)), Some((x0, sx0, nx))) = (shifted_span(h, oy), shifted_span(w, ox)) else {
        return 0.0;
    };
    let mut acc = 0.0;
    for k in 0..ny {
        let ar = &a[(y0 + k) * w + x0..(y0 + k) * w + x0 + nx];
        let br = &b[(sy0 + k) * w + sx0..(sy0 + k) * w + sx0 + nx];
        acc += ar.iter().zip(br).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

/// Stride-1 convolution with `kernel / 2` zero padding (output keeps the size).
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Tensor {
    assert_eq!(x.channels(), p.in_channels, "conv2d input channels");
    let (h, w) = (x.height(), x.width());
    let mut y = Tensor::zeros(Shape::new(p.out_channels, h, w));
    for o in 0..p.out_channels {
        let out = y.channel_mut(o);
        out.fill(p.bias[o]);
        for c in 0..p.in_channels {
            correlate_plane(out, x.channel(c), h, w, p.kernel, |dy, dx| p.w(o, c, dy, dx));
        }
    }
    y
}

/// Gradients of [`conv2d`]: `(d/dx, d/dparams)`. The input gradient is
/// skipped when `need_input_grad` is false.
pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_y: &Tensor, need_input_grad: bool) -> (Option<Tensor>, ConvParams) {
    let (h, w) = (x.height(), x.width());
    let r = (p.kernel / 2) as isize;
    let mut gp = p.zeros_like();
    for o in 0..p.out_channels {
        let gy = grad_y.channel(o);
        gp.bias[o] = gy.iter().sum();
        for c in 0..p.in_channels {
            let xc = x.channel(c);
            for dy in 0..p.kernel {
                for dx in 0..p.kernel {
                    let i = gp.w_index(o, c, dy, dx);
                    gp.weight[i] = shifted_dot(gy, xc, h, w, dy as isize - r, dx as isize - r);
                }
            }
        }
    }
    let gx = need_input_grad.then(|| {
        let mut gx = Tensor::zeros(x.shape());
        let k = p.kernel;
        for c in 0..p.in_channels {
            let out = gx.channel_mut(c);
            for o in 0..p.out_channels {
                // Transposed correlation: flip the kernel.
                correlate_plane(out, grad_y.channel(o), h, w, k, |dy, dx| p.w(o, c, k - 1 - dy, k - 1 - dx));
            }
        }
        gx
    });
    (gx, gp)
}

/// Stride-1 transposed convolution ("deconvolution") with `kernel / 2`
/// cropping, so the output keeps the input size:
/// `y[o][i + dy - r][j + dx - r] += w(o,c,dy,dx) * x[c][i][j]`.
pub fn conv_transpose2d(x: &Tensor, p: &ConvParams) -> Tensor {
    assert_eq!(x.channels(), p.in_channels, "conv_transpose2d input channels");
    let (h, w) = (x.height(), x.width());
    let k = p.kernel;
    let mut y = Tensor::zeros(Shape::new(p.out_channels, h, w));
    for o in 0..p.out_channels {
        let out = y.channel_mut(o);
        out.fill(p.bias[o]);
        for c in 0..p.in_channels {
            correlate_plane(out, x.channel(c), h, w, k, |dy, dx| p.w(o, c, k - 1 - dy, k - 1 - dx));
        }
    }
    y
}

/// Gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward(x: &Tensor, p: &ConvParams, grad_y: &Tensor, need_input_grad: bool) -> (Option<Tensor>, ConvParams) {
    let (h, w) = (x.height(), x.width());
    let r = (p.kernel / 2) as isize;
    let mut gp = p.zeros_like();
    for o in 0..p.out_channels {
        let gy = grad_y.channel(o);
        gp.bias[o] = gy.iter().sum();
        for c in 0..p.in_channels {
            let xc = x.channel(c);
            for dy in 0..p.kernel {
                for dx in 0..p.kernel {
                    let i = gp.w_index(o, c, dy, dx);
                    gp.weight[i] = shifted_dot(xc, gy, h, w, dy as isize - r, dx as isize - r);
                }
            }
        }
    }
    let gx = need_input_grad.then(|| {
        let mut gx = Tensor::zeros(x.shape());
        for c in 0..p.in_channels {
            let out = gx.channel_mut(c);
            for o in 0..p.out_channels {
                correlate_plane(out, grad_y.channel(o), h, w, p.kernel, |dy, dx| p.w(o, c, dy, dx));
            }
        }
        gx
    });
    (gx, gp)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect()).unwrap()
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward(pre: &Tensor, grad_y: &Tensor) -> Tensor {
    let data = pre
        .data()
        .iter()
        .zip(grad_y.data())
        .map(|(z, g)| if *z > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::from_vec(pre.shape(), data).unwrap()
}

/// Max-pool switch: flat index into the input of the winning element, per output element.
pub type Switches = Vec<u32>;

/// 2x2 max-pooling, stride 2. Ties go to the first element in row-major block order.
pub fn maxpool2(x: &Tensor) -> (Tensor, Switches) {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 needs even sizes");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(Shape::new(c, oh, ow));
    let mut switches = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = x.index(ch, 2 * i, 2 * j);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = x.index(ch, 2 * i + dy, 2 * j + dx);
                    if x.data()[k] > x.data()[best] {
                        best = k;
                    }
                }
                y.set(ch, i, j, x.data()[best]);
                switches.push(best as u32);
            }
        }
    }
    (y, switches)
}

pub fn maxpool2_backward(input_shape: Shape, switches: &Switches, grad_y: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    for (g, &s) in grad_y.data().iter().zip(switches) {
        gx.data_mut()[s as usize] += g;
    }
    gx
}

/// Places each value at its remembered switch location in a zero map of
/// `output_shape` (the shape of the pooled layer's input).
pub fn unpool2(x: &Tensor, switches: &Switches, output_shape: Shape) -> Tensor {
    assert_eq!(x.data().len(), switches.len(), "unpool2 switch count");
    let mut y = Tensor::zeros(output_shape);
    for (v, &s) in x.data().iter().zip(switches) {
        y.data_mut()[s as usize] = *v;
    }
    y
}

pub fn unpool2_backward(switches: &Switches, grad_y: &Tensor, input_shape: Shape) -> Tensor {
    let data = switches.iter().map(|&s| grad_y.data()[s as usize]).collect();
    Tensor::from_vec(input_shape, data).unwrap()
}
