//! Forward and backward kernels. Activations are NHWC for convolutions and
//! `[batch, features]` for dense layers.

use crate::tensor::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        relu: bool,
    },
    /// Square kernel `k` with `k / 2` zero padding.
    Conv {
        height: usize,
        width: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    },
    GlobalAvgPool {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl Layer {
    /// Shapes of (weight, bias), if the layer has parameters.
    pub(crate) fn param_shapes(&self) -> Option<([usize; 4], usize)> {
        match *self {
            Layer::Dense {
                inputs, outputs, ..
            } => Some(([1, 1, inputs, outputs], outputs)),
            Layer::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some(([kernel, kernel, in_ch, out_ch], out_ch)),
            Layer::GlobalAvgPool { .. } => None,
        }
    }

    pub(crate) fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            Layer::GlobalAvgPool { .. } => 1,
        }
    }

    pub(crate) fn relu(&self) -> bool {
        match *self {
            Layer::Dense { relu, .. } | Layer::Conv { relu, .. } => relu,
            Layer::GlobalAvgPool { .. } => false,
        }
    }

    pub(crate) fn out_hw(&self) -> (usize, usize) {
        match *self {
            Layer::Conv {
                height,
                width,
                stride,
                kernel,
                ..
            } => {
                let pad = kernel / 2;
                (
                    (height + 2 * pad - kernel) / stride + 1,
                    (width + 2 * pad - kernel) / stride + 1,
                )
            }
            _ => (1, 1),
        }
    }

    /// Elements per example at the layer input / output.
    pub(crate) fn in_len(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv {
                height,
                width,
                in_ch,
                ..
            } => height * width * in_ch,
            Layer::GlobalAvgPool {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    pub(crate) fn out_len(&self) -> usize {
        match *self {
            Layer::Dense { outputs, .. } => outputs,
            Layer::Conv { out_ch, .. } => {
                let (h, w) = self.out_hw();
                h * w * out_ch
            }
            Layer::GlobalAvgPool { channels, .. } => channels,
        }
    }

    pub(crate) fn forward<T: Scalar>(&self, n: usize, x: &[T], w: &[T], b: &[T], y: &mut [T]) {
        match *self {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                for row in y.chunks_mut(outputs) {
                    row.copy_from_slice(b);
                }
                gemm(x, w, y, n, inputs, outputs);
            }
            Layer::Conv {
                height,
                width,
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                let (ho, wo) = self.out_hw();
                let pad = kernel / 2;
                for img in 0..n {
                    let xi = &x[img * height * width * in_ch..(img + 1) * height * width * in_ch];
                    let yi = &mut y[img * ho * wo * out_ch..(img + 1) * ho * wo * out_ch];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let out = &mut yi[(oy * wo + ox) * out_ch..(oy * wo + ox + 1) * out_ch];
                            out.copy_from_slice(b);
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= height as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= width as isize {
                                        continue;
                                    }
                                    let px = &xi[(iy as usize * width + ix as usize) * in_ch..][..in_ch];
                                    let wk = &w[(ky * kernel + kx) * in_ch * out_ch..][..in_ch * out_ch];
                                    for (ci, &xv) in px.iter().enumerate() {
                                        let wrow = &wk[ci * out_ch..(ci + 1) * out_ch];
                                        for (o, &wv) in out.iter_mut().zip(wrow) {
                                            *o += xv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Layer::GlobalAvgPool {
                height,
                width,
                channels,
            } => {
                let inv = T::ONE / T::from_usize(height * width);
                for img in 0..n {
                    let out = &mut y[img * channels..(img + 1) * channels];
                    out.iter_mut().for_each(|v| *v = T::ZERO);
                    let xi = &x[img * height * width * channels..(img + 1) * height * width * channels];
                    for px in xi.chunks(channels) {
                        for (o, &v) in out.iter_mut().zip(px) {
                            *o += v;
                        }
                    }
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        if self.relu() {
            for v in y.iter_mut() {
                if !(*v > T::ZERO) {
                    *v = T::ZERO;
                }
            }
        }
    }

    /// Accumulates parameter gradients into `dw`/`db` (when given) and writes
    /// the input gradient into `dx`. `dy` is the gradient w.r.t. the layer
    /// output after the activation; it is masked in place.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward<T: Scalar>(
        &self,
        n: usize,
        x: &[T],
        y: &[T],
        w: &[T],
        dy: &mut [T],
        dx: &mut [T],
        mut grads: Option<(&mut [T], &mut [T])>,
    ) {
        if self.relu() {
            for (g, &out) in dy.iter_mut().zip(y) {
                if !(out > T::ZERO) {
                    *g = T::ZERO;
                }
            }
        }
        dx.iter_mut().for_each(|v| *v = T::ZERO);
        match *self {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                for i in 0..n {
                    let g = &dy[i * outputs..(i + 1) * outputs];
                    let xi = &x[i * inputs..(i + 1) * inputs];
                    let dxi = &mut dx[i * inputs..(i + 1) * inputs];
                    for p in 0..inputs {
                        let wrow = &w[p * outputs..(p + 1) * outputs];
                        let mut acc = T::ZERO;
                        for (&gv, &wv) in g.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        dxi[p] = acc;
                    }
                    if let Some((dw, db)) = grads.as_mut() {
                        for (d, &gv) in db.iter_mut().zip(g) {
                            *d += gv;
                        }
                        for (p, &xv) in xi.iter().enumerate() {
                            if xv == T::ZERO {
                                continue;
                            }
                            let drow = &mut dw[p * outputs..(p + 1) * outputs];
                            for (d, &gv) in drow.iter_mut().zip(g) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
            Layer::Conv {
                height,
                width,
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                let (ho, wo) = self.out_hw();
                let pad = kernel / 2;
                for img in 0..n {
                    let base_in = img * height * width * in_ch;
                    let base_out = img * ho * wo * out_ch;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = &dy[base_out + (oy * wo + ox) * out_ch..][..out_ch];
                            if let Some((_, db)) = grads.as_mut() {
                                for (d, &gv) in db.iter_mut().zip(g) {
                                    *d += gv;
                                }
                            }
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= height as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= width as isize {
                                        continue;
                                    }
                                    let pix = base_in + (iy as usize * width + ix as usize) * in_ch;
                                    let koff = (ky * kernel + kx) * in_ch * out_ch;
                                    for ci in 0..in_ch {
                                        let wrow = &w[koff + ci * out_ch..][..out_ch];
                                        let mut acc = T::ZERO;
                                        for (&gv, &wv) in g.iter().zip(wrow) {
                                            acc += gv * wv;
                                        }
                                        dx[pix + ci] += acc;
                                        if let Some((dw, _)) = grads.as_mut() {
                                            let xv = x[pix + ci];
                                            let drow = &mut dw[koff + ci * out_ch..][..out_ch];
                                            for (d, &gv) in drow.iter_mut().zip(g) {
                                                *d += xv * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Layer::GlobalAvgPool {
                height,
                width,
                channels,
            } => {
                let inv = T::ONE / T::from_usize(height * width);
                for img in 0..n {
                    let g = &dy[img * channels..(img + 1) * channels];
                    let dxi = &mut dx[img * height * width * channels..(img + 1) * height * width * channels];
                    for px in dxi.chunks_mut(channels) {
                        for (d, &gv) in px.iter_mut().zip(g) {
                            *d = gv * inv;
                        }
                    }
                }
            }
        }
    }
}
