//! Dense and 2-D convolution kernels on flat row-major buffers.

/// Geometry of a 2-D convolution over `[batch, channels, height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_ch * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    /// Multiply-accumulates per sample.
    pub fn macs(&self) -> usize {
        self.out_len() * self.in_ch * self.kernel * self.kernel
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn tap(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < size).then_some(i as usize)
    }
}

pub fn conv2d_forward(x: &[f64], n: usize, g: &ConvGeom, weights: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; n * g.out_len()];
    for b in 0..n {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let ob = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        for co in 0..g.out_ch {
            let plane = &mut ob[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..g.in_ch {
                let xin = &xb[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let wv = weights[((co * g.in_ch + ci) * g.kernel + ky) * g.kernel + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let Some(iy) = g.tap(oy, ky, g.in_h) else { continue };
                            for ox in 0..ow {
                                if let Some(ix) = g.tap(ox, kx, g.in_w) {
                                    plane[oy * ow + ox] += wv * xin[iy * g.in_w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_weights, grad_input)`.
pub fn conv2d_backward(grad_out: &[f64], x: &[f64], n: usize, g: &ConvGeom, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gw = vec![0.0; g.weight_len()];
    let mut gx = vec![0.0; n * g.in_len()];
    for b in 0..n {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let gob = &grad_out[b * g.out_len()..(b + 1) * g.out_len()];
        let gxb = &mut gx[b * g.in_len()..(b + 1) * g.in_len()];
        for co in 0..g.out_ch {
            let gplane = &gob[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..g.in_ch {
                let base = ci * g.in_h * g.in_w;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let widx = ((co * g.in_ch + ci) * g.kernel + ky) * g.kernel + kx;
                        let wv = weights[widx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let Some(iy) = g.tap(oy, ky, g.in_h) else { continue };
                            for ox in 0..ow {
                                if let Some(ix) = g.tap(ox, kx, g.in_w) {
                                    let go = gplane[oy * ow + ox];
                                    let xi = base + iy * g.in_w + ix;
                                    acc += go * xb[xi];
                                    gxb[xi] += go * wv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gw, gx)
}

/// `out[b, o] = sum_i w[o, i] * x[b, i]`.
pub fn dense_forward(x: &[f64], n: usize, in_f: usize, out_f: usize, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * out_f];
    for b in 0..n {
        let xb = &x[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let row = &weights[o * in_f..(o + 1) * in_f];
            out[b * out_f + o] = row.iter().zip(xb).map(|(w, v)| w * v).sum();
        }
    }
    out
}

/// Returns `(grad_weights, grad_input)`.
pub fn dense_backward(grad_out: &[f64], x: &[f64], n: usize, in_f: usize, out_f: usize, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; in_f * out_f];
    let mut gx = vec![0.0; n * in_f];
    for b in 0..n {
        let xb = &x[b * in_f..(b + 1) * in_f];
        let gxb = &mut gx[b * in_f..(b + 1) * in_f];
        for o in 0..out_f {
            let go = grad_out[b * out_f + o];
            if go == 0.0 {
                continue;
            }
            let row = &weights[o * in_f..(o + 1) * in_f];
            let grow = &mut gw[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                grow[i] += go * xb[i];
                gxb[i] += go * row[i];
            }
        }
    }
    (gw, gx)
}
