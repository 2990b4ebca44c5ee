//! Raw array kernels behind the taped layers. The relevance propagation code
//! reuses them on plain buffers.

/// `[batch, channels, height, width]`.
pub type Dims4 = [usize; 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Dims4,
    /// `[out_channels, in_channels, kh, kw]`.
    pub kernel: Dims4,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output `[batch, out_channels, h', w']`, or `None` when the window does
    /// not tile the padded input.
    pub fn output(&self) -> Option<Dims4> {
        let [n, c, h, w] = self.input;
        let [o, ci, kh, kw] = self.kernel;
        if c != ci || self.stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw || !(ph - kh).is_multiple_of(self.stride) || !(pw - kw).is_multiple_of(self.stride) {
            return None;
        }
        Some([n, o, (ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1])
    }

    /// Output positions `o` along one axis whose input index
    /// `o * stride + k - padding` lands inside `0..len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= len-1
        let hi_incl = (len as isize - 1 - off).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_len as isize);
        let lo = lo.clamp(0, hi);
        (lo as usize, hi as usize)
    }
}

pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let [n, c, h, w] = g.input;
    let [o, _, kh, kw] = g.kernel;
    let [_, _, oh, ow] = g.output().expect("conv geometry checked by caller");
    let s = g.stride;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            let plane = &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            if let Some(bias) = bias {
                plane.iter_mut().for_each(|v| *v = bias[oc]);
            }
            for ic in 0..c {
                let xin = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = g.valid(ky, h, oh);
                    for kx in 0..kw {
                        let wv = weight[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid(kx, w, ow);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.padding;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let base = kx + ox0 - g.padding;
                                for (ov, xv) in orow[ox0..ox1].iter_mut().zip(&row[base..]) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * row[ox * s + kx - g.padding];
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

/// Gradient w.r.t. the input; also the transposed convolution used by LRP.
pub fn conv2d_backward_input(gout: &[f64], weight: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let [n, c, h, w] = g.input;
    let [o, _, kh, kw] = g.kernel;
    let [_, _, oh, ow] = g.output().expect("conv geometry checked by caller");
    let s = g.stride;
    let mut gx = vec![0.0; n * c * h * w];
    for b in 0..n {
        for oc in 0..o {
            let gplane = &gout[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let gin = &mut gx[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = g.valid(ky, h, oh);
                    for kx in 0..kw {
                        let wv = weight[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.valid(kx, w, ow);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.padding;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let irow = &mut gin[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let base = kx + ox0 - g.padding;
                                for (iv, gv) in irow[base..].iter_mut().zip(&grow[ox0..ox1]) {
                                    *iv += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    irow[ox * s + kx - g.padding] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d_backward_weight(gout: &[f64], x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let [n, c, h, w] = g.input;
    let [o, _, kh, kw] = g.kernel;
    let [_, _, oh, ow] = g.output().expect("conv geometry checked by caller");
    let s = g.stride;
    let mut gw = vec![0.0; o * c * kh * kw];
    for b in 0..n {
        for oc in 0..o {
            let gplane = &gout[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let xin = &x[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ky in 0..kh {
                    let (oy0, oy1) = g.valid(ky, h, oh);
                    for kx in 0..kw {
                        let (ox0, ox1) = g.valid(kx, w, ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - g.padding;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let row = &xin[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let base = kx + ox0 - g.padding;
                                acc += grow[ox0..ox1]
                                    .iter()
                                    .zip(&row[base..])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * row[ox * s + kx - g.padding];
                                }
                            }
                        }
                        gw[((oc * c + ic) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Per-output-channel sum of `gout` (the bias gradient).
pub fn channel_sums(gout: &[f64], dims: Dims4) -> Vec<f64> {
    let [n, o, oh, ow] = dims;
    let mut gb = vec![0.0; o];
    for b in 0..n {
        for (oc, acc) in gb.iter_mut().enumerate() {
            *acc += gout[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow]
                .iter()
                .sum::<f64>();
        }
    }
    gb
}

/// Pooled dims; trailing rows/columns that do not fill a window are dropped.
pub fn pool_output(input: Dims4, k: usize) -> Dims4 {
    let [n, c, h, w] = input;
    [n, c, h / k, w / k]
}

pub fn avg_pool_forward(x: &[f64], input: Dims4, k: usize) -> Vec<f64> {
    let [n, c, h, w] = input;
    let [_, _, oh, ow] = pool_output(input, k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for nc in 0..n * c {
        let xin = &x[nc * h * w..(nc + 1) * h * w];
        let o = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = &xin[(oy * k + dy) * w + ox * k..];
                    acc += row[..k].iter().sum::<f64>();
                }
                o[oy * ow + ox] = acc * scale;
            }
        }
    }
    out
}

pub fn avg_pool_backward(gout: &[f64], input: Dims4, k: usize) -> Vec<f64> {
    let [n, c, h, w] = input;
    let [_, _, oh, ow] = pool_output(input, k);
    let scale = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; n * c * h * w];
    for nc in 0..n * c {
        let g = &gout[nc * oh * ow..(nc + 1) * oh * ow];
        let gi = &mut gx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] * scale;
                for dy in 0..k {
                    for dx in 0..k {
                        gi[(oy * k + dy) * w + ox * k + dx] += v;
                    }
                }
            }
        }
    }
    gx
}

/// `y = x · Wᵀ + b` for `x: [batch, n_in]`, `W: [n_out, n_in]`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, batch: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * n_out];
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for k in 0..n_out {
            let wr = &weight[k * n_in..(k + 1) * n_in];
            let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            y[b * n_out + k] = dot + bias.map_or(0.0, |bb| bb[k]);
        }
    }
    y
}

/// `g · W`, the input gradient of [`linear_forward`].
pub fn linear_backward_input(g: &[f64], weight: &[f64], batch: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut gx = vec![0.0; batch * n_in];
    for b in 0..batch {
        let gxr = &mut gx[b * n_in..(b + 1) * n_in];
        for k in 0..n_out {
            let gv = g[b * n_out + k];
            if gv == 0.0 {
                continue;
            }
            let wr = &weight[k * n_in..(k + 1) * n_in];
            for (a, w) in gxr.iter_mut().zip(wr) {
                *a += gv * w;
            }
        }
    }
    gx
}

pub fn linear_backward_weight(g: &[f64], x: &[f64], batch: usize, n_in: usize, n_out: usize) -> Vec<f64> {
    let mut gw = vec![0.0; n_out * n_in];
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for k in 0..n_out {
            let gv = g[b * n_out + k];
            if gv == 0.0 {
                continue;
            }
            for (a, xv) in gw[k * n_in..(k + 1) * n_in].iter_mut().zip(xr) {
                *a += gv * xv;
            }
        }
    }
    gw
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
