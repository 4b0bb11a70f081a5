//! Direct-loop 2-D cross-correlation kernels.
//!
//! Three kernels cover both layer types: the transposed convolution forward
//! pass is the convolution's input-gradient kernel, and vice versa.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    /// Channels on the "image" side of a conv2d (its input).
    pub in_ch: usize,
    /// Channels on the "feature" side of a conv2d (its output).
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    #[inline]
    fn in_index(&self, oh: usize, k: usize) -> Option<usize> {
        let pos = (oh * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.in_h).then_some(pos as usize)
    }

    #[inline]
    fn in_index_w(&self, ow: usize, k: usize) -> Option<usize> {
        let pos = (ow * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.in_w).then_some(pos as usize)
    }

    // Valid output columns for kernel column k, as a half-open range.
    fn ow_range(&self, k: usize) -> (usize, usize) {
        let lo = (0..self.out_w).find(|&ow| self.in_index_w(ow, k).is_some());
        match lo {
            None => (0, 0),
            Some(lo) => {
                let hi = (lo..self.out_w).take_while(|&ow| self.in_index_w(ow, k).is_some()).count();
                (lo, lo + hi)
            }
        }
    }
}

/// `out[n,f,oh,ow] = Σ x[n,c,ih,iw]·w[f,c,kh,kw]` (no bias).
pub(crate) fn correlate(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    let col_ranges: Vec<_> = (0..g.kw).map(|k| g.ow_range(k)).collect();
    for n in 0..g.batch {
        for f in 0..g.out_ch {
            let ob = (n * g.out_ch + f) * g.out_h * g.out_w;
            for c in 0..g.in_ch {
                let xb = (n * g.in_ch + c) * g.in_h * g.in_w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = w[((f * g.in_ch + c) * g.kh + ki) * g.kw + kj];
                        let (lo, hi) = col_ranges[kj];
                        for oh in 0..g.out_h {
                            let Some(ih) = g.in_index(oh, ki) else { continue };
                            let orow = ob + oh * g.out_w;
                            let xrow = xb + ih * g.in_w;
                            for ow in lo..hi {
                                let iw = ow * g.stride + kj - g.padding;
                                out[orow + ow] += wv * x[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`correlate`] in its first argument: scatters `gout` back to
/// image space.
pub(crate) fn correlate_adjoint(g: &ConvGeom, gout: &[f64], w: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; g.batch * g.in_ch * g.in_h * g.in_w];
    let col_ranges: Vec<_> = (0..g.kw).map(|k| g.ow_range(k)).collect();
    for n in 0..g.batch {
        for f in 0..g.out_ch {
            let ob = (n * g.out_ch + f) * g.out_h * g.out_w;
            for c in 0..g.in_ch {
                let xb = (n * g.in_ch + c) * g.in_h * g.in_w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = w[((f * g.in_ch + c) * g.kh + ki) * g.kw + kj];
                        let (lo, hi) = col_ranges[kj];
                        for oh in 0..g.out_h {
                            let Some(ih) = g.in_index(oh, ki) else { continue };
                            let orow = ob + oh * g.out_w;
                            let xrow = xb + ih * g.in_w;
                            for ow in lo..hi {
                                let iw = ow * g.stride + kj - g.padding;
                                gx[xrow + iw] += wv * gout[orow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of [`correlate`] with respect to the kernel.
pub(crate) fn correlate_kernel_grad(g: &ConvGeom, gout: &[f64], x: &[f64]) -> Vec<f64> {
    let mut gw = vec![0.0; g.out_ch * g.in_ch * g.kh * g.kw];
    let col_ranges: Vec<_> = (0..g.kw).map(|k| g.ow_range(k)).collect();
    for n in 0..g.batch {
        for f in 0..g.out_ch {
            let ob = (n * g.out_ch + f) * g.out_h * g.out_w;
            for c in 0..g.in_ch {
                let xb = (n * g.in_ch + c) * g.in_h * g.in_w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let (lo, hi) = col_ranges[kj];
                        let mut acc = 0.0;
                        for oh in 0..g.out_h {
                            let Some(ih) = g.in_index(oh, ki) else { continue };
                            let orow = ob + oh * g.out_w;
                            let xrow = xb + ih * g.in_w;
                            for ow in lo..hi {
                                let iw = ow * g.stride + kj - g.padding;
                                acc += gout[orow + ow] * x[xrow + iw];
                            }
                        }
                        gw[((f * g.in_ch + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Adds `bias[f]` to every spatial position of feature map `f`.
pub(crate) fn add_channel_bias(out: &mut [f64], bias: &[f64], batch: usize, spatial: usize) {
    let ch = bias.len();
    for n in 0..batch {
        for (f, b) in bias.iter().enumerate() {
            let base = (n * ch + f) * spatial;
            out[base..base + spatial].iter_mut().for_each(|v| *v += b);
        }
    }
}

/// Per-channel sum over batch and spatial positions.
pub(crate) fn channel_sums(g: &[f64], batch: usize, ch: usize, spatial: usize) -> Vec<f64> {
    let mut s = vec![0.0; ch];
    for n in 0..batch {
        for (f, acc) in s.iter_mut().enumerate() {
            let base = (n * ch + f) * spatial;
            *acc += g[base..base + spatial].iter().sum::<f64>();
        }
    }
    s
}
