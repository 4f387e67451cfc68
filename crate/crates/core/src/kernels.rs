//! Dense numeric kernels behind the autodiff ops.
//!
//! Every kernel has a sequential implementation in [`seq`]. With the
//! `parallel` feature, [`par`] splits the same work across rayon workers by
//! output row (or by batch sample), so each output element is produced by
//! the same sequence of floating-point operations on either path and results
//! are bit-identical. The top-level functions pick the parallel path only
//! when the problem is large enough to amortize task overhead.

/// Below this many multiply-adds the dispatchers stay sequential.
pub const PAR_THRESHOLD: usize = 1 << 16;

/// Geometry of a 2-D convolution over NCHW activations and OIHW kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_ch * self.out_h() * self.out_w()
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        return par::matmul(a, b, m, k, n);
    }
    seq::matmul(a, b, m, k, n)
}

pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if g.batch > 1 && g.out_sample() * g.patch() * g.batch >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        return par::conv2d_forward(input, kernel, g);
    }
    seq::conv2d_forward(input, kernel, g)
}

/// Returns `(d_input, d_kernel)`.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    #[cfg(feature = "parallel")]
    if g.batch > 1 && g.out_sample() * g.patch() * g.batch >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        return par::conv2d_backward(input, kernel, grad_out, g);
    }
    seq::conv2d_backward(input, kernel, grad_out, g)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Accumulates `a[m,k] · b[k,n]` into `out[m,n]`, one row at a time.
#[inline]
fn matmul_rows(out: &mut [f64], a: &[f64], b: &[f64], k: usize, n: usize) {
    for (orow, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn im2col(sample: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            sample[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, sample: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.in_ch {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        sample[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

fn conv_sample_forward(sample: &[f64], kernel: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let hw = g.out_h() * g.out_w();
    let mut cols = vec![0.0; g.patch() * hw];
    im2col(sample, g, &mut cols);
    matmul_rows(out, kernel, &cols, g.patch(), hw);
}

/// Returns this sample's kernel-gradient contribution; writes `d_sample`.
fn conv_sample_backward(
    sample: &[f64],
    kernel_t: &[f64],
    grad: &[f64],
    g: &ConvGeom,
    d_sample: &mut [f64],
) -> Vec<f64> {
    let hw = g.out_h() * g.out_w();
    let patch = g.patch();
    let mut cols = vec![0.0; patch * hw];
    im2col(sample, g, &mut cols);
    let cols_t = transpose(&cols, patch, hw);
    let mut dk = vec![0.0; g.out_ch * patch];
    matmul_rows(&mut dk, grad, &cols_t, hw, patch);
    let mut dcols = vec![0.0; patch * hw];
    matmul_rows(&mut dcols, kernel_t, grad, g.out_ch, hw);
    col2im(&dcols, g, d_sample);
    dk
}

pub mod seq {
    use super::*;

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        matmul_rows(&mut out, a, b, k, n);
        out
    }

    pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (is, os) = (g.in_sample(), g.out_sample());
        let mut out = vec![0.0; g.batch * os];
        for (sample, o) in input.chunks_exact(is).zip(out.chunks_exact_mut(os)) {
            conv_sample_forward(sample, kernel, g, o);
        }
        out
    }

    pub fn conv2d_backward(
        input: &[f64],
        kernel: &[f64],
        grad_out: &[f64],
        g: &ConvGeom,
    ) -> (Vec<f64>, Vec<f64>) {
        let (is, os) = (g.in_sample(), g.out_sample());
        let kernel_t = transpose(kernel, g.out_ch, g.patch());
        let mut d_input = vec![0.0; input.len()];
        let mut d_kernel = vec![0.0; kernel.len()];
        for ((sample, grad), d_sample) in input
            .chunks_exact(is)
            .zip(grad_out.chunks_exact(os))
            .zip(d_input.chunks_exact_mut(is))
        {
            let dk = conv_sample_backward(sample, &kernel_t, grad, g, d_sample);
            for (acc, v) in d_kernel.iter_mut().zip(dk) {
                *acc += v;
            }
        }
        (d_input, d_kernel)
    }
}

#[cfg(feature = "parallel")]
pub mod par {
    use rayon::prelude::*;

    use super::*;

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        let rows = m.div_ceil(rayon::current_num_threads() * 4).max(1);
        out.par_chunks_mut(rows * n)
            .zip(a.par_chunks(rows * k))
            .for_each(|(o, a)| matmul_rows(o, a, b, k, n));
        out
    }

    pub fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (is, os) = (g.in_sample(), g.out_sample());
        let mut out = vec![0.0; g.batch * os];
        out.par_chunks_mut(os)
            .zip(input.par_chunks(is))
            .for_each(|(o, sample)| conv_sample_forward(sample, kernel, g, o));
        out
    }

    /// Per-sample kernel gradients are reduced in sample order, matching
    /// the sequential summation exactly.
    pub fn conv2d_backward(
        input: &[f64],
        kernel: &[f64],
        grad_out: &[f64],
        g: &ConvGeom,
    ) -> (Vec<f64>, Vec<f64>) {
        let (is, os) = (g.in_sample(), g.out_sample());
        let kernel_t = transpose(kernel, g.out_ch, g.patch());
        let mut d_input = vec![0.0; input.len()];
        let partials: Vec<Vec<f64>> = d_input
            .par_chunks_mut(is)
            .zip(input.par_chunks(is).zip(grad_out.par_chunks(os)))
            .map(|(d_sample, (sample, grad))| {
                conv_sample_backward(sample, &kernel_t, grad, g, d_sample)
            })
            .collect();
        let mut d_kernel = vec![0.0; kernel.len()];
        for dk in partials {
            for (acc, v) in d_kernel.iter_mut().zip(dk) {
                *acc += v;
            }
        }
        (d_input, d_kernel)
    }
}
