//! Raw loops behind the differentiable ops. Everything here works on flat
//! row-major slices; shape validation happens in `graph`.

use super::gemm::{gemm, Layout};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn cols(&self) -> usize {
        self.n * self.plane()
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Unfolds `x` into a `[C·kH·kW, N·H'·W']` matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let np = g.cols();
    let plane = g.plane();
    let mut cols = vec![0.0; g.patch() * np];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = n * plane + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let np = g.cols();
    let plane = g.plane();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * plane + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; returns the NCHW output and the unfolded input.
pub(crate) fn conv_forward(
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let np = g.cols();
    let plane = g.plane();
    let mut mat = vec![0.0; g.o * np];
    gemm(
        g.o,
        g.patch(),
        np,
        kernel,
        Layout::row_major(g.patch()),
        &cols,
        Layout::row_major(np),
        0.0,
        &mut mat,
    );
    let mut out = vec![0.0; g.n * g.o * plane];
    for o in 0..g.o {
        let b = bias.map_or(0.0, |b| b[o]);
        for n in 0..g.n {
            let src = &mat[o * np + n * plane..o * np + (n + 1) * plane];
            let dst = &mut out[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    dout: &[f64],
    kernel: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    want: [bool; 3],
) -> ConvGrads {
    let np = g.cols();
    let plane = g.plane();
    let patch = g.patch();
    // dout is [N, O, P]; regroup to [O, N·P]
    let mut dmat = vec![0.0; g.o * np];
    for n in 0..g.n {
        for o in 0..g.o {
            let src = &dout[(n * g.o + o) * plane..(n * g.o + o + 1) * plane];
            dmat[o * np + n * plane..o * np + (n + 1) * plane].copy_from_slice(src);
        }
    }
    let kernel_grad = want[1].then(|| {
        let mut dk = vec![0.0; g.o * patch];
        gemm(g.o, np, patch, &dmat, Layout::row_major(np), cols, Layout::transposed(np), 0.0, &mut dk);
        dk
    });
    let bias_grad = want[2].then(|| (0..g.o).map(|o| dmat[o * np..(o + 1) * np].iter().sum()).collect());
    let input_grad = want[0].then(|| {
        let mut dcols = vec![0.0; patch * np];
        gemm(patch, g.o, np, kernel, Layout::transposed(patch), &dmat, Layout::row_major(np), 0.0, &mut dcols);
        let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    ConvGrads { input: input_grad, kernel: kernel_grad, bias: bias_grad }
}

/// Per-channel mean and biased variance over N·H·W.
pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
