//! Raw numeric kernels on row-major slices. All shape checking happens in
//! the callers; these functions assume consistent sizes.

/// `c = a · b + beta · c` where `a` is `m × k` and `b` is `k × n`, either
/// operand optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe buffers whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `[C, H, W]` image into a `[C·kh·kw, Ho·Wo]` column matrix.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], cols: &mut [f64]) {
    let p = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let row = (c * g.kernel_h + i) * g.kernel_w + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - pad;
                        *out = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            src[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], grad_input: &mut [f64]) {
    let p = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let row = (c * g.kernel_h + i) * g.kernel_w + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + j) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let p = g.col_cols();
    let mut out = vec![0.0; batch * out_channels * p];
    let mut cols = vec![0.0; g.col_rows() * p];
    for n in 0..batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
        for (k, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias[k]);
        }
        gemm(
            out_channels,
            g.col_rows(),
            p,
            weight,
            false,
            &cols,
            false,
            1.0,
            dst,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    out_channels: usize,
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let in_len = g.channels * g.height * g.width;
    let p = g.col_cols();
    let rows = g.col_rows();
    let mut gi = need_input.then(|| vec![0.0; batch * in_len]);
    let mut gw = need_weight.then(|| vec![0.0; out_channels * rows]);
    let mut gb = need_bias.then(|| vec![0.0; out_channels]);
    let mut cols = vec![0.0; rows * p];
    let mut dcols = vec![0.0; if need_input { rows * p } else { 0 }];
    for n in 0..batch {
        let go = &grad_out[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(gb) = gb.as_mut() {
            for (k, row) in go.chunks(p).enumerate() {
                gb[k] += row.iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(out_channels, p, rows, go, false, &cols, true, 1.0, gw);
        }
        if let Some(gi) = gi.as_mut() {
            gemm(
                rows,
                out_channels,
                p,
                weight,
                true,
                go,
                false,
                0.0,
                &mut dcols,
            );
            col2im(g, &dcols, &mut gi[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

pub(crate) const NORM_FLOOR: f64 = 1e-12;

/// Rows of `x` (`rows × dim`) scaled to unit length, plus the floored norms.
pub(crate) fn unit_rows(x: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / dim);
    for row in x.chunks(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            log::debug!("cosine similarity on a near-zero vector (norm {norm:e})");
        }
        let norm = norm.max(NORM_FLOOR);
        norms.push(norm);
        unit.extend(row.iter().map(|v| v / norm));
    }
    (unit, norms)
}

/// Gradient through `x ↦ x / max(‖x‖, floor)` for every row.
pub(crate) fn unit_rows_backward(
    x: &[f64],
    unit: &[f64],
    norms: &[f64],
    grad_unit: &[f64],
    dim: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, &norm) in norms.iter().enumerate() {
        let span = r * dim..(r + 1) * dim;
        let u = &unit[span.clone()];
        let gu = &grad_unit[span.clone()];
        let raw = x[span.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
        let dst = &mut out[span];
        if raw < NORM_FLOOR {
            for (d, g) in dst.iter_mut().zip(gu) {
                *d = g / norm;
            }
        } else {
            let proj: f64 = u.iter().zip(gu).map(|(a, b)| a * b).sum();
            for ((d, g), uu) in dst.iter_mut().zip(gu).zip(u) {
                *d = (g - proj * uu) / norm;
            }
        }
    }
    out
}
