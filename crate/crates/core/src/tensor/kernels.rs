//! Raw buffer kernels behind the graph ops. No shape validation happens
//! here; callers in `graph.rs` check shapes first.

/// `c = op(a) * op(b) + beta * c`, row-major. `op(a)` is `m x k`, `op(b)`
/// is `k x n`. When `ta` is set `a` is stored `k x m`; likewise for `tb`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::sgemm(
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
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ncols = g.col_cols();
    let mut cols = vec![0.0f32; g.col_rows() * ncols];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.h_out {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im_add(cols: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.h_out {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let n = g.col_cols();
    let mut out = vec![0.0f32; g.c_out * n];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[o]);
        }
    }
    if g.is_pointwise() {
        gemm(g.c_out, g.c_in, n, weight, false, input, false, &mut out, 1.0);
    } else {
        let cols = im2col(input, g);
        gemm(g.c_out, g.col_rows(), n, weight, false, &cols, false, &mut out, 1.0);
    }
    out
}

/// Accumulates gradients for input, weight and bias (each optional).
pub fn conv2d_backward(
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    grad_input: Option<&mut [f32]>,
    grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    let n = g.col_cols();
    let rows = g.col_rows();
    if let Some(gb) = grad_bias {
        for (o, chunk) in grad_out.chunks(n).enumerate() {
            gb[o] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
    if g.is_pointwise() {
        if let Some(gw) = grad_weight {
            gemm(g.c_out, n, rows, grad_out, false, input, true, gw, 1.0);
        }
        if let Some(gi) = grad_input {
            gemm(rows, g.c_out, n, weight, true, grad_out, false, gi, 1.0);
        }
        return;
    }
    if let Some(gw) = grad_weight {
        let cols = im2col(input, g);
        gemm(g.c_out, n, rows, grad_out, false, &cols, true, gw, 1.0);
    }
    if let Some(gi) = grad_input {
        let mut dcols = vec![0.0f32; rows * n];
        gemm(rows, g.c_out, n, weight, true, grad_out, false, &mut dcols, 0.0);
        col2im_add(&dcols, g, gi);
    }
}

pub fn upsample2x(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * h2 * w2];
    for ch in 0..c {
        for y in 0..h {
            let src = &input[(ch * h + y) * w..(ch * h + y + 1) * w];
            for dy in 0..2 {
                let base = (ch * h2 + 2 * y + dy) * w2;
                let dst = &mut out[base..base + w2];
                for (x, &v) in src.iter().enumerate() {
                    dst[2 * x] = v;
                    dst[2 * x + 1] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward(grad_out: &[f32], c: usize, h: usize, w: usize, grad_in: &mut [f32]) {
    let w2 = 2 * w;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = (ch * 2 * h + 2 * y) * w2 + 2 * x;
                let s = grad_out[base] + grad_out[base + 1] + grad_out[base + w2] + grad_out[base + w2 + 1];
                grad_in[(ch * h + y) * w + x] += s;
            }
        }
    }
}

pub fn avg_pool2x(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let base = (ch * h + 2 * y) * w + 2 * x;
                out[(ch * ho + y) * wo + x] =
                    0.25 * (input[base] + input[base + 1] + input[base + w] + input[base + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2x_backward(grad_out: &[f32], c: usize, h: usize, w: usize, grad_in: &mut [f32]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * grad_out[(ch * ho + y) * wo + x];
                let base = (ch * h + 2 * y) * w + 2 * x;
                grad_in[base] += g;
                grad_in[base + 1] += g;
                grad_in[base + w] += g;
                grad_in[base + w + 1] += g;
            }
        }
    }
}

/// Mean and biased variance of a slice, accumulated in f64.
pub fn moments(xs: &[f32]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}
