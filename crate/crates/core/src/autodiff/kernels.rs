//! Numeric kernels behind the graph operations. Everything is row-major and
//! single-threaded so results are reproducible bit-for-bit.

/// `c = alpha * a[m,k] * b[k,n] + beta * c`, with optional transposes given
/// as row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked by callers.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
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

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C,H,W]` image into a `[C*kh*kw, oh*ow]` patch matrix.
fn im2col(g: &ConvGeom, img: &[f64], col: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] =
                            if y < 0 || x < 0 || y >= g.h as isize || x >= g.w as isize {
                                0.0
                            } else {
                                img[(c * g.h + y as usize) * g.w + x as usize]
                            };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], img: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let src = &col[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x < 0 || x >= g.w as isize {
                            continue;
                        }
                        img[(c * g.h + y as usize) * g.w + x as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.n * g.f * cols];
    let mut col = vec![0.0; rows * cols];
    let in_stride = g.c * g.h * g.w;
    for n in 0..g.n {
        im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut col);
        let dst = &mut out[n * g.f * cols..(n + 1) * g.f * cols];
        for f in 0..g.f {
            dst[f * cols..(f + 1) * cols].fill(b[f]);
        }
        gemm(g.f, rows, cols, w, false, &col, false, dst, 1.0);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` is only computed when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (rows, cols) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut dw = vec![0.0; g.f * rows];
    let mut db = vec![0.0; g.f];
    let mut dx = want_dx.then(|| vec![0.0; g.n * in_stride]);
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    for n in 0..g.n {
        let go = &dout[n * g.f * cols..(n + 1) * g.f * cols];
        for f in 0..g.f {
            db[f] += go[f * cols..(f + 1) * cols].iter().sum::<f64>();
        }
        im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut col);
        // dw += dout[f, p] * col[r, p]^T
        gemm(g.f, cols, rows, go, false, &col, true, &mut dw, 1.0);
        if let Some(dx) = dx.as_mut() {
            // dcol = w^T[r, f] * dout[f, p]
            gemm(rows, g.f, cols, w, true, go, false, &mut dcol, 0.0);
            col2im(g, &dcol, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    (dx, dw, db)
}

/// Max over each `[y0,y1) x [x0,x1)` region per channel plane. Returns the
/// pooled values and the flat argmax index of each output (first on ties).
pub(crate) fn region_max(
    planes: usize,
    h: usize,
    w: usize,
    ybins: &[(usize, usize)],
    xbins: &[(usize, usize)],
    x: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let outn = planes * ybins.len() * xbins.len();
    let mut vals = Vec::with_capacity(outn);
    let mut idx = Vec::with_capacity(outn);
    for p in 0..planes {
        let base = p * h * w;
        for &(y0, y1) in ybins {
            for &(x0, x1) in xbins {
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = base + y * w + xx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                vals.push(x[best]);
                idx.push(best);
            }
        }
    }
    (vals, idx)
}

pub(crate) fn window_bins(extent: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let out = (extent - window) / stride + 1;
    (0..out).map(|o| (o * stride, o * stride + window)).collect()
}

/// Floor-partitioned contiguous bins: bin `i` spans `[i*E/k, (i+1)*E/k)`.
pub(crate) fn adaptive_bins(extent: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .map(|i| (i * extent / k, (i + 1) * extent / k))
        .collect()
}
