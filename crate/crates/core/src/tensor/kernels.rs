//! Slice-level kernels behind the tape ops. No allocation policy, no shape
//! validation: callers check shapes before reaching here.

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `[m, k]` and `op(b)` of
/// shape `[k, n]`. `a_t` means `a` is stored as `[k, m]`, `b_t` that `b` is
/// stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices; `c` is uniquely borrowed.
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
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the im2col matrix for one group.
    pub fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one group of one image (`[cin_g, h, w]`) into `[cin_g·kh·kw, ho·wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx` (`[cin_g, h, w]`).
pub(crate) fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Gathers `src` (row-major, `shape`) into row-major output order where output
/// axis `d` walks input axis `order[d]`.
pub(crate) fn permute(src: &[f64], shape: &[usize], order: &[usize]) -> Vec<f64> {
    let in_strides = super::strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    let walk: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    strided_walk(&out_shape, &walk, |off| out.push(src[off]));
    out
}

/// Visits, in row-major order over `shape`, the offsets `Σ idx[d]·walk[d]`.
pub(crate) fn strided_walk(shape: &[usize], walk: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let inner = shape[rank - 1];
    let inner_step = walk[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            f(off);
            off += inner_step;
        }
        // advance the outer counters
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            base += walk[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= walk[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Per-axis strides that map an index of `full` onto the right-aligned,
/// broadcast `small` shape (0 along broadcast axes). `None` if incompatible.
pub(crate) fn broadcast_walk(full: &[usize], small: &[usize]) -> Option<Vec<usize>> {
    if small.len() > full.len() {
        return None;
    }
    let lead = full.len() - small.len();
    let small_strides = super::strides(small);
    let mut walk = vec![0; full.len()];
    for (i, &d) in small.iter().enumerate() {
        let fd = full[lead + i];
        if d == fd {
            walk[lead + i] = small_strides[i];
        } else if d != 1 {
            return None;
        }
    }
    Some(walk)
}

/// Source taps for half-pixel-centre bilinear resampling of one axis.
pub(crate) fn bilinear_taps(len_in: usize, scale: usize) -> Vec<(usize, usize, f64)> {
    (0..len_in * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}
