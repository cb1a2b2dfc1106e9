//! Raw numeric kernels shared by the forward and backward passes.

/// Numpy-style broadcast of two shapes, aligned at the trailing dimension.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast `input`.
pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    let in_total: usize = input.iter().product();
    if input == out {
        return (0..total).collect();
    }
    if in_total == 1 {
        return vec![0; total];
    }
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

/// Sums a broadcast gradient back down to the operand's element count.
pub(crate) fn reduce_to(grad: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (g, &i) in grad.iter().zip(map) {
        out[i] += g;
    }
    out
}

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice bounds above cover every index touched for the given strides.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
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

    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Lowers one `[C, H, W]` image into a `[C*KH*KW, OH*OW]` patch matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            img[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npix = oh * ow;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
