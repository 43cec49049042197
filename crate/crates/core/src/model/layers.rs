//! Forward and backward kernels for the network layers. Feature maps are
//! channel-major `[C, H, W]` slices.

use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Square convolution geometry with `(kernel - 1) / 2` zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_shape(&self, input: Shape3, out_channels: usize) -> Shape3 {
        let p = self.pad();
        let h = (input.h + 2 * p - self.kernel) / self.stride + 1;
        let w = (input.w + 2 * p - self.kernel) / self.stride + 1;
        Shape3::new(out_channels, h, w)
    }
}

fn im2col<T: Real>(x: &[T], s: Shape3, g: ConvGeom, out: Shape3) -> Vec<T> {
    let k = g.kernel;
    let n = out.plane();
    let p = g.pad() as isize;
    let mut cols = vec![T::zero(); s.c * k * k * n];
    for ci in 0..s.c {
        let plane = &x[ci * s.plane()..(ci + 1) * s.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..out.h {
                    let iy = (oy * g.stride + ky) as isize - p;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let drow = &mut dst[oy * out.w..(oy + 1) * out.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - p;
                        if ix >= 0 && ix < s.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], s: Shape3, g: ConvGeom, out: Shape3) -> Vec<T> {
    let k = g.kernel;
    let n = out.plane();
    let p = g.pad() as isize;
    let mut x = vec![T::zero(); s.len()];
    for ci in 0..s.c {
        let plane = &mut x[ci * s.plane()..(ci + 1) * s.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..out.h {
                    let iy = (oy * g.stride + ky) as isize - p;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    let srow = &src[oy * out.w..(oy + 1) * out.w];
                    for (ox, v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - p;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `weight` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
pub fn conv_forward<T: Real>(
    x: &[T],
    s: Shape3,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    g: ConvGeom,
) -> (Vec<T>, Shape3) {
    let os = g.out_shape(s, out_channels);
    let kdim = s.c * g.kernel * g.kernel;
    let n = os.plane();
    let mut y = vec![T::zero(); os.len()];
    for (co, b) in bias.iter().enumerate() {
        y[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = *b);
    }
    if g.kernel == 1 && g.stride == 1 {
        T::gemm(out_channels, kdim, n, weight, false, x, false, &mut y, true);
    } else {
        let cols = im2col(x, s, g, os);
        T::gemm(
            out_channels,
            kdim,
            n,
            weight,
            false,
            &cols,
            false,
            &mut y,
            true,
        );
    }
    (y, os)
}

/// Accumulates weight/bias gradients and returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    x: &[T],
    s: Shape3,
    weight: &[T],
    dy: &[T],
    os: Shape3,
    g: ConvGeom,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let kdim = s.c * g.kernel * g.kernel;
    let n = os.plane();
    let co = os.c;
    for (c, db) in dbias.iter_mut().enumerate() {
        *db += dy[c * n..(c + 1) * n].iter().copied().sum::<T>();
    }
    let direct = g.kernel == 1 && g.stride == 1;
    let cols_owned;
    let cols: &[T] = if direct {
        x
    } else {
        cols_owned = im2col(x, s, g, os);
        &cols_owned
    };
    // dW[co, K] += dy[co, N] . cols[K, N]^T
    T::gemm(co, n, kdim, dy, false, cols, true, dweight, true);
    if !need_dx {
        return None;
    }
    // dcols[K, N] = W[co, K]^T . dy[co, N]
    let mut dcols = vec![T::zero(); kdim * n];
    T::gemm(kdim, co, n, weight, true, dy, false, &mut dcols, false);
    if direct {
        Some(dcols)
    } else {
        Some(col2im(&dcols, s, g, os))
    }
}

pub const GN_EPS: f64 = 1e-5;

/// Saved statistics for the group-norm backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<f64>,
}

pub fn group_norm_forward<T: Real>(
    x: &[T],
    s: Shape3,
    groups: usize,
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, NormCache<T>) {
    let cpg = s.c / groups;
    let gsize = cpg * s.plane();
    let mut y = vec![T::zero(); s.len()];
    let mut xhat = vec![T::zero(); s.len()];
    let mut rstd = Vec::with_capacity(groups);
    for gi in 0..groups {
        let range = gi * gsize..(gi + 1) * gsize;
        let xs = &x[range.clone()];
        let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / gsize as f64;
        let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / gsize as f64;
        let r = 1.0 / (var + GN_EPS).sqrt();
        rstd.push(r);
        let (mean_t, r_t) = (T::of(mean), T::of(r));
        for c in 0..cpg {
            let ch = gi * cpg + c;
            let (ga, be) = (gamma[ch], beta[ch]);
            let off = ch * s.plane();
            for i in off..off + s.plane() {
                let xh = (x[i] - mean_t) * r_t;
                xhat[i] = xh;
                y[i] = ga * xh + be;
            }
        }
    }
    (y, NormCache { xhat, rstd })
}

#[allow(clippy::needless_range_loop)]
pub fn group_norm_backward<T: Real>(
    dy: &[T],
    s: Shape3,
    groups: usize,
    gamma: &[T],
    cache: &NormCache<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let cpg = s.c / groups;
    let plane = s.plane();
    let gsize = (cpg * plane) as f64;
    let mut dx = vec![T::zero(); s.len()];
    for ch in 0..s.c {
        let off = ch * plane;
        let (mut dg, mut db) = (0.0f64, 0.0f64);
        for i in off..off + plane {
            dg += (dy[i] * cache.xhat[i]).f64();
            db += dy[i].f64();
        }
        dgamma[ch] += T::of(dg);
        dbeta[ch] += T::of(db);
    }
    for gi in 0..groups {
        let (mut sum_d, mut sum_dx) = (0.0f64, 0.0f64);
        for ch in gi * cpg..(gi + 1) * cpg {
            let ga = gamma[ch];
            for i in ch * plane..(ch + 1) * plane {
                let d = (dy[i] * ga).f64();
                sum_d += d;
                sum_dx += d * cache.xhat[i].f64();
            }
        }
        let r = cache.rstd[gi];
        let (a, b) = (T::of(sum_d / gsize), T::of(sum_dx / gsize));
        let r_t = T::of(r);
        for ch in gi * cpg..(gi + 1) * cpg {
            let ga = gamma[ch];
            for i in ch * plane..(ch + 1) * plane {
                dx[i] = r_t * (dy[i] * ga - a - cache.xhat[i] * b);
            }
        }
    }
    dx
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub fn silu_forward<T: Real>(z: &[T]) -> Vec<T> {
    z.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Real>(z: &[T], dy: &[T]) -> Vec<T> {
    z.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

fn quarter<T: Real>() -> (T, T) {
    (T::of(0.25), T::of(0.75))
}

/// 1-D linear upsampling by two (half-pixel centers, edge clamped).
fn up_line<T: Real>(src: &[T], dst: &mut [T]) {
    let n = src.len();
    let (q, tq) = quarter::<T>();
    for i in 0..n {
        let prev = src[i.saturating_sub(1)];
        let next = src[(i + 1).min(n - 1)];
        dst[2 * i] = q * prev + tq * src[i];
        dst[2 * i + 1] = tq * src[i] + q * next;
    }
}

fn up_line_backward<T: Real>(dy: &[T], dx: &mut [T]) {
    let n = dx.len();
    let (q, tq) = quarter::<T>();
    for i in 0..n {
        dx[i.saturating_sub(1)] += q * dy[2 * i];
        dx[i] += tq * dy[2 * i] + tq * dy[2 * i + 1];
        dx[(i + 1).min(n - 1)] += q * dy[2 * i + 1];
    }
}

/// Bilinear x2 upsampling.
pub fn upsample2_forward<T: Real>(x: &[T], s: Shape3) -> (Vec<T>, Shape3) {
    let os = Shape3::new(s.c, s.h * 2, s.w * 2);
    let mut y = vec![T::zero(); os.len()];
    let mut tmp = vec![T::zero(); s.h * os.w];
    let mut col_src = vec![T::zero(); s.h];
    let mut col_dst = vec![T::zero(); os.h];
    for c in 0..s.c {
        let plane = &x[c * s.plane()..(c + 1) * s.plane()];
        for r in 0..s.h {
            up_line(
                &plane[r * s.w..(r + 1) * s.w],
                &mut tmp[r * os.w..(r + 1) * os.w],
            );
        }
        let out = &mut y[c * os.plane()..(c + 1) * os.plane()];
        for col in 0..os.w {
            for r in 0..s.h {
                col_src[r] = tmp[r * os.w + col];
            }
            up_line(&col_src, &mut col_dst);
            for r in 0..os.h {
                out[r * os.w + col] = col_dst[r];
            }
        }
    }
    (y, os)
}

/// Transpose of [`upsample2_forward`]; `s` is the input (small) shape.
pub fn upsample2_backward<T: Real>(dy: &[T], s: Shape3) -> Vec<T> {
    let os = Shape3::new(s.c, s.h * 2, s.w * 2);
    let mut dx = vec![T::zero(); s.len()];
    let mut tmp = vec![T::zero(); s.h * os.w];
    let mut col_dy = vec![T::zero(); os.h];
    let mut col_dx = vec![T::zero(); s.h];
    for c in 0..s.c {
        let dplane = &dy[c * os.plane()..(c + 1) * os.plane()];
        for col in 0..os.w {
            for r in 0..os.h {
                col_dy[r] = dplane[r * os.w + col];
            }
            col_dx.iter_mut().for_each(|v| *v = T::zero());
            up_line_backward(&col_dy, &mut col_dx);
            for r in 0..s.h {
                tmp[r * os.w + col] = col_dx[r];
            }
        }
        let out = &mut dx[c * s.plane()..(c + 1) * s.plane()];
        for r in 0..s.h {
            up_line_backward(
                &tmp[r * os.w..(r + 1) * os.w],
                &mut out[r * s.w..(r + 1) * s.w],
            );
        }
    }
    dx
}

/// `y = W x + b` with `W` as `[out, in]`.
pub fn linear_forward<T: Real>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let inp = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weight[o * inp..(o + 1) * inp];
            row.iter().zip(x).fold(b, |acc, (&w, &v)| acc + w * v)
        })
        .collect()
}

/// Accumulates parameter gradients and returns `dx`.
pub fn linear_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let inp = x.len();
    let mut dx = vec![T::zero(); inp];
    for (o, &d) in dy.iter().enumerate() {
        dbias[o] += d;
        let row = &weight[o * inp..(o + 1) * inp];
        let drow = &mut dweight[o * inp..(o + 1) * inp];
        for i in 0..inp {
            drow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
    dx
}

/// L2 normalization; returns `(y, norm)`. A zero vector maps to the first
/// basis vector.
pub fn l2_normalize<T: Real>(x: &[T]) -> (Vec<T>, f64) {
    let norm = x.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut y = vec![T::zero(); x.len()];
        if let Some(first) = y.first_mut() {
            *first = T::one();
        }
        return (y, 0.0);
    }
    let inv = 1.0 / norm;
    (x.iter().map(|v| T::of(v.f64() * inv)).collect(), norm)
}

pub fn l2_normalize_backward<T: Real>(y: &[T], norm: f64, dy: &[T]) -> Vec<T> {
    if norm == 0.0 {
        return vec![T::zero(); y.len()];
    }
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a.f64() * b.f64()).sum();
    y.iter()
        .zip(dy)
        .map(|(&yy, &d)| T::of((d.f64() - yy.f64() * dot) / norm))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], s: Shape3, w: &[f64], b: &[f64], co: usize, g: ConvGeom) -> Vec<f64> {
        let os = g.out_shape(s, co);
        let k = g.kernel as isize;
        let p = g.pad() as isize;
        let mut y = vec![0.0; os.len()];
        for o in 0..co {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = b[o];
                    for ci in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride) as isize + ky - p;
                                let ix = (ox * g.stride) as isize + kx - p;
                                if iy >= 0 && ix >= 0 && iy < s.h as isize && ix < s.w as isize {
                                    let wi = ((o * s.c + ci) as isize * k + ky) * k + kx;
                                    acc += w[wi as usize]
                                        * x[ci * s.plane() + iy as usize * s.w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(o * os.h + oy) * os.w + ox] = acc;
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0)
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        for (stride, kernel) in [(1, 3), (2, 3), (1, 1)] {
            let s = Shape3::new(3, 7, 6);
            let g = ConvGeom { kernel, stride };
            let co = 4;
            let x = pseudo(s.len(), 1);
            let w = pseudo(co * s.c * kernel * kernel, 2);
            let b = pseudo(co, 3);
            let (y, _) = conv_forward(&x, s, &w, &b, co, g);
            let expect = naive_conv(&x, s, &w, &b, co, g);
            for (a, e) in y.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_backward_is_the_transpose() {
        let s = Shape3::new(2, 3, 5);
        let x = pseudo(s.len(), 4);
        let dy = pseudo(s.len() * 4, 5);
        let (y, _) = upsample2_forward(&x, s);
        let dx = upsample2_backward(&dy, s);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants() {
        let s = Shape3::new(1, 4, 4);
        let (y, _) = upsample2_forward(&[0.3f64; 16], s);
        assert!(y.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn conv_backward_is_the_transpose() {
        let s = Shape3::new(2, 6, 6);
        let g = ConvGeom {
            kernel: 3,
            stride: 2,
        };
        let co = 3;
        let x = pseudo(s.len(), 6);
        let w = pseudo(co * s.c * 9, 7);
        let b = vec![0.0; co];
        let (y, os) = conv_forward(&x, s, &w, &b, co, g);
        let dy = pseudo(y.len(), 8);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; co];
        let dx = conv_backward(&x, s, &w, &dy, os, g, &mut dw, &mut db, true).unwrap();
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // the map is linear in w as well, so <y, dy> = <w, dw> when b = 0
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }
}
