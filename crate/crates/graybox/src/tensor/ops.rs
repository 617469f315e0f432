//! Raw row-major array kernels shared by the tape's forward and backward
//! passes. Accumulation order is fixed everywhere so results are
//! bit-deterministic across runs and thread counts.

use super::Scalar;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// dA[m,k] += G[m,n] * B[k,n]^T
pub fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::ZERO;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            darow[p] += acc;
        }
    }
}

/// dB[k,n] += A[m,k]^T * G[m,n]
pub fn matmul_grad_b<T: Scalar>(g: &[T], a: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                dbrow[j] += av * grow[j];
            }
        }
    }
}

/// Valid output-column range for a horizontal tap offset: columns where
/// `x + v - pad` stays inside the row.
#[inline]
fn col_range(w: usize, v: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(v);
    let hi = (w + pad - v).min(w);
    (lo, hi)
}

/// Same-padding stride-1 conv. `x` is [cin,h,w], `ker` [cout,cin,k,k],
/// `bias` [cout], output [cout,h,w]. Loops run tap-outer so the inner row
/// operations vectorize; per output pixel the additions still happen in
/// (ci, u, v) order starting from the bias, so delta kernels reproduce
/// their input bit-exactly.
pub fn conv2d_same<T: Scalar>(
    x: &[T],
    ker: &[T],
    bias: &[T],
    out: &mut [T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
) {
    let pad = (k - 1) / 2;
    for co in 0..cout {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        for p in plane.iter_mut() {
            *p = bias[co];
        }
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            for u in 0..k {
                for v in 0..k {
                    let kval = ker[((co * cin + ci) * k + u) * k + v];
                    let (lo, hi) = col_range(w, v, pad);
                    if lo >= hi {
                        continue;
                    }
                    for y in 0..h {
                        let iy = y as isize + u as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xplane[iy as usize * w + lo + v - pad..];
                        let dst = &mut plane[y * w + lo..y * w + hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += kval * *s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_same_grad<T: Scalar>(
    g: &[T],
    x: &[T],
    ker: &[T],
    dx: &mut [T],
    dker: &mut [T],
    dbias: &mut [T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    need_dx: bool,
    need_dker: bool,
) {
    let pad = (k - 1) / 2;
    for co in 0..cout {
        let gplane = &g[co * h * w..(co + 1) * h * w];
        for &go in gplane {
            dbias[co] += go;
        }
        for ci in 0..cin {
            let xplane = &x[ci * h * w..(ci + 1) * h * w];
            for u in 0..k {
                for v in 0..k {
                    let ki = ((co * cin + ci) * k + u) * k + v;
                    let kval = ker[ki];
                    let (lo, hi) = col_range(w, v, pad);
                    if lo >= hi {
                        continue;
                    }
                    let mut dk_acc = T::ZERO;
                    for y in 0..h {
                        let iy = y as isize + u as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let grow = &gplane[y * w + lo..y * w + hi];
                        let xoff = iy * w + lo + v - pad;
                        if need_dker {
                            let xrow = &xplane[xoff..xoff + (hi - lo)];
                            for (gv, xv) in grow.iter().zip(xrow) {
                                dk_acc += *gv * *xv;
                            }
                        }
                        if need_dx {
                            let dxplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                            let dxrow = &mut dxplane[xoff..xoff + (hi - lo)];
                            for (d, gv) in dxrow.iter_mut().zip(grow) {
                                *d += kval * *gv;
                            }
                        }
                    }
                    if need_dker {
                        dker[ki] += dk_acc;
                    }
                }
            }
        }
    }
}

/// Splits [c,h,w] into non-overlapping p x p patches in raster order.
/// Output row (py*(w/p)+px) holds the patch flattened channel-major.
pub fn patchify<T: Scalar>(x: &[T], out: &mut [T], c: usize, h: usize, w: usize, p: usize) {
    let ph = h / p;
    let pw = w / p;
    for py in 0..ph {
        for px in 0..pw {
            let row = py * pw + px;
            let base = row * c * p * p;
            let mut o = base;
            for ci in 0..c {
                for u in 0..p {
                    for v in 0..p {
                        out[o] = x[(ci * h + py * p + u) * w + px * p + v];
                        o += 1;
                    }
                }
            }
        }
    }
}

pub fn patchify_grad<T: Scalar>(g: &[T], dx: &mut [T], c: usize, h: usize, w: usize, p: usize) {
    let ph = h / p;
    let pw = w / p;
    for py in 0..ph {
        for px in 0..pw {
            let row = py * pw + px;
            let base = row * c * p * p;
            let mut o = base;
            for ci in 0..c {
                for u in 0..p {
                    for v in 0..p {
                        dx[(ci * h + py * p + u) * w + px * p + v] += g[o];
                        o += 1;
                    }
                }
            }
        }
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

/// In-place row softmax with max-subtraction.
pub fn softmax_rows<T: Scalar>(data: &mut [T], rows: usize, n: usize) {
    for r in 0..rows {
        let row = &mut data[r * n..(r + 1) * n];
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maximum(v);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}
