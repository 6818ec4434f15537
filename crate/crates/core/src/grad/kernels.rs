// Raw loops behind the graph primitives. All reductions run in a fixed
// order so forward values are bit-reproducible.

use super::tensor::Real;

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
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
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        Self {
            n: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let t = &mut plane[iy as usize * g.w + ix as usize];
                            *t = *t + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let in_step = g.cin * g.h * g.w;
    let out_step = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_step];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        let xn = &x[n * in_step..(n + 1) * in_step];
        let b: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let on = &mut out[n * out_step..(n + 1) * out_step];
        T::gemm(g.cout, k, p, w, (k as isize, 1), b, (p as isize, 1), T::zero(), on);
        if let Some(bias) = bias {
            for (row, &bb) in on.chunks_mut(p).zip(bias) {
                for v in row {
                    *v = *v + bb;
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_bias_grad<T: Real>(g: &ConvGeom, dout: &[T], db: &mut [T]) {
    let p = g.p();
    for (i, row) in dout.chunks(p).enumerate() {
        let s: T = row.iter().copied().sum();
        let c = i % g.cout;
        db[c] = db[c] + s;
    }
}

pub(crate) fn conv2d_weight_grad<T: Real>(g: &ConvGeom, x: &[T], dout: &[T], dw: &mut [T]) {
    let (k, p) = (g.k(), g.p());
    let in_step = g.cin * g.h * g.w;
    let out_step = g.cout * p;
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.n {
        let xn = &x[n * in_step..(n + 1) * in_step];
        let b: &[T] = if g.pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let dn = &dout[n * out_step..(n + 1) * out_step];
        // dW[cout, k] += dout_n[cout, p] * cols^T[p, k]
        T::gemm(g.cout, p, k, dn, (p as isize, 1), b, (1, p as isize), T::one(), dw);
    }
}

pub(crate) fn conv2d_input_grad<T: Real>(g: &ConvGeom, w: &[T], dout: &[T], dx: &mut [T]) {
    let (k, p) = (g.k(), g.p());
    let in_step = g.cin * g.h * g.w;
    let out_step = g.cout * p;
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..g.n {
        let dn = &dout[n * out_step..(n + 1) * out_step];
        let dxn = &mut dx[n * in_step..(n + 1) * in_step];
        if g.pointwise() {
            T::gemm(k, g.cout, p, w, (1, k as isize), dn, (p as isize, 1), T::one(), dxn);
        } else {
            T::gemm(k, g.cout, p, w, (1, k as isize), dn, (p as isize, 1), T::zero(), &mut dcols);
            col2im_add(g, &dcols, dxn);
        }
    }
}

/// Returns normalised values and the per-plane inverse standard deviation.
pub(crate) fn norm_forward<T: Real>(x: &[T], hw: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::of(NORM_EPS);
    let inv_n = T::of(1.0 / hw as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / hw);
    for plane in x.chunks(hw) {
        let mean = plane.iter().copied().sum::<T>() * inv_n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let inv = T::one() / (var + eps).sqrt();
        xhat.extend(plane.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

pub(crate) fn norm_input_grad<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    c: usize,
    hw: usize,
    dx: &mut [T],
) {
    let inv_n = T::of(1.0 / hw as f64);
    for (p, ((gp, xp), dp)) in dy.chunks(hw).zip(xhat.chunks(hw)).zip(dx.chunks_mut(hw)).enumerate() {
        let gm = gamma[p % c];
        let mean_g = gp.iter().copied().sum::<T>() * gm * inv_n;
        let mean_gx = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>() * gm * inv_n;
        let inv = inv_std[p];
        for ((d, &gv), &xv) in dp.iter_mut().zip(gp).zip(xp) {
            *d = *d + inv * (gv * gm - mean_g - xv * mean_gx);
        }
    }
}
