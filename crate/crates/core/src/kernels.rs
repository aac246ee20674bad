//! Raw slice kernels behind the tape operations. All reductions accumulate in `f64`.

use crate::tensor::Element;

/// `C[m,n] = A[m,k] · B[k,n]`
pub fn gemm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let row = &a[i * k..(i + 1) * k];
        for (p, &av) in row.iter().enumerate() {
            let av = av.acc();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.acc();
            }
        }
        out.extend(acc.iter().map(|&x| T::from_acc(x)));
    }
    out
}

/// `C[m,n] = A[m,k] · B[n,k]ᵀ`
pub fn gemm_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let col = &b[j * k..(j + 1) * k];
            out.push(T::from_acc(dot(row, col)));
        }
    }
    out
}

/// `C[m,n] = A[k,m]ᵀ · B[k,n]`
pub fn gemm_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut acc = vec![0.0f64; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let av = av.acc();
            if av == 0.0 {
                continue;
            }
            for (s, &bv) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *s += av * bv.acc();
            }
        }
    }
    acc.into_iter().map(T::from_acc).collect()
}

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.acc() * y.acc()).sum()
}

#[inline]
pub fn norm<T: Element>(a: &[T]) -> f64 {
    a.iter().map(|&x| x.acc() * x.acc()).sum::<f64>().sqrt()
}

/// Geometry of a square-kernel 2-D convolution over a `[c, h, w]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `[c, h, w]` into `[c·k·k, oh·ow]`; padded taps read zero.
pub fn im2col<T: Element>(img: &[T], g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut cols = vec![T::zero(); g.col_rows() * oh * ow];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[oy * ow + ox] = src[x as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters `[c·k·k, oh·ow]` back onto `[c, h, w]`, summing overlaps.
pub fn col2im<T: Element>(cols: &[T], g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut img = vec![0.0f64; g.channels * g.height * g.width];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            plane[y as usize * g.width + x as usize] += src[oy * ow + ox].acc();
                        }
                    }
                }
            }
        }
    }
    img.into_iter().map(T::from_acc).collect()
}
