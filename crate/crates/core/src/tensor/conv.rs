//! 2-D cross-correlation: a direct loop oracle and a patch-matrix (im2col)
//! path that the layers use. Both take NCHW input and `[Cout, Cin, k, k]`
//! weights with zero padding.

use rayon::prelude::*;

use super::{gemm, Element, Shape, Tensor};
use crate::error::{Error, Result};

/// `floor((extent + 2*padding - kernel) / stride) + 1`, or an error when the
/// kernel does not fit the padded input.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    let padded = extent + 2 * padding;
    if kernel > padded {
        return Err(Error::InvalidArgument(format!("conv2d: kernel {kernel} larger than padded input {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new(input: &Shape, weight: &Shape, stride: usize, padding: usize) -> Result<Self> {
        let [n, cin, h, w] = input.nchw("conv2d input")?;
        let [cout, wcin, kh, kw] = weight.nchw("conv2d weight")?;
        if wcin != cin {
            return Err(Error::ShapeMismatch { op: "conv2d", left: input.clone(), right: weight.clone() });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d: kernel must be square and odd, got {kh}x{kw}")));
        }
        let ho = conv_output_extent(h, kh, stride, padding)?;
        let wo = conv_output_extent(w, kw, stride, padding)?;
        Ok(Geometry { n, cin, h, w, cout, k: kh, ho, wo, stride, padding })
    }

    fn patch_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Source coordinate for output index `o` and kernel tap `t`, if inside the input.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output columns `lo..hi` whose tap `t` lands inside an input of `extent`.
    #[inline]
    fn valid_range(&self, t: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if t >= p { 0 } else { (p - t).div_ceil(s) };
        // need o*s + t - p <= extent - 1
        let hi = if extent + p > t { ((extent + p - t - 1) / s + 1).min(out_extent) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Unfolds one `[Cin, H, W]` image into a `[Cin*k*k, Ho*Wo]` patch matrix.
    fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            let chan = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_range(kx, self.w, self.wo);
                    for oy in 0..self.ho {
                        let seg = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            seg.fill(T::zero());
                            continue;
                        };
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        if lo >= hi {
                            continue;
                        }
                        let src = &chan[iy * self.w..(iy + 1) * self.w];
                        let first = lo * self.stride + kx - self.padding;
                        if self.stride == 1 {
                            seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, &v) in seg[lo..hi].iter_mut().zip(src[first..].iter().step_by(self.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters a patch matrix back onto an image.
    fn col2im<T: Element>(&self, cols: &[T], image: &mut [T]) {
        let plane = self.out_plane();
        image.fill(T::zero());
        for c in 0..self.cin {
            let chan = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    let (lo, hi) = self.valid_range(kx, self.w, self.wo);
                    if lo >= hi {
                        continue;
                    }
                    let first = lo * self.stride + kx - self.padding;
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else { continue };
                        let seg = &src[oy * self.wo + lo..oy * self.wo + hi];
                        let dst = &mut chan[iy * self.w + first..(iy + 1) * self.w];
                        for (d, &v) in dst.iter_mut().step_by(self.stride).zip(seg) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Reference convolution by explicit loops. This is the contract the
/// patch-matrix path is tested against.
pub fn conv2d_direct<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), stride, padding)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); g.n * g.cout * g.ho * g.wo];
    for b in 0..g.n {
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            let Some(iy) = g.source(oy, ky, g.h) else { continue };
                            for kx in 0..g.k {
                                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                                let xv = x[((b * g.cin + ci) * g.h + iy) * g.w + ix];
                                let wv = wt[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// Convolution via per-image patch matrices and a GEMM.
pub fn conv2d<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), stride, padding)?;
    let (rows, plane) = (g.patch_rows(), g.out_plane());
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    out.par_chunks_mut(g.cout * plane).zip(input.data().par_chunks(g.cin * g.h * g.w)).for_each_init(
        || vec![T::zero(); rows * plane],
        |cols, (dst, image)| {
            g.im2col(image, cols);
            gemm(g.cout, rows, plane, weight.data(), false, cols, false, T::zero(), dst);
        },
    );
    Tensor::from_vec(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Element>(
    grad_out: &Tensor<T>,
    input_shape: &Shape,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input_shape, weight.shape(), stride, padding)?;
    check_grad_shape(&g, grad_out)?;
    let (rows, plane) = (g.patch_rows(), g.out_plane());
    let mut grad_in = vec![T::zero(); g.n * g.cin * g.h * g.w];
    grad_in.par_chunks_mut(g.cin * g.h * g.w).zip(grad_out.data().par_chunks(g.cout * plane)).for_each_init(
        || vec![T::zero(); rows * plane],
        |cols, (dst, gout)| {
            gemm(rows, g.cout, plane, weight.data(), true, gout, false, T::zero(), cols);
            g.col2im(cols, dst);
        },
    );
    Ok(Tensor::from_parts(input_shape.clone(), grad_in))
}

/// Gradient of [`conv2d`] with respect to its weight. Images are reduced in
/// index order so the result does not depend on the thread count.
pub fn conv2d_backward_weight<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: &Shape,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), weight_shape, stride, padding)?;
    check_grad_shape(&g, grad_out)?;
    let (rows, plane) = (g.patch_rows(), g.out_plane());
    // Accumulate the transpose `[rows, cout]`: the tall-skinny product is
    // markedly faster than `[cout, rows]` for narrow layers.
    let mut grad_wt = vec![T::zero(); rows * g.cout];
    let mut cols = vec![T::zero(); rows * plane];
    for (image, gout) in input.data().chunks_exact(g.cin * g.h * g.w).zip(grad_out.data().chunks_exact(g.cout * plane))
    {
        g.im2col(image, &mut cols);
        gemm(rows, plane, g.cout, &cols, false, gout, true, T::one(), &mut grad_wt);
    }
    let mut grad_w = vec![T::zero(); g.cout * rows];
    for (r, row) in grad_wt.chunks_exact(g.cout).enumerate() {
        for (co, &v) in row.iter().enumerate() {
            grad_w[co * rows + r] = v;
        }
    }
    Ok(Tensor::from_parts(weight_shape.clone(), grad_w))
}

fn check_grad_shape<T: Element>(g: &Geometry, grad_out: &Tensor<T>) -> Result<()> {
    let expected = Shape::new(vec![g.n, g.cout, g.ho, g.wo])?;
    if grad_out.shape() != &expected {
        return Err(Error::ShapeMismatch { op: "conv2d backward", left: grad_out.shape().clone(), right: expected });
    }
    Ok(())
}
