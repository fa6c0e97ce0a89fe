//! Convolution kernels: im2col lowering onto GEMM.
//!
//! `conv2d` is cross-correlation (no kernel flip). `conv_transpose2d` is its
//! adjoint with respect to the input, so the forward pass of one is the
//! input-gradient pass of the other.

use super::gemm::{gemm, MatRef};
use super::Element;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((h + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
    pub fn conv_output(&self, extent: usize) -> Option<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return None;
        }
        let padded = extent + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// `(h - 1) * s - 2p + k`, or `None` when that is below 1.
    pub fn transpose_output(&self, extent: usize) -> Option<usize> {
        if self.kernel == 0 || self.stride == 0 || extent == 0 {
            return None;
        }
        let grown = (extent - 1) * self.stride + self.kernel;
        (grown > 2 * self.padding).then(|| grown - 2 * self.padding)
    }
}

/// Dimensions of one lowering: an image of `channels x height x width`
/// scanned into `out_h x out_w` kernel positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lowering {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geo: ConvGeometry,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.geo.kernel * self.geo.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source offset for kernel tap `k` at output coordinate `o`.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.geo.stride + k) as isize - self.geo.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Writes the `[C*k*k, out_h*out_w]` patch matrix of `image`.
pub(crate) fn im2col<T: Element>(image: &[T], l: &Lowering, cols: &mut [T]) {
    let k = l.geo.kernel;
    let hw = l.height * l.width;
    let positions = l.positions();
    debug_assert_eq!(cols.len(), l.rows() * positions);
    for c in 0..l.channels {
        let plane = &image[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..l.out_h {
                    let line = &mut dst[oy * l.out_w..(oy + 1) * l.out_w];
                    match l.source(oy, ki, l.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * l.width..(iy + 1) * l.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match l.source(ox, kj, l.width) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto `image` (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Element>(cols: &[T], l: &Lowering, image: &mut [T]) {
    let k = l.geo.kernel;
    let hw = l.height * l.width;
    let positions = l.positions();
    for c in 0..l.channels {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..l.out_h {
                    let Some(iy) = l.source(oy, ki, l.height) else {
                        continue;
                    };
                    let line = &src[oy * l.out_w..(oy + 1) * l.out_w];
                    let dst = &mut plane[iy * l.width..(iy + 1) * l.width];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = l.source(ox, kj, l.width) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Batch and channel extents shared by the kernels below.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub geo: ConvGeometry,
}

impl ConvDims {
    /// Lowering of the convolution's input image (`conv2d` direction).
    fn conv_lowering(&self) -> Lowering {
        Lowering {
            channels: self.c_in,
            height: self.in_h,
            width: self.in_w,
            out_h: self.out_h,
            out_w: self.out_w,
            geo: self.geo,
        }
    }

    /// Lowering of the transposed convolution's output image.
    fn transpose_lowering(&self) -> Lowering {
        Lowering {
            channels: self.c_out,
            height: self.out_h,
            width: self.out_w,
            out_h: self.in_h,
            out_w: self.in_w,
            geo: self.geo,
        }
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Element>(gout: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *acc = *acc + gout[start..start + plane].iter().copied().sum::<T>();
        }
    }
    db
}

/// Gradients produced by a convolution backward pass.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]` -> `[B, Co, OH, OW]`.
pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let low = d.conv_lowering();
    let rows = low.rows();
    let positions = low.positions();
    let in_plane = d.c_in * d.in_h * d.in_w;
    let out_plane = d.c_out * positions;
    let mut out = vec![T::zero(); d.batch * out_plane];
    let mut cols = vec![T::zero(); rows * positions];
    let wm = MatRef::row_major(w, d.c_out, rows);
    for b in 0..d.batch {
        im2col(&x[b * in_plane..(b + 1) * in_plane], &low, &mut cols);
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        gemm(
            T::one(),
            wm,
            MatRef::row_major(&cols, rows, positions),
            T::zero(),
            dst,
        );
        if let Some(bias) = bias {
            add_bias(dst, bias, positions);
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &ConvDims,
    need: [bool; 3],
) -> ConvGrads<T> {
    let low = d.conv_lowering();
    let rows = low.rows();
    let positions = low.positions();
    let in_plane = d.c_in * d.in_h * d.in_w;
    let out_plane = d.c_out * positions;
    let [need_x, need_w, need_b] = need;

    let mut dx = need_x.then(|| vec![T::zero(); d.batch * in_plane]);
    let mut dw = need_w.then(|| vec![T::zero(); d.c_out * rows]);
    let mut cols = vec![T::zero(); rows * positions];
    let wm = MatRef::row_major(w, d.c_out, rows);
    for b in 0..d.batch {
        let g = MatRef::row_major(&gout[b * out_plane..(b + 1) * out_plane], d.c_out, positions);
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_plane..(b + 1) * in_plane], &low, &mut cols);
            gemm(T::one(), g, MatRef::row_major(&cols, rows, positions).t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), wm.t(), g, T::zero(), &mut cols);
            col2im(&cols, &low, &mut dx[b * in_plane..(b + 1) * in_plane]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: need_b.then(|| bias_grad(gout, d.batch, d.c_out, positions)),
    }
}

/// `x: [B, Ci, H, W]`, `w: [Ci, Co, k, k]` -> `[B, Co, OH, OW]`.
pub(crate) fn conv_transpose2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let low = d.transpose_lowering();
    let rows = low.rows();
    let positions = low.positions();
    let in_plane = d.c_in * positions;
    let out_plane = d.c_out * d.out_h * d.out_w;
    let mut out = vec![T::zero(); d.batch * out_plane];
    let mut cols = vec![T::zero(); rows * positions];
    let wm = MatRef::row_major(w, d.c_in, rows);
    for b in 0..d.batch {
        let xb = MatRef::row_major(&x[b * in_plane..(b + 1) * in_plane], d.c_in, positions);
        gemm(T::one(), wm.t(), xb, T::zero(), &mut cols);
        let dst = &mut out[b * out_plane..(b + 1) * out_plane];
        col2im(&cols, &low, dst);
        if let Some(bias) = bias {
            add_bias(dst, bias, d.out_h * d.out_w);
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    d: &ConvDims,
    need: [bool; 3],
) -> ConvGrads<T> {
    let low = d.transpose_lowering();
    let rows = low.rows();
    let positions = low.positions();
    let in_plane = d.c_in * positions;
    let out_plane = d.c_out * d.out_h * d.out_w;
    let [need_x, need_w, need_b] = need;

    let mut dx = need_x.then(|| vec![T::zero(); d.batch * in_plane]);
    let mut dw = need_w.then(|| vec![T::zero(); d.c_in * rows]);
    let mut gcols = vec![T::zero(); rows * positions];
    let wm = MatRef::row_major(w, d.c_in, rows);
    for b in 0..d.batch {
        im2col(&gout[b * out_plane..(b + 1) * out_plane], &low, &mut gcols);
        let gm = MatRef::row_major(&gcols, rows, positions);
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), wm, gm, T::zero(), &mut dx[b * in_plane..(b + 1) * in_plane]);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = MatRef::row_major(&x[b * in_plane..(b + 1) * in_plane], d.c_in, positions);
            gemm(T::one(), xb, gm.t(), T::one(), dw);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: need_b.then(|| bias_grad(gout, d.batch, d.c_out, d.out_h * d.out_w)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extents() {
        let down = ConvGeometry::new(3, 2, 1);
        assert_eq!(down.conv_output(256), Some(128));
        assert_eq!(down.conv_output(5), Some(3));
        let up = ConvGeometry::new(4, 2, 1);
        assert_eq!(up.transpose_output(4), Some(8));
        assert_eq!(up.transpose_output(128), Some(256));
        let reduce = ConvGeometry::new(4, 1, 0);
        assert_eq!(reduce.conv_output(4), Some(1));
        assert_eq!(reduce.conv_output(3), None);
        assert_eq!(ConvGeometry::new(1, 1, 1).transpose_output(1), None);
    }

    #[test]
    fn direct_convolution_matches_lowering() {
        // brute-force cross-correlation as an independent reference
        let (c_in, c_out, h, w) = (2, 3, 5, 4);
        let geo = ConvGeometry::new(3, 2, 1);
        let (oh, ow) = (geo.conv_output(h).unwrap(), geo.conv_output(w).unwrap());
        let x: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let k: Vec<f64> = (0..c_out * c_in * 9).map(|i| (i as f64 * 0.3).cos()).collect();
        let d = ConvDims {
            batch: 1,
            c_in,
            c_out,
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
            geo,
        };
        let got = conv2d_forward(&x, &k, None, &d);
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[(ci * h + iy as usize) * w + ix as usize]
                                    * k[((co * c_in + ci) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                    let v = got[(co * oh + oy) * ow + ox];
                    assert!((v - acc).abs() < 1e-12, "{v} vs {acc}");
                }
            }
        }
    }
}
