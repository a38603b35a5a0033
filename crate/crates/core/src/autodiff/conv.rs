//! Strided, padded, dilated 2-D convolution and its transpose, lowered to
//! GEMM through im2col.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Real, Result, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

/// `floor((i + 2p - d(k-1) - 1) / s) + 1`, or `None` when the dilated kernel
/// does not fit the padded input.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    (stride > 0 && padded >= span).then(|| (padded - span) / stride + 1)
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    /// Padding that keeps spatial dims at stride 1 for an odd kernel.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, kernel)
            .dilation(dilation)
            .padding(dilation * (kernel - 1) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels >= 1
            && self.out_channels >= 1
            && self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
            && self.dilation.0 >= 1
            && self.dilation.1 >= 1;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch(format!("invalid conv spec {self:?}")))
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_out_dim(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let ow = conv_out_dim(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(AutodiffError::EmptyOutput(format!("{self:?} on {h}x{w}"))),
        }
    }

    /// Output dims of the transposed convolution: `(i-1)s - 2p + d(k-1) + 1`.
    pub fn transposed_output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |i: usize, k: usize, s: usize, p: usize, d: usize| {
            ((i - 1) * s + d * (k - 1) + 1).checked_sub(2 * p).filter(|&o| o > 0)
        };
        match (
            f(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0),
            f(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1),
        ) {
            (Some(oh), Some(ow)) if h > 0 && w > 0 => Ok((oh, ow)),
            _ => Err(AutodiffError::EmptyOutput(format!("transposed {self:?} on {h}x{w}"))),
        }
    }

    fn patch_len(&self, channels: usize) -> usize {
        channels * self.kernel.0 * self.kernel.1
    }
}

/// Geometry shared by im2col and col2im: `src` is `(c, h, w)`, the patch
/// grid is `(oh, ow)`.
#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Self {
        Geometry {
            c,
            h,
            w,
            oh,
            ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
            dh: spec.dilation.0,
            dw: spec.dilation.1,
        }
    }

    /// Input column for output column `o` at kernel tap `kj`, if in bounds.
    #[inline]
    fn src_col(&self, o: usize, kj: usize) -> Option<usize> {
        (o * self.sw + kj * self.dw).checked_sub(self.pw).filter(|&x| x < self.w)
    }

    #[inline]
    fn src_row(&self, o: usize, ki: usize) -> Option<usize> {
        (o * self.sh + ki * self.dh).checked_sub(self.ph).filter(|&y| y < self.h)
    }

    /// `cols` is `(c*kh*kw) x (oh*ow)`, row-major.
    fn im2col<T: Real>(&self, src: &[T], cols: &mut [T]) {
        let opix = self.oh * self.ow;
        for c in 0..self.c {
            let plane = &src[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * opix..(row + 1) * opix];
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src_row(oy, ki) {
                            None => out.fill(T::zero()),
                            Some(y) => {
                                let line = &plane[y * self.w..(y + 1) * self.w];
                                for (ox, o) in out.iter_mut().enumerate() {
                                    *o = match self.src_col(ox, kj) {
                                        Some(x) => line[x],
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

    /// Scatter-adds `cols` back into `dst` (adjoint of [`Self::im2col`]).
    fn col2im<T: Real>(&self, cols: &[T], dst: &mut [T]) {
        let opix = self.oh * self.ow;
        for c in 0..self.c {
            let plane = &mut dst[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * opix..(row + 1) * opix];
                    for oy in 0..self.oh {
                        let Some(y) = self.src_row(oy, ki) else { continue };
                        let line = &mut plane[y * self.w..(y + 1) * self.w];
                        for ox in 0..self.ow {
                            if let Some(x) = self.src_col(ox, kj) {
                                line[x] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_weights<T: Real>(weights: &Tensor4<T>, expected: [usize; 4], what: &str) -> Result<()> {
    if weights.dims() != expected {
        return Err(AutodiffError::ShapeMismatch(format!(
            "{what} weights are {:?}, expected {expected:?}",
            weights.dims()
        )));
    }
    Ok(())
}

fn check_bias<T: Real>(bias: Option<&[T]>, n: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != n => Err(AutodiffError::ShapeMismatch(format!(
            "bias has {} entries for {n} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, plane: usize) {
    if let Some(b) = bias {
        for (ch, &bv) in out.chunks_exact_mut(plane).zip(b) {
            for v in ch {
                *v += bv;
            }
        }
    }
}

/// Sums per-item results in batch order so the total does not depend on how
/// rayon scheduled the items.
fn ordered_sum<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Weights are `(out_channels, in_channels, kh, kw)`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    spec.validate()?;
    let [n, c, h, w] = input.dims();
    if c != spec.in_channels {
        return Err(AutodiffError::ShapeMismatch(format!(
            "input has {c} channels, conv expects {}",
            spec.in_channels
        )));
    }
    check_weights(weights, [spec.out_channels, c, spec.kernel.0, spec.kernel.1], "conv")?;
    check_bias(bias, spec.out_channels)?;
    let (oh, ow) = spec.output_dims(h, w)?;
    let g = Geometry::new(spec, c, (h, w), (oh, ow));
    let (k, opix, co) = (spec.patch_len(c), oh * ow, spec.out_channels);

    let mut out = Tensor4::zeros([n, co, oh, ow]);
    out.data_mut().par_chunks_mut(co * opix).enumerate().for_each(|(i, dst)| {
        let mut cols = vec![T::zero(); k * opix];
        g.im2col(input.item(i), &mut cols);
        T::gemm(co, k, opix, T::one(), weights.data(), (k as isize, 1), &cols, (opix as isize, 1), T::zero(), dst, (opix as isize, 1));
        add_bias(dst, bias, opix);
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weights: Tensor4<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor4<T>,
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = spec.output_dims(h, w)?;
    let co = spec.out_channels;
    if grad_out.dims() != [n, co, oh, ow] {
        return Err(AutodiffError::ShapeMismatch(format!(
            "conv grad is {:?}, forward produced {:?}",
            grad_out.dims(),
            [n, co, oh, ow]
        )));
    }
    check_weights(weights, [co, c, spec.kernel.0, spec.kernel.1], "conv")?;
    let g = Geometry::new(spec, c, (h, w), (oh, ow));
    let (k, opix) = (spec.patch_len(c), oh * ow);

    let mut grad_in = Tensor4::zeros([n, c, h, w]);
    let item_in = c * h * w;
    let parts: Vec<(Vec<T>, Vec<T>)> = grad_in
        .data_mut()
        .par_chunks_mut(item_in)
        .enumerate()
        .map(|(i, gx)| {
            let go = grad_out.item(i);
            let mut cols = vec![T::zero(); k * opix];
            g.im2col(input.item(i), &mut cols);
            let mut gw = vec![T::zero(); co * k];
            // gw = go (co x opix) * cols^T (opix x k)
            T::gemm(co, opix, k, T::one(), go, (opix as isize, 1), &cols, (1, opix as isize), T::zero(), &mut gw, (k as isize, 1));
            // gcols = W^T (k x co) * go (co x opix)
            T::gemm(k, co, opix, T::one(), weights.data(), (1, k as isize), go, (opix as isize, 1), T::zero(), &mut cols, (opix as isize, 1));
            g.col2im(&cols, gx);
            let gb = go.chunks_exact(opix).map(|ch| ch.iter().copied().sum()).collect();
            (gw, gb)
        })
        .collect();
    let (gws, gbs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(ConvGrads {
        input: grad_in,
        weights: Tensor4::from_vec(weights.dims(), ordered_sum(gws, co * k))?,
        bias: ordered_sum(gbs, co),
    })
}

/// Transposed convolution. Weights are `(in_channels, out_channels, kh, kw)`;
/// the forward pass is the input-gradient of a convolution with the same
/// kernel, so the two are adjoint.
pub fn transposed_conv2d_forward<T: Real>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    spec.validate()?;
    let [n, ci, h, w] = input.dims();
    if ci != spec.in_channels {
        return Err(AutodiffError::ShapeMismatch(format!(
            "input has {ci} channels, transposed conv expects {}",
            spec.in_channels
        )));
    }
    let co = spec.out_channels;
    check_weights(weights, [ci, co, spec.kernel.0, spec.kernel.1], "transposed conv")?;
    check_bias(bias, co)?;
    let (oh, ow) = spec.transposed_output_dims(h, w)?;
    // The forward conv of the pair maps (co, oh, ow) to (ci, h, w).
    let g = Geometry::new(spec, co, (oh, ow), (h, w));
    let (k, ipix) = (spec.patch_len(co), h * w);

    let mut out = Tensor4::zeros([n, co, oh, ow]);
    out.data_mut().par_chunks_mut(co * oh * ow).enumerate().for_each(|(i, dst)| {
        let mut cols = vec![T::zero(); k * ipix];
        // cols = W^T (k x ci) * x (ci x ipix)
        T::gemm(k, ci, ipix, T::one(), weights.data(), (1, k as isize), input.item(i), (ipix as isize, 1), T::zero(), &mut cols, (ipix as isize, 1));
        g.col2im(&cols, dst);
        add_bias(dst, bias, oh * ow);
    });
    Ok(out)
}

pub fn transposed_conv2d_backward<T: Real>(
    grad_out: &Tensor4<T>,
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let [n, ci, h, w] = input.dims();
    let co = spec.out_channels;
    let (oh, ow) = spec.transposed_output_dims(h, w)?;
    if grad_out.dims() != [n, co, oh, ow] {
        return Err(AutodiffError::ShapeMismatch(format!(
            "transposed conv grad is {:?}, forward produced {:?}",
            grad_out.dims(),
            [n, co, oh, ow]
        )));
    }
    check_weights(weights, [ci, co, spec.kernel.0, spec.kernel.1], "transposed conv")?;
    let g = Geometry::new(spec, co, (oh, ow), (h, w));
    let (k, ipix, opix) = (spec.patch_len(co), h * w, oh * ow);

    let mut grad_in = Tensor4::zeros([n, ci, h, w]);
    let parts: Vec<(Vec<T>, Vec<T>)> = grad_in
        .data_mut()
        .par_chunks_mut(ci * ipix)
        .enumerate()
        .map(|(i, gx)| {
            let go = grad_out.item(i);
            let mut cols = vec![T::zero(); k * ipix];
            g.im2col(go, &mut cols);
            // gx = W (ci x k) * cols (k x ipix)
            T::gemm(ci, k, ipix, T::one(), weights.data(), (k as isize, 1), &cols, (ipix as isize, 1), T::zero(), gx, (ipix as isize, 1));
            // gw = x (ci x ipix) * cols^T (ipix x k)
            let mut gw = vec![T::zero(); ci * k];
            T::gemm(ci, ipix, k, T::one(), input.item(i), (ipix as isize, 1), &cols, (1, ipix as isize), T::zero(), &mut gw, (k as isize, 1));
            let gb = go.chunks_exact(opix).map(|ch| ch.iter().copied().sum()).collect();
            (gw, gb)
        })
        .collect();
    let (gws, gbs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(ConvGrads {
        input: grad_in,
        weights: Tensor4::from_vec(weights.dims(), ordered_sum(gws, ci * k))?,
        bias: ordered_sum(gbs, co),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use proptest::prelude::*;

    /// Direct-sum convolution used as the reference.
    fn naive(x: &Tensor4<f64>, wt: &Tensor4<f64>, b: &[f64], s: &ConvSpec) -> Tensor4<f64> {
        let [n, c, h, w] = x.dims();
        let (oh, ow) = s.output_dims(h, w).unwrap();
        Tensor4::from_fn([n, s.out_channels, oh, ow], |[i, o, y, xx]| {
            let mut acc = b[o];
            for ch in 0..c {
                for ki in 0..s.kernel.0 {
                    for kj in 0..s.kernel.1 {
                        let iy = (y * s.stride.0 + ki * s.dilation.0) as isize - s.padding.0 as isize;
                        let ix = (xx * s.stride.1 + kj * s.dilation.1) as isize - s.padding.1 as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x.at(i, ch, iy as usize, ix as usize) * wt.at(o, ch, ki, kj);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn hand_example() {
        let x = Tensor4::from_vec([1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let k = Tensor4::full([1, 1, 2, 2], 1.0);
        let y = conv2d_forward(&x, &k, Some(&[0.0]), &ConvSpec::new(1, 1, 2)).unwrap();
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor4::from_fn([2, 1, 4, 5], |[n, _, h, w]| (n * 20 + h * 5 + w) as f32);
        let k = Tensor4::full([1, 1, 1, 1], 1.0);
        assert_eq!(conv2d_forward(&x, &k, Some(&[0.0]), &ConvSpec::new(1, 1, 1)).unwrap(), x);
    }

    #[test]
    fn matches_naive_with_stride_pad_dilation() {
        let spec = ConvSpec { in_channels: 3, out_channels: 2, kernel: (3, 2), stride: (2, 1), padding: (2, 1), dilation: (2, 3) };
        let x = Tensor4::from_fn([2, 3, 7, 8], |[n, c, h, w]| ((n * 7 + c * 5 + h * 3 + w) % 11) as f64 - 5.0);
        let wt = Tensor4::from_fn([2, 3, 3, 2], |[o, c, i, j]| ((o * 3 + c * 2 + i + j) % 7) as f64 * 0.5 - 1.0);
        let b = [0.25, -1.0];
        let fast = conv2d_forward(&x, &wt, Some(&b), &spec).unwrap();
        let slow = naive(&x, &wt, &b, &spec);
        assert_eq!(fast.dims(), slow.dims());
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_gives_zero_grads() {
        let spec = ConvSpec::same(2, 3, 3, 2);
        let x = Tensor4::from_fn([1, 2, 5, 5], |[_, c, h, w]| (c + h * w) as f64);
        let wt = Tensor4::full([3, 2, 3, 3], 0.3);
        let g = conv2d_backward(&Tensor4::zeros([1, 3, 5, 5]), &x, &wt, &spec).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(&g.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_stamp() {
        let x = Tensor4::full([1, 1, 1, 1], 1.0f64);
        let k = Tensor4::full([1, 1, 2, 2], 1.0);
        let y = transposed_conv2d_forward(&x, &k, None, &ConvSpec::new(1, 1, 2).stride(2)).unwrap();
        assert_eq!(y.dims(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn same_padding_preserves_dims() {
        for d in [1, 2, 4] {
            let s = ConvSpec::same(1, 1, 3, d);
            assert_eq!(s.output_dims(17, 9).unwrap(), (17, 9));
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor4::zeros([1, 2, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, None, &ConvSpec::new(3, 1, 3)), Err(AutodiffError::ShapeMismatch(_))));
        assert!(matches!(
            conv2d_forward(&x, &Tensor4::zeros([1, 2, 5, 5]), None, &ConvSpec::new(2, 1, 5)),
            Err(AutodiffError::EmptyOutput(_))
        ));
        assert!(conv2d_forward(&x, &w, Some(&[0.0, 0.0]), &ConvSpec::new(2, 1, 3)).is_err());
    }

    fn rand_t(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
        Tensor4::from_vec(dims, gradcheck::random_vec(dims.iter().product(), seed)).unwrap()
    }

    fn conv_grad_check(spec: ConvSpec, x_dims: [usize; 4], transposed: bool) {
        let w_dims = if transposed {
            [spec.in_channels, spec.out_channels, spec.kernel.0, spec.kernel.1]
        } else {
            [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1]
        };
        let x = rand_t(x_dims, 1);
        let w = rand_t(w_dims, 2);
        let b = gradcheck::random_vec(spec.out_channels, 3);
        let fwd = |x: &Tensor4<f64>, w: &Tensor4<f64>, b: &[f64]| {
            if transposed {
                transposed_conv2d_forward(x, w, Some(b), &spec).unwrap()
            } else {
                conv2d_forward(x, w, Some(b), &spec).unwrap()
            }
        };
        let y = fwd(&x, &w, &b);
        let proj = rand_t(y.dims(), 4);
        let g = if transposed {
            transposed_conv2d_backward(&proj, &x, &w, &spec).unwrap()
        } else {
            conv2d_backward(&proj, &x, &w, &spec).unwrap()
        };
        let ex = gradcheck::probe(|v| fwd(&Tensor4::from_vec(x_dims, v.to_vec()).unwrap(), &w, &b).dot(&proj), x.data(), g.input.data(), 20, 5);
        let ew = gradcheck::probe(|v| fwd(&x, &Tensor4::from_vec(w_dims, v.to_vec()).unwrap(), &b).dot(&proj), w.data(), g.weights.data(), 20, 6);
        let eb = gradcheck::probe(|v| fwd(&x, &w, v).dot(&proj), &b, &g.bias, 20, 7);
        assert!(ex.max(ew).max(eb) < 1e-4, "{spec:?}: {ex} {ew} {eb}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for d in [1, 2, 4] {
            conv_grad_check(ConvSpec::same(2, 3, 3, d), [2, 2, 9, 9], false);
        }
        let odd = ConvSpec { in_channels: 3, out_channels: 2, kernel: (2, 3), stride: (2, 1), padding: (1, 0), dilation: (1, 2) };
        conv_grad_check(odd, [1, 3, 7, 8], false);
    }

    #[test]
    fn transposed_gradients_match_finite_differences() {
        conv_grad_check(ConvSpec::new(3, 2, 2).stride(2), [2, 3, 4, 4], true);
        conv_grad_check(ConvSpec::new(2, 2, 3).stride(2).padding(1), [1, 2, 3, 5], true);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        for (spec, x_dims) in [
            (ConvSpec::new(2, 3, 2).stride(2), [2, 2, 6, 6]),
            (ConvSpec::new(3, 2, 3).stride(2).padding(1).dilation(2), [1, 3, 9, 7]),
        ] {
            let w = rand_t([spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1], 8);
            let x = rand_t(x_dims, 9);
            let cx = conv2d_forward(&x, &w, None, &spec).unwrap();
            let y = rand_t(cx.dims(), 10);
            // The same kernel viewed as a transposed conv from out to in channels.
            let tspec = ConvSpec { in_channels: spec.out_channels, out_channels: spec.in_channels, ..spec };
            let ty = transposed_conv2d_forward(&y, &w, None, &tspec).unwrap();
            assert_eq!(ty.dims(), x.dims());
            assert!((cx.dot(&y) - x.dot(&ty)).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn output_dims_follow_formula(
            n in 1usize..3, c in 1usize..3, h in 1usize..14, w in 1usize..14,
            k in 1usize..4, s in 1usize..4, p in 0usize..3, di in 0usize..3,
        ) {
            let d = [1, 2, 4][di];
            let spec = ConvSpec::new(c, 2, k).stride(s).padding(p).dilation(d);
            let x = Tensor4::<f32>::zeros([n, c, h, w]);
            let wt = Tensor4::zeros([2, c, k, k]);
            let span = d * (k - 1) + 1;
            match conv2d_forward(&x, &wt, None, &spec) {
                Ok(y) => {
                    prop_assert_eq!(y.dims(), [n, 2, (h + 2 * p - span) / s + 1, (w + 2 * p - span) / s + 1]);
                }
                Err(e) => {
                    prop_assert!(h + 2 * p < span || w + 2 * p < span);
                    prop_assert!(matches!(e, AutodiffError::EmptyOutput(_)));
                }
            }
        }
    }
}
