use serde::{Deserialize, Serialize};

use super::{AutodiffError, Real, Result, Tensor4};

/// Max pooling window. Taps that fall in the padding are skipped rather than
/// read as zero, so padding only extends the output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_begin: usize,
    pub pad_end: usize,
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize) -> Self {
        PoolSpec { window, stride, dilation: 1, pad_begin: 0, pad_end: 0 }
    }

    /// Stride-1 pooling whose taps are `dilation` apart, padded at the end so
    /// the spatial dims are preserved.
    pub fn atrous(window: usize, dilation: usize) -> Self {
        PoolSpec { window, stride: 1, dilation, pad_begin: 0, pad_end: dilation * (window - 1) }
    }

    pub fn out_dim(&self, input: usize) -> Result<usize> {
        let span = self.dilation * (self.window - 1) + 1;
        let padded = input + self.pad_begin + self.pad_end;
        if self.window == 0 || self.stride == 0 || self.dilation == 0 || input == 0 {
            return Err(AutodiffError::ShapeMismatch(format!("invalid pool spec {self:?}")));
        }
        if padded < span {
            return Err(AutodiffError::ShapeMismatch(format!("pool window {self:?} exceeds input {input}")));
        }
        Ok((padded - span) / self.stride + 1)
    }

    #[inline]
    fn tap(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        (o * self.stride + k * self.dilation).checked_sub(self.pad_begin).filter(|&v| v < len)
    }
}

#[derive(Debug, Clone)]
pub struct Pooled<T> {
    pub output: Tensor4<T>,
    /// For each output cell, the flat `(c, h, w)` offset of the winning input
    /// within its batch item.
    pub argmax: Vec<u32>,
}

pub fn maxpool2d_forward<T: Real>(input: &Tensor4<T>, spec: &PoolSpec) -> Result<Pooled<T>> {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (spec.out_dim(h)?, spec.out_dim(w)?);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let mut o = 0;
    for i in 0..n {
        let item = input.item(i);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ki in 0..spec.window {
                        let Some(y) = spec.tap(oy, ki, h) else { continue };
                        for kj in 0..spec.window {
                            let Some(x) = spec.tap(ox, kj, w) else { continue };
                            let idx = (ch * h + y) * w + x;
                            let v = item[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.ok_or_else(|| {
                        AutodiffError::EmptyOutput(format!("pool window {spec:?} has no taps inside the input"))
                    })?;
                    out.data_mut()[o] = v;
                    argmax[o] = idx as u32;
                    o += 1;
                }
            }
        }
    }
    Ok(Pooled { output: out, argmax })
}

/// Routes each output gradient to its recorded argmax.
pub fn maxpool2d_backward<T: Real>(grad_out: &Tensor4<T>, argmax: &[u32], input_dims: [usize; 4]) -> Result<Tensor4<T>> {
    if grad_out.len() != argmax.len() || grad_out.batch() != input_dims[0] {
        return Err(AutodiffError::ShapeMismatch(format!(
            "pool grad {:?} does not match the recorded forward pass",
            grad_out.dims()
        )));
    }
    let mut gx = Tensor4::zeros(input_dims);
    let item_in = gx.item_len();
    let item_out = grad_out.item_len();
    for (o, (&g, &a)) in grad_out.data().iter().zip(argmax).enumerate() {
        let n = o / item_out.max(1);
        gx.data_mut()[n * item_in + a as usize] += g;
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;

    #[test]
    fn two_by_two_max() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2d_forward(&x, &PoolSpec::new(2, 2)).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
    }

    #[test]
    fn ties_route_to_first_index() {
        let x = Tensor4::full([1, 1, 2, 2], 5.0f64);
        let p = maxpool2d_forward(&x, &PoolSpec::new(2, 2)).unwrap();
        let g = maxpool2d_backward(&Tensor4::full([1, 1, 1, 1], 1.0), &p.argmax, x.dims()).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn atrous_preserves_dims() {
        for d in [1, 2, 4, 8] {
            let s = PoolSpec::atrous(2, d);
            assert_eq!(s.out_dim(13).unwrap(), 13);
            let x = Tensor4::from_fn([1, 1, 5, 5], |[_, _, h, w]| (h * 5 + w) as f32);
            let p = maxpool2d_forward(&x, &s).unwrap();
            // Values increase along both axes, so the winner is the last tap
            // that fits.
            let expect = |i: usize| if i + d < 5 { i + d } else { i };
            for y in 0..5 {
                for x_ in 0..5 {
                    assert_eq!(p.output.at(0, 0, y, x_), (expect(y) * 5 + expect(x_)) as f32);
                }
            }
        }
    }

    #[test]
    fn matches_naive_loop() {
        let vals = gradcheck::random_vec(2 * 3 * 7 * 6, 3);
        let x = Tensor4::from_vec([2, 3, 7, 6], vals).unwrap();
        let spec = PoolSpec { window: 3, stride: 2, dilation: 1, pad_begin: 1, pad_end: 1 };
        let p = maxpool2d_forward(&x, &spec).unwrap();
        let [_, _, oh, ow] = p.output.dims();
        for n in 0..2 {
            for c in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for y in (oy * 2) as isize - 1..(oy * 2) as isize + 2 {
                            for xx in (ox * 2) as isize - 1..(ox * 2) as isize + 2 {
                                if (0..7).contains(&y) && (0..6).contains(&xx) {
                                    m = m.max(x.at(n, c, y as usize, xx as usize));
                                }
                            }
                        }
                        assert_eq!(p.output.at(n, c, oy, ox), m);
                    }
                }
            }
        }
    }

    #[test]
    fn window_larger_than_input() {
        let x = Tensor4::<f32>::zeros([1, 1, 1, 3]);
        assert!(matches!(maxpool2d_forward(&x, &PoolSpec::new(2, 2)), Err(AutodiffError::ShapeMismatch(_))));
    }
}
