use super::{AutodiffError, Real, Result, Tensor4};
use crate::raster::ClassId;

/// Per-pixel softmax over the channel axis.
pub fn softmax<T: Real>(logits: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = logits.dims();
    let plane = h * w;
    let mut out = logits.clone();
    for i in 0..n {
        let base = i * c * plane;
        let d = out.data_mut();
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(d[base + ch * plane + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (d[base + ch * plane + p] - m).exp();
                d[base + ch * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                d[base + ch * plane + p] = d[base + ch * plane + p] / z;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CrossEntropy<T> {
    /// Mean over the counted pixels.
    pub loss: T,
    pub grad: Tensor4<T>,
    pub counted: usize,
}

/// Mean cross-entropy of `targets` (one class per pixel, NHW order) under
/// the softmax of `logits`. Pixels whose target equals `ignore_class` add
/// neither loss nor gradient. If every pixel is ignored the loss is zero.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor4<T>,
    targets: &[ClassId],
    ignore_class: Option<ClassId>,
) -> Result<CrossEntropy<T>> {
    let [n, c, h, w] = logits.dims();
    let plane = h * w;
    if targets.len() != n * plane {
        return Err(AutodiffError::ShapeMismatch(format!(
            "{} targets for logits {:?}",
            targets.len(),
            logits.dims()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= c && Some(t) != ignore_class) {
        return Err(AutodiffError::TargetOutOfRange { target: t as usize, classes: c });
    }
    let mut grad = softmax(logits);
    let counted = targets.iter().filter(|&&t| Some(t) != ignore_class).count();
    let scale = if counted == 0 { T::zero() } else { T::one() / T::from_f64(counted as f64) };
    let mut total = T::zero();
    let g = grad.data_mut();
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let t = targets[i * plane + p];
            if Some(t) == ignore_class {
                for ch in 0..c {
                    g[base + ch * plane + p] = T::zero();
                }
                continue;
            }
            let k = base + t as usize * plane + p;
            // log-softmax recomputed from the logits keeps small
            // probabilities accurate.
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(logits.data()[base + ch * plane + p]);
            }
            let lse = (0..c).map(|ch| (logits.data()[base + ch * plane + p] - m).exp()).sum::<T>().ln() + m;
            total += lse - logits.data()[k];
            g[k] -= T::one();
            for ch in 0..c {
                g[base + ch * plane + p] *= scale;
            }
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(AutodiffError::NonFinite("cross-entropy loss".into()));
    }
    Ok(CrossEntropy { loss, grad, counted })
}
