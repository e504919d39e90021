use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Source sample positions and weights for one axis, half-pixel centred.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear downsampling of a `[C, R, R]` image to `[C, target, target]`.
///
/// Every output is a convex combination of inputs, so the value range never grows.
pub fn downsample(image: &Tensor, target: usize) -> Result<Tensor> {
    let [c, h, w] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape("downsample", format!("expected [C, H, W], got {s:?}"))),
    };
    if target == 0 {
        return Err(Error::invalid("downsample target must be positive"));
    }
    if target > h || target > w {
        return Err(Error::invalid(format!(
            "downsample target {target} exceeds source {h}x{w}; upsampling is not supported"
        )));
    }
    if target == h && target == w {
        return Ok(image.clone());
    }
    let ys = taps(h, target);
    let xs = taps(w, target);
    let src = image.data();
    let mut out = Vec::with_capacity(c * target * target);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bottom = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    Tensor::new(vec![c, target, target], out)
}

/// Mirrors a `[C, H, W]` image left-to-right.
pub fn horizontal_flip(image: &Tensor) -> Tensor {
    let w = *image.shape().last().expect("image has a width axis");
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}
