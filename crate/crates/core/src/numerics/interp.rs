use super::tensor::Tensor;
use crate::error::{Error, Result};

fn source_coord(i: usize, out: usize, src: usize) -> f64 {
    if out <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (out - 1) as f64
    }
}

/// Align-corners bilinear resize of an `h×w` map to `out_h×out_w`.
///
/// Corner samples of the input land exactly on the corners of the output.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::Shape(format!(
                "bilinear_upsample expects a 2-D map, got {other:?}"
            )))
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::param("map", "empty input map"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::param(
            "out_dims",
            format!("output dims must be positive, got {out_h}×{out_w}"),
        ));
    }
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = source_coord(oy, out_h, h);
        let y0 = (sy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = source_coord(ox, out_w, w);
            let x0 = (sx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
            let bottom = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
            out.push(top + fy * (bottom - top));
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}
