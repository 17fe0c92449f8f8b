use super::ImageOpsError;
use crate::raster::Image;

/// Bilinear sample at a continuous source coordinate, clamped to the pixel grid.
pub fn sample_bilinear(img: &Image, sx: f64, sy: f64) -> [f64; 3] {
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    let sx = sx.clamp(0.0, max_x);
    let sy = sy.clamp(0.0, max_y);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    let (p00, p10, p01, p11) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Round half up, saturating to the 8-bit range.
pub(crate) fn quantize(v: [f64; 3]) -> [u8; 3] {
    v.map(|c| (c + 0.5).floor().clamp(0.0, 255.0) as u8)
}

/// Half-pixel-center bilinear resize: `src = (dst + 0.5) · (in / out) − 0.5`.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image, ImageOpsError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageOpsError::ZeroSize(out_w, out_h));
    }
    let sx_ratio = img.width() as f64 / out_w as f64;
    let sy_ratio = img.height() as f64 / out_h as f64;
    Image::from_fn(out_w, out_h, |x, y| {
        let sx = (x as f64 + 0.5) * sx_ratio - 0.5;
        let sy = (y as f64 + 0.5) * sy_ratio - 0.5;
        quantize(sample_bilinear(img, sx, sy))
    })
    .map_err(|_| ImageOpsError::ZeroSize(out_w, out_h))
}
