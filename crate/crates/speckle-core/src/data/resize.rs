//! Bilinear image resizing with half-pixel sample centers.
//!
//! Output pixel `(i, j)` samples the source at
//! `((i + 0.5) * H / h - 0.5, (j + 0.5) * W / w - 0.5)`, clamped to the
//! image, and blends the four surrounding pixels. Resizing to the source
//! size reproduces the input exactly.

/// Resizes a row-major `height x width` image to `out_h x out_w`.
pub fn resize_bilinear(
    image: &[f64],
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(image.len(), height * width, "image length mismatch");
    assert!(height > 0 && width > 0 && out_h > 0 && out_w > 0);
    if out_h == height && out_w == width {
        return image.to_vec();
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    let scale_y = height as f64 / out_h as f64;
    let scale_x = width as f64 / out_w as f64;
    for i in 0..out_h {
        let sy = ((i as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let fy = sy - y0 as f64;
        for j in 0..out_w {
            let sx = ((j as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let fx = sx - x0 as f64;
            let top = image[y0 * width + x0] * (1.0 - fx) + image[y0 * width + x1] * fx;
            let bottom = image[y1 * width + x0] * (1.0 - fx) + image[y1 * width + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
