//! Mask images and the FLOPs/mIoU scatter plot.

use image::{GrayImage, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// 8-bit grayscale image of values in `[0, 1]`, each cell drawn as a `scale x scale` square.
pub fn mask_image(values: &Array2<f64>, scale: u32) -> GrayImage {
    let (h, w) = values.dim();
    let scale = scale.max(1);
    GrayImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let v = values[[(y / scale) as usize, (x / scale) as usize]];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Predicted mask on the left, target on the right, separated by a mid-gray bar.
pub fn side_by_side(left: &Array2<f64>, right: &Array2<f64>, scale: u32) -> GrayImage {
    const GAP: u32 = 4;
    let a = mask_image(left, scale);
    let b = mask_image(right, scale);
    let mut out = GrayImage::from_pixel(a.width() + GAP + b.width(), a.height().max(b.height()), Luma([128]));
    image::imageops::replace(&mut out, &a, 0, 0);
    image::imageops::replace(&mut out, &b, (a.width() + GAP) as i64, 0);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub label: String,
    pub flops_ratio: f64,
    pub miou: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG scatter of mIoU against relative FLOPs, one labelled circle per point.
pub fn scatter_svg(points: &[ScatterPoint]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 56.0;
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.flops_ratio);
        x1 = x1.max(p.flops_ratio);
        y0 = y0.min(p.miou);
        y1 = y1.max(p.miou);
    }
    if points.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).max(0.02);
        (lo - 0.1 * span, hi + 0.1 * span)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += &format!(
        "<line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = H - M,
        r = W - M
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{fx:.2}</text>\n",
            sx(fx),
            H - M + 16.0
        );
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{fy:.3}</text>\n",
            M - 6.0,
            sy(fy) + 4.0
        );
    }
    svg += &format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">FLOPs relative to full network</text>\n",
        W / 2.0,
        H - 12.0
    );
    svg += &format!(
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">mIoU</text>\n",
        H / 2.0,
        H / 2.0
    );
    for p in points {
        let (cx, cy) = (sx(p.flops_ratio), sy(p.miou));
        svg += &format!("<circle class=\"point\" cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"4\" fill=\"steelblue\"/>\n");
        svg += &format!(
            "<text class=\"label\" x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            cx + 6.0,
            cy - 6.0,
            escape(&p.label)
        );
    }
    svg += "</svg>\n";
    svg
}
