//! Polygon helpers: point-in-polygon tests and mask rasterization.

use crate::boxes::Box4;

pub type Point = (f64, f64);

/// Even-odd ray casting.
pub fn point_in_polygon(px: f64, py: f64, poly: &[Point]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

pub fn polygon_aabb(poly: &[Point]) -> Box4 {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &(x, y) in poly {
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    b
}

/// Rasterize a polygon into a `side x side` binary mask covering `frame`;
/// cell (i, j) samples the polygon at its center.
pub fn rasterize_in_box(poly: &[Point], frame: Box4, side: usize) -> Vec<f64> {
    let mut mask = vec![0.0; side * side];
    let (w, h) = ((frame[2] - frame[0]).max(1e-9), (frame[3] - frame[1]).max(1e-9));
    for i in 0..side {
        let py = frame[1] + (i as f64 + 0.5) / side as f64 * h;
        for j in 0..side {
            let px = frame[0] + (j as f64 + 0.5) / side as f64 * w;
            if point_in_polygon(px, py, poly) {
                mask[i * side + j] = 1.0;
            }
        }
    }
    mask
}

/// Rasterize a polygon on the full image pixel grid.
pub fn rasterize_on_image(poly: &[Point], img_w: usize, img_h: usize) -> Vec<bool> {
    let mut mask = vec![false; img_w * img_h];
    let bb = polygon_aabb(poly);
    let x0 = (bb[0].floor().max(0.0)) as usize;
    let y0 = (bb[1].floor().max(0.0)) as usize;
    let x1 = (bb[2].ceil().min(img_w as f64)) as usize;
    let y1 = (bb[3].ceil().min(img_h as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, poly) {
                mask[y * img_w + x] = true;
            }
        }
    }
    mask
}
