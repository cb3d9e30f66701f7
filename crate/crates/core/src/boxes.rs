//! Axis-aligned box arithmetic shared by the proposal and detection heads.
//!
//! Boxes are `[x1, y1, x2, y2]` in image pixels. Deltas follow the usual
//! parameterisation: center shifts scaled by the source size, log-scale
//! width/height changes clamped to keep `exp` sane.

pub type Box4 = [f64; 4];

const LOG_SCALE_CLAMP: f64 = 4.0;

pub fn area(b: Box4) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn intersection(a: Box4, b: Box4) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

pub fn iou(a: Box4, b: Box4) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn clip(b: Box4, w: f64, h: f64) -> Box4 {
    [
        b[0].clamp(0.0, w),
        b[1].clamp(0.0, h),
        b[2].clamp(0.0, w),
        b[3].clamp(0.0, h),
    ]
}

/// Expand degenerate sides to `min_size`, keeping the center.
pub fn ensure_min_size(b: Box4, min_size: f64) -> Box4 {
    let mut out = b;
    if out[2] - out[0] < min_size {
        let cx = 0.5 * (out[0] + out[2]);
        out[0] = cx - 0.5 * min_size;
        out[2] = cx + 0.5 * min_size;
    }
    if out[3] - out[1] < min_size {
        let cy = 0.5 * (out[1] + out[3]);
        out[1] = cy - 0.5 * min_size;
        out[3] = cy + 0.5 * min_size;
    }
    out
}

/// `(dx, dy, dw, dh)` mapping `src` onto `dst`.
pub fn encode_delta(src: Box4, dst: Box4) -> [f64; 4] {
    let (sw, sh) = ((src[2] - src[0]).max(1e-6), (src[3] - src[1]).max(1e-6));
    let (scx, scy) = (0.5 * (src[0] + src[2]), 0.5 * (src[1] + src[3]));
    let (dw, dh) = ((dst[2] - dst[0]).max(1e-6), (dst[3] - dst[1]).max(1e-6));
    let (dcx, dcy) = (0.5 * (dst[0] + dst[2]), 0.5 * (dst[1] + dst[3]));
    [
        (dcx - scx) / sw,
        (dcy - scy) / sh,
        (dw / sw).ln(),
        (dh / sh).ln(),
    ]
}

/// Apply `(dx, dy, dw, dh)` to `src`.
pub fn decode_delta(src: Box4, d: [f64; 4]) -> Box4 {
    let (sw, sh) = ((src[2] - src[0]).max(1e-6), (src[3] - src[1]).max(1e-6));
    let (scx, scy) = (0.5 * (src[0] + src[2]), 0.5 * (src[1] + src[3]));
    let cx = scx + d[0] * sw;
    let cy = scy + d[1] * sh;
    let w = sw * d[2].clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP).exp();
    let h = sh * d[3].clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

pub fn is_valid(b: Box4) -> bool {
    b[0] < b[2] && b[1] < b[3]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_disjoint_is_zero() {
        assert_eq!(iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
    }

    #[test]
    fn delta_roundtrip() {
        let src = [10.0, 20.0, 30.0, 36.0];
        let dst = [12.0, 18.0, 40.0, 50.0];
        let d = encode_delta(src, dst);
        let back = decode_delta(src, d);
        for i in 0..4 {
            assert!((back[i] - dst[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn log2_delta_doubles_size() {
        let src = [0.0, 0.0, 10.0, 10.0];
        let d = [0.0, 0.0, (2.0f64).ln(), (2.0f64).ln()];
        let out = decode_delta(src, d);
        assert!((out[2] - out[0] - 20.0).abs() < 1e-9);
        assert!((out[3] - out[1] - 20.0).abs() < 1e-9);
    }
}
