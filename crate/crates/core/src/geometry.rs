//! Axis-aligned boxes in pixel coordinates, `[x1, y1, x2, y2]`.

pub type BBox = [f64; 4];

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; zero when either box is degenerate.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 || area(a) <= 0.0 || area(b) <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Regression targets of `b` relative to `anchor`: centre offsets scaled by
/// the anchor size and log size ratios.
pub fn encode(b: &BBox, anchor: &BBox) -> [f64; 4] {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (acx, acy) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let (bw, bh) = (b[2] - b[0], b[3] - b[1]);
    let (bcx, bcy) = (b[0] + 0.5 * bw, b[1] + 0.5 * bh);
    [(bcx - acx) / aw, (bcy - acy) / ah, (bw / aw).ln(), (bh / ah).ln()]
}

/// Inverse of [`encode`].
pub fn decode(d: &[f64; 4], anchor: &BBox) -> BBox {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let cx = anchor[0] + 0.5 * aw + d[0] * aw;
    let cy = anchor[1] + 0.5 * ah + d[1] * ah;
    let (w, h) = (aw * d[2].exp(), ah * d[3].exp());
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[10.0, 0.0, 20.0, 10.0]), 0.0);
        assert!((iou(&a, &[5.0, 0.0, 15.0, 10.0]) - 50.0 / 150.0).abs() < 1e-15);
        assert_eq!(iou(&a, &[3.0, 3.0, 3.0, 8.0]), 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let anchor = [8.0, 8.0, 24.0, 24.0];
        let b = [5.0, 11.0, 30.0, 19.5];
        let back = decode(&encode(&b, &anchor), &anchor);
        for i in 0..4 {
            assert!((back[i] - b[i]).abs() < 1e-12);
        }
        assert_eq!(encode(&anchor, &anchor), [0.0; 4]);
    }
}
