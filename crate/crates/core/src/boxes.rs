use serde::{Deserialize, Serialize};

/// Axis-aligned box in image pixels, `(x1, y1)` top-left, `(x2, y2)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Self {
        Self { x1, y1, x2, y2, class_id }
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64, class_id: usize) -> Self {
        Self::new(x, y, x + w, y + h, class_id)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// `(cx, cy)`.
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Mirror horizontally inside an image of width `image_w`.
    pub fn flip_h(&self, image_w: f64) -> BBox {
        BBox::new(image_w - self.x2, self.y1, image_w - self.x1, self.y2, self.class_id)
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s, self.class_id)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy, self.class_id)
    }

    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
            self.class_id,
        )
    }

    /// Ratio of the longer side to the shorter side.
    pub fn aspect(&self) -> f64 {
        let (w, h) = (self.width(), self.height());
        w.max(h) / w.min(h)
    }
}

/// IoU of two boxes; class labels are ignored.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0, 0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0, 0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        let c = BBox::new(5.0, 5.0, 6.0, 6.0, 0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn flip_is_involution() {
        let b = BBox::new(10.0, 0.0, 20.0, 10.0, 1);
        assert_eq!(b.flip_h(100.0), BBox::new(80.0, 0.0, 90.0, 10.0, 1));
        assert_eq!(b.flip_h(100.0).flip_h(100.0), b);
    }
}
