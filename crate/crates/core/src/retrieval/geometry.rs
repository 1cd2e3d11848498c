use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};

/// Pixel-space region `[x1, x2) × [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", try_from = "[usize; 4]")]
pub struct BoundingBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BoundingBox {
    /// A non-empty box; bounds against an image are checked by [`BoundingBox::check_within`].
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return domain_err(format!("empty box [{x1},{y1},{x2},{y2}]"));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    pub fn full(width: usize, height: usize) -> Self {
        BoundingBox {
            x1: 0,
            y1: 0,
            x2: width,
            y2: height,
        }
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x2 > width || self.y2 > height {
            return domain_err(format!(
                "box [{},{},{},{}] exceeds image bounds {width}x{height}",
                self.x1, self.y1, self.x2, self.y2
            ));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let iy = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        let inter = (ix * iy) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl TryFrom<[usize; 4]> for BoundingBox {
    type Error = crate::Error;

    fn try_from(a: [usize; 4]) -> Result<Self> {
        BoundingBox::new(a[0], a[1], a[2], a[3])
    }
}

/// Window on a feature map: rows `[row, row + height)`, cols `[col, col + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureBox {
    pub fn check_within(&self, rows: usize, cols: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return domain_err("empty feature window");
        }
        if self.row + self.height > rows || self.col + self.width > cols {
            return domain_err(format!(
                "window rows {}..{} cols {}..{} outside {rows}x{cols} map",
                self.row,
                self.row + self.height,
                self.col,
                self.col + self.width
            ));
        }
        Ok(())
    }
}

/// Feature-map image of a pixel box: floor on the near edge, ceil on the far edge.
pub fn map_box_to_feature(b: &BoundingBox, factor: usize) -> Result<FeatureBox> {
    if factor == 0 {
        return domain_err("downsample factor must be positive");
    }
    if b.x1 >= b.x2 || b.y1 >= b.y2 {
        return domain_err(format!("empty box [{},{},{},{}]", b.x1, b.y1, b.x2, b.y2));
    }
    let (fx1, fy1) = (b.x1 / factor, b.y1 / factor);
    let (fx2, fy2) = (b.x2.div_ceil(factor), b.y2.div_ceil(factor));
    Ok(FeatureBox {
        row: fy1,
        col: fx1,
        height: fy2 - fy1,
        width: fx2 - fx1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fb(b: [usize; 4]) -> [usize; 4] {
        let f = map_box_to_feature(&BoundingBox::try_from(b).unwrap(), 4).unwrap();
        [f.col, f.row, f.col + f.width, f.row + f.height]
    }

    #[test]
    fn box_mapping_examples() {
        assert_eq!(fb([0, 0, 4, 4]), [0, 0, 1, 1]);
        assert_eq!(fb([5, 3, 9, 11]), [1, 0, 3, 3]);
        assert_eq!(fb([0, 0, 64, 64]), [0, 0, 16, 16]);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BoundingBox::new(4, 0, 4, 3).is_err());
        assert!(BoundingBox::new(0, 5, 3, 2).is_err());
        let b = BoundingBox::new(10, 10, 70, 20).unwrap();
        assert!(b.check_within(64, 64).is_err());
        assert!(serde_json::from_str::<BoundingBox>("[3,3,1,5]").is_err());
        let ok: BoundingBox = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(ok.to_array(), [1, 2, 3, 4]);
    }

    #[test]
    fn iou_of_nested_and_disjoint_boxes() {
        let a = BoundingBox::new(0, 0, 10, 10).unwrap();
        let b = BoundingBox::new(0, 0, 5, 10).unwrap();
        let c = BoundingBox::new(20, 20, 30, 30).unwrap();
        assert!((a.iou(&b) - 0.5).abs() < 1e-12);
        assert_eq!(a.iou(&c), 0.0);
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }
}
