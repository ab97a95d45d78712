//! Fixed-grid detections and greedy non-maximum suppression.

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in input pixels, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRect {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BoxRect {
    pub fn area(&self) -> f32 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &BoxRect) -> f32 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Maps grid cells onto fixed boxes: each cell's box is the cell grown by
/// `margin` pixels on every side, clipped to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub image_h: usize,
    pub image_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub margin: f32,
}

impl GridGeometry {
    pub fn cell_size(&self) -> (f32, f32) {
        (self.image_h as f32 / self.grid_h as f32, self.image_w as f32 / self.grid_w as f32)
    }

    pub fn cell_box(&self, row: usize, col: usize) -> BoxRect {
        let (ch, cw) = self.cell_size();
        BoxRect {
            x0: (col as f32 * cw - self.margin).max(0.0),
            y0: (row as f32 * ch - self.margin).max(0.0),
            x1: ((col + 1) as f32 * cw + self.margin).min(self.image_w as f32),
            y1: ((row + 1) as f32 * ch + self.margin).min(self.image_h as f32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub cell: (usize, usize),
    pub class_id: usize,
    pub score: f32,
    pub bbox: BoxRect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsParams {
    pub score_threshold: f32,
    pub iou_threshold: f32,
    /// Class treated as "no object"; cells won by it never yield detections.
    pub background: Option<usize>,
    pub geometry: GridGeometry,
}

fn head_dims(logits: &Tensor) -> Result<(usize, usize, usize)> {
    match logits.shape() {
        &[1, k, gh, gw] => Ok((k, gh, gw)),
        s => Err(shape_err!("expected head logits [1,K,Gh,Gw], got {:?}", s)),
    }
}

/// Softmax over the class axis at one cell.
pub fn cell_probabilities(logits: &Tensor, row: usize, col: usize) -> Result<Vec<f32>> {
    let (k, gh, gw) = head_dims(logits)?;
    if row >= gh || col >= gw {
        return Err(crate::error::Error::Index(alloc::format!(
            "cell ({row}, {col}) outside {gh}x{gw} grid"
        )));
    }
    let z: Vec<f64> = (0..k).map(|c| logits.data()[(c * gh + row) * gw + col] as f64).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| libm::exp(v - max)).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| (v / total) as f32).collect())
}

/// Probability of `class_id` at `cell`.
pub fn class_score(logits: &Tensor, cell: (usize, usize), class_id: usize) -> Result<f32> {
    let probs = cell_probabilities(logits, cell.0, cell.1)?;
    probs
        .get(class_id)
        .copied()
        .ok_or_else(|| crate::error::Error::Index(alloc::format!("class {class_id} out of {}", probs.len())))
}

/// Per-cell argmax detections above the score threshold, greedily suppressed by
/// IoU in descending score order. Returned list is sorted by descending score.
pub fn nms(logits: &Tensor, params: &NmsParams) -> Result<Vec<Detection>> {
    let (_, gh, gw) = head_dims(logits)?;
    let g = &params.geometry;
    if (g.grid_h, g.grid_w) != (gh, gw) {
        return Err(shape_err!("geometry grid {}x{} vs logits grid {}x{}", g.grid_h, g.grid_w, gh, gw));
    }
    let mut candidates = Vec::new();
    for row in 0..gh {
        for col in 0..gw {
            let probs = cell_probabilities(logits, row, col)?;
            // first maximum wins
            let (class_id, &score) = probs
                .iter()
                .enumerate()
                .fold((0, &probs[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            if Some(class_id) == params.background || score <= params.score_threshold {
                continue;
            }
            candidates.push(Detection { cell: (row, col), class_id, score, bbox: g.cell_box(row, col) });
        }
    }
    // stable: equal scores keep row-major order
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for cand in candidates {
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) <= params.iou_threshold) {
            kept.push(cand);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn params(gh: usize, gw: usize, h: usize, w: usize, margin: f32) -> NmsParams {
        NmsParams {
            score_threshold: 0.5,
            iou_threshold: 0.5,
            background: None,
            geometry: GridGeometry { image_h: h, image_w: w, grid_h: gh, grid_w: gw, margin },
        }
    }

    #[test]
    fn uniform_logits_give_nothing() {
        let logits = Tensor::full(&[1, 3, 2, 2], 0.7);
        assert!(nms(&logits, &params(2, 2, 8, 8, 0.0)).unwrap().is_empty());
    }

    #[test]
    fn saturated_cell_is_detected() {
        let mut logits = Tensor::full(&[1, 2, 2, 2], -10.0);
        // class 1 at cell (1, 0)
        logits.data_mut()[(2 + 1) * 2] = 10.0;
        let dets = nms(&logits, &params(2, 2, 8, 8, 0.0)).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
        assert_eq!(dets[0].cell, (1, 0));
        assert!(dets[0].score > 0.999_999);
    }

    #[test]
    fn overlapping_neighbour_is_suppressed() {
        // two 4x4 cells side by side, boxes grown by 2.4 px: clipped boxes
        // [0, 6.4] and [1.6, 8] over the full height -> IoU = 4.8 / 8 = 0.6
        let p = params(1, 2, 4, 8, 2.4);
        let a = p.geometry.cell_box(0, 0);
        let b = p.geometry.cell_box(0, 1);
        assert!((a.iou(&b) - 0.6).abs() < 1e-6);

        // logits with softmax scores 0.9 and 0.8 for class 1
        let l9 = libm::logf(0.9 / 0.1);
        let l8 = libm::logf(0.8 / 0.2);
        let logits = Tensor::new(vec![1, 2, 1, 2], vec![0.0, 0.0, l9, l8]).unwrap();
        let dets = nms(&logits, &p).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.9).abs() < 1e-6);
        assert_eq!(dets[0].cell, (0, 0));
    }

    #[test]
    fn background_cells_are_skipped() {
        let logits = Tensor::new(vec![1, 2, 1, 1], vec![5.0, 0.0]).unwrap();
        let mut p = params(1, 1, 8, 8, 0.0);
        assert_eq!(nms(&logits, &p).unwrap().len(), 1);
        p.background = Some(0);
        assert!(nms(&logits, &p).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn kept_boxes_form_an_antichain(values in proptest::collection::vec(-3.0f32..3.0, 3 * 4 * 4), margin in 0.0f32..6.0) {
            let logits = Tensor::new(vec![1, 3, 4, 4], values).unwrap();
            let mut p = params(4, 4, 16, 16, margin);
            p.score_threshold = 0.34;
            let dets = nms(&logits, &p).unwrap();
            for (i, a) in dets.iter().enumerate() {
                for b in &dets[i + 1..] {
                    prop_assert!(a.bbox.iou(&b.bbox) <= p.iou_threshold);
                    prop_assert!(a.score >= b.score);
                }
            }
        }
    }
}
