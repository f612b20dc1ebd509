use super::boxes::BBox;

/// Dense anchors for one pyramid level, ordered by location (row-major), then
/// size, then ratio.
#[derive(Debug, Clone)]
pub struct LevelAnchors {
    pub stride: usize,
    pub grid: (usize, usize),
    pub per_location: usize,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors, level by level.
    pub fn flat(&self) -> Vec<BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter().copied()).collect()
    }

    /// Index range of each level inside [`Self::flat`].
    pub fn level_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.levels
            .iter()
            .map(|l| {
                let r = start..start + l.boxes.len();
                start = r.end;
                r
            })
            .collect()
    }
}

/// `sizes[i]` lists the anchor side lengths placed on level `strides[i]`.
/// Width/height for ratio `r = h / w` at size `s` are `(s / sqrt(r), s * sqrt(r))`.
pub fn generate_anchors(strides: &[usize], sizes: &[Vec<f64>], ratios: &[f64], image_hw: (usize, usize)) -> AnchorSet {
    assert_eq!(strides.len(), sizes.len(), "one size list per level");
    let levels = strides
        .iter()
        .zip(sizes)
        .map(|(&stride, level_sizes)| {
            let grid = (image_hw.0 / stride, image_hw.1 / stride);
            let mut boxes = Vec::with_capacity(grid.0 * grid.1 * level_sizes.len() * ratios.len());
            for i in 0..grid.0 {
                for j in 0..grid.1 {
                    let cx = (j as f64 + 0.5) * stride as f64;
                    let cy = (i as f64 + 0.5) * stride as f64;
                    for &s in level_sizes {
                        for &r in ratios {
                            let (w, h) = (s / r.sqrt(), s * r.sqrt());
                            boxes.push(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
                        }
                    }
                }
            }
            LevelAnchors { stride, grid, per_location: level_sizes.len() * ratios.len(), boxes }
        })
        .collect();
    AnchorSet { levels }
}

/// Pyramid level exponent for a box:
/// `clamp(floor(k0 + log2(sqrt(w h) / canonical)), kmin, kmax)`.
pub fn assign_level(b: &BBox, k0: i32, canonical: f64, kmin: i32, kmax: i32) -> i32 {
    let scale = b.area().sqrt();
    let k = (k0 as f64 + (scale / canonical + 1e-8).log2()).floor();
    (k as i32).clamp(kmin, kmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_centres() {
        let a = generate_anchors(&[16], &[vec![32.0]], &[0.5, 1.0, 2.0], (128, 128));
        assert_eq!(a.len(), 192);
        let sq = a.levels[0].boxes[1];
        assert_eq!((sq.width(), sq.height()), (32.0, 32.0));
        assert_eq!(sq.center(), (8.0, 8.0));
    }

    #[test]
    fn level_assignment() {
        let b = |s: f64| BBox::new(0.0, 0.0, s, s);
        assert_eq!(assign_level(&b(224.0), 4, 224.0, 2, 5), 4);
        assert_eq!(assign_level(&b(112.0), 4, 224.0, 2, 5), 3);
        assert_eq!(assign_level(&b(1000.0), 4, 224.0, 2, 5), 5);
    }
}
