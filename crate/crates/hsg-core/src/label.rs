//! Integer label maps: the carrier for every pixel grouping and ground truth.

/// An `H x W` grid of non-negative region labels.
///
/// Maps produced by clustering, region generation, and refinement use the
/// contiguous range `0..n_labels` with every label present. Warping a map
/// into another view preserves label identity and may therefore leave gaps;
/// `is_contiguous` distinguishes the two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub n_labels: u32,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), height * width);
        let n_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
        LabelMap {
            height,
            width,
            labels,
            n_labels,
        }
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        LabelMap::new(height, width, vec![label; height * width])
    }

    pub fn at(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// True when labels are exactly `0..n_labels` with every value present.
    pub fn is_contiguous(&self) -> bool {
        let mut seen = vec![false; self.n_labels as usize];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        seen.iter().all(|&s| s)
    }

    /// Remap labels to a contiguous range ordered by first occurrence in
    /// row-major order. Returns the map from old label to new label.
    pub fn relabel_contiguous(&mut self) -> Vec<Option<u32>> {
        let mut remap: Vec<Option<u32>> = vec![None; self.n_labels as usize];
        let mut next = 0u32;
        for l in self.labels.iter_mut() {
            let slot = &mut remap[*l as usize];
            if slot.is_none() {
                *slot = Some(next);
                next += 1;
            }
            *l = slot.unwrap();
        }
        self.n_labels = next;
        remap
    }

    /// Pixel count per label id in `0..n_labels`.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_labels as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Connected components under 4-adjacency of equal labels, relabeled by
    /// first row-major occurrence.
    pub fn connected_components(&self) -> LabelMap {
        let (h, w) = (self.height, self.width);
        let mut out = vec![u32::MAX; h * w];
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..h * w {
            if out[start] != u32::MAX {
                continue;
            }
            let target = self.labels[start];
            out[start] = next;
            stack.push(start);
            while let Some(p) = stack.pop() {
                let (r, c) = (p / w, p % w);
                let mut visit = |q: usize| {
                    if out[q] == u32::MAX && self.labels[q] == target {
                        out[q] = next;
                        stack.push(q);
                    }
                };
                if r > 0 {
                    visit(p - w);
                }
                if r + 1 < h {
                    visit(p + w);
                }
                if c > 0 {
                    visit(p - 1);
                }
                if c + 1 < w {
                    visit(p + 1);
                }
            }
            next += 1;
        }
        LabelMap {
            height: h,
            width: w,
            labels: out,
            n_labels: next,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguity_and_relabel() {
        let mut m = LabelMap::new(2, 2, vec![5, 5, 7, 5]);
        assert!(!m.is_contiguous());
        let remap = m.relabel_contiguous();
        assert!(m.is_contiguous());
        assert_eq!(m.labels, vec![0, 0, 1, 0]);
        assert_eq!(remap[5], Some(0));
        assert_eq!(remap[7], Some(1));
        assert_eq!(remap[6], None);
    }

    #[test]
    fn components_split_disconnected_regions() {
        // Same label in two opposite corners, separated by another label.
        let m = LabelMap::new(3, 3, vec![1, 0, 1, 0, 0, 0, 1, 0, 1]);
        let cc = m.connected_components();
        assert_eq!(cc.n_labels, 5);
        assert!(cc.is_contiguous());
        // The cross of zeros is one component.
        assert_eq!(cc.at(0, 1), cc.at(1, 1));
        assert_eq!(cc.at(1, 0), cc.at(1, 2));
        // Corners are distinct components.
        assert_ne!(cc.at(0, 0), cc.at(0, 2));
        assert_ne!(cc.at(0, 0), cc.at(2, 2));
    }
}
