use std::collections::{BTreeSet, VecDeque};

use super::SegmentationMap;

/// Labels 4-connected components of equal raw label, numbered in scan order
/// of each component's first pixel.
pub fn relabel_components(labels: &[u32], height: usize, width: usize) -> Vec<u32> {
    const UNSEEN: u32 = u32::MAX;
    let mut comp = vec![UNSEEN; labels.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if comp[start] != UNSEEN {
            continue;
        }
        let raw = labels[start];
        comp[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for q in neighbors(p, height, width) {
                if comp[q] == UNSEEN && labels[q] == raw {
                    comp[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    comp
}

fn neighbors(p: usize, height: usize, width: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (p / width, p % width);
    let up = (r > 0).then(|| p - width);
    let down = (r + 1 < height).then(|| p + width);
    let left = (c > 0).then(|| p - 1);
    let right = (c + 1 < width).then(|| p + 1);
    [up, left, right, down].into_iter().flatten()
}

/// Connected regions with union-find merging. Merging two adjacent connected
/// regions always yields a connected region.
struct Regions {
    comp: Vec<u32>,
    parent: Vec<usize>,
    size: Vec<usize>,
    adjacent: Vec<BTreeSet<usize>>,
}

impl Regions {
    fn build(labels: &[u32], height: usize, width: usize) -> Self {
        let comp = relabel_components(labels, height, width);
        let n = comp.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut size = vec![0usize; n];
        let mut adjacent = vec![BTreeSet::new(); n];
        for p in 0..comp.len() {
            let a = comp[p] as usize;
            size[a] += 1;
            for q in neighbors(p, height, width) {
                let b = comp[q] as usize;
                if a != b {
                    adjacent[a].insert(b);
                }
            }
        }
        Self {
            comp,
            parent: (0..n).collect(),
            size,
            adjacent,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn live_roots(&mut self) -> Vec<usize> {
        (0..self.parent.len()).filter(|&i| self.find(i) == i).collect()
    }

    /// Largest adjacent region; ties go to the lowest id.
    fn largest_neighbor(&mut self, root: usize) -> Option<usize> {
        let adj: Vec<usize> = self.adjacent[root].iter().copied().collect();
        let mut best: Option<usize> = None;
        for a in adj {
            let r = self.find(a);
            if r == root {
                continue;
            }
            best = match best {
                Some(b) if self.size[b] > self.size[r] || (self.size[b] == self.size[r] && b < r) => Some(b),
                _ => Some(r),
            };
        }
        best
    }

    fn merge_into(&mut self, small: usize, big: usize) {
        self.parent[small] = big;
        self.size[big] += self.size[small];
        let moved = std::mem::take(&mut self.adjacent[small]);
        self.adjacent[big].extend(moved);
        self.adjacent[big].remove(&big);
        self.adjacent[big].remove(&small);
    }

    fn finish(mut self, height: usize, width: usize) -> SegmentationMap {
        let mut dense = vec![u32::MAX; self.parent.len()];
        let mut next = 0u32;
        let comp = std::mem::take(&mut self.comp);
        let labels = comp
            .iter()
            .map(|&c| {
                let r = self.find(c as usize);
                if dense[r] == u32::MAX {
                    dense[r] = next;
                    next += 1;
                }
                dense[r]
            })
            .collect();
        SegmentationMap::new(height, width, labels, next as usize)
            .expect("merged regions form a partition")
    }
}

/// Splits every label into its 4-connected components, then absorbs components
/// smaller than `min_size` into their largest adjacent component. The result is
/// relabeled densely from 0 in scan order.
pub fn enforce_connectivity(raw_labels: &[u32], height: usize, width: usize, min_size: usize) -> SegmentationMap {
    assert_eq!(raw_labels.len(), height * width, "label count must match dims");
    let mut regions = Regions::build(raw_labels, height, width);
    loop {
        let mut changed = false;
        for root in regions.live_roots() {
            if regions.find(root) != root || regions.size[root] >= min_size {
                continue;
            }
            if let Some(big) = regions.largest_neighbor(root) {
                regions.merge_into(root, big);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    regions.finish(height, width)
}

/// Repeatedly merges the smallest segment into its largest neighbour until at
/// most `max_segments` remain. Segments stay 4-connected.
pub fn merge_down_to(seg: &SegmentationMap, max_segments: usize) -> SegmentationMap {
    let max_segments = max_segments.max(1);
    if seg.num_segments() <= max_segments {
        return seg.clone();
    }
    let mut regions = Regions::build(seg.labels(), seg.height(), seg.width());
    loop {
        let roots = regions.live_roots();
        if roots.len() <= max_segments {
            break;
        }
        let smallest = *roots
            .iter()
            .min_by_key(|&&r| (regions.size[r], r))
            .expect("nonempty");
        match regions.largest_neighbor(smallest) {
            Some(big) => regions.merge_into(smallest, big),
            None => break,
        }
    }
    regions.finish(seg.height(), seg.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent flood fill: every label's pixel set must be reachable from
    /// its first pixel through same-label 4-neighbours.
    fn flood_fill_connected(seg: &SegmentationMap) -> bool {
        let (h, w) = (seg.height(), seg.width());
        let labels = seg.labels();
        for id in 0..seg.num_segments() as u32 {
            let pixels: Vec<usize> = (0..labels.len()).filter(|&p| labels[p] == id).collect();
            let mut seen = vec![false; labels.len()];
            let mut stack = vec![pixels[0]];
            seen[pixels[0]] = true;
            let mut reached = 0;
            while let Some(p) = stack.pop() {
                reached += 1;
                let (r, c) = (p / w, p % w);
                let mut cand = Vec::new();
                if r > 0 { cand.push(p - w) }
                if r + 1 < h { cand.push(p + w) }
                if c > 0 { cand.push(p - 1) }
                if c + 1 < w { cand.push(p + 1) }
                for q in cand {
                    if !seen[q] && labels[q] == id {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
            if reached != pixels.len() {
                return false;
            }
        }
        true
    }

    #[test]
    fn disjoint_blobs_become_separate_segments() {
        #[rustfmt::skip]
        let raw = [
            0, 0, 1, 1,
            0, 0, 1, 1,
            1, 1, 0, 0,
            1, 1, 0, 0,
        ];
        let seg = enforce_connectivity(&raw, 4, 4, 1);
        assert!(flood_fill_connected(&seg));
        assert_eq!(seg.num_segments(), 4);
    }

    #[test]
    fn connected_input_only_relabels() {
        let raw = [7, 7, 3, 3, 7, 7, 3, 3];
        let seg = enforce_connectivity(&raw, 2, 4, 1);
        assert_eq!(seg.labels(), &[0, 0, 1, 1, 0, 0, 1, 1]);
        let again = enforce_connectivity(seg.labels(), 2, 4, 1);
        assert_eq!(again, seg);
    }

    #[test]
    fn single_pixel_fragment_absorbed_by_largest_neighbour() {
        // Label 1 has an isolated pixel at (1,1) inside label 0's region; with
        // min_size 2 it must join label 0, the largest segment it touches.
        #[rustfmt::skip]
        let raw = [
            0, 0, 0, 2,
            0, 1, 0, 2,
            0, 0, 0, 2,
            1, 1, 1, 2,
        ];
        let seg = enforce_connectivity(&raw, 4, 4, 2);
        #[rustfmt::skip]
        let expected = [
            0, 0, 0, 1,
            0, 0, 0, 1,
            0, 0, 0, 1,
            2, 2, 2, 1,
        ];
        assert_eq!(seg.labels(), &expected);
        assert!(flood_fill_connected(&seg));
    }

    #[test]
    fn merge_down_caps_segment_count() {
        let raw: Vec<u32> = (0..16).collect();
        let seg = enforce_connectivity(&raw, 4, 4, 1);
        assert_eq!(seg.num_segments(), 16);
        let capped = merge_down_to(&seg, 5);
        assert!(capped.num_segments() <= 5);
        assert!(flood_fill_connected(&capped));
    }
}
