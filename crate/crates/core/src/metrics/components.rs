//! Largest-connected-component post-processing over 26-connected 3-D
//! components, applied independently per foreground class.

use crate::dataio::LabelVolume;

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> DisjointSet {
        DisjointSet {
            parent: (0..n as u32).collect(),
        }
    }

    fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller root so component ids follow scan order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Keep only the largest 26-connected component of every foreground class;
/// removed voxels become background. Size ties keep the component whose
/// first voxel appears earliest in scan order (its root id is smallest).
pub fn largest_cc_3d(labels: &LabelVolume) -> LabelVolume {
    let (w, h, d) = (labels.width, labels.height, labels.depth);
    let n = w * h * d;
    let mut out = labels.clone();
    for class in 1..labels.num_classes as u8 {
        let mask: Vec<bool> = labels.labels.iter().map(|&l| l == class).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let mut ds = DisjointSet::new(n);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if !mask[i] {
                        continue;
                    }
                    // union with already-visited neighbors (lower scan index)
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                if (dz, dy, dx) == (0, 0, 0) {
                                    continue;
                                }
                                let (nx, ny, nz) =
                                    (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                                if nx < 0 || ny < 0 || nz < 0 {
                                    continue;
                                }
                                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                                if nx >= w || ny >= h || nz >= d {
                                    continue;
                                }
                                let j = (nz * h + ny) * w + nx;
                                if j < i && mask[j] {
                                    ds.union(i as u32, j as u32);
                                }
                            }
                        }
                    }
                }
            }
        }
        // component sizes by root
        let mut sizes: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
        for i in 0..n {
            if mask[i] {
                *sizes.entry(ds.find(i as u32)).or_insert(0) += 1;
            }
        }
        // largest size, ties to the smallest root (earliest in scan order)
        let mut best_root = u32::MAX;
        let mut best_size = 0usize;
        let mut roots: Vec<(&u32, &usize)> = sizes.iter().collect();
        roots.sort();
        for (&root, &size) in roots {
            if size > best_size {
                best_size = size;
                best_root = root;
            }
        }
        for i in 0..n {
            if mask[i] && ds.find(i as u32) != best_root {
                out.labels[i] = 0;
            }
        }
    }
    out
}
