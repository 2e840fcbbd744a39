//! Static 3D kd-tree for exact nearest-neighbour queries.

use crate::model::Vec3;

#[derive(Debug, Clone)]
struct Node {
    point: Vec3,
    id: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

/// Points carry caller-chosen ids; equidistant neighbours resolve to the
/// smaller id.
#[derive(Debug, Clone, Default)]
pub struct KdTree {
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(points: impl IntoIterator<Item = (usize, Vec3)>) -> Self {
        let mut items: Vec<(usize, Vec3)> = points.into_iter().collect();
        let mut tree = KdTree {
            nodes: Vec::with_capacity(items.len()),
            root: None,
        };
        tree.root = tree.build_rec(&mut items, 0);
        tree
    }

    fn build_rec(&mut self, items: &mut [(usize, Vec3)], depth: usize) -> Option<usize> {
        if items.is_empty() {
            return None;
        }
        let axis = depth % 3;
        items.sort_by(|a, b| a.1[axis].total_cmp(&b.1[axis]).then(a.0.cmp(&b.0)));
        let mid = items.len() / 2;
        let (id, point) = items[mid];
        let slot = self.nodes.len();
        self.nodes.push(Node {
            point,
            id,
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = items.split_at_mut(mid);
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(&mut rest[1..], depth + 1);
        self.nodes[slot].left = left;
        self.nodes[slot].right = right;
        Some(slot)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `(id, squared distance)` of the nearest point, optionally skipping one id.
    pub fn nearest(&self, query: &Vec3, exclude: Option<usize>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        if let Some(root) = self.root {
            self.search(root, query, exclude, &mut best);
        }
        best
    }

    fn search(&self, at: usize, q: &Vec3, exclude: Option<usize>, best: &mut Option<(usize, f64)>) {
        let node = &self.nodes[at];
        if exclude != Some(node.id) {
            let d2 = (node.point - q).norm_squared();
            let better = match *best {
                None => true,
                Some((bid, bd)) => d2 < bd || (d2 == bd && node.id < bid),
            };
            if better {
                *best = Some((node.id, d2));
            }
        }
        let diff = q[node.axis] - node.point[node.axis];
        let (near, far) = if diff <= 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        if let Some(n) = near {
            self.search(n, q, exclude, best);
        }
        if let Some(f) = far {
            // `<=` keeps equidistant candidates reachable for the id tie-break
            if best.is_none_or(|(_, bd)| diff * diff <= bd) {
                self.search(f, q, exclude, best);
            }
        }
    }
}
