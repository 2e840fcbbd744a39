//! HDBSCAN over Euclidean feature vectors.
//!
//! Pipeline: core distances → mutual-reachability minimum spanning tree →
//! single-linkage hierarchy → condensed tree → excess-of-mass selection,
//! optionally coarsened by a selection epsilon. Noise is labeled `-1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_samples: usize,
    pub min_cluster_size: usize,
    pub epsilon: f64,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self {
            min_samples: 10,
            min_cluster_size: 10,
            epsilon: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance to the `min_samples`-th nearest neighbour, counting the point itself.
pub fn core_distances(points: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = points.len();
    let k = min_samples.clamp(1, n.max(1)) - 1;
    let mut row = vec![0.0; n];
    points
        .iter()
        .map(|p| {
            for (r, q) in row.iter_mut().zip(points) {
                *r = dist(p, q);
            }
            *row.select_nth_unstable_by(k, f64::total_cmp).1
        })
        .collect()
}

/// Prim's algorithm on the implicit mutual-reachability graph; edges are
/// returned sorted by weight.
pub fn mutual_reachability_mst(points: &[Vec<f64>], min_samples: usize) -> Vec<MstEdge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let core = core_distances(points, min_samples);
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let mr = dist(&points[current], &points[j]).max(core[current]).max(core[j]);
            if mr < best[j] {
                best[j] = mr;
                from[j] = current;
            }
            if best[j] < next_w || next == usize::MAX {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next],
            b: next,
            weight: next_w,
        });
        current = next;
    }
    edges.sort_by(|x, y| x.weight.total_cmp(&y.weight).then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b)));
    edges
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Merge `k` of the single-linkage dendrogram; node ids `< n` are points,
/// merge `k` has node id `n + k`.
#[derive(Debug, Clone, Copy)]
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

fn single_linkage(n: usize, mst: &[MstEdge]) -> Vec<Merge> {
    let mut uf = UnionFind::new(2 * n - 1);
    // node id standing for each union-find root
    let mut node_of: Vec<usize> = (0..2 * n - 1).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for (k, e) in mst.iter().enumerate() {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        let (left, right) = (node_of[ra], node_of[rb]);
        let size = uf.size[ra] + uf.size[rb];
        merges.push(Merge {
            left,
            right,
            distance: e.weight,
            size,
        });
        uf.parent[rb] = ra;
        uf.size[ra] = size;
        node_of[ra] = n + k;
    }
    merges
}

#[derive(Debug, Clone, Copy)]
struct CondensedEdge {
    parent: usize,
    /// Point index when `< n`, else a condensed cluster id.
    child: usize,
    lambda: f64,
    size: usize,
}

fn lambda_of(distance: f64) -> f64 {
    1.0 / distance.max(1e-12)
}

fn condense(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<CondensedEdge> {
    let size_of = |node: usize| if node < n { 1 } else { merges[node - n].size };
    let leaves_under = |node: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.push(merges[x - n].right);
                stack.push(merges[x - n].left);
            }
        }
        out
    };

    let root = 2 * n - 2;
    let mut label = vec![usize::MAX; 2 * n - 1];
    let mut next_label = n + 1;
    label[root] = n;
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = merges[node - n];
        let lambda = lambda_of(m.distance);
        let parent = label[node];
        let (ls, rs) = (size_of(m.left), size_of(m.right));
        match (ls >= min_cluster_size, rs >= min_cluster_size) {
            (true, true) => {
                for (child, sz) in [(m.left, ls), (m.right, rs)] {
                    label[child] = next_label;
                    next_label += 1;
                    out.push(CondensedEdge {
                        parent,
                        child: label[child],
                        lambda,
                        size: sz,
                    });
                    queue.push_back(child);
                }
            }
            (big_left, big_right) => {
                for (child, big) in [(m.left, big_left), (m.right, big_right)] {
                    if big {
                        // the larger side carries the parent cluster on
                        label[child] = parent;
                        queue.push_back(child);
                    } else {
                        for p in leaves_under(child) {
                            out.push(CondensedEdge {
                                parent,
                                child: p,
                                lambda,
                                size: 1,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cluster ids `n..` selected by excess of mass, then coarsened by `epsilon`.
fn select_clusters(n: usize, tree: &[CondensedEdge], epsilon: f64) -> Vec<usize> {
    let root = n;
    let max_id = tree.iter().map(|e| e.parent.max(e.child)).max().unwrap_or(root);
    let count = max_id + 1 - n;
    let mut birth = vec![0.0; count];
    let mut parent_of = vec![usize::MAX; count];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); count];
    for e in tree.iter().filter(|e| e.child >= n) {
        birth[e.child - n] = e.lambda;
        parent_of[e.child - n] = e.parent;
        children[e.parent - n].push(e.child);
    }
    let mut stability = vec![0.0; count];
    for e in tree {
        stability[e.parent - n] += (e.lambda - birth[e.parent - n]) * e.size as f64;
    }

    let mut selected = vec![false; count];
    for c in (n + 1..=max_id).rev() {
        let sub: f64 = children[c - n].iter().map(|k| stability[k - n]).sum();
        if sub > stability[c - n] {
            stability[c - n] = sub;
        } else {
            selected[c - n] = true;
            let mut stack = children[c - n].clone();
            while let Some(k) = stack.pop() {
                selected[k - n] = false;
                stack.extend_from_slice(&children[k - n]);
            }
        }
    }
    let chosen: Vec<usize> = (n + 1..=max_id).filter(|c| selected[c - n]).collect();
    if epsilon <= 0.0 {
        return chosen;
    }

    let mut result = Vec::new();
    let mut absorbed = vec![false; count];
    for &c in &chosen {
        if absorbed[c - n] {
            continue;
        }
        let eps = 1.0 / birth[c - n];
        let mut pick = c;
        if eps < epsilon {
            // climb while the parent also splits below epsilon, never to the root
            loop {
                let p = parent_of[pick - n];
                if p == root {
                    break;
                }
                pick = p;
                if 1.0 / birth[p - n] > epsilon {
                    break;
                }
            }
        }
        if !result.contains(&pick) {
            result.push(pick);
        }
        let mut stack = children[pick - n].clone();
        while let Some(k) = stack.pop() {
            absorbed[k - n] = true;
            stack.extend_from_slice(&children[k - n]);
        }
    }
    result.retain(|c| !absorbed[c - n]);
    result.sort_unstable();
    result
}

/// Clusters `points`; returns one label per point, `-1` for noise.
pub fn hdbscan(points: &[Vec<f64>], params: &HdbscanParams) -> Result<Vec<i32>> {
    let n = points.len();
    let need = params.min_cluster_size.max(2);
    if n < need {
        return Err(Error::TooFewPoints { got: n, need });
    }
    if params.min_samples == 0 || params.epsilon < 0.0 {
        return Err(Error::InvalidConfig(format!("bad clustering parameters {params:?}")));
    }
    if points.iter().any(|p| p.len() != points[0].len() || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("clustering input".into()));
    }
    let mst = mutual_reachability_mst(points, params.min_samples);
    if mst.iter().all(|e| e.weight == 0.0) {
        // the hierarchy never separates anything: one cluster
        return Ok(vec![0; n]);
    }
    let merges = single_linkage(n, &mst);
    let tree = condense(n, &merges, need);
    let chosen = select_clusters(n, &tree, params.epsilon);

    let root = n;
    let mut parent_of_cluster = std::collections::HashMap::new();
    let mut point_parent = vec![root; n];
    for e in &tree {
        if e.child < n {
            point_parent[e.child] = e.parent;
        } else {
            parent_of_cluster.insert(e.child, e.parent);
        }
    }
    let label_of: std::collections::HashMap<usize, i32> =
        chosen.iter().enumerate().map(|(k, c)| (*c, k as i32)).collect();
    Ok(point_parent
        .iter()
        .map(|&start| {
            let mut c = start;
            loop {
                if let Some(l) = label_of.get(&c) {
                    return *l;
                }
                match parent_of_cluster.get(&c) {
                    Some(p) => c = *p,
                    None => return -1,
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    fn blob(rng: &mut ChaCha8Rng, center: &[f64], radius: f64, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| center.iter().map(|c| c + rng.random_range(-radius..radius)).collect())
            .collect()
    }

    /// Full-matrix Kruskal over explicitly enumerated mutual-reachability edges.
    fn kruskal_weight(points: &[Vec<f64>], min_samples: usize) -> f64 {
        let n = points.len();
        let d = |i: usize, j: usize| -> f64 {
            points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let core: Vec<f64> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n).map(|j| d(i, j)).collect();
                row.sort_by(f64::total_cmp);
                row[(min_samples - 1).min(n - 1)]
            })
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((d(i, j).max(core[i]).max(core[j]), i, j));
            }
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut comp: Vec<usize> = (0..n).collect();
        fn root(c: &mut Vec<usize>, mut x: usize) -> usize {
            while c[x] != x {
                x = c[x];
            }
            x
        }
        let mut total = 0.0;
        for (w, i, j) in edges {
            let (a, b) = (root(&mut comp, i), root(&mut comp, j));
            if a != b {
                comp[a] = b;
                total += w;
            }
        }
        total
    }

    #[test]
    fn mst_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(10..=200);
            let dim = rng.random_range(2..6);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let m = rng.random_range(1..8);
            let mst = mutual_reachability_mst(&pts, m);
            assert_eq!(mst.len(), n - 1);
            let w: f64 = mst.iter().map(|e| e.weight).sum();
            assert!((w - kruskal_weight(&pts, m)).abs() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn two_separated_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = blob(&mut rng, &[0.0, 0.0], 0.5, 50);
        pts.extend(blob(&mut rng, &[100.0, 0.0], 0.5, 50));
        let labels = hdbscan(&pts, &HdbscanParams { min_samples: 5, min_cluster_size: 5, epsilon: 0.0 }).unwrap();
        assert!(labels.iter().all(|l| *l >= 0), "noise present");
        let a: HashSet<i32> = labels[..50].iter().copied().collect();
        let b: HashSet<i32> = labels[50..].iter().copied().collect();
        assert_eq!(a.len(), 1);
        assert_eq!(b.len(), 1);
        assert_ne!(a, b);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = vec![vec![0.3, -1.0]; 25];
        let labels = hdbscan(&pts, &HdbscanParams::default()).unwrap();
        assert!(labels.iter().all(|l| *l == 0));
    }

    #[test]
    fn outlier_is_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pts = blob(&mut rng, &[0.0, 0.0], 0.3, 40);
        pts.extend(blob(&mut rng, &[10.0, 10.0], 0.3, 40));
        pts.push(vec![50.0, -50.0]);
        let labels = hdbscan(&pts, &HdbscanParams { min_samples: 5, min_cluster_size: 8, epsilon: 0.0 }).unwrap();
        assert_eq!(labels[80], -1);
        assert_eq!(labels.iter().filter(|l| **l >= 0).collect::<HashSet<_>>().len(), 2);
    }

    #[test]
    fn epsilon_merges_close_subclusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = blob(&mut rng, &[0.0, 0.0], 0.05, 30);
        pts.extend(blob(&mut rng, &[0.5, 0.0], 0.05, 30));
        pts.extend(blob(&mut rng, &[20.0, 0.0], 0.05, 30));
        let p = HdbscanParams { min_samples: 4, min_cluster_size: 10, epsilon: 0.0 };
        let fine = hdbscan(&pts, &p).unwrap();
        let k_fine = fine.iter().filter(|l| **l >= 0).collect::<HashSet<_>>().len();
        let coarse = hdbscan(&pts, &HdbscanParams { epsilon: 2.0, ..p }).unwrap();
        let k_coarse = coarse.iter().filter(|l| **l >= 0).collect::<HashSet<_>>().len();
        assert_eq!(k_fine, 3);
        assert_eq!(k_coarse, 2);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![vec![0.0]; 3];
        assert!(matches!(
            hdbscan(&pts, &HdbscanParams { min_samples: 2, min_cluster_size: 5, epsilon: 0.0 }),
            Err(Error::TooFewPoints { got: 3, need: 5 })
        ));
    }

    #[test]
    fn permutation_invariant_up_to_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut pts = blob(&mut rng, &[0.0, 0.0, 0.0], 1.0, 40);
        pts.extend(blob(&mut rng, &[6.0, 0.0, 1.0], 1.0, 40));
        pts.extend(blob(&mut rng, &[0.0, 7.0, -2.0], 0.7, 30));
        let p = HdbscanParams { min_samples: 5, min_cluster_size: 10, epsilon: 0.0 };
        let base = hdbscan(&pts, &p).unwrap();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| pts[i].clone()).collect();
        let other = hdbscan(&shuffled, &p).unwrap();
        let mut map: HashMap<i32, i32> = HashMap::new();
        for (k, &i) in order.iter().enumerate() {
            let e = *map.entry(base[i]).or_insert(other[k]);
            assert_eq!(e, other[k], "inconsistent relabeling");
            assert_eq!(base[i] == -1, other[k] == -1);
        }
    }
}
