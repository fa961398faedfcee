//! Density-based clustering via the HDBSCAN hierarchy.
//!
//! The implementation is exact rather than approximate: core distances from
//! full pairwise scans, a Prim minimum spanning tree over the complete
//! mutual-reachability graph (quadratic time, linear memory), single-linkage
//! hierarchy, condensed tree at the minimum cluster size, and
//! excess-of-mass cluster selection with the root excluded. Points outside
//! every selected cluster are noise (-1). Deterministic for a fixed input
//! order; reorderings change only label names.

use crate::{Error, Result};

/// Distances below this floor are clamped before taking `1/d` as density.
const LAMBDA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct HdbscanResult {
    pub labels: Vec<i64>,
    pub clusters: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Distance to the `min_samples`-th nearest neighbor, self excluded.
fn core_distances(rows: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = rows.len();
    let mut core = vec![0.0; n];
    let mut buf = Vec::with_capacity(n - 1);
    for i in 0..n {
        buf.clear();
        for j in 0..n {
            if j != i {
                buf.push(dist(&rows[i], &rows[j]));
            }
        }
        let k = min_samples.min(buf.len()) - 1;
        buf.select_nth_unstable_by(k, f64::total_cmp);
        core[i] = buf[k];
    }
    core
}

/// Prim MST over mutual-reachability distances, edges sorted ascending.
fn mst_edges(rows: &[Vec<f64>], core: &[f64]) -> Vec<(f64, usize, usize)> {
    let n = rows.len();
    let mut in_tree = vec![false; n];
    let mut best_w = vec![f64::INFINITY; n];
    let mut best_from = vec![0usize; n];
    in_tree[0] = true;
    for j in 1..n {
        best_w[j] = dist(&rows[0], &rows[j]).max(core[0]).max(core[j]);
    }
    let mut edges = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut w = f64::INFINITY;
        for j in 0..n {
            if !in_tree[j] && best_w[j] < w {
                w = best_w[j];
                next = j;
            }
        }
        edges.push((w, best_from[next], next));
        in_tree[next] = true;
        for j in 0..n {
            if !in_tree[j] {
                let mr = dist(&rows[next], &rows[j]).max(core[next]).max(core[j]);
                if mr < best_w[j] {
                    best_w[j] = mr;
                    best_from[j] = next;
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    edges
}

/// Single-linkage hierarchy from sorted MST edges. Node ids `0..n` are the
/// points; id `n + t` is the merge created by edge `t`, with its distance
/// and leaf count.
struct Linkage {
    children: Vec<(usize, usize)>,
    merge_dist: Vec<f64>,
    sizes: Vec<usize>,
}

fn single_linkage(n: usize, edges: &[(f64, usize, usize)]) -> Linkage {
    let mut parent: Vec<usize> = (0..2 * n - 1).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut children = Vec::with_capacity(n - 1);
    let mut merge_dist = Vec::with_capacity(n - 1);
    let mut sizes = Vec::with_capacity(n - 1);
    for (t, &(w, a, b)) in edges.iter().enumerate() {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        let node = n + t;
        parent[ra] = node;
        parent[rb] = node;
        children.push((ra, rb));
        merge_dist.push(w);
        let size_of = |x: usize| if x < n { 1 } else { sizes[x - n] };
        sizes.push(size_of(ra) + size_of(rb));
    }
    Linkage {
        children,
        merge_dist,
        sizes,
    }
}

/// Condensed cluster tree: clusters born at splits where both sides reach
/// the minimum size; smaller fragments fall out of their parent as points.
struct Condensed {
    birth_lambda: Vec<f64>,
    /// Per cluster: `(point, lambda at which it leaves)`.
    point_entries: Vec<Vec<(usize, f64)>>,
    /// Per cluster: `(child cluster, split lambda, child size)`.
    child_links: Vec<Vec<(usize, f64, usize)>>,
}

fn leaves_of(link: &Linkage, n: usize, node: usize, out: &mut Vec<usize>) {
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            let (a, b) = link.children[x - n];
            stack.push(a);
            stack.push(b);
        }
    }
}

fn condense(link: &Linkage, n: usize, mcs: usize) -> Condensed {
    let mut tree = Condensed {
        birth_lambda: vec![0.0],
        point_entries: vec![Vec::new()],
        child_links: vec![Vec::new()],
    };
    let root = n + link.children.len() - 1;
    let mut stack: Vec<(usize, usize, f64)> = vec![(root, 0, 0.0)];
    let mut leaf_buf = Vec::new();
    while let Some((node, cluster, lambda_above)) = stack.pop() {
        if node < n {
            tree.point_entries[cluster].push((node, lambda_above));
            continue;
        }
        let t = node - n;
        let (a, b) = link.children[t];
        let lambda = 1.0 / link.merge_dist[t].max(LAMBDA_FLOOR);
        let size_of = |x: usize| if x < n { 1 } else { link.sizes[x - n] };
        let (sa, sb) = (size_of(a), size_of(b));
        if sa >= mcs && sb >= mcs {
            for &(child, size) in &[(a, sa), (b, sb)] {
                let id = tree.birth_lambda.len();
                tree.birth_lambda.push(lambda);
                tree.point_entries.push(Vec::new());
                tree.child_links.push(Vec::new());
                tree.child_links[cluster].push((id, lambda, size));
                stack.push((child, id, lambda));
            }
        } else if sa >= mcs || sb >= mcs {
            let (keep, drop) = if sa >= mcs { (a, b) } else { (b, a) };
            leaf_buf.clear();
            leaves_of(link, n, drop, &mut leaf_buf);
            for &p in &leaf_buf {
                tree.point_entries[cluster].push((p, lambda));
            }
            stack.push((keep, cluster, lambda));
        } else {
            leaf_buf.clear();
            leaves_of(link, n, node, &mut leaf_buf);
            for &p in &leaf_buf {
                tree.point_entries[cluster].push((p, lambda));
            }
        }
    }
    tree
}

/// HDBSCAN with excess-of-mass cluster selection; the root cluster is never
/// selected, so a dataset forming one blob comes back mostly as one cluster
/// only if an inner split supports it.
pub fn hdbscan(rows: &[Vec<f64>], min_cluster_size: usize, min_samples: usize) -> Result<HdbscanResult> {
    if min_cluster_size < 2 {
        return Err(Error::Config(format!(
            "min_cluster_size {min_cluster_size} must be at least 2"
        )));
    }
    if min_samples < 1 {
        return Err(Error::Config("min_samples must be at least 1".into()));
    }
    let n = rows.len();
    if n == 0 {
        return Ok(HdbscanResult {
            labels: Vec::new(),
            clusters: 0,
        });
    }
    if n <= min_cluster_size {
        return Ok(HdbscanResult {
            labels: vec![-1; n],
            clusters: 0,
        });
    }
    let core = core_distances(rows, min_samples);
    let edges = mst_edges(rows, &core);
    let link = single_linkage(n, &edges);
    let tree = condense(&link, n, min_cluster_size);

    let clusters = tree.birth_lambda.len();
    let mut stability = vec![0.0f64; clusters];
    for c in 0..clusters {
        for &(_, lambda) in &tree.point_entries[c] {
            stability[c] += lambda - tree.birth_lambda[c];
        }
        for &(_, lambda, size) in &tree.child_links[c] {
            stability[c] += (lambda - tree.birth_lambda[c]) * size as f64;
        }
    }

    // Bottom-up excess of mass: clusters are created parent-first, so
    // reverse id order visits children before parents.
    let mut selected = vec![false; clusters];
    let mut best = vec![0.0f64; clusters];
    for c in (0..clusters).rev() {
        if tree.child_links[c].is_empty() {
            selected[c] = c != 0;
            best[c] = stability[c];
        } else {
            let sub: f64 = tree.child_links[c].iter().map(|&(ch, _, _)| best[ch]).sum();
            if c != 0 && stability[c] > sub {
                selected[c] = true;
                best[c] = stability[c];
            } else {
                best[c] = sub;
            }
        }
    }

    // Top-down: the effective selection is the highest selected cluster on
    // each root-to-leaf path.
    let mut effective: Vec<Option<usize>> = vec![None; clusters];
    let mut next_label = 0usize;
    let mut stack = vec![(0usize, None::<usize>)];
    while let Some((c, inherited)) = stack.pop() {
        let label = match inherited {
            Some(l) => Some(l),
            None if selected[c] => {
                let l = next_label;
                next_label += 1;
                Some(l)
            }
            None => None,
        };
        effective[c] = label;
        for &(ch, _, _) in tree.child_links[c].iter().rev() {
            stack.push((ch, label));
        }
    }

    let mut labels = vec![-1i64; n];
    for c in 0..clusters {
        if let Some(l) = effective[c] {
            for &(p, _) in &tree.point_entries[c] {
                labels[p] = l as i64;
            }
        }
    }
    Ok(HdbscanResult {
        labels,
        clusters: next_label,
    })
}
