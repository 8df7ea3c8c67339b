//! Sampling `G(n, κ)` and measuring its components.
//!
//! Vertices are laid out in contiguous blocks, one per type. For every
//! unordered pair of blocks the number of edges is drawn as
//! `Binomial(M, min(κ/n, 1))` with `M` the number of vertex pairs in the
//! block pair, and then that many distinct pairs are chosen uniformly. This
//! has exactly the law of independent Bernoulli trials per vertex pair while
//! costing `O(n + m)` for sparse kernels.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branching::{SizeCounts, TailFit, TailMle};
use crate::error::{Error, Result};
use crate::kernel::{Kernel, TypeSpace};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    /// Largest-remainder apportionment of `n μ`.
    #[default]
    Deterministic,
    /// Each vertex draws its type independently from `μ`.
    Iid,
}

/// Types of the `n` vertices, stored as contiguous blocks in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeAssignment {
    pub n: u64,
    pub counts: Vec<u64>,
    pub mode: AssignmentMode,
    offsets: Vec<u64>,
}

impl TypeAssignment {
    pub fn from_counts(counts: Vec<u64>, mode: AssignmentMode) -> Self {
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for c in &counts {
            acc += c;
            offsets.push(acc);
        }
        TypeAssignment {
            n: acc,
            counts,
            mode,
            offsets,
        }
    }

    /// Index of the first vertex of type index `x`.
    pub fn offset(&self, x: usize) -> u64 {
        self.offsets[x]
    }

    /// Type index of vertex `v`.
    pub fn vertex_type(&self, v: u64) -> usize {
        self.offsets.partition_point(|o| *o <= v) - 1
    }
}

pub fn assign_types<R: Rng + ?Sized>(
    space: &TypeSpace,
    n: u64,
    mode: AssignmentMode,
    rng: &mut R,
) -> Result<TypeAssignment> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()));
    }
    let w = space.weights();
    let counts = match mode {
        AssignmentMode::Deterministic => {
            let exact: Vec<f64> = w.iter().map(|m| m * n as f64).collect();
            let mut counts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
            let assigned: u64 = counts.iter().sum();
            let mut order: Vec<usize> = (0..w.len()).collect();
            // Largest remainder first; ties go to the smaller label.
            order.sort_by(|a, b| {
                let ra = exact[*a] - exact[*a].floor();
                let rb = exact[*b] - exact[*b].floor();
                rb.total_cmp(&ra).then(a.cmp(b))
            });
            for x in order.into_iter().take(n.saturating_sub(assigned) as usize) {
                counts[x] += 1;
            }
            counts
        }
        AssignmentMode::Iid => {
            let dist =
                WeightedIndex::new(w).map_err(|e| Error::InvalidSpace(format!("weights: {e}")))?;
            let mut counts = vec![0u64; w.len()];
            for _ in 0..n {
                counts[dist.sample(rng)] += 1;
            }
            counts
        }
    };
    Ok(TypeAssignment::from_counts(counts, mode))
}

/// Checks `count(x)/n - μ(x) ≤ ε e^{q T[1](x)} μ(x)` for every type.
pub fn verify_assumption(assignment: &TypeAssignment, kernel: &Kernel, eps: f64, q: f64) -> bool {
    let n = assignment.n as f64;
    let t1 = kernel.t_one();
    kernel
        .space()
        .weights()
        .iter()
        .zip(&assignment.counts)
        .zip(&t1)
        .all(|((mu, c), t)| *c as f64 / n - mu <= eps * (q * t).exp() * mu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub assignment: TypeAssignment,
    /// Undirected edges `(u, v)` with `u < v`, no duplicates.
    pub edges: Vec<(u32, u32)>,
    pub seed: u64,
}

impl GraphSample {
    pub fn n(&self) -> u64 {
        self.assignment.n
    }

    /// Text dump: a header line `n m`, then one `u v` line per edge.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.n(), self.edges.len())?;
        for (u, v) in &self.edges {
            writeln!(out, "{u} {v}")?;
        }
        Ok(())
    }
}

/// Edge probability `min(κ/n, 1)`.
#[inline]
pub fn edge_probability(kappa: f64, n: u64) -> f64 {
    (kappa / n as f64).min(1.0)
}

/// Number of vertex pairs between blocks `a ≤ b`.
fn pair_count(ca: u64, cb: u64, same: bool) -> Result<u64> {
    let m = if same {
        (ca as u128) * (ca.saturating_sub(1) as u128) / 2
    } else {
        (ca as u128) * (cb as u128)
    };
    u64::try_from(m).map_err(|_| Error::InvalidArgument("pair count overflows u64".into()))
}

/// `E e(G) = Σ_{a ≤ b} M_ab min(κ(a, b)/n, 1)`.
pub fn expected_edge_count(assignment: &TypeAssignment, kernel: &Kernel) -> Result<f64> {
    let d = kernel.dim();
    let mut total = 0.0;
    for a in 0..d {
        for b in a..d {
            let m = pair_count(assignment.counts[a], assignment.counts[b], a == b)?;
            total += m as f64 * edge_probability(kernel.entry(a, b), assignment.n);
        }
    }
    Ok(total)
}

/// Inverse of `(i, j) ↦ j(j-1)/2 + i` for `i < j`.
#[inline]
fn decode_triangular(t: u64) -> (u64, u64) {
    let mut j = ((1.0 + (1.0 + 8.0 * t as f64).sqrt()) / 2.0) as u64;
    while j * (j - 1) / 2 > t {
        j -= 1;
    }
    while (j + 1) * j / 2 <= t {
        j += 1;
    }
    (t - j * (j - 1) / 2, j)
}

/// `m` distinct indices from `0..total`, uniformly, in draw order.
fn distinct_indices<R: Rng + ?Sized>(total: u64, m: u64, rng: &mut R) -> Vec<u64> {
    if m == total {
        return (0..total).collect();
    }
    if 2 * m <= total {
        let mut seen = HashSet::with_capacity(m as usize);
        let mut out = Vec::with_capacity(m as usize);
        while (out.len() as u64) < m {
            let t = rng.random_range(0..total);
            if seen.insert(t) {
                out.push(t);
            }
        }
        out
    } else {
        // Dense block: reject the complement instead.
        let mut excluded = HashSet::with_capacity((total - m) as usize);
        while (excluded.len() as u64) < total - m {
            excluded.insert(rng.random_range(0..total));
        }
        (0..total).filter(|t| !excluded.contains(t)).collect()
    }
}

fn sample_block<R: Rng + ?Sized>(
    assignment: &TypeAssignment,
    a: usize,
    b: usize,
    kappa: f64,
    rng: &mut R,
) -> Result<Vec<(u32, u32)>> {
    let (ca, cb) = (assignment.counts[a], assignment.counts[b]);
    let same = a == b;
    let total = pair_count(ca, cb, same)?;
    let p = edge_probability(kappa, assignment.n);
    if total == 0 || p <= 0.0 {
        return Ok(Vec::new());
    }
    let m = if p >= 1.0 {
        total
    } else {
        Binomial::new(total, p)
            .map_err(|e| Error::InvalidArgument(format!("binomial: {e}")))?
            .sample(rng)
    };
    let (oa, ob) = (assignment.offset(a), assignment.offset(b));
    Ok(distinct_indices(total, m, rng)
        .into_iter()
        .map(|t| {
            let (i, j) = if same {
                decode_triangular(t)
            } else {
                (t / cb, t % cb)
            };
            ((oa + i) as u32, (ob + j) as u32)
        })
        .collect())
}

/// Samples `G(n, κ)` for a given type assignment.
///
/// Block `(a, b)` draws from the stream `(seed, a, b)`; blocks run in
/// parallel and are concatenated in `(a, b)` order.
pub fn generate_graph(
    assignment: &TypeAssignment,
    kernel: &Kernel,
    seed: u64,
) -> Result<GraphSample> {
    let d = kernel.dim();
    if assignment.counts.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: assignment.counts.len(),
        });
    }
    if assignment.n > u64::from(u32::MAX) {
        return Err(Error::InvalidArgument(format!(
            "n = {} exceeds the u32 vertex index range",
            assignment.n
        )));
    }
    let blocks: Vec<(usize, usize)> = (0..d).flat_map(|a| (a..d).map(move |b| (a, b))).collect();
    let parts = blocks
        .par_iter()
        .map(|&(a, b)| {
            let mut rng = stream(seed, &[tag::GRAPH, a as u64, b as u64]);
            sample_block(assignment, a, b, kernel.entry(a, b), &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut edges = Vec::with_capacity(parts.iter().map(Vec::len).sum());
    for p in parts {
        edges.extend(p);
    }
    Ok(GraphSample {
        assignment: assignment.clone(),
        edges,
        seed,
    })
}

/// Disjoint sets with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
        true
    }

    /// Size of the set containing `x`.
    pub fn set_size(&mut self, x: u32) -> u32 {
        let r = self.find(x);
        self.size[r as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats {
    pub c1: u64,
    pub c2: u64,
    /// Component size → number of components of that size.
    pub histogram: BTreeMap<u64, u64>,
    /// Representative vertex for every vertex.
    pub components: Vec<u32>,
    set_sizes: Vec<u32>,
}

impl ComponentStats {
    /// Size of the component containing `v`.
    pub fn component_size(&self, v: u32) -> u64 {
        u64::from(self.set_sizes[self.components[v as usize] as usize])
    }
}

pub fn largest_component(graph: &GraphSample) -> ComponentStats {
    let n = graph.n() as usize;
    let mut uf = UnionFind::new(n);
    for &(u, v) in &graph.edges {
        uf.union(u, v);
    }
    let components: Vec<u32> = (0..n as u32).map(|v| uf.find(v)).collect();
    let mut histogram = BTreeMap::new();
    let (mut c1, mut c2) = (0u64, 0u64);
    for (v, &root) in components.iter().enumerate() {
        if root == v as u32 {
            let s = u64::from(uf.size[v]);
            *histogram.entry(s).or_insert(0) += 1;
            if s > c1 {
                c2 = c1;
                c1 = s;
            } else if s > c2 {
                c2 = s;
            }
        }
    }
    ComponentStats {
        c1,
        c2,
        histogram,
        components,
        set_sizes: uf.size,
    }
}

/// Compressed adjacency lists.
#[derive(Debug, Clone)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<u32>,
}

impl Adjacency {
    pub fn new(graph: &GraphSample) -> Self {
        let n = graph.n() as usize;
        let mut degree = vec![0usize; n + 1];
        for &(u, v) in &graph.edges {
            degree[u as usize + 1] += 1;
            degree[v as usize + 1] += 1;
        }
        for i in 0..n {
            degree[i + 1] += degree[i];
        }
        let offsets = degree;
        let mut fill = offsets.clone();
        let mut targets = vec![0u32; 2 * graph.edges.len()];
        for &(u, v) in &graph.edges {
            targets[fill[u as usize]] = v;
            fill[u as usize] += 1;
            targets[fill[v as usize]] = u;
            fill[v as usize] += 1;
        }
        Adjacency { offsets, targets }
    }

    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.targets[self.offsets[v as usize]..self.offsets[v as usize + 1]]
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Breadth-first exploration from `root`.
    ///
    /// The root's neighbours are revealed and the root is marked saturated;
    /// then each revealed, unsaturated vertex in turn reveals its neighbours
    /// that have not been used before and is saturated. The saturated
    /// vertices form a spanning tree of the root's component.
    pub fn explore(&self, root: u32) -> Result<ExplorationTrace> {
        if root as usize >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "root {root} out of range for {} vertices",
                self.len()
            )));
        }
        let mut used = vec![false; self.len()];
        let mut queue = VecDeque::new();
        let mut order = Vec::new();
        let mut tree_edges = Vec::new();
        used[root as usize] = true;
        queue.push_back(root);
        while let Some(v) = queue.pop_front() {
            for &w in self.neighbors(v) {
                if !used[w as usize] {
                    used[w as usize] = true;
                    tree_edges.push((v, w));
                    queue.push_back(w);
                }
            }
            order.push(v);
        }
        Ok(ExplorationTrace { order, tree_edges })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplorationTrace {
    /// Vertices in the order they were saturated.
    pub order: Vec<u32>,
    /// `(parent, child)` edges of the exploration tree.
    pub tree_edges: Vec<(u32, u32)>,
}

impl ExplorationTrace {
    pub fn size(&self) -> usize {
        self.order.len()
    }
}

pub fn explore_component(graph: &GraphSample, root: u32) -> Result<ExplorationTrace> {
    Adjacency::new(graph).explore(root)
}

/// Component sizes seen from sampled roots; size-biased by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSpectrum {
    pub histogram: BTreeMap<u64, u64>,
    pub roots: usize,
    pub size_biased: bool,
}

impl SizeSpectrum {
    /// Same regression as [`crate::branching::tail_fit`], applied to root component sizes.
    pub fn tail_fit(&self, window: Option<(u64, u64)>) -> Result<TailFit> {
        self.size_counts().fit(window)
    }
}

impl SizeSpectrum {
    /// Likelihood fit of the tail rate; see [`crate::branching::tail_mle`].
    ///
    /// Root hits inside one component are not independent, so the reported
    /// standard error is optimistic for a single graph.
    pub fn tail_mle(&self, k_min: Option<u64>) -> Result<TailMle> {
        self.size_counts().fit_mle(k_min)
    }

    fn size_counts(&self) -> SizeCounts {
        SizeCounts::from_sizes(
            self.histogram
                .iter()
                .flat_map(|(s, c)| std::iter::repeat_n((*s, false), *c as usize)),
        )
    }
}

pub fn component_size_spectrum(graph: &GraphSample, roots: &[u32]) -> Result<SizeSpectrum> {
    if roots.is_empty() {
        return Err(Error::InvalidArgument("no roots".into()));
    }
    let n = graph.n() as usize;
    if let Some(r) = roots.iter().find(|r| **r as usize >= n) {
        return Err(Error::InvalidArgument(format!("root {r} out of range")));
    }
    let mut uf = UnionFind::new(n);
    for &(u, v) in &graph.edges {
        uf.union(u, v);
    }
    let mut histogram = BTreeMap::new();
    for &r in roots {
        *histogram.entry(u64::from(uf.set_size(r))).or_insert(0) += 1;
    }
    Ok(SizeSpectrum {
        histogram,
        roots: roots.len(),
        size_biased: true,
    })
}

/// `count` roots drawn uniformly with replacement from the stream `(seed, ROOTS)`.
pub fn sample_roots(n: u64, count: usize, seed: u64) -> Vec<u32> {
    let mut rng = stream(seed, &[tag::ROOTS]);
    (0..count).map(|_| rng.random_range(0..n) as u32).collect()
}
