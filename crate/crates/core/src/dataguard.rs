//! Data hygiene: cluster-scoped near-duplicate removal over embedding
//! corpora and clique-based memorization detection over generations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ensure_same_len, Error, Result};
use crate::par::{self, Exec};

/// Similarity threshold on pixel values in `[0, 1]`.
pub const DEFAULT_EPSILON: f64 = 0.15;
/// Minimum clique size flagged as memorized.
pub const DEFAULT_CLIQUE: usize = 10;
/// Cluster count used for large corpora.
pub const PAPER_CLUSTERS: usize = 16_000;
/// Tiles per image side (16 tiles per image).
pub const DEFAULT_TILES: usize = 4;

const KMEANS_ITERS: usize = 100;

/// Embedding vectors with stable string ids, stored row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub dim: usize,
    pub ids: Vec<String>,
    pub vectors: Vec<f64>,
}

impl Corpus {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), vectors: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, id: impl Into<String>, v: &[f64]) -> Result<()> {
        let id = id.into();
        if self.is_empty() && self.dim == 0 {
            self.dim = v.len();
        }
        if v.len() != self.dim || self.dim == 0 {
            return Err(Error::contract(format!("`{id}`: expected {} components, got {}", self.dim, v.len())));
        }
        if self.ids.contains(&id) {
            return Err(Error::contract(format!("duplicate id `{id}`")));
        }
        self.ids.push(id);
        self.vectors.extend_from_slice(v);
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Reads `id,v1,...,vd` rows. A first row whose second field is not a
/// number is a header. Errors name the offending line.
pub fn read_corpus_csv<R: Read>(reader: R) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut corpus = Corpus::new(0);
    let mut seen = BTreeSet::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::parse(format!("malformed csv: {e}")))?;
        let line = row.position().map_or(k as u64 + 1, |p| p.line());
        if row.iter().all(str::is_empty) {
            continue;
        }
        let values: std::result::Result<Vec<f64>, _> = row.iter().skip(1).map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if k == 0 => continue,
            Err(e) => return Err(Error::parse(format!("line {line}: {e}"))),
        };
        let id = row.get(0).unwrap_or_default().to_string();
        if values.is_empty() {
            return Err(Error::parse(format!("line {line}: row has no vector components")));
        }
        if corpus.dim != 0 && values.len() != corpus.dim {
            return Err(Error::parse(format!("line {line}: expected {} components, got {}", corpus.dim, values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(format!("line {line}: non-finite component")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::parse(format!("line {line}: duplicate id `{id}`")));
        }
        corpus.dim = values.len();
        corpus.ids.push(id);
        corpus.vectors.extend(values);
    }
    Ok(corpus)
}

/// Seeded k-means (k-means++ seeding, Lloyd iterations). Empty clusters are
/// refilled with the point farthest from its centroid, so every cluster
/// ends non-empty.
pub fn cluster_embeddings(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, d) = (corpus.len(), corpus.dim);
    if k == 0 || k > n {
        return Err(Error::contract(format!("cannot form {k} clusters from {n} vectors")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    centroids.extend_from_slice(corpus.vector(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(corpus.vector(i), &centroids[..d])).collect();
    while centroids.len() < k * d {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            nearest.iter().position(|&w| {
                u -= w;
                u < 0.0
            })
            .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = corpus.vector(pick).to_vec();
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(corpus.vector(i), &c));
        }
        centroids.extend(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let v = corpus.vector(i);
            let best = (0..k)
                .map(|c| (sq_dist(v, &centroids[c * d..(c + 1) * d]), c))
                .min_by(|x, y| x.0.total_cmp(&y.0))
                .map(|x| x.1)
                .expect("k > 0");
            changed |= *a != best;
            *a = best;
        }
        repair_empty(corpus, k, &centroids, &mut assign);
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(corpus.vector(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            for j in 0..d {
                centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(assign)
}

fn repair_empty(corpus: &Corpus, k: usize, centroids: &[f64], assign: &mut [usize]) {
    let d = corpus.dim;
    let mut counts = vec![0usize; k];
    assign.iter().for_each(|&a| counts[a] += 1);
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..assign.len())
            .filter(|&i| counts[assign[i]] > 1)
            .map(|i| (sq_dist(corpus.vector(i), &centroids[assign[i] * d..(assign[i] + 1) * d]), i))
            .max_by(|x, y| x.0.total_cmp(&y.0).then(y.1.cmp(&x.1)))
            .map(|x| x.1)
            .expect("k <= n leaves a cluster with a spare member");
        counts[assign[far]] -= 1;
        assign[far] = c;
        counts[c] = 1;
    }
}

/// Duplicate ids within one cluster. Items are visited in order; an item
/// already marked is skipped, otherwise every other item closer than
/// `thresh` (Euclidean) is marked. The first of each group survives.
pub fn find_cluster_duplicates<S: AsRef<[f64]>>(vecs: &[S], items: &[String], thresh: f64) -> Result<BTreeSet<String>> {
    ensure_same_len("find_cluster_duplicates", vecs.len(), items.len())?;
    let mut dups = BTreeSet::new();
    for (i, qid) in items.iter().enumerate() {
        if dups.contains(qid) {
            continue;
        }
        let q = vecs[i].as_ref();
        for (j, v) in vecs.iter().enumerate() {
            let v = v.as_ref();
            ensure_same_len("find_cluster_duplicates", v.len(), q.len())?;
            if items[j] != *qid && sq_dist(q, v).sqrt() < thresh {
                dups.insert(items[j].clone());
            }
        }
    }
    Ok(dups)
}

/// Clusters the corpus once and returns the duplicate set per threshold.
pub fn deduplicate(corpus: &Corpus, clusters: usize, thresholds: &[f64], seed: u64, exec: Exec) -> Result<Vec<BTreeSet<String>>> {
    if corpus.is_empty() {
        return Ok(vec![BTreeSet::new(); thresholds.len()]);
    }
    let assign = cluster_embeddings(corpus, clusters.min(corpus.len()), seed)?;
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assign.iter().enumerate() {
        members.entry(a).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = members.into_values().collect();
    thresholds
        .iter()
        .map(|&thresh| {
            let per_cluster = par::map(exec, groups.clone(), |g| {
                let vecs: Vec<&[f64]> = g.iter().map(|&i| corpus.vector(i)).collect();
                let items: Vec<String> = g.iter().map(|&i| corpus.ids[i].clone()).collect();
                find_cluster_duplicates(&vecs, &items, thresh)
            });
            let mut all = BTreeSet::new();
            for s in per_cluster {
                all.extend(s?);
            }
            Ok(all)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DedupRow {
    pub threshold: f64,
    pub total: usize,
    pub removed: usize,
    pub fraction: f64,
}

/// Removal counts for a threshold sweep.
pub fn dedup_report(corpus: &Corpus, clusters: usize, thresholds: &[f64], seed: u64, exec: Exec) -> Result<Vec<DedupRow>> {
    let sets = deduplicate(corpus, clusters, thresholds, seed, exec)?;
    Ok(thresholds
        .iter()
        .zip(sets)
        .map(|(&threshold, s)| DedupRow {
            threshold,
            total: corpus.len(),
            removed: s.len(),
            fraction: if corpus.is_empty() { 0.0 } else { s.len() as f64 / corpus.len() as f64 },
        })
        .collect())
}

pub fn dedup_csv(rows: &[DedupRow]) -> String {
    let mut s = String::from("threshold,total,removed,fraction\n");
    for r in rows {
        s += &format!("{},{},{},{:.6}\n", r.threshold, r.total, r.removed, r.fraction);
    }
    s
}

/// An `h x w x c` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c || data.is_empty() {
            return Err(Error::contract(format!("image data has {} values, shape needs {}", data.len(), h * w * c)));
        }
        Ok(Self { h, w, c, data })
    }
}

/// Largest Euclidean distance between corresponding tiles of an
/// `n x n` tiling.
pub fn tiled_distance(a: &Image, b: &Image, tiles_per_side: usize) -> Result<f64> {
    if (a.h, a.w, a.c) != (b.h, b.w, b.c) {
        return Err(Error::contract("tiled_distance: image shapes differ"));
    }
    let n = tiles_per_side;
    if n == 0 || !a.h.is_multiple_of(n) || !a.w.is_multiple_of(n) {
        return Err(Error::contract(format!("{}x{} image does not split into {n}x{n} tiles", a.h, a.w)));
    }
    let (th, tw) = (a.h / n, a.w / n);
    let mut worst = 0.0f64;
    for ty in 0..n {
        for tx in 0..n {
            let mut s = 0.0;
            for y in ty * th..(ty + 1) * th {
                let row = (y * a.w + tx * tw) * a.c;
                let len = tw * a.c;
                s += sq_dist(&a.data[row..row + len], &b.data[row..row + len]);
            }
            worst = worst.max(s.sqrt());
        }
    }
    Ok(worst)
}

/// Undirected similarity graph over the generations for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationGraph {
    pub nodes: Vec<String>,
    /// `adj[i]` lists the neighbours of node `i`, ascending.
    pub adj: Vec<Vec<usize>>,
    pub epsilon: f64,
}

impl GenerationGraph {
    /// Connects every pair with tiled distance below `epsilon`.
    pub fn build(ids: &[String], images: &[Image], epsilon: f64, tiles_per_side: usize, exec: Exec) -> Result<Self> {
        ensure_same_len("generation graph", ids.len(), images.len())?;
        let n = ids.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let dists = par::map(exec, pairs.clone(), |(i, j)| tiled_distance(&images[i], &images[j], tiles_per_side));
        let mut adj = vec![Vec::new(); n];
        for ((i, j), d) in pairs.into_iter().zip(dists) {
            if d? < epsilon {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        Ok(Self { nodes: ids.to_vec(), adj, epsilon })
    }

    pub fn from_edges(nodes: Vec<String>, edges: &[(usize, usize)], epsilon: f64) -> Result<Self> {
        let mut adj = vec![Vec::new(); nodes.len()];
        for &(i, j) in edges {
            if i == j || i >= nodes.len() || j >= nodes.len() {
                return Err(Error::contract(format!("invalid edge ({i}, {j})")));
            }
            if !adj[i].contains(&j) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        Ok(Self { nodes, adj, epsilon })
    }

    fn connected(&self, i: usize, j: usize) -> bool {
        self.adj[i].binary_search(&j).is_ok()
    }

    /// A maximum clique containing `v`; ties go to the lexicographically
    /// smallest index set.
    pub fn largest_clique_containing(&self, v: usize) -> Vec<usize> {
        let mut best = vec![v];
        let mut current = vec![v];
        self.expand(&mut current, self.adj[v].clone(), &mut best);
        best.sort_unstable();
        best
    }

    fn expand(&self, current: &mut Vec<usize>, candidates: Vec<usize>, best: &mut Vec<usize>) {
        if current.len() > best.len() {
            *best = current.clone();
        }
        for (k, &u) in candidates.iter().enumerate() {
            if current.len() + candidates.len() - k <= best.len() {
                return;
            }
            let next: Vec<usize> = candidates[k + 1..].iter().copied().filter(|&w| self.connected(u, w)).collect();
            current.push(u);
            self.expand(current, next, best);
            current.pop();
        }
    }

    /// Nodes lying in a maximum clique of size at least `t` around some node.
    pub fn memorized(&self, t: usize) -> BTreeSet<String> {
        let mut marked = BTreeSet::new();
        for v in 0..self.nodes.len() {
            if self.adj[v].len() + 1 < t {
                continue;
            }
            let clique = self.largest_clique_containing(v);
            if clique.len() >= t {
                marked.extend(clique.into_iter().map(|i| self.nodes[i].clone()));
            }
        }
        marked
    }
}

/// Generations for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGenerations {
    pub prompt: String,
    pub ids: Vec<String>,
    pub images: Vec<Image>,
}

/// Ids of generations that fall in a clique of at least `t` mutually
/// similar images for the same prompt.
pub fn detect_memorization(
    prompts: &[PromptGenerations],
    epsilon: f64,
    t: usize,
    tiles_per_side: usize,
    exec: Exec,
) -> Result<BTreeSet<String>> {
    if !(epsilon > 0.0) {
        return Err(Error::parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if t < 2 {
        return Err(Error::parameter(format!("clique threshold must be at least 2, got {t}")));
    }
    if let Some(p) = prompts.iter().find(|p| p.ids.len() < 2) {
        return Err(Error::contract(format!("prompt `{}` has fewer than two generations", p.prompt)));
    }
    let mut marked = BTreeSet::new();
    for p in prompts {
        let g = GenerationGraph::build(&p.ids, &p.images, epsilon, tiles_per_side, exec)?;
        marked.extend(g.memorized(t));
    }
    Ok(marked)
}

/// Reads `id,prompt,p1,...,pk` rows of square single-channel images.
pub fn read_generations_csv<R: Read>(reader: R) -> Result<Vec<PromptGenerations>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut by_prompt: BTreeMap<String, PromptGenerations> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut side = None;
    for (k, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::parse(format!("malformed csv: {e}")))?;
        let line = row.position().map_or(k as u64 + 1, |p| p.line());
        if row.iter().all(str::is_empty) {
            continue;
        }
        let values: std::result::Result<Vec<f64>, _> = row.iter().skip(2).map(str::parse::<f64>).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if k == 0 => continue,
            Err(e) => return Err(Error::parse(format!("line {line}: {e}"))),
        };
        let s = (values.len() as f64).sqrt().round() as usize;
        if s == 0 || s * s != values.len() {
            return Err(Error::parse(format!("line {line}: {} pixels do not form a square image", values.len())));
        }
        if *side.get_or_insert(s) != s {
            return Err(Error::parse(format!("line {line}: image side {s} differs from earlier rows")));
        }
        let id = row[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::parse(format!("line {line}: duplicate id `{id}`")));
        }
        let prompt = row[1].to_string();
        let e = by_prompt.entry(prompt.clone()).or_insert_with(|| PromptGenerations { prompt, ids: vec![], images: vec![] });
        e.ids.push(id);
        e.images.push(Image::new(s, s, 1, values)?);
    }
    Ok(by_prompt.into_values().collect())
}
