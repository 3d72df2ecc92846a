//! Ratings-to-bandit pipeline.
//!
//! A sparse rating matrix is filtered by interaction counts, factorized by a
//! truncated SVD into user and item vectors, and grouped into sets of similar
//! users (nearest neighbours of an anchor, or k-means clusters). Each user is
//! a task whose true vector is its embedding; each round offers one item the
//! user rated highly and `K − 1` items they rated poorly.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, SVD};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandit::DecisionSet;
use crate::env::{self, RewardMode, RewardSample};
use crate::error::{Error, Result};
use crate::linalg::RealVector;
use crate::meta::TaskEnvironment;
use crate::rng::{self, tag, Rng};

/// Share of malformed rows above which loading fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;
pub const KMEANS_RESTARTS: usize = 20;
pub const KMEANS_MAX_ITER: usize = 300;
/// Above this many points the silhouette is computed on a fixed-seed sample.
pub const SILHOUETTE_SAMPLE_ABOVE: usize = 5000;
pub const SILHOUETTE_SAMPLE_SIZE: usize = 2000;
const SILHOUETTE_SAMPLE_SEED: u64 = 0x5117_0E77;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingFormat {
    CsvTriples { delimiter: char, has_header: bool },
    /// `user::item::rating::timestamp`.
    MovielensDat,
}

impl Default for RatingFormat {
    fn default() -> Self {
        RatingFormat::CsvTriples {
            delimiter: ',',
            has_header: true,
        }
    }
}

/// Ratings keyed by dense user and item indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    triples: Vec<(usize, usize, f64)>,
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    duplicates: usize,
    malformed: usize,
}

impl RatingMatrix {
    /// Builds from raw id triples. Later duplicates of a (user, item) pair
    /// overwrite earlier ones and are counted.
    pub fn from_triples<U: AsRef<str>, I: AsRef<str>>(rows: impl IntoIterator<Item = (U, I, f64)>) -> Result<Self> {
        let mut users: HashMap<String, usize> = HashMap::new();
        let mut items: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        let mut triples = Vec::new();
        let mut duplicates = 0;
        for (u, i, r) in rows {
            if !r.is_finite() {
                return Err(Error::InvalidParams(format!("non-finite rating {r}")));
            }
            let u = *users.entry(u.as_ref().to_string()).or_insert_with(|| {
                user_ids.push(u.as_ref().to_string());
                user_ids.len() - 1
            });
            let i = *items.entry(i.as_ref().to_string()).or_insert_with(|| {
                item_ids.push(i.as_ref().to_string());
                item_ids.len() - 1
            });
            match seen.get(&(u, i)) {
                Some(&at) => {
                    triples[at] = (u, i, r);
                    duplicates += 1;
                }
                None => {
                    seen.insert((u, i), triples.len());
                    triples.push((u, i, r));
                }
            }
        }
        if triples.is_empty() {
            return Err(Error::EmptyDataset(None));
        }
        Ok(RatingMatrix {
            triples,
            user_ids,
            item_ids,
            duplicates,
            malformed: 0,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn triples(&self) -> &[(usize, usize, f64)] {
        &self.triples
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    /// Duplicate (user, item) rows overwritten on load.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    /// Malformed rows skipped on load.
    pub fn malformed(&self) -> usize {
        self.malformed
    }

    pub fn user_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_users()];
        for &(u, _, _) in &self.triples {
            c[u] += 1;
        }
        c
    }

    pub fn item_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_items()];
        for &(_, i, _) in &self.triples {
            c[i] += 1;
        }
        c
    }

    /// `(item, rating)` pairs of one user, in load order.
    pub fn user_row(&self, user: usize) -> Vec<(usize, f64)> {
        self.triples
            .iter()
            .filter(|t| t.0 == user)
            .map(|&(_, i, r)| (i, r))
            .collect()
    }

    /// Users × items, zero where unrated.
    pub fn dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_users(), self.n_items());
        for &(u, i, r) in &self.triples {
            a[(u, i)] = r;
        }
        a
    }
}

fn parse_line(line: &str, format: &RatingFormat) -> Option<(String, String, f64)> {
    let fields: Vec<&str> = match format {
        RatingFormat::CsvTriples { delimiter, .. } => line.split(*delimiter).map(str::trim).collect(),
        RatingFormat::MovielensDat => line.split("::").map(str::trim).collect(),
    };
    if fields.len() < 3 || fields[0].is_empty() || fields[1].is_empty() {
        return None;
    }
    let rating: f64 = fields[2].parse().ok()?;
    rating.is_finite().then(|| (fields[0].to_string(), fields[1].to_string(), rating))
}

/// Parses ratings text. Blank lines are ignored; malformed rows are skipped
/// and counted, failing with the first bad line when they exceed 1%.
pub fn parse_ratings(text: &str, format: &RatingFormat) -> Result<RatingMatrix> {
    let skip_header = matches!(format, RatingFormat::CsvTriples { has_header: true, .. });
    let mut rows = Vec::new();
    let mut malformed = 0usize;
    let mut first_bad = None;
    let mut total = 0usize;
    for (n, line) in text.lines().enumerate() {
        if (n == 0 && skip_header) || line.trim().is_empty() {
            continue;
        }
        total += 1;
        match parse_line(line, format) {
            Some(row) => rows.push(row),
            None => {
                malformed += 1;
                first_bad.get_or_insert(n + 1);
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyDataset(Some("no rating rows".into())));
    }
    if malformed as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(Error::Parse {
            line: first_bad.unwrap_or(0),
            message: format!("{malformed} of {total} rows are malformed"),
        });
    }
    let mut m = RatingMatrix::from_triples(rows)?;
    m.malformed = malformed;
    Ok(m)
}

pub fn load_ratings(path: &Path, format: &RatingFormat) -> Result<RatingMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(&text, format)
}

/// Drops items with fewer than `min_item_ratings` ratings, then users with
/// fewer than `min_user_ratings` ratings among the surviving items. Exactly
/// these two passes; items left without ratings by the second pass go too.
pub fn filter_min_counts(m: &RatingMatrix, min_item_ratings: usize, min_user_ratings: usize) -> Result<RatingMatrix> {
    let item_counts = m.item_counts();
    let after_items: Vec<(usize, usize, f64)> = m
        .triples
        .iter()
        .copied()
        .filter(|&(_, i, _)| item_counts[i] >= min_item_ratings)
        .collect();
    let mut user_counts = vec![0usize; m.n_users()];
    for &(u, _, _) in &after_items {
        user_counts[u] += 1;
    }
    let kept: Vec<(usize, usize, f64)> = after_items
        .into_iter()
        .filter(|&(u, _, _)| user_counts[u] >= min_user_ratings)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(Some("nothing survives the count filter".into())));
    }

    let mut user_map = vec![usize::MAX; m.n_users()];
    let mut item_map = vec![usize::MAX; m.n_items()];
    for &(u, i, _) in &kept {
        user_map[u] = 0;
        item_map[i] = 0;
    }
    let reindex = |map: &mut Vec<usize>, ids: &[String]| {
        let mut out = Vec::new();
        for (old, slot) in map.iter_mut().enumerate() {
            if *slot != usize::MAX {
                *slot = out.len();
                out.push(ids[old].clone());
            }
        }
        out
    };
    let user_ids = reindex(&mut user_map, &m.user_ids);
    let item_ids = reindex(&mut item_map, &m.item_ids);
    Ok(RatingMatrix {
        triples: kept.into_iter().map(|(u, i, r)| (user_map[u], item_map[i], r)).collect(),
        user_ids,
        item_ids,
        duplicates: m.duplicates,
        malformed: m.malformed,
    })
}

/// Rank-`d` factors with the singular values split evenly between sides.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// `U_d·Σ_d^{1/2}`, one row per user.
    pub user_vectors: DMatrix<f64>,
    /// `V_d·Σ_d^{1/2}`, one row per item.
    pub item_vectors: DMatrix<f64>,
    /// Non-increasing.
    pub singular_values: Vec<f64>,
}

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.singular_values.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_vectors.nrows()
    }

    pub fn user(&self, u: usize) -> RealVector {
        self.user_vectors.row(u).transpose()
    }

    pub fn item(&self, i: usize) -> RealVector {
        self.item_vectors.row(i).transpose()
    }

    /// `U_d Σ_d V_dᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.user_vectors * self.item_vectors.transpose()
    }
}

/// Truncated SVD of a dense matrix.
pub fn truncated_svd_dense(a: &DMatrix<f64>, d: usize) -> Result<EmbeddingSet> {
    let max_d = a.nrows().min(a.ncols());
    if d == 0 || d > max_d {
        return Err(Error::InvalidParams(format!("d = {d} must lie in 1..={max_d}")));
    }
    let max_iter = 1000 * max_d.max(1);
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, max_iter).ok_or(Error::NoConvergence {
        what: "singular value decomposition",
        iterations: max_iter,
    })?;
    let u = svd.u.as_ref().ok_or(Error::NoConvergence {
        what: "singular value decomposition",
        iterations: max_iter,
    })?;
    let v_t = svd.v_t.as_ref().ok_or(Error::NoConvergence {
        what: "singular value decomposition",
        iterations: max_iter,
    })?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]).then(x.cmp(&y)));
    order.truncate(d);

    let mut user_vectors = DMatrix::zeros(a.nrows(), d);
    let mut item_vectors = DMatrix::zeros(a.ncols(), d);
    let mut singular_values = Vec::with_capacity(d);
    for (k, &c) in order.iter().enumerate() {
        let s = svd.singular_values[c];
        let root = s.sqrt();
        user_vectors.set_column(k, &(u.column(c) * root));
        item_vectors.set_column(k, &(v_t.row(c).transpose() * root));
        singular_values.push(s);
    }
    Ok(EmbeddingSet {
        user_vectors,
        item_vectors,
        singular_values,
    })
}

/// Truncated SVD of the zero-filled rating matrix.
pub fn truncated_svd(m: &RatingMatrix, d: usize) -> Result<EmbeddingSet> {
    truncated_svd_dense(&m.dense(), d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskAnchor {
    User(usize),
    Cluster(usize),
}

/// A group of similar users treated as tasks from one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub user_indices: Vec<usize>,
    pub anchor: TaskAnchor,
    /// Mean of the member user vectors; the Oracle policy's bias.
    pub mean_vector: Vec<f64>,
}

impl TaskSet {
    fn from_members(e: &EmbeddingSet, user_indices: Vec<usize>, anchor: TaskAnchor) -> Self {
        let mut mean = RealVector::zeros(e.dim());
        for &u in &user_indices {
            mean += e.user(u);
        }
        mean /= user_indices.len() as f64;
        TaskSet {
            user_indices,
            anchor,
            mean_vector: mean.as_slice().to_vec(),
        }
    }

    pub fn mean(&self) -> RealVector {
        RealVector::from_column_slice(&self.mean_vector)
    }
}

/// The `n` users closest to `anchor` in ℓ2, ties broken by index.
///
/// With `include_anchor` the set is the anchor plus its `n − 1` nearest
/// neighbours; otherwise the anchor is left out and `n` others are returned.
pub fn nearest_users(e: &EmbeddingSet, anchor: usize, n: usize, include_anchor: bool) -> Result<TaskSet> {
    let n_users = e.n_users();
    if anchor >= n_users {
        return Err(Error::InvalidParams(format!("anchor {anchor} out of range ({n_users} users)")));
    }
    if n < 2 || n >= n_users {
        return Err(Error::InvalidParams(format!("N = {n} must lie in 2..{n_users}")));
    }
    let a = e.user_vectors.row(anchor);
    let mut others: Vec<(f64, usize)> = (0..n_users)
        .filter(|&u| u != anchor)
        .map(|u| ((e.user_vectors.row(u) - a).norm(), u))
        .collect();
    others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let members: Vec<usize> = if include_anchor {
        std::iter::once(anchor).chain(others.iter().take(n - 1).map(|p| p.1)).collect()
    } else {
        others.iter().take(n).map(|p| p.1).collect()
    };
    Ok(TaskSet::from_members(e, members, TaskAnchor::User(anchor)))
}

/// One Lloyd run's result.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    (points.row(i) - centroids.row(c)).norm_squared()
}

fn kmeans_plus_plus(points: &DMatrix<f64>, k: usize, rng: &mut Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut centroids = DMatrix::zeros(k, points.ncols());
    centroids.set_row(0, &points.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.set_row(c, &points.row(pick));
        for (i, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(points, i, &centroids, c));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeding; stops when assignments are
/// stable or after [`KMEANS_MAX_ITER`] iterations. An emptied cluster is
/// re-seeded at the point farthest from its centroid.
pub fn lloyd(points: &DMatrix<f64>, k: usize, rng: &mut Rng) -> Result<Clustering> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidParams(format!("C = {k} must lie in 1..={n}")));
    }
    let mut centroids = kmeans_plus_plus(points, k, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    for it in 1..=KMEANS_MAX_ITER {
        iterations = it;
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .map(|c| (sq_dist(points, i, &centroids, c), c))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|p| p.1)
                .unwrap_or(0);
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(k, points.ncols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            let row = sums.row(c) + points.row(i);
            sums.set_row(c, &row);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids.set_row(c, &(sums.row(c) / counts[c] as f64));
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points, a, &centroids, assignments[a])
                            .total_cmp(&sq_dist(points, b, &centroids, assignments[b]))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centroids.set_row(c, &points.row(far));
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(points, i, &centroids, assignments[i])).sum();
    Ok(Clustering {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

/// Mean silhouette `(b − a)/max(a, b)` over points. Points in singleton
/// clusters score 0, as does a clustering with fewer than two clusters.
pub fn silhouette(points: &DMatrix<f64>, assignments: &[usize]) -> f64 {
    let n = points.nrows();
    let idx: Vec<usize> = if n > SILHOUETTE_SAMPLE_ABOVE {
        let mut r = rng::from_seed(SILHOUETTE_SAMPLE_SEED);
        let mut sample = rand::seq::index::sample(&mut r, n, SILHOUETTE_SAMPLE_SIZE).into_vec();
        sample.sort_unstable();
        sample
    } else {
        (0..n).collect()
    };
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &i in &idx {
        sizes[assignments[i]] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return 0.0;
    }
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let own = assignments[i];
            if sizes[own] < 2 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for &j in &idx {
                if j != i {
                    sums[assignments[j]] += (points.row(i) - points.row(j)).norm();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .sum();
    total / idx.len() as f64
}

/// Result of [`kmeans_tasks`], with the clustering it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTasks {
    pub tasks: Vec<TaskSet>,
    pub silhouette: f64,
    pub clustering: Clustering,
}

/// Clusters users with k-means (best inertia over [`KMEANS_RESTARTS`]
/// restarts). Fails when the silhouette is below `silhouette_min` or no
/// cluster reaches `min_cluster_size` members.
pub fn kmeans_tasks(
    e: &EmbeddingSet,
    clusters: usize,
    silhouette_min: f64,
    min_cluster_size: usize,
    rng: &mut Rng,
) -> Result<ClusterTasks> {
    if clusters < 2 {
        return Err(Error::InvalidParams(format!("C = {clusters} must be ≥ 2")));
    }
    let points = &e.user_vectors;
    let base: u64 = rng.random();
    let runs: Vec<Result<Clustering>> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|r| lloyd(points, clusters, &mut rng::stream(base, &[tag::KMEANS, r as u64])))
        .collect();
    let mut best: Option<Clustering> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let clustering = best.ok_or_else(|| Error::NoValidClusters("no k-means run".into()))?;
    let score = silhouette(points, &clustering.assignments);
    if !(score >= silhouette_min) {
        return Err(Error::NoValidClusters(format!(
            "silhouette {score:.4} below threshold {silhouette_min}"
        )));
    }
    let tasks: Vec<TaskSet> = (0..clusters)
        .filter_map(|c| {
            let members: Vec<usize> = (0..points.nrows()).filter(|&i| clustering.assignments[i] == c).collect();
            (members.len() >= min_cluster_size.max(2)).then(|| TaskSet::from_members(e, members, TaskAnchor::Cluster(c)))
        })
        .collect();
    if tasks.is_empty() {
        return Err(Error::NoValidClusters(format!(
            "no cluster has at least {min_cluster_size} members"
        )));
    }
    Ok(ClusterTasks {
        tasks,
        silhouette: score,
        clustering,
    })
}

/// Per-round decision sets for one user, with the item behind every arm.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingDecisionSets {
    pub sets: Vec<DecisionSet>,
    pub items: Vec<Vec<usize>>,
    /// Position of the high-rated arm in each round.
    pub high_arm: Vec<usize>,
    pub high_with_replacement: bool,
    pub low_with_replacement: bool,
}

fn draw_pool(pool: &[usize], n: usize, rng: &mut Rng) -> (Vec<usize>, bool) {
    if n <= pool.len() {
        let mut p = pool.to_vec();
        p.shuffle(rng);
        p.truncate(n);
        (p, false)
    } else {
        ((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect(), true)
    }
}

fn unit(v: RealVector) -> RealVector {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Builds `T` rounds of one high-rated item (rating ≥ `high_threshold`) and
/// `K − 1` low-rated items (rating ≤ `low_threshold`), shuffled, with arms
/// scaled to unit norm. Items are drawn without replacement when the pools
/// are large enough.
#[allow(clippy::too_many_arguments)]
pub fn build_rating_decision_sets(
    user: usize,
    e: &EmbeddingSet,
    m: &RatingMatrix,
    k: usize,
    horizon: usize,
    high_threshold: f64,
    low_threshold: f64,
    rng: &mut Rng,
) -> Result<RatingDecisionSets> {
    if k == 0 || horizon == 0 {
        return Err(Error::InvalidParams("K and T must be ≥ 1".into()));
    }
    if user >= m.n_users() || m.n_items() != e.item_vectors.nrows() {
        return Err(Error::InvalidParams(format!("user {user} is not in the embedded matrix")));
    }
    let row = m.user_row(user);
    let high: Vec<usize> = row.iter().filter(|p| p.1 >= high_threshold).map(|p| p.0).collect();
    let low: Vec<usize> = row.iter().filter(|p| p.1 <= low_threshold).map(|p| p.0).collect();
    if high.is_empty() {
        return Err(Error::InsufficientRatings {
            user,
            reason: format!("no item rated ≥ {high_threshold}"),
        });
    }
    if k > 1 && low.is_empty() {
        return Err(Error::InsufficientRatings {
            user,
            reason: format!("no item rated ≤ {low_threshold}"),
        });
    }
    let (high_draws, high_with_replacement) = draw_pool(&high, horizon, rng);
    let (low_draws, low_with_replacement) = if k > 1 {
        draw_pool(&low, (k - 1) * horizon, rng)
    } else {
        (Vec::new(), false)
    };

    let mut sets = Vec::with_capacity(horizon);
    let mut items = Vec::with_capacity(horizon);
    let mut high_arm = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut round: Vec<(usize, bool)> = vec![(high_draws[t], true)];
        round.extend(low_draws[t * (k - 1)..(t + 1) * (k - 1)].iter().map(|&i| (i, false)));
        round.shuffle(rng);
        high_arm.push(round.iter().position(|p| p.1).unwrap_or(0));
        items.push(round.iter().map(|p| p.0).collect());
        sets.push(DecisionSet::new(round.iter().map(|p| unit(e.item(p.0))).collect())?);
    }
    Ok(RatingDecisionSets {
        sets,
        items,
        high_arm,
        high_with_replacement,
        low_with_replacement,
    })
}

/// How tasks are grouped from the embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskConstruction {
    NearestUsers {
        anchor: usize,
        n: usize,
        #[serde(default)]
        include_anchor: bool,
    },
    Kmeans {
        clusters: usize,
        silhouette_min: f64,
        min_cluster_size: usize,
        /// Which surviving cluster to use, in cluster-id order.
        #[serde(default)]
        cluster_index: usize,
    },
}

fn default_high() -> f64 {
    4.0
}

fn default_low() -> f64 {
    3.0
}

/// Everything needed to go from a ratings file to a task environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingsConfig {
    pub path: std::path::PathBuf,
    #[serde(default)]
    pub format: RatingFormat,
    pub min_item_ratings: usize,
    pub min_user_ratings: usize,
    pub d: usize,
    pub tasks: TaskConstruction,
    #[serde(rename = "K")]
    pub arms: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(default = "default_high")]
    pub high_threshold: f64,
    #[serde(default = "default_low")]
    pub low_threshold: f64,
    #[serde(default)]
    pub noise_mean: f64,
    #[serde(default)]
    pub noise_std: f64,
    pub reward_mode: RewardMode,
    #[serde(default)]
    pub seed: u64,
}

impl RatingsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.arms == 0 || self.horizon == 0 {
            return Err(Error::Config("d, K and T must be ≥ 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be ≥ 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

/// Task set listing written next to experiment outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub user_indices: Vec<usize>,
    pub user_ids: Vec<String>,
    pub anchor: TaskAnchor,
    pub mean_vector: Vec<f64>,
    pub config_hash: String,
    /// Members dropped because they lacked ratings on one side.
    pub skipped_users: Vec<usize>,
    pub n_users: usize,
    pub n_items: usize,
}

impl TaskManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Task environment over a ratings-derived task set. Each member user is a
/// task; its embedding is the true vector and rewards are simulated on it.
#[derive(Debug, Clone)]
pub struct RatingEnv {
    embedding: EmbeddingSet,
    users: Vec<usize>,
    decision_sets: Vec<RatingDecisionSets>,
    mean: RealVector,
    reward_mode: RewardMode,
    noise_mean: f64,
    noise_std: f64,
    seed: u64,
    horizon: usize,
    manifest: TaskManifest,
}

impl RatingEnv {
    /// Runs the whole pipeline from a ratings file.
    pub fn from_config(cfg: &RatingsConfig) -> Result<Self> {
        cfg.validate()?;
        let m = load_ratings(&cfg.path, &cfg.format)?;
        Self::from_matrix(&m, cfg)
    }

    /// Runs the pipeline on an already loaded matrix.
    pub fn from_matrix(m: &RatingMatrix, cfg: &RatingsConfig) -> Result<Self> {
        cfg.validate()?;
        let m = filter_min_counts(m, cfg.min_item_ratings, cfg.min_user_ratings)?;
        let embedding = truncated_svd(&m, cfg.d)?;
        let set = match &cfg.tasks {
            TaskConstruction::NearestUsers { anchor, n, include_anchor } => {
                nearest_users(&embedding, *anchor, *n, *include_anchor)?
            }
            TaskConstruction::Kmeans {
                clusters,
                silhouette_min,
                min_cluster_size,
                cluster_index,
            } => {
                let mut r = rng::stream(cfg.seed, &[tag::KMEANS]);
                let found = kmeans_tasks(&embedding, *clusters, *silhouette_min, *min_cluster_size, &mut r)?;
                let n_found = found.tasks.len();
                found.tasks.into_iter().nth(*cluster_index).ok_or_else(|| {
                    Error::NoValidClusters(format!("cluster index {cluster_index} but only {n_found} valid clusters"))
                })?
            }
        };

        let mut users = Vec::new();
        let mut skipped = Vec::new();
        let mut decision_sets = Vec::new();
        for &u in &set.user_indices {
            let mut r = rng::stream(cfg.seed, &[tag::DATA, u as u64]);
            match build_rating_decision_sets(
                u,
                &embedding,
                &m,
                cfg.arms,
                cfg.horizon,
                cfg.high_threshold,
                cfg.low_threshold,
                &mut r,
            ) {
                Ok(ds) => {
                    users.push(u);
                    decision_sets.push(ds);
                }
                Err(Error::InsufficientRatings { .. }) => skipped.push(u),
                Err(e) => return Err(e),
            }
        }
        if users.is_empty() {
            return Err(Error::InsufficientRatings {
                user: set.user_indices[0],
                reason: "no member of the task set has usable ratings".into(),
            });
        }
        let mean = set.mean();
        let manifest = TaskManifest {
            user_ids: users.iter().map(|&u| m.user_ids()[u].clone()).collect(),
            user_indices: users.clone(),
            anchor: set.anchor,
            mean_vector: set.mean_vector.clone(),
            config_hash: cfg.hash()?,
            skipped_users: skipped,
            n_users: m.n_users(),
            n_items: m.n_items(),
        };
        Ok(RatingEnv {
            embedding,
            users,
            decision_sets,
            mean,
            reward_mode: cfg.reward_mode,
            noise_mean: cfg.noise_mean,
            noise_std: cfg.noise_std,
            seed: cfg.seed,
            horizon: cfg.horizon,
            manifest,
        })
    }

    /// The same task set under a different seed for reward noise.
    pub fn with_seed(&self, seed: u64) -> Self {
        RatingEnv { seed, ..self.clone() }
    }

    pub fn manifest(&self) -> &TaskManifest {
        &self.manifest
    }

    pub fn embedding(&self) -> &EmbeddingSet {
        &self.embedding
    }

    pub fn users(&self) -> &[usize] {
        &self.users
    }

    /// Largest task vector norm; the `S` of this environment.
    pub fn norm_bound(&self) -> f64 {
        self.users.iter().map(|&u| self.embedding.user(u).norm()).fold(0.0, f64::max)
    }

    pub fn annotations(&self, task: usize) -> Option<&RatingDecisionSets> {
        self.decision_sets.get(task)
    }
}

impl TaskEnvironment for RatingEnv {
    fn dim(&self) -> usize {
        self.embedding.dim()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn n_tasks(&self) -> Option<usize> {
        Some(self.users.len())
    }

    fn task_vector(&self, task: usize) -> Result<RealVector> {
        self.users
            .get(task)
            .map(|&u| self.embedding.user(u))
            .ok_or_else(|| Error::InvalidParams(format!("task {task} out of range")))
    }

    fn decision_set(&self, task: usize, round: usize) -> Result<DecisionSet> {
        self.decision_sets
            .get(task)
            .and_then(|d| d.sets.get(round))
            .cloned()
            .ok_or_else(|| Error::InvalidParams(format!("no decision set for task {task}, round {round}")))
    }

    fn rewards(&self, task: usize, round: usize, ds: &DecisionSet, w: &RealVector) -> Result<RewardSample> {
        let mut r = rng::stream(self.seed, &[tag::NOISE, task as u64, round as u64]);
        Ok(env::realize_with(ds, w, self.reward_mode, self.noise_mean, self.noise_std, &mut r))
    }

    fn mean_task(&self) -> RealVector {
        self.mean.clone()
    }
}

/// Synthetic ratings with planted user groups, as `user,item,rating` CSV.
///
/// Users fall into a few groups sharing a latent taste vector; each user
/// rates about 60% of items on a 1–5 scale.
pub fn generate_planted_ratings(users: usize, items: usize, seed: u64) -> Result<String> {
    if users < 2 || items < 2 {
        return Err(Error::InvalidParams("need at least 2 users and 2 items".into()));
    }
    let mut r = rng::stream(seed, &[tag::DATA]);
    let latent = 4;
    let groups = 3.min(users);
    let tastes: Vec<RealVector> = (0..groups)
        .map(|_| RealVector::from_fn(latent, |_, _| env::gaussian(&mut r, 0.0, 1.0)))
        .collect();
    let item_factors: Vec<RealVector> = (0..items)
        .map(|_| RealVector::from_fn(latent, |_, _| env::gaussian(&mut r, 0.0, 1.0)))
        .collect();
    let mut out = String::from("user,item,rating\n");
    for u in 0..users {
        let taste = &tastes[u % groups];
        let personal = taste + RealVector::from_fn(latent, |_, _| env::gaussian(&mut r, 0.0, 0.2));
        for (i, f) in item_factors.iter().enumerate() {
            if r.random::<f64>() >= 0.6 {
                continue;
            }
            let score = personal.dot(f) / (latent as f64).sqrt();
            let rating = (3.0 + 2.0 * score.tanh() + env::gaussian(&mut r, 0.0, 0.3)).round().clamp(1.0, 5.0);
            out.push_str(&format!("u{u},i{i},{rating}\n"));
        }
    }
    Ok(out)
}
