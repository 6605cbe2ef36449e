use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenId;
use crate::error::{Error, Result};

use super::Datastore;

/// Inverted-file index: k-means centroids plus one entry-id list per
/// centroid. Centroids are held as f32 so that a saved and reloaded index
/// searches identically.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub(crate) dim: usize,
    pub(crate) nlist: usize,
    pub(crate) centroids: Vec<f32>,
    pub(crate) lists: Vec<Vec<u64>>,
}

impl IvfIndex {
    pub fn nlist(&self) -> usize {
        self.nlist
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn list(&self, c: usize) -> &[u64] {
        &self.lists[c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub entry_id: usize,
    pub distance: f64,
    pub value: TokenId,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Builds an IVF index with k-means++ initialization and `kmeans_iters`
/// Lloyd iterations. Empty clusters are re-seeded from the farthest member
/// of the largest cluster. Fully deterministic given the seed.
pub fn build_ivf(ds: &Datastore, nlist: usize, kmeans_iters: usize, seed: u64) -> Result<IvfIndex> {
    let n = ds.len();
    if nlist < 1 || nlist > n {
        return Err(Error::Config(format!(
            "nlist {nlist} out of range for datastore of {n} entries"
        )));
    }
    let dim = ds.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding, distances in f64
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(nlist);
    let first = rng.gen_range(0..n);
    centroids.push(ds.key(first).iter().map(|&v| v as f64).collect());
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| sq_dist_f64(ds.key(i), &centroids[0]))
        .collect();
    while centroids.len() < nlist {
        let total: f64 = min_d.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let target = rng.gen::<f64>() * total;
            let mut cum = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in min_d.iter().enumerate() {
                cum += d;
                if cum >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c: Vec<f64> = ds.key(pick).iter().map(|&v| v as f64).collect();
        for i in 0..n {
            let d = sq_dist_f64(ds.key(i), &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
        centroids.push(c);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..kmeans_iters {
        // assignment
        for i in 0..n {
            assign[i] = nearest_centroid_f64(ds.key(i), &centroids).0;
        }
        // empty-cluster repair: move the farthest member of the largest
        // cluster into each empty one
        loop {
            let mut counts = vec![0usize; nlist];
            for &a in &assign {
                counts[a] += 1;
            }
            let empty = match counts.iter().position(|&c| c == 0) {
                Some(e) => e,
                None => break,
            };
            let largest = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .map(|(i, _)| i)
                .unwrap();
            let farthest = (0..n)
                .filter(|&i| assign[i] == largest)
                .max_by(|&a, &b| {
                    let da = sq_dist_f64(ds.key(a), &centroids[largest]);
                    let db = sq_dist_f64(ds.key(b), &centroids[largest]);
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .unwrap();
            assign[farthest] = empty;
            centroids[empty] = ds.key(farthest).iter().map(|&v| v as f64).collect();
        }
        // update
        let mut sums = vec![vec![0.0f64; dim]; nlist];
        let mut counts = vec![0usize; nlist];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, &k) in sums[c].iter_mut().zip(ds.key(i)) {
                *s += k as f64;
            }
        }
        for c in 0..nlist {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }
    }

    // freeze centroids to f32, then assign every entry to its nearest
    // frozen centroid so the stored invariant holds exactly
    let frozen: Vec<f32> = centroids
        .iter()
        .flat_map(|c| c.iter().map(|&v| v as f32))
        .collect();
    let mut lists: Vec<Vec<u64>> = vec![Vec::new(); nlist];
    for i in 0..n {
        let (best, _) = nearest_centroid_f32(ds.key(i), &frozen, dim, nlist);
        lists[best].push(i as u64);
    }
    Ok(IvfIndex {
        dim,
        nlist,
        centroids: frozen,
        lists,
    })
}

fn sq_dist_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y;
            d * d
        })
        .sum()
}

fn nearest_centroid_f64(key: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist_f64(key, cent);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn nearest_centroid_f32(key: &[f32], centroids: &[f32], dim: usize, nlist: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..nlist {
        let d = sq_dist(key, &centroids[c * dim..(c + 1) * dim]);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Approximate k-nearest-neighbor search: probes the `nprobe` nearest
/// centroids' lists and returns the top-k candidates by exact squared L2
/// (f64 accumulation), ties broken by ascending entry id.
pub fn knn_search(
    index: &IvfIndex,
    ds: &Datastore,
    query: &[f32],
    k: usize,
    nprobe: usize,
) -> Result<Vec<Neighbor>> {
    if ds.is_empty() {
        return Ok(Vec::new());
    }
    if query.len() != index.dim {
        return Err(Error::Dimension {
            expected: index.dim,
            got: query.len(),
        });
    }
    if k < 1 || nprobe < 1 || nprobe > index.nlist {
        return Err(Error::Config(format!(
            "invalid search parameters k={k} nprobe={nprobe} (nlist={})",
            index.nlist
        )));
    }
    // nearest centroids, ordered by (distance, centroid id)
    let mut cent_d: Vec<(f64, usize)> = (0..index.nlist)
        .map(|c| (sq_dist(query, index.centroid(c)), c))
        .collect();
    cent_d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut candidates: Vec<Neighbor> = Vec::new();
    for &(_, c) in cent_d.iter().take(nprobe) {
        for &id in index.list(c) {
            let id = id as usize;
            candidates.push(Neighbor {
                entry_id: id,
                distance: sq_dist(query, ds.key(id)),
                value: ds.value(id),
            });
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then(a.entry_id.cmp(&b.entry_id))
    });
    candidates.truncate(k);
    Ok(candidates)
}

/// Exhaustive top-k over the full datastore; the oracle that IVF search with
/// nprobe = nlist must match exactly.
pub fn brute_force_search(ds: &Datastore, query: &[f32], k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = (0..ds.len())
        .map(|i| Neighbor {
            entry_id: i,
            distance: sq_dist(query, ds.key(i)),
            value: ds.value(i),
        })
        .collect();
    all.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then(a.entry_id.cmp(&b.entry_id))
    });
    all.truncate(k);
    all
}
