//! Splitting a landmark set into disjoint, equally sized groups, one per
//! ensemble member.
//!
//! Group sizes differ by at most one: with `n` landmarks and `g` groups the
//! first `n mod g` groups hold `ceil(n / g)` landmarks and the rest
//! `floor(n / g)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::landmarks::{Landmark, LandmarkSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Saliency-sorted contiguous chunks.
    Default,
    Random,
    KMeans,
    /// Farthest-point sampling.
    Fps,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Default, Criterion::Random, Criterion::KMeans, Criterion::Fps];

    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Default => "default",
            Criterion::Random => "random",
            Criterion::KMeans => "kmeans",
            Criterion::Fps => "fps",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown partition criterion `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionAssignment {
    group_of: BTreeMap<u32, usize>,
    groups: usize,
    criterion: Criterion,
    seed: Option<u64>,
}

impl PartitionAssignment {
    pub fn new(group_of: BTreeMap<u32, usize>, groups: usize, criterion: Criterion, seed: Option<u64>) -> Result<Self> {
        if groups == 0 || groups > group_of.len() {
            return Err(Error::InvalidPartition {
                groups,
                landmarks: group_of.len(),
            });
        }
        if let Some((id, g)) = group_of.iter().find(|(_, g)| **g >= groups) {
            return Err(Error::InvalidInput(format!("landmark {id} assigned to group {g} of {groups}")));
        }
        Ok(PartitionAssignment {
            group_of,
            groups,
            criterion,
            seed,
        })
    }

    pub fn group_of(&self, landmark_id: u32) -> Option<usize> {
        self.group_of.get(&landmark_id).copied()
    }

    pub fn assignments(&self) -> &BTreeMap<u32, usize> {
        &self.group_of
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Landmark ids of one group, ascending.
    pub fn members(&self, group: usize) -> Vec<u32> {
        self.group_of
            .iter()
            .filter(|(_, g)| **g == group)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for g in self.group_of.values() {
            sizes[*g] += 1;
        }
        sizes
    }
}

/// Capacities of `g` groups over `n` items.
fn capacities(n: usize, g: usize) -> Vec<usize> {
    (0..g).map(|k| n / g + usize::from(k < n % g)).collect()
}

fn check_groups(n: usize, g: usize) -> Result<()> {
    if g == 0 || g > n {
        return Err(Error::InvalidPartition { groups: g, landmarks: n });
    }
    Ok(())
}

fn chunk(order: &[u32], g: usize) -> BTreeMap<u32, usize> {
    let mut out = BTreeMap::new();
    let mut it = order.iter();
    for (group, cap) in capacities(order.len(), g).into_iter().enumerate() {
        for id in it.by_ref().take(cap) {
            out.insert(*id, group);
        }
    }
    out
}

fn by_saliency(ls: &LandmarkSet) -> Vec<&Landmark> {
    let mut sorted: Vec<&Landmark> = ls.landmarks().iter().collect();
    sorted.sort_by(|a, b| b.saliency.total_cmp(&a.saliency).then(a.id.cmp(&b.id)));
    sorted
}

/// Sort by saliency (descending, ties by id) and split into contiguous chunks.
pub fn partition_default(ls: &LandmarkSet, g: usize) -> Result<PartitionAssignment> {
    check_groups(ls.len(), g)?;
    let order: Vec<u32> = by_saliency(ls).into_iter().map(|l| l.id).collect();
    PartitionAssignment::new(chunk(&order, g), g, Criterion::Default, None)
}

/// Seeded uniform shuffle followed by contiguous chunking.
pub fn partition_random(ls: &LandmarkSet, g: usize, seed: u64) -> Result<PartitionAssignment> {
    check_groups(ls.len(), g)?;
    let mut order: Vec<u32> = ls.landmarks().iter().map(|l| l.id).collect();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    PartitionAssignment::new(chunk(&order, g), g, Criterion::Random, Some(seed))
}

/// Result of plain Lloyd iterations, before rebalancing.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vector3<f64>>,
    pub iterations: usize,
}

/// Lloyd's k-means with seeded k-means++ initialization.
///
/// Empty clusters are re-seeded with the point farthest from its centroid.
pub fn lloyd_kmeans(points: &[Vector3<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansFit> {
    check_groups(points.len(), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| (p - centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }

    let nearest = |p: &Vector3<f64>, centroids: &[Vector3<f64>]| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, q) in centroids.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    };

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (p, l) in points.iter().zip(&labels) {
            sums[*l] += p;
            counts[*l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&a, &b| {
                        let da = (points[a] - centroids[labels[a]]).norm_squared();
                        let db = (points[b] - centroids[labels[b]]).norm_squared();
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[c] = points[far];
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(KMeansFit {
        labels,
        centroids,
        iterations,
    })
}

/// Moves points out of over-full clusters until every cluster holds its
/// capacity. Larger clusters receive the larger capacities (ties by index).
/// Each move takes the donor member farthest from the donor's centroid and
/// gives it to the under-full cluster whose centroid is nearest to it.
fn rebalance(points: &[Vector3<f64>], labels: &mut [usize], centroids: &[Vector3<f64>]) {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for l in labels.iter() {
        sizes[*l] += 1;
    }
    let mut rank: Vec<usize> = (0..k).collect();
    rank.sort_by(|a, b| sizes[*b].cmp(&sizes[*a]).then(a.cmp(b)));
    let caps_sorted = capacities(points.len(), k);
    let mut cap = vec![0usize; k];
    for (slot, c) in rank.iter().enumerate() {
        cap[*c] = caps_sorted[slot];
    }

    loop {
        let donor = (0..k)
            .filter(|&c| sizes[c] > cap[c])
            .max_by(|&a, &b| (sizes[a] - cap[a]).cmp(&(sizes[b] - cap[b])).then(b.cmp(&a)));
        let Some(donor) = donor else { break };
        let member = (0..points.len())
            .filter(|&i| labels[i] == donor)
            .max_by(|&a, &b| {
                let da = (points[a] - centroids[donor]).norm_squared();
                let db = (points[b] - centroids[donor]).norm_squared();
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        let recipient = (0..k)
            .filter(|&c| sizes[c] < cap[c])
            .min_by(|&a, &b| {
                let da = (points[member] - centroids[a]).norm_squared();
                let db = (points[member] - centroids[b]).norm_squared();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .unwrap();
        labels[member] = recipient;
        sizes[donor] -= 1;
        sizes[recipient] += 1;
    }
}

/// Spatial k-means on landmark positions followed by size rebalancing.
pub fn partition_kmeans(ls: &LandmarkSet, g: usize, seed: u64, max_iter: usize) -> Result<PartitionAssignment> {
    check_groups(ls.len(), g)?;
    let points: Vec<Vector3<f64>> = ls.landmarks().iter().map(|l| l.xyz).collect();
    let mut fit = lloyd_kmeans(&points, g, seed, max_iter)?;
    rebalance(&points, &mut fit.labels, &fit.centroids);
    let group_of = ls.landmarks().iter().zip(&fit.labels).map(|(l, g)| (l.id, *g)).collect();
    PartitionAssignment::new(group_of, g, Criterion::KMeans, Some(seed))
}

/// Farthest-point partitioning; see [`partition_fps_traced`].
pub fn partition_fps(ls: &LandmarkSet, g: usize) -> Result<PartitionAssignment> {
    partition_fps_traced(ls, g).map(|(p, _)| p)
}

/// Farthest-point partitioning, also returning landmark ids in insertion order.
///
/// The first `g` insertions seed the groups: a farthest-point traversal that
/// starts at the most salient landmark. Afterwards the unassigned landmark
/// farthest from everything assigned so far joins the non-full group with
/// the smallest mean distance to it. Ties resolve to the lowest id / group.
pub fn partition_fps_traced(ls: &LandmarkSet, g: usize) -> Result<(PartitionAssignment, Vec<u32>)> {
    let n = ls.len();
    check_groups(n, g)?;
    let lms = ls.landmarks();
    let caps = capacities(n, g);

    let start = by_saliency(ls)[0].id as usize;
    let mut assigned = vec![None::<usize>; n];
    let mut nearest = vec![f64::INFINITY; n];
    // per group: sum of distances from every landmark to the group's members
    let mut dist_sum = vec![vec![0.0f64; n]; g];
    let mut sizes = vec![0usize; g];
    let mut order = Vec::with_capacity(n);

    let mut insert = |idx: usize,
                      group: usize,
                      assigned: &mut Vec<Option<usize>>,
                      nearest: &mut Vec<f64>,
                      dist_sum: &mut Vec<Vec<f64>>,
                      sizes: &mut Vec<usize>| {
        assigned[idx] = Some(group);
        sizes[group] += 1;
        order.push(lms[idx].id);
        for j in 0..n {
            let d = (lms[j].xyz - lms[idx].xyz).norm();
            nearest[j] = nearest[j].min(d);
            dist_sum[group][j] += d;
        }
    };

    let farthest_unassigned = |assigned: &[Option<usize>], nearest: &[f64]| -> usize {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if assigned[j].is_none() && nearest[j] > best_d {
                best_d = nearest[j];
                best = j;
            }
        }
        best
    };

    insert(start, 0, &mut assigned, &mut nearest, &mut dist_sum, &mut sizes);
    for group in 1..g {
        let next = farthest_unassigned(&assigned, &nearest);
        insert(next, group, &mut assigned, &mut nearest, &mut dist_sum, &mut sizes);
    }
    for _ in g..n {
        let next = farthest_unassigned(&assigned, &nearest);
        let group = (0..g)
            .filter(|&c| sizes[c] < caps[c])
            .min_by(|&a, &b| {
                let ma = dist_sum[a][next] / sizes[a] as f64;
                let mb = dist_sum[b][next] / sizes[b] as f64;
                ma.total_cmp(&mb).then(a.cmp(&b))
            })
            .expect("total capacity equals landmark count");
        insert(next, group, &mut assigned, &mut nearest, &mut dist_sum, &mut sizes);
    }

    let group_of = lms
        .iter()
        .zip(&assigned)
        .map(|(l, g)| (l.id, g.expect("every landmark assigned")))
        .collect();
    Ok((PartitionAssignment::new(group_of, g, Criterion::Fps, None)?, order))
}

/// Dispatches on `criterion`. `seed` is required for the seeded criteria.
pub fn partition(
    ls: &LandmarkSet,
    criterion: Criterion,
    g: usize,
    seed: Option<u64>,
    max_iter: usize,
) -> Result<PartitionAssignment> {
    let need_seed = || seed.ok_or_else(|| Error::InvalidInput(format!("criterion `{criterion}` requires a seed")));
    match criterion {
        Criterion::Default => partition_default(ls, g),
        Criterion::Random => partition_random(ls, g, need_seed()?),
        Criterion::KMeans => partition_kmeans(ls, g, need_seed()?, max_iter),
        Criterion::Fps => partition_fps(ls, g),
    }
}

/// Header `# criterion=<c> groups=<g> seed=<s|none>` then `landmark_id group_index` lines.
pub fn write_partition(p: &PartitionAssignment, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let seed = p.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    let mut out = format!("# criterion={} groups={} seed={}\n", p.criterion, p.groups, seed);
    for (id, g) in &p.group_of {
        writeln!(out, "{id} {g}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_partition(path: impl AsRef<Path>) -> Result<PartitionAssignment> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty partition file"))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(path, 1, "missing `# criterion=.. groups=.. seed=..` header"))?;
    let mut criterion = None;
    let mut groups = None;
    let mut seed = None;
    for kv in header.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse(path, 1, format!("malformed header field `{kv}`")))?;
        match k {
            "criterion" => criterion = Some(v.parse::<Criterion>().map_err(|e| Error::parse(path, 1, e.to_string()))?),
            "groups" => groups = Some(v.parse::<usize>().map_err(|_| Error::parse(path, 1, "invalid group count"))?),
            "seed" if v == "none" => {}
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| Error::parse(path, 1, "invalid seed"))?),
            _ => return Err(Error::parse(path, 1, format!("unknown header field `{k}`"))),
        }
    }
    let criterion = criterion.ok_or_else(|| Error::parse(path, 1, "header lacks criterion"))?;
    let groups = groups.ok_or_else(|| Error::parse(path, 1, "header lacks groups"))?;

    let mut group_of = BTreeMap::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::parse(path, i + 1, "expected `landmark_id group_index`"));
        };
        let id: u32 = a.parse().map_err(|_| Error::parse(path, i + 1, format!("invalid landmark id `{a}`")))?;
        let g: usize = b.parse().map_err(|_| Error::parse(path, i + 1, format!("invalid group `{b}`")))?;
        if group_of.insert(id, g).is_some() {
            return Err(Error::parse(path, i + 1, format!("landmark {id} listed twice")));
        }
    }
    PartitionAssignment::new(group_of, groups, criterion, seed)
}
