//! Lloyd's k-means with k-means++ seeding and restarts.
//!
//! Small-n clustering for anchor extraction: tens of points, k of a few.
//! Everything is deterministic given the RNG stream — ties in assignment
//! break toward the lowest centroid index, empty clusters reseed to the
//! point farthest from its assigned centroid (first such index), and the
//! best-of-restarts choice prefers the earlier restart on equal SSE.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub sse: f64,
    /// Per-restart SSE descent: `traces[r][0]` is the SSE of restart `r`'s
    /// seeding, followed by the SSE after each Lloyd iteration.
    pub traces: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut asg = Vec::with_capacity(points.len());
    let mut sse = 0.0;
    for p in points {
        let mut best = 0usize;
        let mut bestd = f64::INFINITY;
        for (i, c) in centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < bestd {
                bestd = d;
                best = i;
            }
        }
        asg.push(best);
        sse += bestd;
    }
    (asg, sse)
}

fn plusplus_seed(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut chosen = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            // All remaining points coincide with existing centroids.
            rng.gen_range(0..points.len())
        };
        centroids.push(points[idx].clone());
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> KMeansFit {
    let k = centroids.len();
    let dim = points[0].len();
    let (mut asg, mut sse) = assign(points, &centroids);
    let mut trace = vec![sse];
    for _ in 0..max_iters {
        // Recompute means.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&asg) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for i in 0..k {
            if counts[i] > 0 {
                for s in sums[i].iter_mut() {
                    *s /= counts[i] as f64;
                }
                centroids[i] = sums[i].clone();
            } else {
                // Reseed an empty cluster to the point farthest from its
                // current centroid (first index on ties).
                let mut far = 0usize;
                let mut fard = -1.0;
                for (j, p) in points.iter().enumerate() {
                    let d = sq_dist(p, &centroids[asg[j]]);
                    if d > fard {
                        fard = d;
                        far = j;
                    }
                }
                centroids[i] = points[far].clone();
            }
        }
        let (new_asg, new_sse) = assign(points, &centroids);
        let stable = new_asg == asg;
        asg = new_asg;
        sse = new_sse;
        trace.push(sse);
        if stable {
            break;
        }
    }
    KMeansFit { centroids, assignment: asg, sse, traces: vec![trace] }
}

/// Cluster `points` into at most `k` groups. With fewer points than `k`, the
/// effective k is the point count (every point its own centroid).
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, restarts: usize, max_iters: usize) -> KMeansFit {
    assert!(k > 0, "k must be positive");
    if points.is_empty() {
        return KMeansFit { centroids: Vec::new(), assignment: Vec::new(), sse: 0.0, traces: Vec::new() };
    }
    let k = k.min(points.len());
    let mut best: Option<KMeansFit> = None;
    let mut traces = Vec::with_capacity(restarts.max(1));
    for _ in 0..restarts.max(1) {
        let seeded = plusplus_seed(points, k, rng);
        let mut fit = lloyd(points, seeded, max_iters);
        traces.push(fit.traces.pop().expect("single-restart trace"));
        let better = match &best {
            None => true,
            Some(b) => fit.sse < b.sse,
        };
        if better {
            best = Some(fit);
        }
    }
    let mut best = best.unwrap();
    best.traces = traces;
    best
}
