use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lloyd's k-means on row-major `points` (`n × dim`) with a fixed number of
/// iterations. Initial centroids are distinct points sampled with `seed`;
/// a cluster that empties keeps its previous centroid. Assignment ties go
/// to the lower cluster id.
pub(crate) fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> (Vec<f64>, Vec<u32>) {
    let n = points.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init: Vec<usize> = sample(&mut rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<f64> = init
        .iter()
        .flat_map(|&i| points[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    let mut assign = vec![0u32; n];
    for _ in 0..iters {
        assign_points(points, dim, &centroids, &mut assign);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&points[i * dim..(i + 1) * dim])
            {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
    }
    assign_points(points, dim, &centroids, &mut assign);
    (centroids, assign)
}

fn assign_points(points: &[f64], dim: usize, centroids: &[f64], assign: &mut [u32]) {
    let k = centroids.len() / dim;
    for (i, a) in assign.iter_mut().enumerate() {
        let x = &points[i * dim..(i + 1) * dim];
        let mut best = (f64::INFINITY, 0u32);
        for c in 0..k {
            let d: f64 = x
                .iter()
                .zip(&centroids[c * dim..(c + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, c as u32);
            }
        }
        *a = best.1;
    }
}
