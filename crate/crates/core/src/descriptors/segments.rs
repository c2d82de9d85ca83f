//! Soft k-means colour segmentation on the (a, b) chromaticity plane.

use candle_core::{DType, Device, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colour::{lab_to_rgb, LabImage, RgbImage};
use crate::error::{Error, Result};

/// Nominal chromaticity range for a and b.
pub const AB_RANGE: (f64, f64) = (-128.0, 127.0);

/// Prior mass pulling an update towards the previous centroid. Keeps a cluster that
/// lost all of its pixels where it was instead of dividing by zero.
const CENTROID_PRIOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ColourSegmentationMap {
    /// `(H, W, K)` soft memberships; each pixel's row sums to one.
    pub assignments: Tensor,
    /// `(K, 2)` cluster centres in (a, b).
    pub centroids: Tensor,
    /// `(K, 2)` centres the iteration started from. Re-extraction from another image
    /// starts here too so that the two results are comparable cluster by cluster.
    pub init_centroids: Tensor,
    pub temperature: f64,
}

impl ColourSegmentationMap {
    pub fn clusters(&self) -> usize {
        self.centroids.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.assignments.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.assignments.dims()[1]
    }

    pub fn centroid_list(&self) -> Result<Vec<[f64; 2]>> {
        Ok(self
            .centroids
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .map(|r| [r[0], r[1]])
            .collect())
    }

    /// Index of the strongest cluster per pixel, row-major.
    pub fn argmax_labels(&self) -> Result<Vec<u32>> {
        let (h, w, k) = self.assignments.dims3()?;
        Ok(self
            .assignments
            .reshape((h * w, k))?
            .argmax(1)?
            .to_vec1::<u32>()?)
    }

    /// Total soft membership per cluster.
    pub fn cluster_mass(&self) -> Result<Vec<f64>> {
        let (h, w, k) = self.assignments.dims3()?;
        Ok(self
            .assignments
            .reshape((h * w, k))?
            .sum(0)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationRender {
    /// `(H, W, 2)` assignment-weighted centroid per pixel.
    pub ab_render: Tensor,
    /// The render at constant L = 50, for display.
    pub display_rgb: RgbImage,
}

/// Result of running the fixed-length soft k-means iteration.
#[derive(Debug, Clone)]
pub struct SoftKMeans {
    /// `(P, K)` memberships under the final centroids.
    pub assignments: Tensor,
    pub centroids: Tensor,
    /// Free energy before the first update and after each update.
    pub free_energy: Vec<f64>,
}

/// Squared distances `(P, K)` between pixels `(P, 2)` and centroids `(K, 2)`.
fn squared_distances(ab: &Tensor, centroids: &Tensor) -> Result<Tensor> {
    let (p, _) = ab.dims2()?;
    let (k, _) = centroids.dims2()?;
    let diff = ab
        .reshape((p, 1, 2))?
        .broadcast_sub(&centroids.reshape((1, k, 2))?)?;
    Ok(diff.sqr()?.sum(2)?)
}

/// Row-wise softmax of `-d / temperature`.
pub(crate) fn soft_assign(dist: &Tensor, temperature: f64) -> Result<Tensor> {
    let logits = dist.affine(-1.0 / temperature, 0.0)?;
    let shift = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// `-T * sum_p logsumexp_k(-d_pk / T)`, the objective soft k-means descends.
fn free_energy(dist: &Tensor, temperature: f64) -> Result<f64> {
    let d = dist.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut total = 0.0;
    for row in d {
        let m = row.iter().map(|v| -v / temperature).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (-v / temperature - m).exp()).sum();
        total += -temperature * (m + s.ln());
    }
    Ok(total)
}

/// Soft k-means from fixed initial centroids for exactly `iterations` updates.
///
/// No convergence test: every call runs the same ops, so the result is
/// differentiable in both the pixels and the initial centroids.
pub fn soft_kmeans(ab: &Tensor, init: &Tensor, iterations: usize, temperature: f64) -> Result<SoftKMeans> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
    }
    let (_, two) = ab.dims2()?;
    let (_, two_c) = init.dims2()?;
    if two != 2 || two_c != 2 {
        return Err(Error::shape("soft k-means expects (P, 2) pixels and (K, 2) centroids"));
    }
    let mut centroids = init.clone();
    let mut dist = squared_distances(ab, &centroids)?;
    let mut energy = vec![free_energy(&dist, temperature)?];
    for _ in 0..iterations {
        let a = soft_assign(&dist, temperature)?;
        let num = a.t()?.matmul(ab)?;
        let den = a.sum(0)?.unsqueeze(1)?;
        let num = (num + centroids.affine(CENTROID_PRIOR, 0.0)?)?;
        let den = den.affine(1.0, CENTROID_PRIOR)?;
        centroids = num.broadcast_div(&den)?;
        dist = squared_distances(ab, &centroids)?;
        energy.push(free_energy(&dist, temperature)?);
    }
    let assignments = soft_assign(&dist, temperature)?;
    Ok(SoftKMeans {
        assignments,
        centroids,
        free_energy: energy,
    })
}

/// Deterministic (maximin) k-means++ seeding over a seeded subsample of the pixels.
///
/// The first seed is the candidate nearest the mean colour, each further seed the
/// candidate farthest from all seeds so far. Unlike sampled seeding this only jumps
/// at exact distance ties, so small pixel changes keep the same seeds. Pixels are
/// sorted by (a, b) before subsampling so the result ignores pixel order.
pub fn kmeans_pp_indices(ab: &[[f64; 2]], k: usize, seed: u64, subsample: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ab.len()).collect();
    order.sort_by(|&i, &j| {
        ab[i][0]
            .total_cmp(&ab[j][0])
            .then(ab[i][1].total_cmp(&ab[j][1]))
    });
    let candidates: Vec<usize> = if subsample > 0 && order.len() > subsample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, order.len(), subsample).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| order[i]).collect()
    } else {
        order
    };
    let dist2 = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
    let n = candidates.len() as f64;
    let mean = candidates
        .iter()
        .fold([0.0, 0.0], |m, &p| [m[0] + ab[p][0] / n, m[1] + ab[p][1] / n]);
    let argbest = |score: &dyn Fn(usize) -> f64| {
        (0..candidates.len()).fold(0, |best, i| if score(i) > score(best) { i } else { best })
    };
    let first = argbest(&|i| -dist2(ab[candidates[i]], mean));
    let mut chosen = vec![candidates[first]];
    let mut nearest: Vec<f64> = candidates.iter().map(|&p| dist2(ab[p], ab[chosen[0]])).collect();
    while chosen.len() < k {
        let c = candidates[argbest(&|i| nearest[i])];
        chosen.push(c);
        for (i, &p) in candidates.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(ab[p], ab[c]));
        }
    }
    chosen
}

/// Parameters of the colour clustering.
#[derive(Debug, Clone, Copy)]
pub struct SegmentParams {
    pub clusters: usize,
    pub iterations: usize,
    pub temperature: f64,
    pub seed: u64,
    pub subsample: usize,
}

pub fn extract_colour_segments(lab: &LabImage, params: &SegmentParams) -> Result<ColourSegmentationMap> {
    if params.clusters < 1 {
        return Err(Error::config("need at least one cluster"));
    }
    if params.iterations < 1 {
        return Err(Error::config("need at least one k-means iteration"));
    }
    let (h, w) = (lab.height(), lab.width());
    let ab = lab.ab_pixels()?;
    let values: Vec<[f64; 2]> = ab
        .detach()
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?
        .into_iter()
        .map(|r| [r[0], r[1]])
        .collect();
    let seeds = kmeans_pp_indices(&values, params.clusters, params.seed, params.subsample);
    let seeds = Tensor::new(seeds.iter().map(|&i| i as u32).collect::<Vec<_>>(), &Device::Cpu)?;
    let init = ab.index_select(&seeds, 0)?;
    let km = soft_kmeans(&ab, &init, params.iterations, params.temperature)?;
    Ok(ColourSegmentationMap {
        assignments: km.assignments.reshape((h, w, params.clusters))?,
        centroids: km.centroids,
        init_centroids: init.detach(),
        temperature: params.temperature,
    })
}

/// Re-runs the clustering on another image from this map's starting centroids.
pub fn resegment_from(lab: &LabImage, reference: &ColourSegmentationMap, iterations: usize) -> Result<ColourSegmentationMap> {
    let ab = lab.ab_pixels()?;
    let init = reference.init_centroids.to_dtype(ab.dtype())?;
    let km = soft_kmeans(&ab, &init, iterations, reference.temperature)?;
    Ok(ColourSegmentationMap {
        assignments: km
            .assignments
            .reshape((lab.height(), lab.width(), reference.clusters()))?,
        centroids: km.centroids,
        init_centroids: init,
        temperature: reference.temperature,
    })
}

/// `(H, W, 2)` per-pixel convex combination of centroids.
pub fn render_ab(seg: &ColourSegmentationMap) -> Result<Tensor> {
    let (h, w, k) = seg.assignments.dims3()?;
    Ok(seg
        .assignments
        .reshape((h * w, k))?
        .matmul(&seg.centroids)?
        .reshape((h, w, 2))?)
}

pub fn render_segmentation(seg: &ColourSegmentationMap) -> Result<SegmentationRender> {
    let ab_render = render_ab(seg)?;
    let (h, w, _) = ab_render.dims3()?;
    let l = Tensor::full(50.0, (h, w), &Device::Cpu)?.to_dtype(ab_render.dtype())?;
    let lab = LabImage::new(
        l,
        ab_render.narrow(2, 0, 1)?.squeeze(2)?,
        ab_render.narrow(2, 1, 1)?.squeeze(2)?,
    )?;
    Ok(SegmentationRender {
        display_rgb: lab_to_rgb(&lab)?,
        ab_render,
    })
}

/// Replaces one centroid, leaving assignments alone.
pub fn recolour_region(seg: &ColourSegmentationMap, cluster: usize, new_ab: [f64; 2]) -> Result<ColourSegmentationMap> {
    let k = seg.clusters();
    if cluster >= k {
        return Err(Error::Index {
            what: "clusters",
            index: cluster,
            len: k,
        });
    }
    let (lo, hi) = AB_RANGE;
    if new_ab.iter().any(|v| !(lo..=hi).contains(v)) {
        return Err(Error::Range(format!(
            "chromaticity ({}, {}) outside [{lo}, {hi}]",
            new_ab[0], new_ab[1]
        )));
    }
    let dtype = seg.centroids.dtype();
    let mut rows = seg.centroids.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let current = seg.centroids.to_dtype(DType::F64)?.get(cluster)?.to_vec1::<f64>()?;
    if current == new_ab {
        return Ok(seg.clone());
    }
    rows[cluster] = new_ab.to_vec();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let centroids = Tensor::from_vec(flat, (k, 2), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(ColourSegmentationMap {
        centroids,
        ..seg.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn lab_from_ab(h: usize, w: usize, ab: &[[f64; 2]]) -> LabImage {
        let dev = Device::Cpu;
        let a: Vec<f64> = ab.iter().map(|v| v[0]).collect();
        let b: Vec<f64> = ab.iter().map(|v| v[1]).collect();
        LabImage::new(
            Tensor::full(50f64, (h, w), &dev).unwrap(),
            Tensor::from_vec(a, (h, w), &dev).unwrap(),
            Tensor::from_vec(b, (h, w), &dev).unwrap(),
        )
        .unwrap()
    }

    fn pseudo_random_ab(n: usize, salt: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        (0..n)
            .map(|_| [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)])
            .collect()
    }

    fn params(k: usize, t: f64) -> SegmentParams {
        SegmentParams {
            clusters: k,
            iterations: 10,
            temperature: t,
            seed: 3,
            subsample: 1024,
        }
    }

    fn sorted(mut c: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        c.sort_by(|x, y| x[0].total_cmp(&y[0]).then(x[1].total_cmp(&y[1])));
        c
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let ab = pseudo_random_ab(36, 1);
        let seg = extract_colour_segments(&lab_from_ab(6, 6, &ab), &params(1, 25.0)).unwrap();
        let c = seg.centroid_list().unwrap()[0];
        let mean_a = ab.iter().map(|v| v[0]).sum::<f64>() / 36.0;
        let mean_b = ab.iter().map(|v| v[1]).sum::<f64>() / 36.0;
        assert!((c[0] - mean_a).abs() < 1e-6 && (c[1] - mean_b).abs() < 1e-6);
        let a = seg.assignments.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn identical_pixels_collapse_centroids() {
        let ab = vec![[12.0, -7.0]; 16];
        let seg = extract_colour_segments(&lab_from_ab(4, 4, &ab), &params(3, 25.0)).unwrap();
        for c in seg.centroid_list().unwrap() {
            assert!((c[0] - 12.0).abs() < 1e-12 && (c[1] + 7.0).abs() < 1e-12);
        }
        let a = seg.assignments.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn pixel_permutation_permutes_assignments_only() {
        let ab = pseudo_random_ab(48, 9);
        let perm: Vec<usize> = (0..48).map(|i| (i * 29 + 5) % 48).collect();
        let permuted: Vec<[f64; 2]> = perm.iter().map(|&i| ab[i]).collect();
        let s1 = extract_colour_segments(&lab_from_ab(6, 8, &ab), &params(4, 25.0)).unwrap();
        let s2 = extract_colour_segments(&lab_from_ab(6, 8, &permuted), &params(4, 25.0)).unwrap();
        let c1 = s1.centroid_list().unwrap();
        let c2 = s2.centroid_list().unwrap();
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
        }
        let a1 = s1.assignments.reshape((48, 4)).unwrap().to_vec2::<f64>().unwrap();
        let a2 = s2.assignments.reshape((48, 4)).unwrap().to_vec2::<f64>().unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for k in 0..4 {
                assert!((a2[j][k] - a1[i][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_colour_fixed_point() {
        let ab: Vec<[f64; 2]> = (0..64)
            .map(|i| if i % 8 < 4 { [-40.0, 0.0] } else { [40.0, 0.0] })
            .collect();
        let seg = extract_colour_segments(&lab_from_ab(8, 8, &ab), &params(2, 1.0)).unwrap();
        let c = sorted(seg.centroid_list().unwrap());
        assert!((c[0][0] + 40.0).abs() < 1e-3 && c[0][1].abs() < 1e-3);
        assert!((c[1][0] - 40.0).abs() < 1e-3 && c[1][1].abs() < 1e-3);
        let a = seg.assignments.reshape((64, 2)).unwrap().to_vec2::<f64>().unwrap();
        let off = a.iter().map(|r| r[0].min(r[1])).fold(0.0, f64::max);
        assert!(off < 1e-3);
    }

    #[test]
    fn centroids_stay_in_the_convex_hull() {
        let ab = pseudo_random_ab(64, 4);
        let seg = extract_colour_segments(&lab_from_ab(8, 8, &ab), &params(5, 25.0)).unwrap();
        let (amin, amax) = ab.iter().fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v[0]), hi.max(v[0])));
        let (bmin, bmax) = ab.iter().fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v[1]), hi.max(v[1])));
        for c in seg.centroid_list().unwrap() {
            assert!(c[0] >= amin - 1e-9 && c[0] <= amax + 1e-9);
            assert!(c[1] >= bmin - 1e-9 && c[1] <= bmax + 1e-9);
        }
    }

    #[test]
    fn kmeans_pp_picks_distinct_colours_first() {
        let ab = vec![[0.0, 0.0], [0.0, 0.0], [50.0, 0.0], [50.0, 0.0]];
        let idx = kmeans_pp_indices(&ab, 2, 11, 0);
        assert_ne!(ab[idx[0]], ab[idx[1]]);
    }

    #[test]
    fn recolour_rejects_bad_index_and_range() {
        let ab = pseudo_random_ab(16, 2);
        let seg = extract_colour_segments(&lab_from_ab(4, 4, &ab), &params(2, 25.0)).unwrap();
        assert!(matches!(recolour_region(&seg, 2, [0.0, 0.0]), Err(Error::Index { .. })));
        assert!(matches!(recolour_region(&seg, 0, [0.0, 300.0]), Err(Error::Range(_))));
    }

    #[test]
    fn recolour_to_same_centroid_is_noop() {
        let ab = pseudo_random_ab(16, 2);
        let seg = extract_colour_segments(&lab_from_ab(4, 4, &ab), &params(2, 25.0)).unwrap();
        let c = seg.centroid_list().unwrap()[1];
        let again = recolour_region(&seg, 1, c).unwrap();
        assert_eq!(
            again.centroids.to_vec2::<f64>().unwrap(),
            seg.centroids.to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn display_render_is_grey_for_neutral_centroids() {
        let ab = vec![[0.0, 0.0]; 4];
        let seg = extract_colour_segments(&lab_from_ab(2, 2, &ab), &params(1, 25.0)).unwrap();
        let r = render_segmentation(&seg).unwrap();
        let px = r.display_rgb.to_hwc().unwrap();
        // L = 50 neutral grey is sRGB ~0.4663
        assert!(px.iter().all(|v| (v - px[0]).abs() < 1e-4));
        assert!((px[0] - 0.4663).abs() < 1e-3, "{}", px[0]);
    }
}
