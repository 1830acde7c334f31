//! Reproducible synthetic ID/OOD data.
//!
//! ID classes are isotropic Gaussian blobs whose samples pass through a fixed
//! random warp `x ↦ x + w·tanh(Bx)`. The near-OOD blob sits halfway between
//! two ID means; the far-OOD blob sits well outside the ID support.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Norm of each ID class mean.
    pub class_radius: f64,
    pub within_std: f64,
    pub warp_strength: f64,
    /// Far-OOD offset in units of the mean ID spread.
    pub far_factor: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            num_classes: 4,
            input_dim: 16,
            class_radius: 3.0,
            within_std: 1.0,
            warp_strength: 1.0,
            far_factor: 12.0,
            n_train: 2000,
            n_test: 500,
            n_ood: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub id_train: EmbeddingSet,
    pub id_test: EmbeddingSet,
    pub ood_near: EmbeddingSet,
    pub ood_far: EmbeddingSet,
    pub params: GeneratorParams,
    pub seed: u64,
    /// Pre-warp blob centers, one row per ID class.
    pub class_centers: Array2<f64>,
}

impl SyntheticTask {
    pub fn num_classes(&self) -> usize {
        self.params.num_classes
    }
}

struct Warp {
    mix: Array2<f64>,
    strength: f64,
}

impl Warp {
    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let bent = self.mix.dot(&x).mapv(f64::tanh);
        &x + &(bent * self.strength)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| StandardNormal.sample(rng))
}

fn sample_blob(
    rng: &mut ChaCha8Rng,
    warp: &Warp,
    center: &Array1<f64>,
    std: f64,
    n: usize,
) -> Array2<f64> {
    let d = center.len();
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let x = center + &(gaussian_vec(rng, d) * std);
        row.assign(&warp.apply(x.view()));
    }
    out
}

fn labeled_split(
    rng: &mut ChaCha8Rng,
    warp: &Warp,
    centers: &Array2<f64>,
    std: f64,
    n: usize,
) -> Result<EmbeddingSet> {
    let k = centers.nrows();
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let d = centers.ncols();
    let mut data = Array2::zeros((n, d));
    for (mut row, &y) in data.rows_mut().into_iter().zip(&labels) {
        let x = &centers.row(y) + &(gaussian_vec(rng, d) * std);
        row.assign(&warp.apply(x.view()));
    }
    EmbeddingSet::new(data, Some(labels))
}

fn dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Empirical class means of a labeled set and the mean distance of a sample
/// to its class mean.
pub fn id_means_and_spread(set: &EmbeddingSet, num_classes: usize) -> Result<(Array2<f64>, f64)> {
    let labels = set.require_labels()?;
    let fit = crate::stats::fit_batch_mle(set.data(), labels, num_classes)?;
    let spread = set
        .data()
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(z, &y)| dist(z, fit.class_means.row(y)))
        .sum::<f64>()
        / set.len() as f64;
    Ok((fit.class_means, spread))
}

/// Mean over OOD rows of the distance to the nearest ID class mean.
pub fn mean_nearest_mean_distance(ood: &EmbeddingSet, means: &Array2<f64>) -> f64 {
    ood.data()
        .rows()
        .into_iter()
        .map(|z| {
            means
                .rows()
                .into_iter()
                .map(|m| dist(z, m))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / ood.len() as f64
}

pub fn make_synthetic_task(params: &GeneratorParams, seed: u64) -> Result<SyntheticTask> {
    let p = params;
    if p.num_classes < 2 {
        return Err(Error::InvalidParams("need at least 2 ID classes".into()));
    }
    if p.input_dim == 0 || p.n_train < p.num_classes || p.n_test == 0 || p.n_ood == 0 {
        return Err(Error::InvalidParams("dataset sizes and input_dim must be positive".into()));
    }
    for (name, v) in [
        ("class_radius", p.class_radius),
        ("within_std", p.within_std),
        ("far_factor", p.far_factor),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidParams(format!("{name} must be positive, got {v}")));
        }
    }
    if !(p.warp_strength >= 0.0) || !p.warp_strength.is_finite() {
        return Err(Error::InvalidParams("warp_strength must be >= 0".into()));
    }

    let d = p.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = Array2::from_shape_fn((d, d), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v / (d as f64).sqrt()
    });
    let warp = Warp {
        mix,
        strength: p.warp_strength,
    };

    let mut centers = Array2::zeros((p.num_classes, d));
    for mut row in centers.rows_mut() {
        let g = gaussian_vec(&mut rng, d);
        let norm = g.dot(&g).sqrt();
        row.assign(&(g * (p.class_radius / norm)));
    }
    let centroid = centers.mean_axis(ndarray::Axis(0)).expect("K >= 2");

    let id_train = labeled_split(&mut rng, &warp, &centers, p.within_std, p.n_train)?.with_tag("id_train");
    let id_test = labeled_split(&mut rng, &warp, &centers, p.within_std, p.n_test)?.with_tag("id_test");

    let near_center = (&centers.row(0) + &centers.row(1)) * 0.5;
    let ood_near = EmbeddingSet::new(
        sample_blob(&mut rng, &warp, &near_center, p.within_std, p.n_ood),
        None,
    )?
    .with_tag("ood_near");

    // Offset beyond the ID support, plus slack for the bounded warp.
    let id_spread_guess = p.within_std * (d as f64).sqrt();
    let max_center = centers
        .rows()
        .into_iter()
        .map(|c| dist(c, centroid.view()))
        .fold(0.0, f64::max);
    let warp_slack = 2.0 * p.warp_strength * (d as f64).sqrt();
    let far_radius = p.far_factor * id_spread_guess + max_center + warp_slack;
    let dir = gaussian_vec(&mut rng, d);
    let far_center = &centroid + &(dir.clone() * (far_radius / dir.dot(&dir).sqrt()));
    let ood_far = EmbeddingSet::new(
        sample_blob(&mut rng, &warp, &far_center, p.within_std, p.n_ood),
        None,
    )?
    .with_tag("ood_far");

    let (means, spread) = id_means_and_spread(&id_train, p.num_classes)?;
    let far_dist = mean_nearest_mean_distance(&ood_far, &means);
    if far_dist < 10.0 * spread {
        return Err(Error::InvalidParams(format!(
            "far-OOD blob too close: {far_dist:.3} < 10 x spread {spread:.3}"
        )));
    }

    Ok(SyntheticTask {
        id_train,
        id_test,
        ood_near,
        ood_far,
        params: p.clone(),
        seed,
        class_centers: centers,
    })
}
