use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::records::{Dataset, FeatureRecord, Modality, WordTable};
use crate::error::{Error, Result};

/// Parameters of the synthetic cross-modal generator.
///
/// Class centroids lie on a sphere of radius `radius` inside a random
/// `latent_dim`-dimensional subspace of the feature space. Image features are
/// centroid plus isotropic noise; sketch features additionally receive a fixed
/// translation of norm `modality_shift`. Word vectors are a fixed random linear
/// image of the latent centroids plus small noise, so word-vector distances
/// track centroid distances.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class_per_modality: usize,
    pub d_in: usize,
    pub d_w: usize,
    pub modality_shift: f64,
    pub noise: f64,
    pub latent_dim: usize,
    pub radius: f64,
    pub word_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class_per_modality: 40,
            d_in: 32,
            d_w: 300,
            modality_shift: 1.0,
            noise: 0.3,
            latent_dim: 6,
            radius: 2.0,
            word_noise: 0.05,
            seed: 0,
        }
    }
}

/// Zero-padded class label used by the generator.
pub fn synth_label(class: usize) -> String {
    format!("class_{class:03}")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Generates a synthetic dataset and its matching word-vector table.
pub fn synth_generate(config: &SynthConfig) -> Result<(Dataset, WordTable)> {
    if config.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if config.d_in < 4 {
        return Err(Error::Config("synthetic d_in must be at least 4".into()));
    }
    if config.per_class_per_modality == 0 || config.d_w == 0 {
        return Err(Error::Config(
            "per_class_per_modality and d_w must be positive".into(),
        ));
    }
    if config.latent_dim == 0 || config.latent_dim > config.d_in {
        return Err(Error::Config(format!(
            "latent_dim must lie in 1..={}",
            config.d_in
        )));
    }
    if config.noise < 0.0 || config.modality_shift < 0.0 || config.word_noise < 0.0 {
        return Err(Error::Config("noise levels and shift must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (l, d) = (config.latent_dim, config.d_in);

    // Orthonormal embedding of the latent subspace (Gram-Schmidt).
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(l);
    while basis.len() < l {
        let mut v = gaussian_vec(&mut rng, d);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }

    let latent: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| {
            let mut z = gaussian_vec(&mut rng, l);
            normalize(&mut z);
            z.iter_mut().for_each(|x| *x *= config.radius);
            z
        })
        .collect();
    let centroids: Vec<Vec<f64>> = latent
        .iter()
        .map(|z| {
            let mut c = vec![0.0; d];
            for (zk, b) in z.iter().zip(&basis) {
                c.iter_mut().zip(b).for_each(|(ci, bi)| *ci += zk * bi);
            }
            c
        })
        .collect();

    let mut shift = gaussian_vec(&mut rng, d);
    normalize(&mut shift);
    shift.iter_mut().for_each(|x| *x *= config.modality_shift);

    let projection: Vec<Vec<f64>> = (0..l).map(|_| gaussian_vec(&mut rng, config.d_w)).collect();
    let scale = 1.0 / (l as f64).sqrt();

    let mut records = Vec::with_capacity(2 * config.classes * config.per_class_per_modality);
    for modality in [Modality::Sketch, Modality::Image] {
        for (c, centroid) in centroids.iter().enumerate() {
            for k in 0..config.per_class_per_modality {
                let noise = gaussian_vec(&mut rng, d);
                let feature = centroid
                    .iter()
                    .zip(&noise)
                    .zip(&shift)
                    .map(|((&m, &e), &s)| {
                        let v = m + config.noise * e;
                        if modality == Modality::Sketch {
                            v + s
                        } else {
                            v
                        }
                    })
                    .collect();
                let prefix = if modality == Modality::Sketch { "s" } else { "i" };
                records.push(FeatureRecord {
                    id: format!("{prefix}_{c:03}_{k:04}"),
                    modality,
                    label: synth_label(c),
                    feature,
                });
            }
        }
    }

    let words = latent
        .iter()
        .enumerate()
        .map(|(c, z)| {
            let mut w: Vec<f64> = (0..config.d_w)
                .map(|j| scale * z.iter().zip(&projection).map(|(zk, p)| zk * p[j]).sum::<f64>())
                .collect();
            let noise = gaussian_vec(&mut rng, config.d_w);
            w.iter_mut()
                .zip(noise)
                .for_each(|(x, e)| *x += config.word_noise * e);
            (synth_label(c), w)
        })
        .collect();

    Ok((Dataset::new(d, records)?, WordTable::new(words)?))
}
