//! Synthetic labeled cubes for end-to-end checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::cube::HsiCube;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    /// Leave a one-pixel unlabeled border.
    pub background: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 16,
            bands: 8,
            classes: 3,
            noise_sigma: 0.05,
            seed: 7,
            background: false,
        }
    }
}

/// Spectral signature of `class` (1-based): a Gaussian bump whose centre
/// moves across the bands with the class index, on a constant floor.
pub fn class_signature(class: usize, classes: usize, bands: usize) -> Vec<f32> {
    let centre = (class as f32 - 0.5) / classes as f32 * bands as f32;
    let width = (bands as f32 / (2.0 * classes as f32)).max(0.75);
    (0..bands)
        .map(|b| {
            let z = (b as f32 + 0.5 - centre) / width;
            0.2 + (-0.5 * z * z).exp()
        })
        .collect()
}

/// Class `c` owns the `c`-th tile of a `⌈√K⌉`-column grid of rectangles;
/// leftover tiles repeat classes cyclically.
pub fn synthesize_cube(spec: &SynthSpec) -> Result<HsiCube> {
    let SynthSpec {
        size,
        bands,
        classes,
        noise_sigma,
        seed,
        background,
    } = *spec;
    if size < 2 || bands == 0 || classes == 0 || noise_sigma.is_nan() || noise_sigma < 0.0 {
        return Err(Error::Config(format!("bad synthetic spec {spec:?}")));
    }
    let cols = (classes as f64).sqrt().ceil() as usize;
    let rows = classes.div_ceil(cols);
    let signatures: Vec<Vec<f32>> = (1..=classes).map(|c| class_signature(c, classes, bands)).collect();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut data = Vec::with_capacity(size * size * bands);
    let mut labels = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let border = r == 0 || c == 0 || r == size - 1 || c == size - 1;
            let label = if background && border {
                0
            } else {
                let tile = (r * rows / size) * cols + c * cols / size;
                tile % classes + 1
            };
            labels.push(label as i32);
            for b in 0..bands {
                let base = if label == 0 { 0.0 } else { signatures[label - 1][b] };
                data.push(base + noise.sample(&mut rng));
            }
        }
    }
    HsiCube::new((size, size, bands), classes, data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn distance(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
    }

    #[test]
    fn noiseless_cube_is_separable() {
        let cube = synthesize_cube(&SynthSpec {
            noise_sigma: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!((cube.height, cube.width, cube.bands), (16, 16, 8));
        for r in 0..16 {
            for c in 0..16 {
                let l = cube.label(r, c) as usize;
                assert_eq!(cube.pixel(r, c), class_signature(l, 3, 8).as_slice());
            }
        }
    }

    #[test]
    fn signatures_are_far_apart() {
        for (k, b) in [(3, 8), (5, 16), (16, 200)] {
            for i in 1..=k {
                for j in i + 1..=k {
                    let d = distance(&class_signature(i, k, b), &class_signature(j, k, b));
                    assert!(d > 5.0 * 0.05, "{k} classes, {b} bands: {d}");
                }
            }
        }
    }

    #[test]
    fn labels_cover_everything_without_background() {
        let cube = synthesize_cube(&SynthSpec::default()).unwrap();
        assert!(cube.labels.iter().all(|&l| l > 0));
        assert!(cube.class_counts().iter().all(|&n| n > 0));
        let bg = synthesize_cube(&SynthSpec {
            background: true,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(bg.labels.iter().filter(|&&l| l == 0).count(), 4 * 15);
    }
}
