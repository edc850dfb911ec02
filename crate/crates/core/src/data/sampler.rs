//! Identity-balanced batch sampling with flip and random-erasing
//! augmentation.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSet;
use crate::error::{arg_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Augment {
    pub flip_p: f64,
    pub erase_p: f64,
    /// Erased area as a fraction of the image, `[lo, hi]`.
    pub erase_area: (f64, f64),
    pub erase_fill: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Self { flip_p: 0.5, erase_p: 0.5, erase_area: (0.02, 0.2), erase_fill: 0.5 }
    }
}

impl Augment {
    pub const NONE: Augment = Augment { flip_p: 0.0, erase_p: 0.0, erase_area: (0.02, 0.2), erase_fill: 0.5 };

    /// Augments one `3×H×W` image in place.
    pub fn apply<T: Real>(&self, img: &mut [T], h: usize, w: usize, rng: &mut ChaCha8Rng) {
        let plane = h * w;
        if rng.random_bool(self.flip_p) {
            for c in 0..3 {
                for y in 0..h {
                    img[c * plane + y * w..c * plane + (y + 1) * w].reverse();
                }
            }
        }
        if rng.random_bool(self.erase_p) {
            // rejection sampling of an in-bounds rectangle, up to ten tries
            for _ in 0..10 {
                let area = rng.random_range(self.erase_area.0..=self.erase_area.1) * plane as f64;
                let aspect = rng.random_range(0.3f64..=3.3);
                let eh = (area * aspect).sqrt().round() as usize;
                let ew = (area / aspect).sqrt().round() as usize;
                if eh == 0 || ew == 0 || eh >= h || ew >= w {
                    continue;
                }
                let y0 = rng.random_range(0..=h - eh);
                let x0 = rng.random_range(0..=w - ew);
                let fill = T::of(self.erase_fill);
                for c in 0..3 {
                    for y in y0..y0 + eh {
                        img[c * plane + y * w + x0..c * plane + y * w + x0 + ew].fill(fill);
                    }
                }
                break;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    /// Class labels in `0..K`.
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
}

/// `e` identities × `m` instances each, identity-major. Identities are drawn
/// without replacement; instances without replacement when the identity has
/// at least `m` images, with replacement otherwise.
pub fn pk_sample<T: Real>(set: &ImageSet<T>, e: usize, m: usize, augment: &Augment, rng: &mut ChaCha8Rng) -> Result<Batch<T>> {
    let by_id: Vec<Vec<usize>> = set.rows_by_id().into_values().collect();
    if e == 0 || m == 0 {
        return arg_err("batch needs at least one identity and one instance");
    }
    if by_id.len() < e {
        return arg_err(format!("need {e} identities per batch, dataset has {}", by_id.len()));
    }
    let (labels_all, _) = set.class_labels();
    let mut rows = Vec::with_capacity(e * m);
    for k in sample(rng, by_id.len(), e).into_vec() {
        let pool = &by_id[k];
        if pool.len() >= m {
            rows.extend(sample(rng, pool.len(), m).into_iter().map(|i| pool[i]));
        } else {
            rows.extend((0..m).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }
    let mut sub = set.select(&rows)?;
    let (h, w) = set.image_size();
    let per = 3 * h * w;
    for chunk in sub.images.data_mut().chunks_mut(per) {
        augment.apply(chunk, h, w, rng);
    }
    Ok(Batch { images: sub.images, labels: rows.iter().map(|&r| labels_all[r]).collect(), ids: sub.ids, cams: sub.cams })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn set(ids: &[usize]) -> ImageSet<f32> {
        let n = ids.len();
        ImageSet::new(Tensor::from_fn(&[n, 3, 4, 4], |i| (i % 17) as f32 / 17.0), ids.to_vec(), vec![0; n]).unwrap()
    }

    #[test]
    fn composition_is_balanced() {
        let s = set(&[0, 0, 0, 3, 3, 3, 5, 5, 7, 7, 7, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let b = pk_sample(&s, 3, 4, &Augment::default(), &mut rng).unwrap();
            assert_eq!(b.images.shape()[0], 12);
            for chunk in b.ids.chunks(4) {
                assert!(chunk.iter().all(|&i| i == chunk[0]));
            }
            let mut distinct = b.ids.clone();
            distinct.dedup();
            assert_eq!(distinct.len(), 3);
            for (&l, &id) in b.labels.iter().zip(&b.ids) {
                assert_eq!(l, [0, 3, 5, 7].iter().position(|&x| x == id).unwrap());
            }
        }
    }

    #[test]
    fn fixed_seed_repeats() {
        let s = set(&[0, 0, 1, 1, 2, 2, 3, 3]);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            (0..5).map(|_| pk_sample(&s, 2, 2, &Augment::default(), &mut rng).unwrap().images.into_data()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn too_few_identities() {
        let s = set(&[0, 0, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pk_sample(&s, 3, 2, &Augment::NONE, &mut rng).is_err());
    }

    #[test]
    fn flip_reverses_rows() {
        let mut img: Vec<f64> = (0..3 * 2 * 3).map(|i| i as f64).collect();
        let aug = Augment { flip_p: 1.0, erase_p: 0.0, ..Default::default() };
        aug.apply(&mut img, 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&img[..6], &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn erasing_fills_a_bounded_rectangle() {
        let aug = Augment { flip_p: 0.0, erase_p: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut img = vec![0.0f64; 3 * 64 * 32];
            aug.apply(&mut img, 64, 32, &mut rng);
            let erased = img[..64 * 32].iter().filter(|&&v| v == 0.5).count();
            assert!(erased == 0 || (erased as f64) <= 0.2 * 2048.0 * 1.2, "{erased}");
        }
    }
}
