//! Deterministic synthetic pedestrians.
//!
//! Each image is a torso ellipse over two leg rectangles, filled with a
//! two-colour stripe texture fixed by the identity, on a background drawn
//! independently of the identity. Images are quantized to 8 bits so the
//! in-memory and on-disk copies agree exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageSet, ManifestRow, SplitTag, MANIFEST};
use crate::error::{arg_err, io_err, Result};
use crate::image::{quantize, write_ppm};
use crate::tensor::Tensor;

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.15],
    [0.15, 0.25, 0.90],
    [0.95, 0.85, 0.10],
    [0.80, 0.15, 0.80],
    [0.10, 0.80, 0.85],
    [0.98, 0.98, 0.98],
    [0.05, 0.05, 0.05],
];
const STRIPE_WIDTHS: [usize; 3] = [2, 3, 5];
const ORIENTATIONS: usize = 2;
const CODE_STRIDE: usize = 97;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    /// Every image is a training image.
    #[default]
    AllTrain,
    /// The first `num_ids / 2` identities train; each remaining identity
    /// contributes one query and the rest gallery.
    DisjointHalves,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub image_size: (usize, usize),
    pub num_cameras: usize,
    pub split: Split,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { num_ids: 8, imgs_per_id: 8, image_size: (64, 32), num_cameras: 6, split: Split::AllTrain }
    }
}

impl SyntheticSpec {
    pub fn max_ids() -> usize {
        ORIENTATIONS * STRIPE_WIDTHS.len() * PALETTE.len() * (PALETTE.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 || self.imgs_per_id < 2 {
            return arg_err("synthetic data needs at least 2 identities with 2 images each");
        }
        if self.num_ids > Self::max_ids() {
            return arg_err(format!("at most {} distinct textures", Self::max_ids()));
        }
        if self.num_cameras < 2 {
            return arg_err("need at least 2 cameras");
        }
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return arg_err("images must be at least 8×8");
        }
        Ok(())
    }
}

/// Stripe texture of one identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Texture {
    pub colors: (usize, usize),
    pub stripe_width: usize,
    pub vertical: bool,
}

impl Texture {
    /// Injective for `id < SyntheticSpec::max_ids()`: the id is scrambled by
    /// a stride coprime with the code count, then read in mixed radix.
    pub fn of(id: usize) -> Self {
        let n = SyntheticSpec::max_ids();
        let mut code = (id % n) * CODE_STRIDE % n;
        let pair = code % (PALETTE.len() * (PALETTE.len() - 1));
        code /= PALETTE.len() * (PALETTE.len() - 1);
        let width = code % STRIPE_WIDTHS.len();
        code /= STRIPE_WIDTHS.len();
        let a = pair / (PALETTE.len() - 1);
        let mut b = pair % (PALETTE.len() - 1);
        if b >= a {
            b += 1;
        }
        Self { colors: (a, b), stripe_width: STRIPE_WIDTHS[width], vertical: code % ORIENTATIONS == 1 }
    }

    fn color_at(&self, y: usize, x: usize) -> [f32; 3] {
        let t = if self.vertical { x } else { y };
        if (t / self.stripe_width).is_multiple_of(2) {
            PALETTE[self.colors.0]
        } else {
            PALETTE[self.colors.1]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Background {
    Solid([f32; 3]),
    Gradient { from: [f32; 3], to: [f32; 3], vertical: bool },
    /// Per-pixel uniform noise of the given amplitude around `base`; `seed`
    /// fixes the field.
    Noise { base: [f32; 3], amplitude: f32, seed: u64 },
}

impl Background {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let (a, b) = (color(), color());
        match rng.random_range(0..3) {
            0 => Background::Solid(a),
            1 => Background::Gradient { from: a, to: b, vertical: rng.random() },
            _ => Background::Noise { base: a, amplitude: 0.2 + 0.2 * rng.random::<f32>(), seed: rng.random() },
        }
    }

    fn render(&self, h: usize, w: usize) -> Vec<[f32; 3]> {
        match *self {
            Background::Solid(c) => vec![c; h * w],
            Background::Gradient { from, to, vertical } => (0..h * w)
                .map(|i| {
                    let t = if vertical { (i / w) as f32 / (h - 1) as f32 } else { (i % w) as f32 / (w - 1) as f32 };
                    [0, 1, 2].map(|c| from[c] + (to[c] - from[c]) * t)
                })
                .collect(),
            Background::Noise { base, amplitude, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..h * w).map(|_| [0, 1, 2].map(|c| base[c] + amplitude * (rng.random::<f32>() - 0.5))).collect()
            }
        }
    }
}

/// Per-image geometric and photometric perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    /// Offsets as fractions of `H` and `W`, in `[−0.1, 0.1]`.
    pub dy: f32,
    pub dx: f32,
    /// In `[0.9, 1.1]`.
    pub scale: f32,
    /// Foreground brightness factor in `[0.9, 1.1]`.
    pub brightness: f32,
}

impl Jitter {
    pub const NONE: Jitter = Jitter { dy: 0.0, dx: 0.0, scale: 1.0, brightness: 1.0 };

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut u = || rng.random_range(-1.0f32..=1.0);
        Self { dy: 0.1 * u(), dx: 0.1 * u(), scale: 1.0 + 0.1 * u(), brightness: 1.0 + 0.1 * u() }
    }
}

/// Renders one image (`3×H×W`, quantized) and its silhouette mask.
pub fn render(id: usize, size: (usize, usize), jitter: Jitter, background: &Background) -> (Tensor<f32>, Vec<bool>) {
    let (h, w) = size;
    let tex = Texture::of(id);
    let (hf, wf) = (h as f32, w as f32);
    let (cy, cx) = (hf * (0.5 + jitter.dy), wf * (0.5 + jitter.dx));
    let s = jitter.scale;
    let inside = |y: f32, x: f32| {
        // coordinates relative to the figure centre, undone by the scale
        let (ry, rx) = ((y - cy) / (s * hf), (x - cx) / (s * wf));
        let torso = (ry + 0.12).powi(2) / 0.22f32.powi(2) + rx.powi(2) / 0.28f32.powi(2) <= 1.0;
        let legs = (0.05..=0.40).contains(&ry) && ((-0.20..=-0.04).contains(&rx) || (0.04..=0.20).contains(&rx));
        torso || legs
    };
    let bg = background.render(h, w);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    let mut sil = vec![false; plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let fg = inside(y as f32 + 0.5, x as f32 + 0.5);
            sil[p] = fg;
            let c = if fg { tex.color_at(y, x).map(|v| v * jitter.brightness) } else { bg[p] };
            for ch in 0..3 {
                data[ch * plane + p] = quantize(c[ch] as f64) as f32 / 255.0;
            }
        }
    }
    (Tensor::new(&[3, h, w], data).expect("finite pixels"), sil)
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub set: ImageSet<f32>,
    pub silhouettes: Vec<Vec<bool>>,
    pub rows: Vec<ManifestRow>,
}

/// Image `i` draws its camera, jitter and background from its own stream of
/// the seeded generator; identities are assigned in blocks of
/// `imgs_per_id`.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.num_ids * spec.imgs_per_id;
    let mut images = Vec::with_capacity(n);
    let mut silhouettes = Vec::with_capacity(n);
    let (mut ids, mut cams, mut rows) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let id = i / spec.imgs_per_id;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let cam = rng.random_range(0..spec.num_cameras);
        let jitter = Jitter::sample(&mut rng);
        let bg = Background::sample(&mut rng);
        let (img, sil) = render(id, spec.image_size, jitter, &bg);
        let split = match spec.split {
            Split::AllTrain => SplitTag::Train,
            Split::DisjointHalves if id < spec.num_ids / 2 => SplitTag::Train,
            Split::DisjointHalves if i % spec.imgs_per_id == 0 => SplitTag::Query,
            Split::DisjointHalves => SplitTag::Gallery,
        };
        rows.push(ManifestRow { file: format!("{i:05}.ppm"), id, cam, split });
        images.push(img);
        silhouettes.push(sil);
        ids.push(id);
        cams.push(cam);
    }
    let set = ImageSet::new(Tensor::stack(&images)?, ids, cams)?;
    Ok(SyntheticData { spec: spec.clone(), set, silhouettes, rows })
}

/// Writes every image as PPM plus the manifest.
pub fn write_dataset(data: &SyntheticData, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (h, w) = data.spec.image_size;
    let per = 3 * h * w;
    for (i, row) in data.rows.iter().enumerate() {
        let img = Tensor::new(&[3, h, w], data.set.images.data()[i * per..(i + 1) * per].to_vec())?;
        write_ppm(&dir.join(&row.file), &img)?;
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&data.rows)?;
    std::fs::write(&path, text).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn textures_are_injective() {
        let all: HashSet<Texture> = (0..SyntheticSpec::max_ids()).map(Texture::of).collect();
        assert_eq!(all.len(), SyntheticSpec::max_ids());
    }

    #[test]
    fn counts_per_identity() {
        let d = generate(&SyntheticSpec::default(), 3).unwrap();
        assert_eq!(d.set.len(), 64);
        for rows in d.set.rows_by_id().values() {
            assert_eq!(rows.len(), 8);
        }
        assert!(d.set.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&SyntheticSpec::default(), 9).unwrap();
        let b = generate(&SyntheticSpec::default(), 9).unwrap();
        assert_eq!(a.set.images.data(), b.set.images.data());
        assert_eq!(a.rows, b.rows);
        let c = generate(&SyntheticSpec::default(), 10).unwrap();
        assert_ne!(a.set.images.data(), c.set.images.data());
    }

    #[test]
    fn background_swap_only_changes_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jitter = Jitter::sample(&mut rng);
        let (a, sil) = render(5, (64, 32), jitter, &Background::Solid([0.2, 0.3, 0.4]));
        let (b, sil_b) = render(5, (64, 32), jitter, &Background::Noise { base: [0.7, 0.1, 0.5], amplitude: 0.3, seed: 4 });
        assert_eq!(sil, sil_b);
        let plane = 64 * 32;
        let mut outside_diff = 0;
        for p in 0..plane {
            for c in 0..3 {
                let (va, vb) = (a.data()[c * plane + p], b.data()[c * plane + p]);
                if sil[p] {
                    assert_eq!(va, vb);
                } else if va != vb {
                    outside_diff += 1;
                }
            }
        }
        assert!(outside_diff > 0);
        assert!(sil.iter().filter(|&&s| s).count() > plane / 8);
    }

    #[test]
    fn disjoint_split_tags() {
        let spec = SyntheticSpec { num_ids: 4, imgs_per_id: 3, split: Split::DisjointHalves, ..Default::default() };
        let d = generate(&spec, 0).unwrap();
        let tags: Vec<SplitTag> = d.rows.iter().map(|r| r.split).collect();
        use SplitTag::*;
        assert_eq!(tags, [Train, Train, Train, Train, Train, Train, Query, Gallery, Gallery, Query, Gallery, Gallery]);
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(generate(&SyntheticSpec { num_ids: 1, ..Default::default() }, 0).is_err());
        assert!(generate(&SyntheticSpec { imgs_per_id: 1, ..Default::default() }, 0).is_err());
        assert!(generate(&SyntheticSpec { num_cameras: 1, ..Default::default() }, 0).is_err());
    }
}
