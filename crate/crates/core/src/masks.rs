//! Gaussian and attention-derived masks, and the mask-weighted
//! reconstruction targets for each strategy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, FtnError, Result};
use crate::tensor::{expect_rank, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMaskSpec {
    /// `σ_y` as a fraction of `H`.
    pub sigma_y_frac: f64,
    /// `σ_x` as a fraction of `W`.
    pub sigma_x_frac: f64,
    /// `(cy, cx)` in pixel index coordinates; `None` is the image centre
    /// `((H−1)/2, (W−1)/2)`.
    #[serde(default)]
    pub center: Option<(f64, f64)>,
}

impl Default for GaussianMaskSpec {
    fn default() -> Self {
        Self { sigma_y_frac: 0.35, sigma_x_frac: 0.25, center: None }
    }
}

/// `exp(−((y−cy)²/2σ_y² + (x−cx)²/2σ_x²))`, rescaled so the pixel nearest the
/// centre is exactly 1.
pub fn gaussian_mask<T: Real>(h: usize, w: usize, spec: &GaussianMaskSpec) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return shape_err(format!("gaussian mask of size {h}×{w}"));
    }
    let (sy, sx) = (spec.sigma_y_frac * h as f64, spec.sigma_x_frac * w as f64);
    if !(sy > 0.0 && sx > 0.0 && spec.sigma_y_frac <= 1.0 && spec.sigma_x_frac <= 1.0) {
        return arg_err(format!("gaussian mask sigmas must be positive fractions ≤ 1, got {spec:?}"));
    }
    let (cy, cx) = spec.center.unwrap_or(((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0));
    let g = |y: f64, x: f64| (-((y - cy).powi(2) / (2.0 * sy * sy) + (x - cx).powi(2) / (2.0 * sx * sx))).exp();
    let ny = cy.round().clamp(0.0, h as f64 - 1.0);
    let nx = cx.round().clamp(0.0, w as f64 - 1.0);
    let peak = g(ny, nx);
    Ok(Tensor::from_fn(&[h, w], |i| T::of((g((i / w) as f64, (i % w) as f64) / peak).min(1.0))))
}

/// How attention maps are collapsed over channels before normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Spatialize {
    #[default]
    ChannelMean,
    ChannelMax,
}

/// Collapses channels, rescales each map to `[0, 1]` (a constant map becomes
/// 0.5) and upsamples bilinearly with corner alignment.
///
/// Takes plain tensors, so the result is never part of a gradient graph.
pub fn attention_to_mask<T: Real>(feat: &Tensor<T>, out_h: usize, out_w: usize, how: Spatialize) -> Result<Tensor<T>> {
    expect_rank(feat, 4, "attention_to_mask")?;
    let &[b, d, h, w] = feat.shape() else { unreachable!() };
    if out_h < h || out_w < w {
        return shape_err(format!("cannot upsample {h}×{w} to {out_h}×{out_w}"));
    }
    let mut out = Vec::with_capacity(b * out_h * out_w);
    for bi in 0..b {
        let map = spatial_map(&feat.data()[bi * d * h * w..(bi + 1) * d * h * w], d, h * w, how);
        out.extend(bilinear(&map, h, w, out_h, out_w).into_iter().map(T::of));
    }
    Tensor::new(&[b, out_h, out_w], out)
}

/// Channel reduction plus min-max normalization of one sample.
pub fn spatial_map<T: Real>(sample: &[T], channels: usize, pixels: usize, how: Spatialize) -> Vec<f64> {
    let mut map: Vec<f64> = (0..pixels)
        .map(|p| {
            let vals = (0..channels).map(|c| sample[c * pixels + p].f64());
            match how {
                Spatialize::ChannelMean => vals.sum::<f64>() / channels as f64,
                Spatialize::ChannelMax => vals.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut map {
        *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
    }
    map
}

fn bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Masks at input resolution, all in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct MaskSet<T> {
    /// `H×W`, shared across the batch.
    pub gm: Tensor<T>,
    /// Position attention mask, `B×H×W`.
    pub pam: Option<Tensor<T>>,
    /// Channel attention mask, `B×H×W`.
    pub cam: Option<Tensor<T>>,
}

/// Reconstruction target, one per ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReconStrategy {
    /// (a) Gaussian-weighted input, network built without CFA.
    NoCfaGmOnly,
    /// (b) the input itself.
    PlainInput,
    /// (c)
    GmOnly,
    /// (d)
    GmPam,
    /// (e)
    GmCam,
    /// (f) as (g) but trained without the gradient loss.
    GmPamCamNoGradLoss,
    /// (g) the full model.
    GmPamCam,
}

impl ReconStrategy {
    pub const ALL: [ReconStrategy; 7] = [
        Self::NoCfaGmOnly,
        Self::PlainInput,
        Self::GmOnly,
        Self::GmPam,
        Self::GmCam,
        Self::GmPamCamNoGradLoss,
        Self::GmPamCam,
    ];

    pub fn letter(self) -> char {
        (b'a' + Self::ALL.iter().position(|&s| s == self).unwrap() as u8) as char
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let i = (c as u32).checked_sub('a' as u32)? as usize;
        Self::ALL.get(i).copied()
    }

    /// Which of (Gm, PAm, CAm) weight the target.
    pub fn masks(self) -> (bool, bool, bool) {
        match self {
            Self::PlainInput => (false, false, false),
            Self::NoCfaGmOnly | Self::GmOnly => (true, false, false),
            Self::GmPam => (true, true, false),
            Self::GmCam => (true, false, true),
            Self::GmPamCam | Self::GmPamCamNoGradLoss => (true, true, true),
        }
    }

    pub fn uses_cfa(self) -> bool {
        self != Self::NoCfaGmOnly
    }

    pub fn uses_gradient_loss(self) -> bool {
        self != Self::GmPamCamNoGradLoss
    }
}

impl fmt::Display for ReconStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for ReconStrategy {
    type Err = FtnError;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Self::from_letter(c.to_ascii_lowercase()).ok_or_else(|| FtnError::InvalidArgument(format!("unknown strategy {s:?}, expected a..g")))
            }
            _ => arg_err(format!("unknown strategy {s:?}, expected a..g")),
        }
    }
}

/// `image ⊙ Π(selected masks)`, each mask broadcast over the colour channels.
pub fn build_target<T: Real>(image: &Tensor<T>, strategy: ReconStrategy, masks: &MaskSet<T>) -> Result<Tensor<T>> {
    expect_rank(image, 4, "build_target")?;
    let &[b, c, h, w] = image.shape() else { unreachable!() };
    let (use_gm, use_pam, use_cam) = strategy.masks();
    let mut weight = vec![T::one(); b * h * w];
    if use_gm {
        if masks.gm.shape() != [h, w] {
            return shape_err(format!("gaussian mask {:?} does not match image {h}×{w}", masks.gm.shape()));
        }
        for (i, v) in weight.iter_mut().enumerate() {
            *v *= masks.gm.data()[i % (h * w)];
        }
    }
    for (used, mask, name) in [(use_pam, &masks.pam, "position"), (use_cam, &masks.cam, "channel")] {
        if !used {
            continue;
        }
        let Some(m) = mask else {
            return arg_err(format!("strategy {strategy} needs the {name} attention mask"));
        };
        if m.shape() != [b, h, w] {
            return shape_err(format!("{name} mask {:?} does not match image {b}×{h}×{w}", m.shape()));
        }
        for (v, &m) in weight.iter_mut().zip(m.data()) {
            *v *= m;
        }
    }
    let plane = h * w;
    let img = image.data();
    Ok(Tensor::from_fn(image.shape(), |i| {
        let bi = i / (c * plane);
        img[i] * weight[bi * plane + i % plane]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn gaussian_peak_and_sigma_offset() {
        let spec = GaussianMaskSpec { center: Some((10.0, 4.0)), ..Default::default() };
        let m: Tensor<f64> = gaussian_mask(40, 9, &spec).unwrap();
        assert_eq!(m.at(&[10, 4]), 1.0);
        // σ_y = 0.35 · 40 = 14 rows below the centre
        assert!(close(m.at(&[24, 4]), (-0.5f64).exp(), 1e-12));
    }

    #[test]
    fn gaussian_default_peak_is_one() {
        for (h, w) in [(64, 32), (5, 7), (1, 1)] {
            let m: Tensor<f64> = gaussian_mask(h, w, &GaussianMaskSpec::default()).unwrap();
            let peak = m.data().iter().copied().fold(0.0, f64::max);
            assert_eq!(peak, 1.0);
        }
    }

    #[test]
    fn gaussian_mirror_symmetry() {
        let m: Tensor<f64> = gaussian_mask(6, 7, &GaussianMaskSpec::default()).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                assert_eq!(m.at(&[y, x]), m.at(&[y, 6 - x]));
            }
        }
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        let spec = GaussianMaskSpec { sigma_x_frac: 0.0, ..Default::default() };
        assert!(gaussian_mask::<f64>(4, 4, &spec).is_err());
        let spec = GaussianMaskSpec { sigma_y_frac: -0.1, ..Default::default() };
        assert!(gaussian_mask::<f64>(4, 4, &spec).is_err());
    }

    #[test]
    fn gaussian_is_resolution_covariant() {
        let spec = GaussianMaskSpec::default();
        let coarse: Tensor<f64> = gaussian_mask(64, 32, &spec).unwrap();
        let fine: Tensor<f64> = gaussian_mask(128, 64, &spec).unwrap();
        for y in 0..64 {
            for x in 0..32 {
                let avg = (fine.at(&[2 * y, 2 * x]) + fine.at(&[2 * y + 1, 2 * x]) + fine.at(&[2 * y, 2 * x + 1]) + fine.at(&[2 * y + 1, 2 * x + 1])) / 4.0;
                assert!(close(avg, coarse.at(&[y, x]), 0.02), "({y},{x})");
            }
        }
    }

    #[test]
    fn constant_feature_gives_half_mask() {
        let f = Tensor::full(&[2, 3, 2, 2], 4.0);
        let m = attention_to_mask(&f, 8, 4, Spatialize::ChannelMean).unwrap();
        assert_eq!(m.shape(), &[2, 8, 4]);
        assert!(m.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn binary_pattern_survives_normalization_and_corners() {
        let f = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        let same = attention_to_mask(&f, 2, 2, Spatialize::ChannelMean).unwrap();
        assert_eq!(same.data(), &[0.0, 1.0, 0.0, 1.0]);
        let up = attention_to_mask(&f, 4, 4, Spatialize::ChannelMean).unwrap();
        assert_eq!([up.at(&[0, 0, 0]), up.at(&[0, 0, 3]), up.at(&[0, 3, 0]), up.at(&[0, 3, 3])], [0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_mask_matches_loop_oracle() {
        let f = Tensor::from_fn(&[1, 4, 2, 2], |i| ((i * 7919) % 23) as f64 / 7.0 - 1.3);
        let (oh, ow) = (5, 3);
        let got = attention_to_mask(&f, oh, ow, Spatialize::ChannelMean).unwrap();

        let mut mean = [[0.0; 2]; 2];
        for c in 0..4 {
            for y in 0..2 {
                for x in 0..2 {
                    mean[y][x] += f.at(&[0, c, y, x]) / 4.0;
                }
            }
        }
        let flat: Vec<f64> = mean.iter().flatten().copied().collect();
        let (lo, hi) = flat.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for y in 0..oh {
            for x in 0..ow {
                let sy = y as f64 / (oh - 1) as f64;
                let sx = x as f64 / (ow - 1) as f64;
                let n = |yy: usize, xx: usize| (mean[yy][xx] - lo) / (hi - lo);
                let v = n(0, 0) * (1.0 - sy) * (1.0 - sx) + n(0, 1) * (1.0 - sy) * sx + n(1, 0) * sy * (1.0 - sx) + n(1, 1) * sy * sx;
                assert!(close(got.at(&[0, y, x]), v, 1e-12));
            }
        }
    }

    #[test]
    fn channel_max_spatialization() {
        let f = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[0.0, 3.0, 2.0, 1.0]).unwrap();
        let m = attention_to_mask(&f, 1, 2, Spatialize::ChannelMax).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0]);
    }

    #[test]
    fn strategy_letters_round_trip() {
        for (s, l) in ReconStrategy::ALL.iter().zip('a'..='g') {
            assert_eq!(s.letter(), l);
            assert_eq!(l.to_string().parse::<ReconStrategy>().unwrap(), *s);
        }
        assert!("h".parse::<ReconStrategy>().is_err());
        assert!("gg".parse::<ReconStrategy>().is_err());
    }

    fn image() -> Tensor<f64> {
        Tensor::from_fn(&[1, 3, 2, 2], |i| 0.1 + i as f64 * 0.07)
    }

    #[test]
    fn plain_and_unit_gaussian_targets_equal_image() {
        let img = image();
        let masks = MaskSet { gm: Tensor::full(&[2, 2], 1.0), pam: None, cam: None };
        assert_eq!(build_target(&img, ReconStrategy::PlainInput, &masks).unwrap().data(), img.data());
        assert_eq!(build_target(&img, ReconStrategy::GmOnly, &masks).unwrap().data(), img.data());
    }

    #[test]
    fn full_target_is_per_pixel_product() {
        let img = image();
        let gm = Tensor::from_f64(&[2, 2], &[1.0, 0.5, 0.25, 0.0]).unwrap();
        let pam = Tensor::from_f64(&[1, 2, 2], &[0.5, 1.0, 0.8, 1.0]).unwrap();
        let cam = Tensor::from_f64(&[1, 2, 2], &[1.0, 0.2, 0.5, 0.9]).unwrap();
        let masks = MaskSet { gm: gm.clone(), pam: Some(pam), cam: Some(cam) };
        let t = build_target(&img, ReconStrategy::GmPamCam, &masks).unwrap();
        let w = [1.0 * 0.5 * 1.0, 0.5 * 1.0 * 0.2, 0.25 * 0.8 * 0.5, 0.0];
        for c in 0..3 {
            for p in 0..4 {
                let (y, x) = (p / 2, p % 2);
                assert!(close(t.at(&[0, c, y, x]), img.at(&[0, c, y, x]) * w[p], 1e-15));
            }
        }
    }

    #[test]
    fn missing_mask_is_an_error() {
        let masks = MaskSet { gm: Tensor::full(&[2, 2], 1.0), pam: None, cam: None };
        assert!(build_target(&image(), ReconStrategy::GmCam, &masks).is_err());
        assert!(build_target(&image(), ReconStrategy::GmPam, &masks).is_err());
    }
}
