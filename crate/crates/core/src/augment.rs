//! Weak (flip / shift / occlusion) and strong image perturbations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Weak augmentation: each variant is independently flipped, shifted and
/// occluded with one rectangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Number of augmented variants K (the raw image is added as variant 0).
    pub k: usize,
    pub flip_prob: f64,
    /// Maximum translation per axis, in cells.
    pub max_shift: usize,
    /// Upper bound on the occluded area as a fraction of the image.
    pub occlusion_frac: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { k: 3, flip_prob: 0.5, max_shift: 2, occlusion_frac: 0.15 }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("augmentation K must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_frac) {
            return Err(Error::Config(format!("occlusion_frac must lie in [0, 1], got {}", self.occlusion_frac)));
        }
        Ok(())
    }
}

/// Heavy perturbation used only by the strong-augmentation ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongSpec {
    pub flip_prob: f64,
    pub max_shift: usize,
    pub occlusion_frac: f64,
    /// Amplitude of uniform per-value noise.
    pub jitter: f64,
}

impl Default for StrongSpec {
    fn default() -> Self {
        StrongSpec { flip_prob: 0.5, max_shift: 5, occlusion_frac: 0.4, jitter: 0.3 }
    }
}

impl StrongSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.occlusion_frac) {
            return Err(Error::Config("strong augmentation probabilities must lie in [0, 1]".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter must be non-negative, got {}", self.jitter)));
        }
        Ok(())
    }
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = Image::zeros(image.h, image.w, image.c);
    for y in 0..image.h {
        for x in 0..image.w {
            for ch in 0..image.c {
                out.set(y, image.w - 1 - x, ch, image.get(y, x, ch));
            }
        }
    }
    out
}

/// Translates by (dy, dx); vacated cells are zero and out-of-frame cells dropped.
pub fn shift(image: &Image, dy: isize, dx: isize) -> Image {
    let mut out = Image::zeros(image.h, image.w, image.c);
    for y in 0..image.h {
        let sy = y as isize - dy;
        if sy < 0 || sy >= image.h as isize {
            continue;
        }
        for x in 0..image.w {
            let sx = x as isize - dx;
            if sx < 0 || sx >= image.w as isize {
                continue;
            }
            for ch in 0..image.c {
                out.set(y, x, ch, image.get(sy as usize, sx as usize, ch));
            }
        }
    }
    out
}

/// Zeroes the rectangle with top-left (y0, x0) and size (h, w), clipped to the image.
pub fn occlude(image: &Image, y0: usize, x0: usize, h: usize, w: usize) -> Image {
    let mut out = image.clone();
    for y in y0..(y0 + h).min(image.h) {
        for x in x0..(x0 + w).min(image.w) {
            for ch in 0..image.c {
                out.set(y, x, ch, 0.0);
            }
        }
    }
    out
}

fn random_shift<R: Rng + ?Sized>(image: &Image, max_shift: usize, rng: &mut R) -> Image {
    if max_shift == 0 {
        return image.clone();
    }
    let m = max_shift as isize;
    let dy = rng.gen_range(-m..=m);
    let dx = rng.gen_range(-m..=m);
    shift(image, dy, dx)
}

fn random_occlusion<R: Rng + ?Sized>(image: &Image, frac: f64, rng: &mut R) -> Image {
    let max_area = (frac * (image.h * image.w) as f64).floor() as usize;
    if max_area == 0 {
        return image.clone();
    }
    let h = rng.gen_range(1..=image.h.min(max_area));
    let w = rng.gen_range(1..=image.w.min(max_area / h));
    let y0 = rng.gen_range(0..=image.h - h);
    let x0 = rng.gen_range(0..=image.w - w);
    occlude(image, y0, x0, h, w)
}

fn maybe_flip<R: Rng + ?Sized>(image: &Image, p: f64, rng: &mut R) -> Image {
    // always draw so the stream position does not depend on p
    let u: f64 = rng.gen();
    if u < p {
        flip_horizontal(image)
    } else {
        image.clone()
    }
}

/// Ψ(v): the raw image followed by K weakly perturbed variants.
pub fn weak_augment<R: Rng + ?Sized>(image: &Image, spec: &AugmentSpec, rng: &mut R) -> Result<Vec<Image>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.k + 1);
    out.push(image.clone());
    for _ in 0..spec.k {
        let v = maybe_flip(image, spec.flip_prob, rng);
        let v = random_shift(&v, spec.max_shift, rng);
        out.push(random_occlusion(&v, spec.occlusion_frac, rng));
    }
    Ok(out)
}

/// Large shift, large occlusion and additive value jitter, clamped to [0, 1].
pub fn strong_augment<R: Rng + ?Sized>(image: &Image, spec: &StrongSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let v = maybe_flip(image, spec.flip_prob, rng);
    let v = random_shift(&v, spec.max_shift, rng);
    let mut v = random_occlusion(&v, spec.occlusion_frac, rng);
    if spec.jitter > 0.0 {
        for x in v.data.iter_mut() {
            let noise = rng.gen_range(-spec.jitter..=spec.jitter) as f32;
            *x = (*x + noise).clamp(0.0, 1.0);
        }
    }
    Ok(v)
}

/// Ψ(v) with strong perturbations in place of the weak ones.
pub fn strong_variants<R: Rng + ?Sized>(image: &Image, k: usize, spec: &StrongSpec, rng: &mut R) -> Result<Vec<Image>> {
    if k == 0 {
        return Err(Error::Config("augmentation K must be >= 1".into()));
    }
    let mut out = vec![image.clone()];
    for _ in 0..k {
        out.push(strong_augment(image, spec, rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checker() -> Image {
        let mut img = Image::zeros(16, 16, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 7) % 11) as f32 / 10.0;
        }
        img
    }

    #[test]
    fn default_k_gives_four_variants() {
        let out = weak_augment(&checker(), &AugmentSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], checker());
        assert!(out.iter().all(|v| v.dims() == (16, 16, 3)));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = checker();
        assert_ne!(flip_horizontal(&img), img);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn identity_parameters_leave_variants_raw() {
        let spec = AugmentSpec { k: 5, flip_prob: 0.0, max_shift: 0, occlusion_frac: 0.0 };
        let out = weak_augment(&checker(), &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(out.iter().all(|v| *v == checker()));
    }

    #[test]
    fn shift_pads_with_zeros() {
        let img = checker();
        let s = shift(&img, 1, -2);
        assert!(s.pixel_is_blank(0, 3));
        assert!(s.pixel_is_blank(5, 15));
        assert_eq!(s.get(4, 3, 1), img.get(3, 5, 1));
    }

    #[test]
    fn occlusion_respects_area_bound() {
        let mut img = Image::zeros(16, 16, 1);
        img.data.iter_mut().for_each(|v| *v = 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let o = random_occlusion(&img, 0.15, &mut rng);
            let zeroed = o.data.iter().filter(|&&v| v == 0.0).count();
            assert!(zeroed as f64 <= 0.15 * 256.0, "{zeroed}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AugmentSpec { k: 0, ..Default::default() };
        assert!(weak_augment(&checker(), &bad, &mut rng).is_err());
        let bad = AugmentSpec { flip_prob: 1.5, ..Default::default() };
        assert!(weak_augment(&checker(), &bad, &mut rng).is_err());
        let bad = StrongSpec { jitter: -1.0, ..Default::default() };
        assert!(strong_augment(&checker(), &bad, &mut rng).is_err());
    }

    #[test]
    fn degenerate_strong_augmentation_is_identity() {
        let spec = StrongSpec { flip_prob: 0.0, max_shift: 0, occlusion_frac: 0.0, jitter: 0.0 };
        let out = strong_augment(&checker(), &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, checker());
    }

    #[test]
    fn strong_draws_rarely_collide() {
        let spec = StrongSpec::default();
        let draws: Vec<Image> = (0..100)
            .map(|s| strong_augment(&checker(), &spec, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
            .collect();
        for i in 0..draws.len() {
            assert_eq!(draws[i].dims(), (16, 16, 3));
            for j in i + 1..draws.len() {
                assert_ne!(draws[i], draws[j], "seeds {i} and {j} collided");
            }
        }
    }
}
