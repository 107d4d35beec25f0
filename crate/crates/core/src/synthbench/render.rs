use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dicop::DiseaseDescriptor;
use crate::error::{Error, Result};
use crate::image::Image;

pub const IMAGE_SIZE: usize = 32;

const GROUND: f64 = 0.2;
const BRIGHT: f64 = 0.9;
const DIM: f64 = 0.5;
const SOLID: f64 = 0.8;
const BASE_RADIUS: f64 = 6.0;
const RADIUS_JITTER: f64 = 0.75;
const POSITION_JITTER: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Texture {
    Solid,
    Striped,
    Checker,
    Dotted,
    Speckle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Location {
    Center,
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Texture {
    pub const ALL: [Texture; 5] = [
        Texture::Solid,
        Texture::Striped,
        Texture::Checker,
        Texture::Dotted,
        Texture::Speckle,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Striped => "striped",
            Texture::Checker => "checker",
            Texture::Dotted => "dotted",
            Texture::Speckle => "speckle",
        }
    }

    /// Figure intensity at local offset `(u, v)` from the shape center.
    fn intensity(self, u: f64, v: f64) -> f64 {
        let pick = |on: bool| if on { BRIGHT } else { DIM };
        match self {
            Texture::Solid => SOLID,
            Texture::Striped => pick((v / 2.0).floor().rem_euclid(2.0) == 0.0),
            Texture::Checker => {
                pick(((u / 3.0).floor() + (v / 3.0).floor()).rem_euclid(2.0) == 0.0)
            }
            Texture::Dotted => {
                let du = u.rem_euclid(4.0) - 2.0;
                let dv = v.rem_euclid(4.0) - 2.0;
                pick(du * du + dv * dv <= 1.5)
            }
            Texture::Speckle => {
                let (a, b) = (u.floor() as i64, v.floor() as i64);
                let h = (a.wrapping_mul(73_856_093) ^ b.wrapping_mul(19_349_663)).rem_euclid(7);
                pick(h < 3)
            }
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
        }
    }

    fn contains(self, u: f64, v: f64, r: f64) -> bool {
        match self {
            Shape::Disk => u * u + v * v <= r * r,
            Shape::Square => u.abs() <= 0.85 * r && v.abs() <= 0.85 * r,
            Shape::Triangle => v >= -r && v <= 0.8 * r && u.abs() <= 0.6 * (v + r),
            Shape::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
        }
    }
}

impl Location {
    pub const ALL: [Location; 5] = [
        Location::Center,
        Location::UpperLeft,
        Location::UpperRight,
        Location::LowerLeft,
        Location::LowerRight,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Location::Center => "center",
            Location::UpperLeft => "upper left",
            Location::UpperRight => "upper right",
            Location::LowerLeft => "lower left",
            Location::LowerRight => "lower right",
        }
    }

    /// Nominal (row, col) of the shape center. Offsets between locations are
    /// whole pixels, so the same jitter rasterizes identically everywhere.
    fn center(self) -> (f64, f64) {
        match self {
            Location::Center => (16.0, 16.0),
            Location::UpperLeft => (9.0, 9.0),
            Location::UpperRight => (9.0, 23.0),
            Location::LowerLeft => (23.0, 9.0),
            Location::LowerRight => (23.0, 23.0),
        }
    }
}

macro_rules! display_word {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    )*};
}
display_word!(Texture, Shape, Location);

/// One rendered category: its generative factors and pixel noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticClassSpec {
    pub class_id: usize,
    pub texture: Texture,
    pub shape: Shape,
    pub location: Location,
    pub noise_std: f64,
}

impl SyntheticClassSpec {
    pub fn new(
        class_id: usize,
        texture: Texture,
        location: Location,
        shape: Shape,
        noise_std: f64,
    ) -> Self {
        Self {
            class_id,
            texture,
            shape,
            location,
            noise_std,
        }
    }

    pub fn descriptor(&self) -> DiseaseDescriptor {
        DiseaseDescriptor::new(
            self.class_id,
            self.texture.word(),
            self.location.word(),
            self.shape.word(),
        )
        .expect("attribute words are non-empty")
    }

    pub fn triple(&self) -> (Texture, Location, Shape) {
        (self.texture, self.location, self.shape)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "class {}: noise std must be non-negative, got {}",
                self.class_id, self.noise_std
            )));
        }
        Ok(())
    }
}

/// Generator for one sample, keyed only by `(seed, sample_index)`.
pub fn sample_rng(seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index);
    rng
}

/// Draws the shape with its texture at the class location, then adds
/// Gaussian pixel noise and clamps to `[0, 1]`.
pub fn render_image(spec: &SyntheticClassSpec, sample_index: u64, seed: u64) -> Image {
    let mut rng = sample_rng(seed, sample_index);
    let (r0, c0) = spec.location.center();
    let cy = r0 + rng.random_range(-POSITION_JITTER..=POSITION_JITTER);
    let cx = c0 + rng.random_range(-POSITION_JITTER..=POSITION_JITTER);
    let radius = BASE_RADIUS + rng.random_range(-RADIUS_JITTER..=RADIUS_JITTER);
    let mut img = Image::zeros(IMAGE_SIZE);
    let px = img.pixels_mut();
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let v = row as f64 - cy;
            let u = col as f64 - cx;
            px[row * IMAGE_SIZE + col] = if spec.shape.contains(u, v, radius) {
                spec.texture.intensity(u, v)
            } else {
                GROUND
            };
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        for p in px.iter_mut() {
            *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    img
}
