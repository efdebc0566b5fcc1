//! Procedural exemplar/search pairs for desk-scale training.
//!
//! A target is a smooth random texture (a colour gradient plus a handful of
//! Gaussian blobs) on a square. The exemplar shows it unjittered at its
//! centre over background clutter; the search image shows a rotated and
//! rescaled copy at a random position among distractor textures.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

pub const CHANNELS: usize = 3;

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSpec {
    pub exemplar_size: usize,
    pub search_size: usize,
    /// Side of the square target, in pixels.
    pub target_size: usize,
    /// Target centres in the search image lie on a grid with this pitch,
    /// offset by half the exemplar size; use the embedding's total stride
    /// so every centre maps to an exact score-map cell.
    pub center_step: usize,
    /// Scale factor drawn from `1 +- max_scale_jitter`.
    pub max_scale_jitter: f64,
    /// Rotation drawn from `+- max_rotation` radians.
    pub max_rotation: f64,
    pub distractors: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Disable jitter and place the target at the search centre.
    pub identity: bool,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec {
            exemplar_size: 32,
            search_size: 64,
            target_size: 16,
            center_step: 2,
            max_scale_jitter: 0.05,
            max_rotation: 10f64.to_radians(),
            distractors: 3,
            noise: 0.02,
            identity: false,
        }
    }
}

impl PairSpec {
    pub fn validate(&self) -> Result<()> {
        let (e, s, t) = (self.exemplar_size, self.search_size, self.target_size);
        if t == 0 || t > e || e > s {
            return Err(Error::config(
                "train.data",
                format!("need 0 < target_size <= exemplar_size <= search_size, got {t}, {e}, {s}"),
            ));
        }
        if e % 2 != 0 || s % 2 != 0 {
            return Err(Error::config("train.data", "exemplar and search sizes must be even"));
        }
        if self.center_step == 0 {
            return Err(Error::config("train.data.center_step", "must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.max_scale_jitter) || self.max_rotation < 0.0 || self.noise < 0.0 {
            return Err(Error::config("train.data", "jitter and noise must be non-negative (scale jitter < 0.5)"));
        }
        Ok(())
    }

    /// Number of admissible target positions along each axis.
    pub fn positions(&self) -> usize {
        (self.search_size - self.exemplar_size) / self.center_step + 1
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    /// (1, 3, E, E)
    pub exemplar: Tensor4,
    /// (1, 3, S, S)
    pub search: Tensor4,
    /// Target centre in search-image coordinates (row, col). Pixel `i`
    /// spans `[i, i + 1)`, so an even-sized target centred at `c` covers
    /// pixels `c - T/2 .. c + T/2`.
    pub center: (usize, usize),
    /// The centre's cell on the position grid (row, col).
    pub grid_cell: (usize, usize),
}

#[derive(Clone, Debug)]
struct Blob {
    u: f64,
    v: f64,
    inv_two_sigma2: f64,
    color: [f64; CHANNELS],
}

/// A smooth colour field on `[-1, 1]^2`.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; CHANNELS],
    slope_u: [f64; CHANNELS],
    slope_v: [f64; CHANNELS],
    blobs: Vec<Blob>,
}

impl Texture {
    fn random<R: Rng + ?Sized>(rng: &mut R, blobs: usize, contrast: f64) -> Self {
        let mut color = |lo: f64, hi: f64| -> [f64; CHANNELS] { std::array::from_fn(|_| rng.random_range(lo..hi)) };
        let base = color(-0.3, 0.3);
        let slope_u = color(-0.3 * contrast, 0.3 * contrast);
        let slope_v = color(-0.3 * contrast, 0.3 * contrast);
        let blobs = (0..blobs)
            .map(|_| {
                let sigma: f64 = rng.random_range(0.15..0.5);
                Blob {
                    u: rng.random_range(-1.0..1.0),
                    v: rng.random_range(-1.0..1.0),
                    inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                    color: std::array::from_fn(|_| rng.random_range(-contrast..contrast)),
                }
            })
            .collect();
        Texture {
            base,
            slope_u,
            slope_v,
            blobs,
        }
    }

    fn eval(&self, u: f64, v: f64) -> [f64; CHANNELS] {
        let mut out: [f64; CHANNELS] = std::array::from_fn(|c| self.base[c] + self.slope_u[c] * u + self.slope_v[c] * v);
        for b in &self.blobs {
            let d2 = (u - b.u) * (u - b.u) + (v - b.v) * (v - b.v);
            let k = (-d2 * b.inv_two_sigma2).exp();
            for (o, c) in out.iter_mut().zip(&b.color) {
                *o += k * c;
            }
        }
        out
    }
}

/// Square placement of a texture: centre, half side, rotation.
#[derive(Clone, Copy, Debug)]
struct Placement {
    cy: f64,
    cx: f64,
    half: f64,
    cos: f64,
    sin: f64,
}

impl Placement {
    fn upright(cy: f64, cx: f64, side: f64) -> Self {
        Placement {
            cy,
            cx,
            half: side / 2.0,
            cos: 1.0,
            sin: 0.0,
        }
    }
}

/// Paints `tex` over `img` (1, 3, H, W) inside the placed square.
fn paint(img: &mut Tensor4, tex: &Texture, at: Placement) {
    let d = img.dims();
    let reach = at.half * std::f64::consts::SQRT_2 + 1.0;
    let y0 = (at.cy - reach).floor().max(0.0) as usize;
    let y1 = ((at.cy + reach).ceil() as usize).min(d.h);
    let x0 = (at.cx - reach).floor().max(0.0) as usize;
    let x1 = ((at.cx + reach).ceil() as usize).min(d.w);
    for y in y0..y1 {
        for x in x0..x1 {
            let dy = y as f64 + 0.5 - at.cy;
            let dx = x as f64 + 0.5 - at.cx;
            // Inverse rotation into the texture frame.
            let u = (at.cos * dx + at.sin * dy) / at.half;
            let v = (-at.sin * dx + at.cos * dy) / at.half;
            if u.abs() <= 1.0 && v.abs() <= 1.0 {
                let px = tex.eval(u, v);
                for (c, p) in px.iter().enumerate() {
                    img.set(0, c, y, x, *p);
                }
            }
        }
    }
}

fn background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor4 {
    let tex = Texture::random(rng, 6, 0.35);
    let mut img = Tensor4::zeros(Dims::new(1, CHANNELS, size, size)).expect("size >= 1");
    paint(&mut img, &tex, Placement::upright(size as f64 / 2.0, size as f64 / 2.0, size as f64));
    img
}

fn add_noise<R: Rng + ?Sized>(img: &mut Tensor4, sigma: f64, rng: &mut R) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        for v in img.data_mut() {
            *v += n.sample(rng);
        }
    }
}

/// Draws one exemplar/search pair. Deterministic for a given generator state.
pub fn generate_pair<R: Rng + ?Sized>(rng: &mut R, spec: &PairSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let (e, s, t) = (spec.exemplar_size, spec.search_size, spec.target_size as f64);
    let target = Texture::random(rng, 6, 1.0);

    let mut exemplar = background(e, rng);
    let mid = (e / 2) as f64;
    paint(&mut exemplar, &target, Placement::upright(mid, mid, t));

    let mut search = background(s, rng);
    for _ in 0..spec.distractors {
        let tex = Texture::random(rng, 6, 1.0);
        let side = t * rng.random_range(0.8..1.2);
        let at = Placement::upright(rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64), side);
        paint(&mut search, &tex, at);
    }

    let positions = spec.positions();
    let grid_cell = if spec.identity {
        (positions / 2, positions / 2)
    } else {
        (rng.random_range(0..positions), rng.random_range(0..positions))
    };
    let center = (
        e / 2 + grid_cell.0 * spec.center_step,
        e / 2 + grid_cell.1 * spec.center_step,
    );
    let (scale, angle) = if spec.identity {
        (1.0, 0.0)
    } else {
        (
            1.0 + rng.random_range(-spec.max_scale_jitter..=spec.max_scale_jitter),
            rng.random_range(-spec.max_rotation..=spec.max_rotation),
        )
    };
    let at = Placement {
        cy: center.0 as f64,
        cx: center.1 as f64,
        half: t * scale / 2.0,
        cos: angle.cos(),
        sin: angle.sin(),
    };
    paint(&mut search, &target, at);

    add_noise(&mut exemplar, spec.noise, rng);
    add_noise(&mut search, spec.noise, rng);
    Ok(SyntheticPair {
        exemplar,
        search,
        center,
        grid_cell,
    })
}
