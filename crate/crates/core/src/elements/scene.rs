use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::classes::Concept;
use super::config::{Colour, DatasetConfig, Shape, Texture, TextureGeometry};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Attempts allowed when placing one element without overlap.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Whole-scene restarts allowed for region-constrained scenes.
pub const MAX_SCENE_RESTARTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ElementSpec {
    pub colour: Colour,
    pub brightness: u32,
    pub size: u32,
    pub shape: Shape,
    pub texture: Texture,
    pub texture_shift: u32,
    pub x: u32,
    pub y: u32,
}

impl ElementSpec {
    pub fn has(&self, concept: Concept) -> bool {
        match concept {
            Concept::Colour(c) => self.colour == c,
            Concept::Shape(s) => self.shape == s,
            Concept::Texture(t) => self.texture == t,
        }
    }

    fn overlaps(&self, other: &ElementSpec) -> bool {
        self.x < other.x + other.size
            && other.x < self.x + self.size
            && self.y < other.y + other.size
            && other.y < self.y + self.size
    }

    pub fn fits(&self, side: u32) -> bool {
        self.x + self.size <= side && self.y + self.size <= side
    }
}

/// Lattice period of a texture, in pixels, for an element of side `size`.
pub fn texture_period(texture: Texture, size: u32, geometry: &TextureGeometry) -> f32 {
    match texture {
        Texture::Solid => 1.0,
        Texture::Spots => size as f32 * geometry.spot_period,
        Texture::Stripes => size as f32 * geometry.stripe_period,
    }
}

/// Exclusive upper bound of the integer texture shift.
pub fn texture_shift_bound(texture: Texture, size: u32, geometry: &TextureGeometry) -> u32 {
    (texture_period(texture, size, geometry).floor() as u32).max(1)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub elements: Vec<ElementSpec>,
}

/// Half-plane of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Left,
    Right,
    Top,
    Bottom,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Left => "left",
            Region::Right => "right",
            Region::Top => "top",
            Region::Bottom => "bottom",
        }
    }

    pub fn opposite(self) -> Region {
        match self {
            Region::Left => Region::Right,
            Region::Right => Region::Left,
            Region::Top => Region::Bottom,
            Region::Bottom => Region::Top,
        }
    }

    /// Whether the element's bounding box lies entirely in this half.
    pub fn contains_box(self, e: &ElementSpec, side: u32) -> bool {
        let half_lo = side / 2;
        let half_hi = side.div_ceil(2);
        match self {
            Region::Left => e.x + e.size <= half_lo,
            Region::Right => e.x >= half_hi,
            Region::Top => e.y + e.size <= half_lo,
            Region::Bottom => e.y >= half_hi,
        }
    }

    /// Whether the element's centre lies strictly inside this half.
    pub fn contains_center(self, e: &ElementSpec, side: u32) -> bool {
        let cx2 = 2 * e.x + e.size;
        let cy2 = 2 * e.y + e.size;
        match self {
            Region::Left => cx2 < side,
            Region::Right => cx2 > side,
            Region::Top => cy2 < side,
            Region::Bottom => cy2 > side,
        }
    }

    /// Allowed top-left coordinate range `[lo, hi]` for an element of `size`.
    fn coordinate_range(region: Option<Region>, size: u32, side: u32) -> ([u32; 2], [u32; 2]) {
        let full = [0, side - size];
        let empty = [1, 0];
        let low = if size <= side / 2 {
            [0, side / 2 - size]
        } else {
            empty
        };
        let start = side.div_ceil(2);
        let high = if start + size <= side {
            [start, side - size]
        } else {
            empty
        };
        match region {
            None => (full, full),
            Some(Region::Left) => (low, full),
            Some(Region::Right) => (high, full),
            Some(Region::Top) => (full, low),
            Some(Region::Bottom) => (full, high),
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" => Ok(Region::Left),
            "right" => Ok(Region::Right),
            "top" => Ok(Region::Top),
            "bottom" => Ok(Region::Bottom),
            other => Err(Error::UnknownRegion(other.to_string())),
        }
    }
}

/// Restrictions on the elements of a sampled scene.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ElementConstraint {
    /// Every element must carry this concept.
    pub concept: Option<Concept>,
    /// Every element's bounding box must lie in this half.
    pub region: Option<Region>,
}

/// Samples an unconstrained scene.
pub fn sample_scene(config: &DatasetConfig, rng: &mut StreamRng, image: u64) -> Result<SceneSpec> {
    sample_scene_with(config, rng, image, &ElementConstraint::default())
}

/// Samples a scene whose elements all satisfy `constraint`.
///
/// Element bounding boxes never overlap. Region-constrained scenes are
/// restarted from scratch when an element cannot be placed.
pub fn sample_scene_with(
    config: &DatasetConfig,
    rng: &mut StreamRng,
    image: u64,
    constraint: &ElementConstraint,
) -> Result<SceneSpec> {
    let attributes: Vec<_> = config
        .admissible_elements()
        .into_iter()
        .filter(|&(c, s, t)| match constraint.concept {
            None => true,
            Some(Concept::Colour(x)) => c == x,
            Some(Concept::Shape(x)) => s == x,
            Some(Concept::Texture(x)) => t == x,
        })
        .collect();
    if attributes.is_empty() {
        let label = constraint
            .concept
            .map(|c| c.to_string())
            .unwrap_or_default();
        return Err(Error::UnknownConcept(label));
    }
    let restarts = if constraint.region.is_some() {
        MAX_SCENE_RESTARTS
    } else {
        1
    };
    let mut last_failure = 0;
    for _ in 0..restarts {
        match place_elements(config, rng, &attributes, constraint.region) {
            Ok(elements) => return Ok(SceneSpec { elements }),
            Err(element) => last_failure = element,
        }
    }
    Err(Error::Placement {
        image,
        element: last_failure,
        attempts: MAX_PLACEMENT_ATTEMPTS,
    })
}

fn place_elements(
    config: &DatasetConfig,
    rng: &mut StreamRng,
    attributes: &[(Colour, Shape, Texture)],
    region: Option<Region>,
) -> std::result::Result<Vec<ElementSpec>, usize> {
    let side = config.image_side;
    let mut placed: Vec<ElementSpec> = Vec::with_capacity(config.elements_per_image);
    for index in 0..config.elements_per_image {
        let &(colour, shape, texture) = attributes.choose(rng).expect("non-empty attributes");
        let brightness = rng.gen_range(config.brightness[0]..=config.brightness[1]);
        let size = rng.gen_range(config.size[0]..=config.size[1]);
        let shift_bound = texture_shift_bound(texture, size, &config.texture_geometry);
        let texture_shift = rng.gen_range(0..shift_bound);
        let (xr, yr) = Region::coordinate_range(region, size, side);
        if xr[0] > xr[1] || yr[0] > yr[1] {
            return Err(index);
        }
        let mut element = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let candidate = ElementSpec {
                colour,
                brightness,
                size,
                shape,
                texture,
                texture_shift,
                x: rng.gen_range(xr[0]..=xr[1]),
                y: rng.gen_range(yr[0]..=yr[1]),
            };
            if placed.iter().all(|p| !p.overlaps(&candidate)) {
                element = Some(candidate);
                break;
            }
        }
        placed.push(element.ok_or(index)?);
    }
    Ok(placed)
}
