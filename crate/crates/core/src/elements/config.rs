use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colour {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

impl Colour {
    pub const ALL: [Colour; 6] = [
        Colour::Red,
        Colour::Green,
        Colour::Blue,
        Colour::Yellow,
        Colour::Cyan,
        Colour::Magenta,
    ];

    /// Unit RGB channels before brightness scaling.
    pub fn channels(self) -> [f32; 3] {
        match self {
            Colour::Red => [1.0, 0.0, 0.0],
            Colour::Green => [0.0, 1.0, 0.0],
            Colour::Blue => [0.0, 0.0, 1.0],
            Colour::Yellow => [1.0, 1.0, 0.0],
            Colour::Cyan => [0.0, 1.0, 1.0],
            Colour::Magenta => [1.0, 0.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Colour::Red => "red",
            Colour::Green => "green",
            Colour::Blue => "blue",
            Colour::Yellow => "yellow",
            Colour::Cyan => "cyan",
            Colour::Magenta => "magenta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Plus,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Plus,
        Shape::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Plus => "plus",
            Shape::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Spots,
    Stripes,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Solid, Texture::Spots, Texture::Stripes];

    /// Concept label, written as an adjective ("striped triangles").
    pub fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Spots => "spotted",
            Texture::Stripes => "striped",
        }
    }
}

macro_rules! impl_name_parsing {
    ($ty:ty, $($alias:literal => $value:expr),* $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($alias => Ok($value),)*
                    other => Err(Error::UnknownConcept(other.to_string())),
                }
            }
        }
    };
}

impl_name_parsing!(Colour,
    "red" => Colour::Red, "green" => Colour::Green, "blue" => Colour::Blue,
    "yellow" => Colour::Yellow, "cyan" => Colour::Cyan, "magenta" => Colour::Magenta);
impl_name_parsing!(Shape,
    "square" => Shape::Square, "squares" => Shape::Square,
    "circle" => Shape::Circle, "circles" => Shape::Circle,
    "triangle" => Shape::Triangle, "triangles" => Shape::Triangle,
    "plus" => Shape::Plus, "pluses" => Shape::Plus,
    "cross" => Shape::Cross, "crosses" => Shape::Cross);
impl_name_parsing!(Texture,
    "solid" => Texture::Solid,
    "spots" => Texture::Spots, "spotted" => Texture::Spots,
    "stripes" => Texture::Stripes, "striped" => Texture::Stripes);

/// Which (colour, shape) pairs an element may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationRule {
    /// Every combination is allowed.
    E1Unrestricted,
    /// Red elements must be triangles.
    E2OnlyTrianglesRed,
    /// An element is red iff it is a triangle.
    E3RedIffTriangle,
}

impl CombinationRule {
    pub fn allows(self, colour: Colour, shape: Shape) -> bool {
        let red = colour == Colour::Red;
        let triangle = shape == Shape::Triangle;
        match self {
            CombinationRule::E1Unrestricted => true,
            CombinationRule::E2OnlyTrianglesRed => !red || triangle,
            CombinationRule::E3RedIffTriangle => red == triangle,
        }
    }
}

impl FromStr for CombinationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "e1" | "e1_unrestricted" => Ok(CombinationRule::E1Unrestricted),
            "e2" | "e2_only_triangles_red" => Ok(CombinationRule::E2OnlyTrianglesRed),
            "e3" | "e3_red_iff_triangle" => Ok(CombinationRule::E3RedIffTriangle),
            other => Err(Error::Config(format!("unknown combination rule `{other}`"))),
        }
    }
}

/// Orientation of the half-plane split used by spatial classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Left and right halves.
    Horizontal,
    /// Top and bottom halves.
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialAxes {
    pub square: Axis,
    pub triangle: Axis,
}

impl Default for SpatialAxes {
    fn default() -> Self {
        SpatialAxes {
            square: Axis::Horizontal,
            triangle: Axis::Vertical,
        }
    }
}

/// Texture lattice parameters as fractions of the element size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureGeometry {
    pub spot_radius: f32,
    pub spot_period: f32,
    pub stripe_period: f32,
}

impl Default for TextureGeometry {
    fn default() -> Self {
        TextureGeometry {
            spot_radius: 0.10,
            spot_period: 0.25,
            stripe_period: 0.20,
        }
    }
}

pub const FULL_IMAGE_SIDE: u32 = 256;
pub const DESK_IMAGE_SIDE: u32 = 64;
pub const BRIGHTNESS_RANGE: [u32; 2] = [153, 255];
pub const FULL_SIZE_RANGE: [u32; 2] = [48, 80];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub palette: Vec<Colour>,
    pub shapes: Vec<Shape>,
    pub textures: Vec<Texture>,
    pub elements_per_image: usize,
    pub image_side: u32,
    /// Inclusive brightness range (0–255 scale).
    pub brightness: [u32; 2],
    /// Inclusive element side-length range in pixels.
    pub size: [u32; 2],
    pub combination_rule: CombinationRule,
    pub spatial_classes: bool,
    #[serde(default)]
    pub spatial_axes: SpatialAxes,
    #[serde(default)]
    pub texture_geometry: TextureGeometry,
    pub seed: u64,
}

impl DatasetConfig {
    /// Three colours, four shapes, three textures at desk scale.
    pub fn simple(seed: u64) -> Self {
        DatasetConfig {
            palette: vec![Colour::Red, Colour::Green, Colour::Blue],
            shapes: vec![Shape::Square, Shape::Circle, Shape::Triangle, Shape::Plus],
            textures: Texture::ALL.to_vec(),
            elements_per_image: 4,
            image_side: DESK_IMAGE_SIDE,
            brightness: BRIGHTNESS_RANGE,
            size: scaled_size_range(DESK_IMAGE_SIDE),
            combination_rule: CombinationRule::E1Unrestricted,
            spatial_classes: false,
            spatial_axes: SpatialAxes::default(),
            texture_geometry: TextureGeometry::default(),
            seed,
        }
    }

    /// Six colours, five shapes, three textures at desk scale.
    pub fn standard(seed: u64) -> Self {
        DatasetConfig {
            palette: Colour::ALL.to_vec(),
            shapes: Shape::ALL.to_vec(),
            ..DatasetConfig::simple(seed)
        }
    }

    /// The standard configuration with location-dependent square and triangle classes.
    pub fn spatial(seed: u64) -> Self {
        DatasetConfig {
            spatial_classes: true,
            ..DatasetConfig::standard(seed)
        }
    }

    pub fn with_rule(mut self, rule: CombinationRule) -> Self {
        self.combination_rule = rule;
        self
    }

    /// Rescales the image to `side` pixels with proportional element sizes.
    pub fn with_image_side(mut self, side: u32) -> Self {
        self.image_side = side;
        self.size = scaled_size_range(side);
        self
    }

    pub fn full_scale(self) -> Self {
        self.with_image_side(FULL_IMAGE_SIDE)
    }

    pub fn validate(&self) -> Result<()> {
        fn unique<T: PartialEq>(items: &[T]) -> bool {
            items
                .iter()
                .enumerate()
                .all(|(i, a)| items[..i].iter().all(|b| b != a))
        }
        if self.palette.is_empty() || self.shapes.is_empty() || self.textures.is_empty() {
            return Err(Error::Config(
                "palette, shapes and textures must be non-empty".into(),
            ));
        }
        if !unique(&self.palette) || !unique(&self.shapes) || !unique(&self.textures) {
            return Err(Error::Config("duplicate attribute value".into()));
        }
        let [b0, b1] = self.brightness;
        if b0 > b1 || b1 > 255 {
            return Err(Error::Config(format!("bad brightness range [{b0}, {b1}]")));
        }
        let [s0, s1] = self.size;
        if s0 == 0 || s0 > s1 || s1 > self.image_side {
            return Err(Error::Config(format!(
                "bad size range [{s0}, {s1}] for image side {}",
                self.image_side
            )));
        }
        if self.combination_rule != CombinationRule::E1Unrestricted
            && (!self.palette.contains(&Colour::Red) || !self.shapes.contains(&Shape::Triangle))
        {
            return Err(Error::Config(
                "entangled combination rules need red and triangle".into(),
            ));
        }
        let g = self.texture_geometry;
        if g.spot_radius <= 0.0 || g.spot_period <= 0.0 || g.stripe_period <= 0.0 {
            return Err(Error::Config("texture geometry must be positive".into()));
        }
        if self.admissible_elements().is_empty() {
            return Err(Error::Config("no admissible element attributes".into()));
        }
        Ok(())
    }

    /// All (colour, shape, texture) triples an element may take, in config order.
    pub fn admissible_elements(&self) -> Vec<(Colour, Shape, Texture)> {
        let mut out = Vec::new();
        for &c in &self.palette {
            for &s in &self.shapes {
                if !self.combination_rule.allows(c, s) {
                    continue;
                }
                for &t in &self.textures {
                    out.push((c, s, t));
                }
            }
        }
        out
    }
}

/// Element size range scaled from the 256-pixel reference.
pub fn scaled_size_range(side: u32) -> [u32; 2] {
    let scale = |v: u32| {
        ((v as f64) * side as f64 / FULL_IMAGE_SIDE as f64)
            .round()
            .max(1.0) as u32
    };
    [scale(FULL_SIZE_RANGE[0]), scale(FULL_SIZE_RANGE[1])]
}
