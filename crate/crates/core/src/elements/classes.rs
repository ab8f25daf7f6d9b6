use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{Axis, Colour, DatasetConfig, Shape, Texture};
use super::scene::{Region, SceneSpec};
use crate::error::{Error, Result};

/// A single attribute value an element can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Concept {
    Colour(Colour),
    Shape(Shape),
    Texture(Texture),
}

impl Concept {
    /// Attribute group index; concepts of one class come from distinct groups.
    pub fn group(self) -> usize {
        match self {
            Concept::Colour(_) => 0,
            Concept::Texture(_) => 1,
            Concept::Shape(_) => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Concept::Colour(c) => c.name(),
            Concept::Shape(s) => s.name(),
            Concept::Texture(t) => t.name(),
        }
    }

    /// Every concept of a configuration: colours, then shapes, then textures.
    pub fn all(config: &DatasetConfig) -> Vec<Concept> {
        config
            .palette
            .iter()
            .map(|&c| Concept::Colour(c))
            .chain(config.shapes.iter().map(|&s| Concept::Shape(s)))
            .chain(config.textures.iter().map(|&t| Concept::Texture(t)))
            .collect()
    }

    pub fn in_config(self, config: &DatasetConfig) -> bool {
        match self {
            Concept::Colour(c) => config.palette.contains(&c),
            Concept::Shape(s) => config.shapes.contains(&s),
            Concept::Texture(t) => config.textures.contains(&t),
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Concept {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(c) = s.parse::<Colour>() {
            return Ok(Concept::Colour(c));
        }
        if let Ok(t) = s.parse::<Texture>() {
            return Ok(Concept::Texture(t));
        }
        s.parse::<Shape>()
            .map(Concept::Shape)
            .map_err(|_| Error::UnknownConcept(s.to_string()))
    }
}

impl From<Concept> for String {
    fn from(c: Concept) -> String {
        c.name().to_string()
    }
}

impl TryFrom<String> for Concept {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// One ground-truth class: an element carrying every concept (and, for
/// spatial classes, centred in `region`) makes the image a member.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassDef {
    pub concepts: Vec<Concept>,
    pub region: Option<Region>,
}

impl ClassDef {
    pub fn new(mut concepts: Vec<Concept>, region: Option<Region>) -> Result<Self> {
        concepts.sort_by_key(|c| c.group());
        let distinct = concepts.windows(2).all(|w| w[0].group() != w[1].group());
        if !(2..=3).contains(&concepts.len()) || !distinct {
            return Err(Error::InvalidArgument(format!(
                "a class needs 2 or 3 concepts from distinct groups, got {concepts:?}"
            )));
        }
        Ok(ClassDef { concepts, region })
    }

    /// Name such as `striped_triangle` or `red_solid_square@left`.
    pub fn name(&self) -> String {
        let mut name = self
            .concepts
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join("_");
        if let Some(region) = self.region {
            name.push('@');
            name.push_str(region.name());
        }
        name
    }

    pub fn involves(&self, concept: Concept) -> bool {
        self.concepts.contains(&concept)
    }

    pub fn matches(&self, scene: &SceneSpec, side: u32) -> bool {
        scene.elements.iter().any(|e| {
            self.concepts.iter().all(|&c| e.has(c))
                && self.region.is_none_or(|r| r.contains_center(e, side))
        })
    }
}

impl FromStr for ClassDef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (body, region) = match s.split_once('@') {
            Some((body, region)) => (body, Some(region.parse::<Region>()?)),
            None => (s, None),
        };
        let concepts = body
            .split(['_', '+', ' '])
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<Concept>())
            .collect::<Result<Vec<_>>>()
            .map_err(|_| Error::UnknownClass(s.to_string()))?;
        ClassDef::new(concepts, region).map_err(|_| Error::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<ClassDef>,
    image_side: u32,
}

impl ClassTable {
    /// All admissible cross-group pairs and triples, then spatial variants.
    pub fn build(config: &DatasetConfig) -> Self {
        let admissible = config.admissible_elements();
        let satisfiable = |concepts: &[Concept]| {
            admissible.iter().any(|&(c, s, t)| {
                concepts.iter().all(|&k| match k {
                    Concept::Colour(x) => x == c,
                    Concept::Shape(x) => x == s,
                    Concept::Texture(x) => x == t,
                })
            })
        };
        let colours: Vec<_> = config.palette.iter().map(|&c| Concept::Colour(c)).collect();
        let shapes: Vec<_> = config.shapes.iter().map(|&s| Concept::Shape(s)).collect();
        let textures: Vec<_> = config
            .textures
            .iter()
            .map(|&t| Concept::Texture(t))
            .collect();

        let mut base: Vec<Vec<Concept>> = Vec::new();
        for (first, second) in [
            (&colours, &shapes),
            (&colours, &textures),
            (&shapes, &textures),
        ] {
            for &a in first.iter() {
                for &b in second.iter() {
                    base.push(vec![a, b]);
                }
            }
        }
        for &c in &colours {
            for &s in &shapes {
                for &t in &textures {
                    base.push(vec![c, s, t]);
                }
            }
        }
        let mut classes: Vec<ClassDef> = base
            .into_iter()
            .filter(|concepts| satisfiable(concepts))
            .map(|concepts| ClassDef::new(concepts, None).expect("cross-group class"))
            .collect();

        if config.spatial_classes {
            let regions = |axis: Axis| match axis {
                Axis::Horizontal => [Region::Left, Region::Right],
                Axis::Vertical => [Region::Top, Region::Bottom],
            };
            let mut spatial = Vec::new();
            for class in &classes {
                let axis = if class.involves(Concept::Shape(Shape::Square)) {
                    Some(config.spatial_axes.square)
                } else if class.involves(Concept::Shape(Shape::Triangle)) {
                    Some(config.spatial_axes.triangle)
                } else {
                    None
                };
                if let Some(axis) = axis {
                    for region in regions(axis) {
                        spatial.push(ClassDef {
                            concepts: class.concepts.clone(),
                            region: Some(region),
                        });
                    }
                }
            }
            classes.extend(spatial);
        }
        ClassTable {
            classes,
            image_side: config.image_side,
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        let wanted: ClassDef = name.parse()?;
        self.classes
            .iter()
            .position(|c| *c == wanted)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(ClassDef::name).collect()
    }

    /// Multi-hot membership vector for one scene.
    pub fn assign(&self, scene: &SceneSpec) -> Vec<bool> {
        self.classes
            .iter()
            .map(|c| c.matches(scene, self.image_side))
            .collect()
    }
}

/// Multi-hot class membership of `scene` under `table`.
pub fn assign_classes(scene: &SceneSpec, table: &ClassTable) -> Vec<bool> {
    table.assign(scene)
}
