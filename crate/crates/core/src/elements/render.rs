//! Rasterization of scenes into RGB intensity images.
//!
//! Shapes and textures are evaluated at pixel centres, with no
//! anti-aliasing, so renders are byte-exact for a given scene.

use super::config::{DatasetConfig, Shape, Texture, TextureGeometry};
use super::scene::{texture_period, ElementSpec, SceneSpec};
use crate::tensor::ImageTensor;

/// Half-width of the plus bars and cross diagonals, in element units.
const BAR_HALF_WIDTH: f32 = 1.0 / 6.0;

fn inside_shape(shape: Shape, u: f32, v: f32) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let (du, dv) = (u - 0.5, v - 0.5);
            du * du + dv * dv <= 0.25
        }
        // Apex at top centre, base along the bottom edge.
        Shape::Triangle => v >= 2.0 * (u - 0.5).abs(),
        Shape::Plus => (u - 0.5).abs() <= BAR_HALF_WIDTH || (v - 0.5).abs() <= BAR_HALF_WIDTH,
        Shape::Cross => {
            let d1 = (u - v).abs() * std::f32::consts::FRAC_1_SQRT_2;
            let d2 = (u + v - 1.0).abs() * std::f32::consts::FRAC_1_SQRT_2;
            d1 <= BAR_HALF_WIDTH || d2 <= BAR_HALF_WIDTH
        }
    }
}

fn inside_texture(e: &ElementSpec, geometry: &TextureGeometry, lx: f32, ly: f32) -> bool {
    let shift = e.texture_shift as f32;
    match e.texture {
        Texture::Solid => true,
        Texture::Spots => {
            let period = texture_period(Texture::Spots, e.size, geometry);
            let radius = e.size as f32 * geometry.spot_radius;
            let du = (lx - shift).rem_euclid(period) - 0.5 * period;
            let dv = (ly - shift).rem_euclid(period) - 0.5 * period;
            du * du + dv * dv <= radius * radius
        }
        Texture::Stripes => {
            let period = texture_period(Texture::Stripes, e.size, geometry);
            let t = (lx + ly) * std::f32::consts::FRAC_1_SQRT_2 - shift;
            t.rem_euclid(period) < 0.5 * period
        }
    }
}

/// Writes one element into `image` (HWC layout).
fn draw_element(image: &mut ImageTensor, e: &ElementSpec, geometry: &TextureGeometry) {
    let width = image.width;
    let scale = e.brightness as f32 / 255.0;
    let rgb = e.colour.channels().map(|c| c * scale);
    let size = e.size as f32;
    for py in e.y..e.y + e.size {
        let ly = (py - e.y) as f32 + 0.5;
        let v = ly / size;
        for px in e.x..e.x + e.size {
            let lx = (px - e.x) as f32 + 0.5;
            let u = lx / size;
            if inside_shape(e.shape, u, v) && inside_texture(e, geometry, lx, ly) {
                let offset = (py as usize * width + px as usize) * 3;
                image.data[offset..offset + 3].copy_from_slice(&rgb);
            }
        }
    }
}

/// Renders a scene on a black background.
pub fn render_image(scene: &SceneSpec, config: &DatasetConfig) -> ImageTensor {
    let side = config.image_side as usize;
    let mut image = ImageTensor::zeros(side, side);
    for e in &scene.elements {
        debug_assert!(e.fits(config.image_side), "element outside image: {e:?}");
        draw_element(&mut image, e, &config.texture_geometry);
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elements::config::Colour;

    fn solid(colour: Colour, shape: Shape, size: u32, x: u32, y: u32) -> ElementSpec {
        ElementSpec {
            colour,
            brightness: 255,
            size,
            shape,
            texture: Texture::Solid,
            texture_shift: 0,
            x,
            y,
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let image = render_image(&SceneSpec::default(), &DatasetConfig::simple(0));
        assert_eq!((image.height, image.width), (64, 64));
        assert!(image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn solid_red_square_centre() {
        let scene = SceneSpec {
            elements: vec![solid(Colour::Red, Shape::Square, 16, 10, 20)],
        };
        let image = render_image(&scene, &DatasetConfig::simple(0));
        assert_eq!(image.pixel(28, 18), [1.0, 0.0, 0.0]);
        assert_eq!(image.pixel(9, 9), [0.0, 0.0, 0.0]);
        let lit = image.data.chunks(3).filter(|p| p[0] > 0.0).count();
        assert_eq!(lit, 256);
    }

    #[test]
    fn brightness_scales_channels() {
        let mut e = solid(Colour::Cyan, Shape::Circle, 20, 0, 0);
        e.brightness = 153;
        let image = render_image(&SceneSpec { elements: vec![e] }, &DatasetConfig::simple(0));
        assert_eq!(image.pixel(10, 10), [0.0, 0.6, 0.6]);
    }

    #[test]
    fn shapes_have_distinct_masks() {
        let config = DatasetConfig::standard(0);
        let areas: Vec<usize> = Shape::ALL
            .iter()
            .map(|&s| {
                let scene = SceneSpec {
                    elements: vec![solid(Colour::Green, s, 20, 0, 0)],
                };
                render_image(&scene, &config)
                    .data
                    .chunks(3)
                    .filter(|p| p[1] > 0.0)
                    .count()
            })
            .collect();
        assert_eq!(areas[0], 400);
        for i in 0..areas.len() {
            for j in 0..i {
                assert_ne!(areas[i], areas[j], "{:?}", areas);
            }
        }
    }

    #[test]
    fn textures_cover_part_of_the_element_and_shift() {
        let config = DatasetConfig::simple(0);
        for texture in [Texture::Spots, Texture::Stripes] {
            let mut e = solid(Colour::Blue, Shape::Square, 20, 0, 0);
            e.texture = texture;
            let a = render_image(&SceneSpec { elements: vec![e] }, &config);
            let covered = a.data.chunks(3).filter(|p| p[2] > 0.0).count();
            assert!(
                (100..300).contains(&covered),
                "{texture:?} covers {covered}"
            );
            e.texture_shift = 2;
            let b = render_image(&SceneSpec { elements: vec![e] }, &config);
            assert_ne!(a.data, b.data);
        }
    }
}
