//! Color rendering of semantic grids.

use gridsight_core::grid::{GridMap, SemanticClass};
use gridsight_core::imageio::RgbImage;

pub fn class_color(class: SemanticClass) -> [u8; 3] {
    match class {
        SemanticClass::NonFree => [0, 0, 0],
        SemanticClass::Road => [128, 64, 128],
        SemanticClass::Sidewalk => [244, 35, 232],
        SemanticClass::Terrain => [152, 251, 152],
    }
}

/// One `scale x scale` block per cell, row 0 (far) at the top. Cells
/// outside the evaluation mask are drawn at half brightness.
pub fn render_map(map: &GridMap, scale: usize) -> RgbImage {
    let spec = map.spec();
    let scale = scale.max(1);
    RgbImage::from_fn(spec.cols * scale, spec.rows * scale, |x, y| {
        let (row, col) = (y / scale, x / scale);
        let c = class_color(map.get(row, col));
        if map.is_evaluable(row, col) {
            c
        } else {
            c.map(|v| v / 2)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridsight_core::grid::GridSpec;

    #[test]
    fn palette_and_darkening() {
        let spec = GridSpec::new(1, 2, 0.5, 0.0).unwrap();
        let map = GridMap::from_parts(spec, vec![SemanticClass::Road, SemanticClass::Terrain], vec![true, false]).unwrap();
        let img = render_map(&map, 2);
        assert_eq!((img.width(), img.height()), (4, 2));
        assert_eq!(img.get(1, 1), [128, 64, 128]);
        assert_eq!(img.get(2, 0), [76, 125, 76]);
    }
}
