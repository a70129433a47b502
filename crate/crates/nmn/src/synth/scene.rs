//! Scene graphs: named, attributed objects on a grid.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{COLORS, MATERIALS, NAMES, SIZES};

/// Grid side length; coordinates run 0..GRID.
pub const GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneObject {
    pub name: String,
    pub color: String,
    pub size: String,
    pub material: String,
    pub x: usize,
    pub y: usize,
}

/// A scene: objects at distinct grid cells, sorted by (x, y) so the slot
/// order carries horizontal position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    objects: Vec<SceneObject>,
}

impl SceneGraph {
    pub fn new(mut objects: Vec<SceneObject>) -> Self {
        let cells: BTreeSet<(usize, usize)> = objects.iter().map(|o| (o.x, o.y)).collect();
        assert_eq!(cells.len(), objects.len(), "object positions must be distinct");
        assert!(
            objects.iter().all(|o| o.x < GRID && o.y < GRID),
            "positions must lie on the grid"
        );
        objects.sort_by_key(|o| (o.x, o.y));
        Self { objects }
    }

    /// Samples `k` objects on distinct cells with uniform attributes.
    pub fn sample(rng: &mut ChaCha8Rng, k: usize) -> Self {
        assert!(k <= GRID * GRID, "at most one object per cell");
        let mut cells: Vec<usize> = (0..GRID * GRID).collect();
        cells.shuffle(rng);
        let objects = cells[..k]
            .iter()
            .map(|&cell| SceneObject {
                name: NAMES[rng.gen_range(0..NAMES.len())].to_string(),
                color: COLORS[rng.gen_range(0..COLORS.len())].to_string(),
                size: SIZES[rng.gen_range(0..SIZES.len())].to_string(),
                material: MATERIALS[rng.gen_range(0..MATERIALS.len())].to_string(),
                x: cell % GRID,
                y: cell / GRID,
            })
            .collect();
        Self::new(objects)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn object(&self, i: usize) -> &SceneObject {
        &self.objects[i]
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    /// True when `i rel j` holds; y grows downward, so "above" means a
    /// smaller y.
    pub fn relation_holds(&self, i: usize, j: usize, rel: &str) -> Option<bool> {
        let a = &self.objects[i];
        let b = &self.objects[j];
        match rel {
            "left of" => Some(a.x < b.x),
            "right of" => Some(a.x > b.x),
            "above" => Some(a.y < b.y),
            "below" => Some(a.y > b.y),
            _ => None,
        }
    }

    /// True when object `i` lies on the named half of the grid.
    pub fn on_side(&self, i: usize, side: &str) -> Option<bool> {
        let o = &self.objects[i];
        let half = GRID / 2;
        match side {
            "left" => Some(o.x < half),
            "right" => Some(o.x >= half),
            "top" => Some(o.y < half),
            "bottom" => Some(o.y >= half),
            _ => None,
        }
    }

    /// The object's value for a category word (color, size, material).
    pub fn category_value(&self, i: usize, category: &str) -> Option<&str> {
        let o = &self.objects[i];
        match category {
            "color" => Some(&o.color),
            "size" => Some(&o.size),
            "material" => Some(&o.material),
            _ => None,
        }
    }

    /// Whether any attribute of object `i` equals `value`.
    pub fn has_value(&self, i: usize, value: &str) -> bool {
        let o = &self.objects[i];
        o.color == value || o.size == value || o.material == value
    }

    /// Indices of objects with the given name.
    pub fn named(&self, name: &str) -> BTreeSet<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.name == name)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn obj(name: &str, color: &str, size: &str, material: &str, x: usize, y: usize) -> SceneObject {
        SceneObject {
            name: name.into(),
            color: color.into(),
            size: size.into(),
            material: material.into(),
            x,
            y,
        }
    }

    #[test]
    fn sampling_gives_distinct_cells_and_sorted_slots() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = SceneGraph::sample(&mut rng, 8);
            assert_eq!(scene.len(), 8);
            let cells: BTreeSet<(usize, usize)> =
                scene.objects().iter().map(|o| (o.x, o.y)).collect();
            assert_eq!(cells.len(), 8, "cells must be distinct");
            for w in scene.objects().windows(2) {
                assert!(
                    (w[0].x, w[0].y) <= (w[1].x, w[1].y),
                    "objects must be sorted by position"
                );
            }
        }
    }

    #[test]
    fn relations_are_antisymmetric_and_match_coordinates() {
        let scene = SceneGraph::new(vec![
            obj("cat", "red", "small", "wood", 0, 0),
            obj("dog", "blue", "large", "metal", 2, 1),
        ]);
        assert_eq!(scene.relation_holds(0, 1, "left of"), Some(true));
        assert_eq!(scene.relation_holds(1, 0, "left of"), Some(false));
        assert_eq!(scene.relation_holds(1, 0, "right of"), Some(true));
        assert_eq!(scene.relation_holds(0, 1, "above"), Some(true));
        assert_eq!(scene.relation_holds(0, 1, "below"), Some(false));
        assert_eq!(scene.relation_holds(0, 1, "near"), None);
        // An object never relates spatially to itself.
        for rel in super::super::RELATIONS {
            assert_eq!(scene.relation_holds(0, 0, rel), Some(false));
        }
    }

    #[test]
    fn sides_partition_the_grid() {
        let scene = SceneGraph::new(vec![
            obj("cat", "red", "small", "wood", 1, 3),
            obj("dog", "blue", "large", "metal", 2, 0),
        ]);
        assert_eq!(scene.on_side(0, "left"), Some(true));
        assert_eq!(scene.on_side(0, "right"), Some(false));
        assert_eq!(scene.on_side(0, "bottom"), Some(true));
        assert_eq!(scene.on_side(1, "right"), Some(true));
        assert_eq!(scene.on_side(1, "top"), Some(true));
        assert_eq!(scene.on_side(1, "middle"), None);
    }

    #[test]
    fn attribute_lookups_cover_all_categories() {
        let scene = SceneGraph::new(vec![obj("cat", "red", "small", "wood", 0, 0)]);
        assert_eq!(scene.category_value(0, "color"), Some("red"));
        assert_eq!(scene.category_value(0, "size"), Some("small"));
        assert_eq!(scene.category_value(0, "material"), Some("wood"));
        assert_eq!(scene.category_value(0, "shape"), None);
        assert!(scene.has_value(0, "red"));
        assert!(scene.has_value(0, "wood"));
        assert!(!scene.has_value(0, "blue"));
        assert_eq!(scene.named("cat"), BTreeSet::from([0]));
        assert!(scene.named("dog").is_empty());
    }

    #[test]
    #[should_panic(expected = "distinct")]
    fn overlapping_positions_are_rejected() {
        SceneGraph::new(vec![
            obj("cat", "red", "small", "wood", 1, 1),
            obj("dog", "blue", "large", "metal", 1, 1),
        ]);
    }
}
