//! Symbolic scenes and the frozen visual featurizer.
//!
//! A scene is a 4x4 board of (shape, color) objects. The featurizer is a
//! seeded random linear map from the board's one-hot encoding to the visual
//! feature width: a stand-in for a frozen visual encoder. Its weights live
//! outside the parameter registry and never train.

use crate::numerics::{DType, Tensor};
use crate::rng::{derive_seed, Rng};
use serde::{Deserialize, Serialize};

pub const BOARD_SIDE: usize = 4;
pub const BOARD_CELLS: usize = BOARD_SIDE * BOARD_SIDE;
/// Cells covered by one visual token.
pub const CELLS_PER_TOKEN: usize = 1;
/// Visual tokens per board.
pub const TOKENS_PER_BOARD: usize = BOARD_CELLS / CELLS_PER_TOKEN;
/// One-hot states per cell: empty or one of 4 shapes x 4 colors.
pub const CELL_STATES: usize = 1 + 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub fn all() -> [Shape; 4] {
        [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star]
    }

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    fn index(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Square => 1,
            Shape::Triangle => 2,
            Shape::Star => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub fn all() -> [Color; 4] {
        [Color::Red, Color::Green, Color::Blue, Color::Yellow]
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn index(self) -> usize {
        match self {
            Color::Red => 0,
            Color::Green => 1,
            Color::Blue => 2,
            Color::Yellow => 3,
        }
    }
}

/// A 4x4 board, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub cells: Vec<Option<(Shape, Color)>>,
}

impl SceneInstance {
    pub fn empty() -> Self {
        SceneInstance { cells: vec![None; BOARD_CELLS] }
    }

    /// Random board with `n_objects` objects at distinct cells.
    pub fn random(rng: &mut Rng, n_objects: usize) -> Self {
        let mut cells: Vec<usize> = (0..BOARD_CELLS).collect();
        rng.shuffle(&mut cells);
        let mut scene = SceneInstance::empty();
        for &cell in cells.iter().take(n_objects.min(BOARD_CELLS)) {
            let shape = Shape::all()[rng.below(4)];
            let color = Color::all()[rng.below(4)];
            scene.cells[cell] = Some((shape, color));
        }
        scene
    }

    pub fn count_color(&self, color: Color) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, Some((_, col)) if *col == color))
            .count()
    }

    pub fn has_shape(&self, shape: Shape) -> bool {
        self.cells
            .iter()
            .any(|c| matches!(c, Some((s, _)) if *s == shape))
    }

    pub fn shapes_present(&self) -> Vec<Shape> {
        let mut out = Vec::new();
        for shape in Shape::all() {
            if self.has_shape(shape) {
                out.push(shape);
            }
        }
        out
    }

    /// First object in row-major order, if any.
    pub fn first_object(&self) -> Option<(Shape, Color)> {
        self.cells.iter().flatten().next().copied()
    }

    pub fn n_objects(&self) -> usize {
        self.cells.iter().flatten().count()
    }

    /// Remove every object with the given shape.
    pub fn remove_shape(&mut self, shape: Shape) {
        for cell in self.cells.iter_mut() {
            if matches!(cell, Some((s, _)) if *s == shape) {
                *cell = None;
            }
        }
    }

    /// Force one object of the given shape onto the board (random color,
    /// random cell, preferring empty cells).
    pub fn place_shape(&mut self, rng: &mut Rng, shape: Shape) {
        if self.has_shape(shape) {
            return;
        }
        let empty: Vec<usize> = (0..BOARD_CELLS).filter(|&i| self.cells[i].is_none()).collect();
        let cell = if empty.is_empty() { rng.below(BOARD_CELLS) } else { empty[rng.below(empty.len())] };
        let color = Color::all()[rng.below(4)];
        self.cells[cell] = Some((shape, color));
    }

    fn cell_state(cell: &Option<(Shape, Color)>) -> usize {
        match cell {
            None => 0,
            Some((s, c)) => 1 + s.index() * 4 + c.index(),
        }
    }

    /// One-hot encoding grouped into visual tokens, [TOKENS_PER_BOARD,
    /// CELLS_PER_TOKEN * CELL_STATES].
    fn one_hot(&self) -> Tensor {
        let width = CELLS_PER_TOKEN * CELL_STATES;
        let mut data = vec![0.0f64; TOKENS_PER_BOARD * width];
        for (i, cell) in self.cells.iter().enumerate() {
            let token = i / CELLS_PER_TOKEN;
            let slot = i % CELLS_PER_TOKEN;
            data[token * width + slot * CELL_STATES + Self::cell_state(cell)] = 1.0;
        }
        Tensor::new_f64(vec![TOKENS_PER_BOARD, width], data).expect("fixed shape")
    }
}

/// Frozen random linear featurizer from grouped one-hot cells to d_visual.
#[derive(Debug, Clone)]
pub struct Featurizer {
    weight: Tensor,
    d_visual: usize,
}

impl Featurizer {
    /// Weights from the derived `featurizer` seed; fixed for the harness
    /// lifetime so dataset dumps can recompute features exactly.
    pub fn new(seed: u64, d_visual: usize) -> Self {
        let in_dim = CELLS_PER_TOKEN * CELL_STATES;
        let mut rng = Rng::new(derive_seed(seed, "featurizer"));
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::gaussian(vec![in_dim, d_visual], std, &mut rng, DType::F64);
        Featurizer { weight, d_visual }
    }

    pub fn d_visual(&self) -> usize {
        self.d_visual
    }

    /// Feature rows for one or more boards, concatenated:
    /// [n_boards * TOKENS_PER_BOARD, d_visual].
    pub fn featurize(&self, scenes: &[SceneInstance], dtype: DType) -> Tensor {
        let mut rows = Vec::with_capacity(scenes.len() * TOKENS_PER_BOARD * self.d_visual);
        for scene in scenes {
            let feats = scene.one_hot().matmul(&self.weight).expect("fixed dims");
            rows.extend(feats.to_f64_vec());
        }
        Tensor::from_f64(
            vec![scenes.len() * TOKENS_PER_BOARD, self.d_visual],
            rows,
            dtype,
        )
        .expect("consistent by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scene_places_exactly_n_objects() {
        let mut rng = Rng::new(1);
        for n in 0..=8 {
            let scene = SceneInstance::random(&mut rng, n);
            assert_eq!(scene.n_objects(), n);
        }
    }

    #[test]
    fn featurizer_is_deterministic_across_instances() {
        let mut rng = Rng::new(2);
        let scene = SceneInstance::random(&mut rng, 5);
        let a = Featurizer::new(7, 40).featurize(&[scene.clone()], DType::F32);
        let b = Featurizer::new(7, 40).featurize(&[scene], DType::F32);
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn pair_features_concatenate_rows() {
        let mut rng = Rng::new(3);
        let a = SceneInstance::random(&mut rng, 3);
        let b = SceneInstance::random(&mut rng, 4);
        let f = Featurizer::new(7, 24);
        let pair = f.featurize(&[a.clone(), b.clone()], DType::F64);
        assert_eq!(pair.shape(), &[2 * TOKENS_PER_BOARD, 24]);
        let solo = f.featurize(&[a], DType::F64);
        for i in 0..solo.numel() {
            assert_eq!(pair.get(i), solo.get(i));
        }
        let second = f.featurize(&[b], DType::F64);
        for i in 0..second.numel() {
            assert_eq!(pair.get(solo.numel() + i), second.get(i));
        }
    }

    #[test]
    fn scene_serde_round_trip() {
        let mut rng = Rng::new(4);
        let scene = SceneInstance::random(&mut rng, 6);
        let json = serde_json::to_string(&scene).unwrap();
        let back: SceneInstance = serde_json::from_str(&json).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn remove_and_place_shape() {
        let mut rng = Rng::new(5);
        let mut scene = SceneInstance::random(&mut rng, 6);
        scene.place_shape(&mut rng, Shape::Star);
        assert!(scene.has_shape(Shape::Star));
        scene.remove_shape(Shape::Star);
        assert!(!scene.has_shape(Shape::Star));
    }
}
