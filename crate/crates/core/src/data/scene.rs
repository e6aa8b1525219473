use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// Eight-colour palette shared by objects and backgrounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Black,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.10, 0.10],
            Color::Green => [0.10, 0.75, 0.20],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.90, 0.10],
            Color::Cyan => [0.10, 0.85, 0.90],
            Color::Magenta => [0.85, 0.15, 0.85],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
        }
    }
}

/// Grid cell as `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell(pub usize, pub usize);

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub cell: Cell,
}

/// Symbolic description of a grid image.
///
/// Objects are kept in row-major cell order so that equal scenes compare equal
/// regardless of how they were built.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneDescription {
    pub grid_size: usize,
    pub background: Color,
    pub objects: Vec<SceneObject>,
}

impl SceneDescription {
    /// Builds a scene, sorting objects into canonical order, and validates it.
    pub fn new(grid_size: usize, background: Color, mut objects: Vec<SceneObject>) -> Result<Self> {
        objects.sort_by_key(|o| o.cell);
        let scene = Self {
            grid_size,
            background,
            objects,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(grid_size: usize, background: Color) -> Self {
        Self {
            grid_size,
            background,
            objects: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::Validation("grid_size must be at least 1".into()));
        }
        let capacity = self.grid_size * self.grid_size;
        if self.objects.len() > capacity {
            return Err(Error::Validation(format!(
                "scene holds {} objects but the grid has only {capacity} cells",
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.cell.0 >= self.grid_size || o.cell.1 >= self.grid_size {
                return Err(Error::Validation(format!(
                    "object cell {} outside a {}x{} grid",
                    o.cell, self.grid_size, self.grid_size
                )));
            }
            if o.color == self.background {
                return Err(Error::Validation(format!(
                    "object at {} has the background colour {}",
                    o.cell,
                    o.color.name()
                )));
            }
            if i > 0 {
                let prev = self.objects[i - 1].cell;
                if prev == o.cell {
                    return Err(Error::Validation(format!("more than one object in cell {}", o.cell)));
                }
                if prev > o.cell {
                    return Err(Error::Validation(
                        "objects must be listed in row-major cell order".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn object_at(&self, cell: Cell) -> Option<&SceneObject> {
        self.objects
            .binary_search_by_key(&cell, |o| o.cell)
            .ok()
            .map(|i| &self.objects[i])
    }

    pub fn is_free(&self, cell: Cell) -> bool {
        cell.0 < self.grid_size && cell.1 < self.grid_size && self.object_at(cell).is_none()
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for r in 0..self.grid_size {
            for c in 0..self.grid_size {
                if self.object_at(Cell(r, c)).is_none() {
                    out.push(Cell(r, c));
                }
            }
        }
        out
    }

    pub(crate) fn insert(&mut self, obj: SceneObject) {
        let pos = self.objects.partition_point(|o| o.cell < obj.cell);
        self.objects.insert(pos, obj);
    }

    pub(crate) fn take(&mut self, cell: Cell) -> Option<SceneObject> {
        let i = self.objects.binary_search_by_key(&cell, |o| o.cell).ok()?;
        Some(self.objects.remove(i))
    }
}
