use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Cell, Color, SceneDescription, SceneObject, Shape};
use crate::error::{Error, Result};

/// Single-step scene modification.
///
/// Each variant carries every operand its text phrase mentions, so the
/// modification text is a pure function of the edit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "snake_case")]
pub enum AtomicEdit {
    Add { shape: Shape, color: Color, cell: Cell },
    Remove { shape: Shape, color: Color, cell: Cell },
    Recolor { shape: Shape, cell: Cell, from: Color, to: Color },
    Move { shape: Shape, color: Color, from: Cell, to: Cell },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verb {
    Add,
    Remove,
    Recolor,
    Move,
}

impl Verb {
    pub const ALL: [Verb; 4] = [Verb::Add, Verb::Remove, Verb::Recolor, Verb::Move];
}

impl AtomicEdit {
    pub fn verb(&self) -> Verb {
        match self {
            AtomicEdit::Add { .. } => Verb::Add,
            AtomicEdit::Remove { .. } => Verb::Remove,
            AtomicEdit::Recolor { .. } => Verb::Recolor,
            AtomicEdit::Move { .. } => Verb::Move,
        }
    }

    /// The edit that undoes this one.
    pub fn inverse(&self) -> AtomicEdit {
        match *self {
            AtomicEdit::Add { shape, color, cell } => AtomicEdit::Remove { shape, color, cell },
            AtomicEdit::Remove { shape, color, cell } => AtomicEdit::Add { shape, color, cell },
            AtomicEdit::Recolor { shape, cell, from, to } => AtomicEdit::Recolor {
                shape,
                cell,
                from: to,
                to: from,
            },
            AtomicEdit::Move { shape, color, from, to } => AtomicEdit::Move {
                shape,
                color,
                from: to,
                to: from,
            },
        }
    }

    /// Templated phrase, e.g. `recolor square r1 c1 blue`.
    pub fn words(&self) -> Vec<String> {
        let rc = |c: Cell| [format!("r{}", c.0), format!("c{}", c.1)];
        match *self {
            AtomicEdit::Add { shape, color, cell } => {
                let [r, c] = rc(cell);
                vec!["add".into(), color.name().into(), shape.name().into(), r, c]
            }
            AtomicEdit::Remove { shape, color, cell } => {
                let [r, c] = rc(cell);
                vec!["remove".into(), color.name().into(), shape.name().into(), r, c]
            }
            AtomicEdit::Recolor { shape, cell, to, .. } => {
                let [r, c] = rc(cell);
                vec!["recolor".into(), shape.name().into(), r, c, to.name().into()]
            }
            AtomicEdit::Move { shape, from, to, .. } => {
                let [r0, c0] = rc(from);
                let [r1, c1] = rc(to);
                vec!["move".into(), shape.name().into(), r0, c0, r1, c1]
            }
        }
    }
}

/// Applies `edit`, returning a new scene with exactly that change.
pub fn apply_edit(scene: &SceneDescription, edit: &AtomicEdit) -> Result<SceneDescription> {
    scene.validate()?;
    let mut out = scene.clone();
    match *edit {
        AtomicEdit::Add { shape, color, cell } => {
            if cell.0 >= scene.grid_size || cell.1 >= scene.grid_size {
                return Err(Error::Edit(format!("add target cell {cell} is outside the grid")));
            }
            if scene.object_at(cell).is_some() {
                return Err(Error::Edit(format!("add target cell {cell} is occupied")));
            }
            if color == scene.background {
                return Err(Error::Edit("added object would match the background".into()));
            }
            out.insert(SceneObject { shape, color, cell });
        }
        AtomicEdit::Remove { shape, color, cell } => {
            expect_object(scene, cell, shape, Some(color))?;
            out.take(cell);
        }
        AtomicEdit::Recolor { shape, cell, from, to } => {
            expect_object(scene, cell, shape, Some(from))?;
            if from == to {
                return Err(Error::Edit("recolor must change the colour".into()));
            }
            if to == scene.background {
                return Err(Error::Edit("recolor target matches the background".into()));
            }
            let mut obj = out.take(cell).expect("checked above");
            obj.color = to;
            out.insert(obj);
        }
        AtomicEdit::Move { shape, color, from, to } => {
            expect_object(scene, from, shape, Some(color))?;
            if !scene.is_free(to) {
                return Err(Error::Edit(format!("move destination {to} is occupied or outside the grid")));
            }
            let mut obj = out.take(from).expect("checked above");
            obj.cell = to;
            out.insert(obj);
        }
    }
    Ok(out)
}

pub fn apply_edits(scene: &SceneDescription, edits: &[AtomicEdit]) -> Result<SceneDescription> {
    let mut s = scene.clone();
    for e in edits {
        s = apply_edit(&s, e)?;
    }
    Ok(s)
}

fn expect_object(scene: &SceneDescription, cell: Cell, shape: Shape, color: Option<Color>) -> Result<()> {
    match scene.object_at(cell) {
        None => Err(Error::Edit(format!("no object at {cell}"))),
        Some(o) if o.shape != shape => Err(Error::Edit(format!(
            "object at {cell} is a {}, not a {}",
            o.shape.name(),
            shape.name()
        ))),
        Some(o) if color.is_some_and(|c| c != o.color) => Err(Error::Edit(format!(
            "object at {cell} is {}, not {}",
            o.color.name(),
            color.map_or("", Color::name)
        ))),
        Some(_) => Ok(()),
    }
}

/// Draws a random edit valid for `scene` using one of `verbs`.
///
/// `min_objects` keeps removals from shrinking the scene below that size.
pub fn random_edit<R: Rng + ?Sized>(
    scene: &SceneDescription,
    verbs: &[Verb],
    min_objects: usize,
    rng: &mut R,
) -> Option<AtomicEdit> {
    let free = scene.free_cells();
    let feasible: Vec<Verb> = verbs
        .iter()
        .copied()
        .filter(|v| match v {
            Verb::Add => !free.is_empty(),
            Verb::Remove => scene.objects.len() > min_objects.max(1),
            Verb::Recolor => !scene.objects.is_empty(),
            Verb::Move => !scene.objects.is_empty() && !free.is_empty(),
        })
        .collect();
    let verb = *feasible.choose(rng)?;
    let colors: Vec<Color> = Color::ALL
        .iter()
        .copied()
        .filter(|&c| c != scene.background)
        .collect();
    Some(match verb {
        Verb::Add => AtomicEdit::Add {
            shape: *Shape::ALL.choose(rng)?,
            color: *colors.choose(rng)?,
            cell: *free.choose(rng)?,
        },
        Verb::Remove => {
            let o = scene.objects.choose(rng)?;
            AtomicEdit::Remove {
                shape: o.shape,
                color: o.color,
                cell: o.cell,
            }
        }
        Verb::Recolor => {
            let o = scene.objects.choose(rng)?;
            let options: Vec<Color> = colors.iter().copied().filter(|&c| c != o.color).collect();
            AtomicEdit::Recolor {
                shape: o.shape,
                cell: o.cell,
                from: o.color,
                to: *options.choose(rng)?,
            }
        }
        Verb::Move => {
            let o = scene.objects.choose(rng)?;
            AtomicEdit::Move {
                shape: o.shape,
                color: o.color,
                from: o.cell,
                to: *free.choose(rng)?,
            }
        }
    })
}

/// Fixed token vocabulary for modification phrases.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

/// Joins the phrases of a multi-edit modification.
pub const JOIN_TOKEN: &str = "and";

impl Vocabulary {
    pub const MAX_SIZE: usize = 64;

    pub fn for_grid(grid_size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = vec![JOIN_TOKEN.into(), "add".into(), "remove".into(), "recolor".into(), "move".into()];
        tokens.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        tokens.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        tokens.extend((0..grid_size).map(|r| format!("r{r}")));
        tokens.extend((0..grid_size).map(|c| format!("c{c}")));
        if tokens.len() > Self::MAX_SIZE {
            return Err(Error::Validation(format!(
                "grid size {grid_size} needs {} tokens, above the {} token limit",
                tokens.len(),
                Self::MAX_SIZE
            )));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == word).map(|i| i as u32)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Token ids for a sequence of edits joined by [`JOIN_TOKEN`].
    pub fn encode(&self, edits: &[AtomicEdit]) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for (i, e) in edits.iter().enumerate() {
            if i > 0 {
                out.push(self.id(JOIN_TOKEN).expect("join token present"));
            }
            for w in e.words() {
                out.push(
                    self.id(&w)
                        .ok_or_else(|| Error::Validation(format!("word `{w}` not in vocabulary")))?,
                );
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&i| {
                self.word(i)
                    .ok_or_else(|| Error::Validation(format!("token id {i} outside vocabulary of {}", self.len())))
            })
            .collect();
        Ok(words?.join(" "))
    }
}
