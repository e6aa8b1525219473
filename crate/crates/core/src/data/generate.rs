use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetKind, GalleryEntry, Manifest, SubsetGroup, TripletDataset, TripletRecord};
use super::edit::{apply_edit, random_edit, AtomicEdit, Verb, Vocabulary};
use super::render::{render_scene, Image};
use super::scene::{Cell, Color, SceneDescription, SceneObject, Shape};
use crate::error::{Error, Result};

/// Members of every near-duplicate subset.
pub const GROUP_SIZE: usize = 6;

/// Parameters shared by both generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub grid_size: usize,
    pub resolution: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Relative weights for composing 1, 2, 3, ... edits in a fine-tuning modification.
    pub edit_count_weights: Vec<f64>,
    /// Fine-tuning triplets drawn from each subset group.
    pub triplets_per_group: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            grid_size: 4,
            resolution: 32,
            min_objects: 2,
            max_objects: 6,
            edit_count_weights: vec![0.5, 0.3, 0.2],
            triplets_per_group: 4,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_size * self.grid_size;
        let fail = |m: String| Err(Error::Config(m));
        if self.grid_size == 0 || self.resolution == 0 || self.resolution % self.grid_size != 0 {
            return fail(format!(
                "resolution {} must be a positive multiple of grid_size {}",
                self.resolution, self.grid_size
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail("object counts must satisfy 1 <= min_objects <= max_objects".into());
        }
        if self.max_objects >= cells {
            return fail(format!("max_objects must leave a free cell in a {cells}-cell grid"));
        }
        if self.edit_count_weights.is_empty()
            || self.edit_count_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.edit_count_weights.iter().sum::<f64>() <= 0.0
        {
            return fail("edit_count_weights must be non-negative with a positive sum".into());
        }
        if self.triplets_per_group == 0 || self.triplets_per_group > GROUP_SIZE {
            return fail(format!("triplets_per_group must be in 1..={GROUP_SIZE}"));
        }
        Vocabulary::for_grid(self.grid_size).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Independent random stream for item `index` of a run.
fn substream(seed: u64, kind: DatasetKind, index: u64) -> ChaCha8Rng {
    let salt = match kind {
        DatasetKind::EditPretrain => 0x5eed_0001,
        DatasetKind::CirFinetune => 0x5eed_0002,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng
}

fn random_scene<R: Rng + ?Sized>(cfg: &GenerationConfig, rng: &mut R) -> SceneDescription {
    let background = *Color::ALL.choose(rng).expect("palette");
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut cells: Vec<Cell> = (0..cfg.grid_size)
        .flat_map(|r| (0..cfg.grid_size).map(move |c| Cell(r, c)))
        .collect();
    cells.shuffle(rng);
    let colors: Vec<Color> = Color::ALL.iter().copied().filter(|&c| c != background).collect();
    let objects = cells[..n]
        .iter()
        .map(|&cell| SceneObject {
            shape: *Shape::ALL.choose(rng).expect("shapes"),
            color: *colors.choose(rng).expect("colors"),
            cell,
        })
        .collect();
    SceneDescription::new(cfg.grid_size, background, objects).expect("generator builds valid scenes")
}

/// Deduplicating image table.
#[derive(Default)]
struct GalleryBuilder {
    entries: Vec<GalleryEntry>,
    images: Vec<Image>,
    by_digest: HashMap<[u8; 32], u32>,
}

impl GalleryBuilder {
    fn add(&mut self, scene: &SceneDescription, image: Image) -> u32 {
        let digest = image.digest();
        if let Some(&id) = self.by_digest.get(&digest) {
            return id;
        }
        let id = self.entries.len() as u32;
        self.entries.push(GalleryEntry {
            id,
            scene: scene.clone(),
        });
        self.images.push(image);
        self.by_digest.insert(digest, id);
        id
    }
}

/// Generates reference/target pairs that differ by exactly one atomic edit.
pub fn generate_edit_pretrain_set(seed: u64, count: usize, config: &GenerationConfig) -> Result<TripletDataset> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let vocab = Vocabulary::for_grid(config.grid_size)?;
    struct Item {
        reference: (SceneDescription, Image),
        target: (SceneDescription, Image),
        edit: AtomicEdit,
    }
    let items: Vec<Item> = (0..count)
        .map(|i| {
            let mut rng = substream(seed, DatasetKind::EditPretrain, i as u64);
            let scene = random_scene(config, &mut rng);
            let edit = random_edit(&scene, &Verb::ALL, config.min_objects, &mut rng)
                .expect("scenes always admit an edit");
            let target = apply_edit(&scene, &edit)?;
            let ri = render_scene(&scene, config.resolution)?;
            let ti = render_scene(&target, config.resolution)?;
            Ok(Item {
                reference: (scene, ri),
                target: (target, ti),
                edit,
            })
        })
        .collect::<Result<_>>()?;

    let mut gallery = GalleryBuilder::default();
    let mut triplets = Vec::with_capacity(count);
    for item in items {
        let reference = gallery.add(&item.reference.0, item.reference.1);
        let target = gallery.add(&item.target.0, item.target.1);
        triplets.push(TripletRecord {
            reference,
            target,
            edits: vec![item.edit],
            tokens: vocab.encode(&[item.edit])?,
            subset_group: None,
        });
    }
    TripletDataset::from_parts(
        Manifest {
            format_version: Manifest::FORMAT_VERSION,
            kind: DatasetKind::EditPretrain,
            seed,
            count,
            config: config.clone(),
            vocabulary: vocab,
            gallery: gallery.entries,
            groups: Vec::new(),
            triplets,
        },
        gallery.images,
    )
}

const MAX_ATTEMPTS: usize = 1000;

/// Generates fine-tuning triplets whose targets live in six-image near-duplicate groups.
///
/// Each group is a base scene plus five distinct single recolor/move
/// variants, so every member keeps the background and object count. A
/// triplet picks a member as target and walks 1–3 random edits away from it
/// to obtain a reference outside the group; the modification is the inverse
/// walk.
pub fn generate_cir_finetune_set(seed: u64, count: usize, config: &GenerationConfig) -> Result<TripletDataset> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let vocab = Vocabulary::for_grid(config.grid_size)?;
    let per_group = config.triplets_per_group;
    let n_groups = count.div_ceil(per_group);

    struct GroupItem {
        members: Vec<(SceneDescription, Image)>,
        // (target member index, reference, edits from reference to target)
        triplets: Vec<(usize, (SceneDescription, Image), Vec<AtomicEdit>)>,
    }

    let groups: Vec<GroupItem> = (0..n_groups)
        .map(|g| {
            let mut rng = substream(seed, DatasetKind::CirFinetune, g as u64);
            let n_trip = per_group.min(count - g * per_group);
            build_group(config, n_trip, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut gallery = GalleryBuilder::default();
    let mut triplets = Vec::with_capacity(count);
    let mut subset_groups = Vec::with_capacity(n_groups);
    for (gid, group) in groups.into_iter().enumerate() {
        let members: Vec<u32> = group
            .members
            .iter()
            .map(|(s, img)| gallery.add(s, img.clone()))
            .collect();
        for (t, (ref_scene, ref_img), edits) in group.triplets {
            let reference = gallery.add(&ref_scene, ref_img);
            triplets.push(TripletRecord {
                reference,
                target: members[t],
                tokens: vocab.encode(&edits)?,
                edits,
                subset_group: Some(gid as u32),
            });
        }
        subset_groups.push(SubsetGroup {
            id: gid as u32,
            members,
        });
    }

    return TripletDataset::from_parts(
        Manifest {
            format_version: Manifest::FORMAT_VERSION,
            kind: DatasetKind::CirFinetune,
            seed,
            count,
            config: config.clone(),
            vocabulary: vocab,
            gallery: gallery.entries,
            groups: subset_groups,
            triplets,
        },
        gallery.images,
    );

    fn build_group(cfg: &GenerationConfig, n_trip: usize, rng: &mut ChaCha8Rng) -> Result<GroupItem> {
        let base = random_scene(cfg, rng);
        let base_img = render_scene(&base, cfg.resolution)?;
        let mut members = vec![(base.clone(), base_img)];
        let mut attempts = 0;
        while members.len() < GROUP_SIZE {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Dataset("could not build a distinct subset group".into()));
            }
            let edit = random_edit(&base, &[Verb::Recolor, Verb::Move], cfg.min_objects, rng)
                .expect("base scenes have objects and free cells");
            let scene = apply_edit(&base, &edit)?;
            if members.iter().any(|(s, _)| *s == scene) {
                continue;
            }
            let img = render_scene(&scene, cfg.resolution)?;
            if members.iter().any(|(_, m)| *m == img) {
                continue;
            }
            members.push((scene, img));
        }

        let mut order: Vec<usize> = (0..GROUP_SIZE).collect();
        order.shuffle(rng);
        let weights = &cfg.edit_count_weights;
        let total: f64 = weights.iter().sum();
        let mut out = Vec::with_capacity(n_trip);
        for &t in order.iter().take(n_trip) {
            let target = &members[t].0;
            let mut attempts = 0;
            loop {
                attempts += 1;
                if attempts > MAX_ATTEMPTS {
                    return Err(Error::Dataset("could not find a reference outside the group".into()));
                }
                let mut pick = rng.random_range(0.0..total);
                let mut n_edits = weights.len();
                for (i, w) in weights.iter().enumerate() {
                    if pick < *w {
                        n_edits = i + 1;
                        break;
                    }
                    pick -= w;
                }
                let mut scene = target.clone();
                let mut forward = Vec::with_capacity(n_edits);
                for _ in 0..n_edits {
                    let e = random_edit(&scene, &Verb::ALL, cfg.min_objects, rng)
                        .expect("scenes always admit an edit");
                    scene = apply_edit(&scene, &e)?;
                    forward.push(e);
                }
                if members.iter().any(|(s, _)| *s == scene) {
                    continue;
                }
                let img = render_scene(&scene, cfg.resolution)?;
                if members.iter().any(|(_, m)| *m == img) {
                    continue;
                }
                let edits: Vec<AtomicEdit> = forward.iter().rev().map(AtomicEdit::inverse).collect();
                out.push((t, (scene, img), edits));
                break;
            }
        }
        Ok(GroupItem { members, triplets: out })
    }
}
