use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::edit::{apply_edits, AtomicEdit, Vocabulary};
use super::generate::{GenerationConfig, GROUP_SIZE};
use super::render::{render_scene, Image};
use super::scene::SceneDescription;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GALLERY_BIN: &str = "gallery.bin";
pub const GALLERY_IDX: &str = "gallery.idx";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    EditPretrain,
    CirFinetune,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::EditPretrain => "edit_pretrain",
            DatasetKind::CirFinetune => "cir_finetune",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edit_pretrain" => Ok(DatasetKind::EditPretrain),
            "cir_finetune" => Ok(DatasetKind::CirFinetune),
            other => Err(Error::Usage(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub id: u32,
    pub scene: SceneDescription,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetGroup {
    pub id: u32,
    pub members: Vec<u32>,
}

/// One triplet as stored in the manifest; images are referenced by gallery id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub reference: u32,
    pub target: u32,
    /// Edits that turn the reference scene into the target scene, in order.
    pub edits: Vec<AtomicEdit>,
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_group: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: DatasetKind,
    pub seed: u64,
    pub count: usize,
    pub config: GenerationConfig,
    pub vocabulary: Vocabulary,
    pub gallery: Vec<GalleryEntry>,
    pub groups: Vec<SubsetGroup>,
    pub triplets: Vec<TripletRecord>,
}

impl Manifest {
    pub const FORMAT_VERSION: u32 = 1;
}

/// Borrowed view of one triplet with its images resolved.
#[derive(Clone, Copy, Debug)]
pub struct Triplet<'a> {
    pub reference: &'a Image,
    pub modification: &'a [u32],
    pub target: &'a Image,
    pub subset_group: Option<u32>,
}

/// A generated dataset: manifest plus the deduplicated image gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletDataset {
    manifest: Manifest,
    images: Vec<Image>,
}

impl TripletDataset {
    pub fn from_parts(manifest: Manifest, images: Vec<Image>) -> Result<Self> {
        let ds = Self { manifest, images };
        ds.validate()?;
        Ok(ds)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn kind(&self) -> DatasetKind {
        self.manifest.kind
    }

    pub fn seed(&self) -> u64 {
        self.manifest.seed
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.manifest.vocabulary
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.manifest.config
    }

    pub fn triplets(&self) -> &[TripletRecord] {
        &self.manifest.triplets
    }

    pub fn triplet(&self, i: usize) -> Option<Triplet<'_>> {
        let t = self.manifest.triplets.get(i)?;
        Some(Triplet {
            reference: &self.images[t.reference as usize],
            modification: &t.tokens,
            target: &self.images[t.target as usize],
            subset_group: t.subset_group,
        })
    }

    pub fn gallery_len(&self) -> usize {
        self.images.len()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, id: u32) -> Option<&Image> {
        self.images.get(id as usize)
    }

    pub fn scene(&self, id: u32) -> Option<&SceneDescription> {
        self.manifest.gallery.get(id as usize).map(|e| &e.scene)
    }

    pub fn groups(&self) -> &[SubsetGroup] {
        &self.manifest.groups
    }

    pub fn group(&self, id: u32) -> Option<&SubsetGroup> {
        self.manifest.groups.get(id as usize)
    }

    pub fn has_groups(&self) -> bool {
        !self.manifest.groups.is_empty()
    }

    /// Structural checks: ids, vocabulary closure, subset closure, image shapes.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let bad = |msg: String| Err(Error::Dataset(msg));
        if m.format_version != Manifest::FORMAT_VERSION {
            return bad(format!("unsupported dataset format version {}", m.format_version));
        }
        if m.gallery.len() != self.images.len() {
            return bad(format!(
                "manifest lists {} gallery images but {} blobs were provided",
                m.gallery.len(),
                self.images.len()
            ));
        }
        let res = m.config.resolution;
        for (i, (entry, img)) in m.gallery.iter().zip(&self.images).enumerate() {
            if entry.id as usize != i {
                return bad(format!("gallery id {} out of order at position {i}", entry.id));
            }
            if img.height != res || img.width != res {
                return bad(format!("image {i} is {}x{}, expected {res}x{res}", img.height, img.width));
            }
        }
        if m.triplets.len() != m.count {
            return bad(format!("manifest count {} but {} triplets", m.count, m.triplets.len()));
        }
        let n = self.images.len() as u32;
        let vocab = m.vocabulary.len() as u32;
        for (i, t) in m.triplets.iter().enumerate() {
            if t.reference >= n || t.target >= n {
                return bad(format!("triplet {i} references an image outside the gallery"));
            }
            if t.reference == t.target {
                return bad(format!("triplet {i} has identical reference and target"));
            }
            if let Some(&tok) = t.tokens.iter().find(|&&tok| tok >= vocab) {
                return bad(format!("triplet {i} token {tok} outside vocabulary of {vocab}"));
            }
            match (m.kind, t.subset_group) {
                (DatasetKind::CirFinetune, None) => {
                    return bad(format!("fine-tuning triplet {i} has no subset group"))
                }
                (_, Some(g)) => {
                    let group = m
                        .groups
                        .get(g as usize)
                        .ok_or_else(|| Error::Dataset(format!("triplet {i} names missing group {g}")))?;
                    if !group.members.contains(&t.target) {
                        return bad(format!("triplet {i} target is not in its own group"));
                    }
                }
                _ => {}
            }
        }
        for (i, g) in m.groups.iter().enumerate() {
            if g.id as usize != i {
                return bad(format!("group id {} out of order", g.id));
            }
            if g.members.len() != GROUP_SIZE {
                return bad(format!("group {} has {} members, expected {GROUP_SIZE}", g.id, g.members.len()));
            }
            if g.members.iter().any(|&id| id >= n) {
                return bad(format!("group {} references an image outside the gallery", g.id));
            }
        }
        Ok(())
    }

    /// Re-applies every triplet's edits to its reference scene and checks the
    /// result renders to the stored target image byte for byte.
    pub fn check_edit_consistency(&self) -> Result<()> {
        let res = self.manifest.config.resolution;
        for (i, t) in self.manifest.triplets.iter().enumerate() {
            let reference = &self.manifest.gallery[t.reference as usize].scene;
            let expected = &self.manifest.gallery[t.target as usize].scene;
            let rebuilt = apply_edits(reference, &t.edits)?;
            if &rebuilt != expected {
                return Err(Error::Dataset(format!("triplet {i}: edits do not reproduce the target scene")));
            }
            let img = render_scene(&rebuilt, res)?;
            if img.to_le_bytes() != self.images[t.target as usize].to_le_bytes() {
                return Err(Error::Dataset(format!("triplet {i}: rendered target differs from stored image")));
            }
            if self.manifest.vocabulary.encode(&t.edits)? != t.tokens {
                return Err(Error::Dataset(format!("triplet {i}: tokens do not match the edits")));
            }
        }
        Ok(())
    }

    /// Serialized `(manifest, gallery.bin, gallery.idx)` contents.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        let mut bin = Vec::new();
        let mut idx = String::new();
        for (i, img) in self.images.iter().enumerate() {
            let bytes = img.to_le_bytes();
            writeln!(idx, "{i}\t{}\t{}", bin.len(), bytes.len()).expect("string write");
            bin.extend_from_slice(&bytes);
        }
        Ok((manifest, bin, idx.into_bytes()))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (manifest, bin, idx) = self.to_bytes()?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        fs::write(dir.join(GALLERY_BIN), bin)?;
        fs::write(dir.join(GALLERY_IDX), idx)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        let bin = fs::read(dir.join(GALLERY_BIN))?;
        let idx = fs::read_to_string(dir.join(GALLERY_IDX))?;
        let res = manifest.config.resolution;
        let mut images = Vec::with_capacity(manifest.gallery.len());
        for (line_no, line) in idx.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let parsed: Option<(usize, usize, usize)> = match fields.as_slice() {
                [id, off, len] => id.parse().ok().zip(off.parse().ok()).zip(len.parse().ok()).map(|((a, b), c)| (a, b, c)),
                _ => None,
            };
            let (id, off, len) = parsed
                .ok_or_else(|| Error::Dataset(format!("malformed gallery.idx line {}", line_no + 1)))?;
            if id != line_no {
                return Err(Error::Dataset(format!("gallery.idx id {id} out of order")));
            }
            let blob = bin
                .get(off..off + len)
                .ok_or_else(|| Error::Dataset(format!("image {id} extends past gallery.bin")))?;
            images.push(Image::from_le_bytes(res, res, blob)?);
        }
        Self::from_parts(manifest, images)
    }

    /// SHA-256 over the serialized form.
    pub fn digest(&self) -> Result<String> {
        let (m, b, i) = self.to_bytes()?;
        let mut h = Sha256::new();
        h.update(&m);
        h.update(&b);
        h.update(&i);
        Ok(hex::encode(h.finalize()))
    }
}
