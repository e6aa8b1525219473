//! Full model state and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DFCKPT\0\0"
//! version    u32
//! meta_len   u64
//! meta       meta_len bytes of JSON (configs, stage, digests, RNG state,
//!            frozen flags, parameter names/groups/shapes in payload order)
//! payload    every parameter as raw f32 values, in the order listed in meta
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositor::{Compositor, CompositorConfig};
use crate::data::Image;
use crate::encoders::{Branch, BranchKind, BranchTrace, EncoderDims, TokenFeatures, VisionEncoder, VisionTrace};
use crate::error::{Error, Result};
use crate::nn::{Grads, Mat, ParamGroup, ParamStore, Real};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Hidden width of the vision and hybrid encoders.
    pub width: usize,
    /// Output feature dimension `d`.
    pub feature_dim: usize,
    /// Learnable query tokens besides the overall-representation token.
    pub query_tokens: usize,
    pub hybrid_blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vision_blocks: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Train the vision encoder instead of keeping it frozen.
    pub vision_trainable: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            width: 64,
            feature_dim: 64,
            query_tokens: 8,
            hybrid_blocks: 2,
            heads: 4,
            ffn_hidden: 128,
            vision_blocks: 1,
            vocab_size: crate::data::Vocabulary::MAX_SIZE,
            max_text_len: 24,
            vision_trainable: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("width", self.width),
            ("feature_dim", self.feature_dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.width % self.heads != 0 || self.feature_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide width {} and feature_dim {}",
                self.heads, self.width, self.feature_dim
            )));
        }
        Ok(())
    }

    /// Tokens per branch output: the query tokens plus the overall-representation token.
    pub fn token_count(&self) -> usize {
        self.query_tokens + 1
    }

    pub fn num_patches(&self) -> usize {
        let s = self.image_size / self.patch_size;
        s * s
    }

    fn dims(&self) -> EncoderDims {
        EncoderDims {
            image_size: self.image_size,
            patch_size: self.patch_size,
            width: self.width,
            feature_dim: self.feature_dim,
            tokens: self.token_count(),
            hybrid_blocks: self.hybrid_blocks,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            vision_blocks: self.vision_blocks,
            vocab_size: self.vocab_size,
            max_text_len: self.max_text_len,
        }
    }
}

/// Independent initialization stream per component, so changing one part of
/// the architecture never shifts another part's initial weights.
fn component_rng(seed: u64, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component);
    rng
}

const STREAM_VISION: u64 = 1;
const STREAM_DETAIL: u64 = 2;
const STREAM_GLOBAL: u64 = 3;
const STREAM_COMPOSITOR: u64 = 4;

/// Visual input to a branch: raw pixels or precomputed patch features.
#[derive(Clone, Copy, Debug)]
pub enum VisualInput<'a, T> {
    Image(&'a Image),
    Patches(&'a Mat<T>),
}

/// Forward state kept for a backward pass through one encoding.
#[derive(Clone, Debug)]
pub struct EncodeTrace<T> {
    kind: BranchKind,
    vision: Option<VisionTrace<T>>,
    branch: BranchTrace<T>,
}

/// Vision encoder, both branches and the compositor over one parameter store.
#[derive(Clone, Debug)]
pub struct DetailFusionModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    vision: VisionEncoder,
    detail: Branch,
    global: Branch,
    compositor: Compositor,
    compositor_start: usize,
}

impl<T: Real> DetailFusionModel<T> {
    pub fn new(config: ModelConfig, compositor: CompositorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(&mut store, &dims, &mut component_rng(seed, STREAM_VISION));
        let detail = Branch::new(&mut store, BranchKind::Detail, &dims, &mut component_rng(seed, STREAM_DETAIL));
        let global = Branch::new(&mut store, BranchKind::Global, &dims, &mut component_rng(seed, STREAM_GLOBAL));
        let compositor_start = store.len();
        let compositor = Compositor::new(
            &mut store,
            compositor,
            config.feature_dim,
            config.heads,
            &mut component_rng(seed, STREAM_COMPOSITOR),
        );
        store.set_frozen(ParamGroup::Vision, !config.vision_trainable);
        Ok(Self {
            config,
            store,
            vision,
            detail,
            global,
            compositor,
            compositor_start,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn compositor_config(&self) -> &CompositorConfig {
        self.compositor.config()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn compositor(&self) -> &Compositor {
        &self.compositor
    }

    pub fn branch(&self, kind: BranchKind) -> &Branch {
        match kind {
            BranchKind::Detail => &self.detail,
            BranchKind::Global => &self.global,
        }
    }

    /// Replaces the compositor with a freshly initialized one.
    pub fn reset_compositor(&mut self, config: CompositorConfig, seed: u64) {
        let frozen = self.store.is_frozen(ParamGroup::Compositor);
        self.store.truncate(self.compositor_start);
        self.compositor = Compositor::new(
            &mut self.store,
            config,
            self.config.feature_dim,
            self.config.heads,
            &mut component_rng(seed, STREAM_COMPOSITOR),
        );
        self.store.set_frozen(ParamGroup::Compositor, frozen);
    }

    pub fn vision_encode(&self, image: &Image) -> Result<Mat<T>> {
        Ok(self.vision.forward(&self.store, image)?.0)
    }

    pub fn encode_query(&self, reference: &Image, text: &[u32], branch: BranchKind) -> Result<TokenFeatures<T>> {
        Ok(self.forward_encode(VisualInput::Image(reference), Some(text), branch)?.0)
    }

    /// Detail-branch image path used for every gallery and target feature.
    pub fn encode_image(&self, image: &Image) -> Result<TokenFeatures<T>> {
        Ok(self.forward_encode(VisualInput::Image(image), None, BranchKind::Detail)?.0)
    }

    pub fn encode_images(&self, images: &[Image]) -> Result<Vec<TokenFeatures<T>>> {
        images.iter().map(|im| self.encode_image(im)).collect()
    }

    /// Encodes a query (`text` given) or a bare image (`text` absent, detail branch only).
    ///
    /// The vision trace is kept only when the vision encoder is trainable.
    pub fn forward_encode(
        &self,
        input: VisualInput<'_, T>,
        text: Option<&[u32]>,
        branch: BranchKind,
    ) -> Result<(TokenFeatures<T>, EncodeTrace<T>)> {
        let (patches, vision) = match input {
            VisualInput::Image(im) => {
                let (p, tr) = self.vision.forward(&self.store, im)?;
                let keep = !self.store.is_frozen(ParamGroup::Vision);
                (std::borrow::Cow::Owned(p), keep.then_some(tr))
            }
            VisualInput::Patches(p) => {
                if p.rows() != self.config.num_patches() || p.cols() != self.config.width {
                    return Err(Error::dim(
                        format!("{}x{} patch features", self.config.num_patches(), self.config.width),
                        format!("{}x{}", p.rows(), p.cols()),
                    ));
                }
                (std::borrow::Cow::Borrowed(p), None)
            }
        };
        let (tokens, tr) = self.branch(branch).forward(&self.store, &patches, text)?;
        if !tokens.is_finite() {
            return Err(Error::Numeric("encoder produced non-finite features".into()));
        }
        Ok((
            TokenFeatures::new(tokens),
            EncodeTrace {
                kind: branch,
                vision,
                branch: tr,
            },
        ))
    }

    /// Accumulates parameter gradients for one encoding given `dL/dtokens`.
    pub fn backward_encode(&self, trace: &EncodeTrace<T>, d_tokens: &Mat<T>, grads: &mut Grads<T>) {
        let d_patches = self.branch(trace.kind).backward(&self.store, &trace.branch, d_tokens, grads);
        if let Some(vt) = &trace.vision {
            self.vision.backward(&self.store, vt, &d_patches, grads);
        }
    }

    pub fn cast<U: Real>(&self) -> DetailFusionModel<U> {
        DetailFusionModel {
            config: self.config.clone(),
            store: self.store.cast(),
            vision: self.vision.clone(),
            detail: self.detail.clone(),
            global: self.global.clone(),
            compositor: self.compositor.clone(),
            compositor_start: self.compositor_start,
        }
    }

    /// SHA-256 over every parameter of `group`, names and values.
    pub fn group_digest(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.store.params().iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for v in &p.data {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Trainer RNG position, enough to resume the exact stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format_version: u32,
    /// Last training stage applied; 0 for a freshly initialized model.
    stage: u8,
    config_digest: String,
    parent_digest: Option<String>,
    init_seed: u64,
    rng: Option<RngState>,
    model: ModelConfig,
    compositor: CompositorConfig,
    frozen: BTreeMap<ParamGroup, bool>,
    params: Vec<ParamMeta>,
}

const MAGIC: &[u8; 8] = b"DFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model snapshot plus its training provenance.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: u8,
    /// Digest of the training config that produced this checkpoint.
    pub config_digest: String,
    /// Digest of the checkpoint this one was trained from.
    pub parent_digest: Option<String>,
    pub init_seed: u64,
    pub rng: Option<RngState>,
    pub model: DetailFusionModel<f32>,
}

impl Checkpoint {
    /// Untrained model at stage 0.
    pub fn initial(model: ModelConfig, compositor: CompositorConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            stage: 0,
            config_digest: String::new(),
            parent_digest: None,
            init_seed: seed,
            rng: None,
            model: DetailFusionModel::new(model, compositor, seed)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let store = self.model.store();
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_VERSION,
            stage: self.stage,
            config_digest: self.config_digest.clone(),
            parent_digest: self.parent_digest.clone(),
            init_seed: self.init_seed,
            rng: self.rng.clone(),
            model: self.model.config().clone(),
            compositor: *self.model.compositor_config(),
            frozen: store.frozen_flags().clone(),
            params: store
                .params()
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.shape.clone(),
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut out = Vec::with_capacity(meta.len() + 4 * store.params().iter().map(|p| p.data.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for p in store.params() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta_end = 20usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated metadata"))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..meta_end])
            .map_err(|e| Error::Checkpoint(format!("invalid metadata: {e}")))?;
        let mut model = DetailFusionModel::<f32>::new(meta.model.clone(), meta.compositor, meta.init_seed)
            .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
        let store = model.store_mut();
        if store.len() != meta.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lists {} parameters, config expects {}",
                meta.params.len(),
                store.len()
            )));
        }
        let mut offset = meta_end;
        for (p, m) in store.params_mut().iter_mut().zip(&meta.params) {
            if p.name != m.name || p.group != m.group || p.shape != m.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: file has {} {:?}, config expects {} {:?}",
                    m.name, m.shape, p.name, p.shape
                )));
            }
            let n = p.data.len() * 4;
            let chunk = bytes
                .get(offset..offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("payload truncated at {}", p.name)))?;
            for (v, c) in p.data.iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            offset += n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        for (&g, &f) in &meta.frozen {
            store.set_frozen(g, f);
        }
        Ok(Self {
            stage: meta.stage,
            config_digest: meta.config_digest,
            parent_digest: meta.parent_digest,
            init_seed: meta.init_seed,
            rng: meta.rng,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
