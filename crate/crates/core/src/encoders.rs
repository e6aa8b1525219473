//! Vision encoder and the two hybrid-modal branch encoders.
//!
//! The vision encoder turns an image into patch features. Each branch runs a
//! stack of hybrid blocks in which `K + 1` learnable query tokens cross-attend
//! over themselves, the image patches and the embedded modification text,
//! then self-attend and pass through a feed-forward layer. Query token 0 plays
//! the overall-representation role used for retrieval.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{
    dot, l2_normalize, Attention, AttentionCache, FeedForward, FeedForwardCache, Grads, Init, LayerNorm,
    LayerNormCache, Linear, Mat, ParamGroup, ParamId, ParamStore, Real, INIT_STD,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// Detail-oriented inference branch; also encodes gallery images.
    Detail,
    /// Global feature matching branch.
    Global,
}

impl BranchKind {
    pub fn group(self) -> ParamGroup {
        match self {
            BranchKind::Detail => ParamGroup::Detail,
            BranchKind::Global => ParamGroup::Global,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            BranchKind::Detail => "di",
            BranchKind::Global => "gm",
        }
    }
}

impl std::str::FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "di" | "detail" => Ok(BranchKind::Detail),
            "gm" | "global" => Ok(BranchKind::Global),
            other => Err(Error::Usage(format!("unknown branch `{other}` (expected di or gm)"))),
        }
    }
}

/// `K + 1` token vectors of dimension `d`; row 0 is the overall representation.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures<T> {
    pub tokens: Mat<T>,
    /// Whether row 0 has unit L2 norm.
    pub normalized: bool,
}

impl<T: Real> TokenFeatures<T> {
    pub fn new(tokens: Mat<T>) -> Self {
        Self {
            tokens,
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn cls(&self) -> &[T] {
        self.tokens.row(0)
    }

    /// Copy with row 0 scaled to unit norm.
    pub fn normalized(mut self) -> Result<Self> {
        if !self.normalized {
            let (unit, _) = l2_normalize(self.tokens.row(0))
                .ok_or_else(|| Error::Numeric("overall-representation token has zero norm".into()))?;
            self.tokens.row_mut(0).copy_from_slice(&unit);
            self.normalized = true;
        }
        Ok(self)
    }

    pub fn validate(&self, expected_len: usize, dim: usize) -> Result<()> {
        if self.tokens.rows() != expected_len || self.tokens.cols() != dim {
            return Err(Error::dim(
                format!("{expected_len} tokens of width {dim}"),
                format!("{} tokens of width {}", self.tokens.rows(), self.tokens.cols()),
            ));
        }
        if !self.tokens.is_finite() {
            return Err(Error::Numeric("token features contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> TokenFeatures<U> {
        TokenFeatures {
            tokens: self.tokens.cast(),
            normalized: self.normalized,
        }
    }
}

/// Cosine similarity between two non-zero vectors.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim(a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if !(na > T::zero() && nb > T::zero()) {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    let s = dot(a, b) / (na * nb);
    Ok(s.max(-T::one()).min(T::one()))
}

/// Architecture sizes shared by the vision encoder and both branches.
#[derive(Clone, Debug)]
pub(crate) struct EncoderDims {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub tokens: usize,
    pub hybrid_blocks: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vision_blocks: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
}

impl EncoderDims {
    pub fn patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * Image::CHANNELS
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
struct SelfAttentionBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct SelfAttentionTrace<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
}

impl SelfAttentionBlock {
    fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, group: ParamGroup, d: &EncoderDims, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), group, d.width, rng),
            attn: Attention::new(ps, &format!("{name}.attn"), group, d.width, d.heads, false, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), group, d.width, rng),
            ff: FeedForward::new(ps, &format!("{name}.ff"), group, d.width, d.ffn_hidden, rng),
        }
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> (Mat<T>, SelfAttentionTrace<T>) {
        let (n1, ln1) = self.ln1.forward(ps, x);
        let (a, attn) = self.attn.forward(ps, &n1, &n1);
        let mut h = x.clone();
        h.add_assign(&a);
        let (n2, ln2) = self.ln2.forward(ps, &h);
        let (f, ff) = self.ff.forward(ps, &n2);
        h.add_assign(&f);
        (h, SelfAttentionTrace { ln1, attn, ln2, ff })
    }

    fn backward<T: Real>(&self, ps: &ParamStore<T>, tr: &SelfAttentionTrace<T>, dy: &Mat<T>, g: &mut Grads<T>) -> Mat<T> {
        let mut dh = dy.clone();
        let dn2 = self.ff.backward(ps, &tr.ff, dy, g);
        dh.add_assign(&self.ln2.backward(ps, &tr.ln2, &dn2, g));
        let (dq, dkv) = self.attn.backward(ps, &tr.attn, &dh, g);
        let mut dn1 = dq;
        dn1.add_assign(&dkv);
        let mut dx = dh;
        dx.add_assign(&self.ln1.backward(ps, &tr.ln1, &dn1, g));
        dx
    }
}

/// Frozen-by-default image encoder producing one feature per patch.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    patch_embed: Linear,
    pos: ParamId,
    blocks: Vec<SelfAttentionBlock>,
    ln: LayerNorm,
    image_size: usize,
    patch_size: usize,
    width: usize,
}

#[derive(Clone, Debug)]
pub struct VisionTrace<T> {
    raw: Mat<T>,
    blocks: Vec<SelfAttentionTrace<T>>,
    ln: LayerNormCache<T>,
}

impl VisionEncoder {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, d: &EncoderDims, rng: &mut R) -> Self {
        let g = ParamGroup::Vision;
        let init = Init::TruncNormal(INIT_STD);
        Self {
            patch_embed: Linear::new(ps, "vision.patch_embed", g, d.patch_len(), d.width, true, init, rng),
            pos: ps.add("vision.pos", g, &[d.patches(), d.width], init, rng),
            blocks: (0..d.vision_blocks)
                .map(|i| SelfAttentionBlock::new(ps, &format!("vision.block{i}"), g, d, rng))
                .collect(),
            ln: LayerNorm::new(ps, "vision.ln", g, d.width, rng),
            image_size: d.image_size,
            patch_size: d.patch_size,
            width: d.width,
        }
    }

    pub fn num_patches(&self) -> usize {
        let s = self.image_size / self.patch_size;
        s * s
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Flattens an image into one row per patch, `(y, x, channel)` order within a patch.
    pub fn patchify<T: Real>(&self, image: &Image) -> Result<Mat<T>> {
        if image.height != self.image_size || image.width != self.image_size {
            return Err(Error::dim(
                format!("{0}x{0} image", self.image_size),
                format!("{}x{} image", image.height, image.width),
            ));
        }
        let p = self.patch_size;
        let per_side = self.image_size / p;
        let plen = p * p * Image::CHANNELS;
        let mut out = Mat::zeros(per_side * per_side, plen);
        for py in 0..per_side {
            for px in 0..per_side {
                let row = out.row_mut(py * per_side + px);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        let i = ((py * p + y) * self.image_size + px * p + x) * Image::CHANNELS;
                        for c in 0..Image::CHANNELS {
                            row[k] = T::lit(f64::from(image.data[i + c]));
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, image: &Image) -> Result<(Mat<T>, VisionTrace<T>)> {
        let raw = self.patchify(image)?;
        let mut x = self.patch_embed.forward(ps, &raw);
        let pos = ps.value(self.pos);
        for (v, &p) in x.data_mut().iter_mut().zip(pos) {
            *v += p;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, tr) = b.forward(ps, &x);
            blocks.push(tr);
            x = y;
        }
        let (y, ln) = self.ln.forward(ps, &x);
        Ok((y, VisionTrace { raw, blocks, ln }))
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, tr: &VisionTrace<T>, dy: &Mat<T>, g: &mut Grads<T>) {
        let mut dx = self.ln.backward(ps, &tr.ln, dy, g);
        for (b, btr) in self.blocks.iter().zip(&tr.blocks).rev() {
            dx = b.backward(ps, btr, &dx, g);
        }
        {
            let dpos = g.get_mut(self.pos);
            for (d, &v) in dpos.iter_mut().zip(dx.data()) {
                *d += v;
            }
        }
        // Input gradient unused: pixels are data.
        let _ = self.patch_embed.backward(ps, &tr.raw, &dx, g);
    }
}

/// Cross-attention, self-attention and feed-forward over the query tokens.
#[derive(Clone, Debug)]
struct HybridBlock {
    ln_q: LayerNorm,
    ln_ctx: LayerNorm,
    cross: Attention,
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct HybridBlockTrace<T> {
    ln_q: LayerNormCache<T>,
    ln_ctx: LayerNormCache<T>,
    cross: AttentionCache<T>,
    ln_self: LayerNormCache<T>,
    self_attn: AttentionCache<T>,
    ln_ff: LayerNormCache<T>,
    ff: FeedForwardCache<T>,
}

impl HybridBlock {
    fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, group: ParamGroup, d: &EncoderDims, rng: &mut R) -> Self {
        Self {
            ln_q: LayerNorm::new(ps, &format!("{name}.ln_q"), group, d.width, rng),
            ln_ctx: LayerNorm::new(ps, &format!("{name}.ln_ctx"), group, d.width, rng),
            cross: Attention::new(ps, &format!("{name}.cross"), group, d.width, d.heads, false, rng),
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), group, d.width, rng),
            self_attn: Attention::new(ps, &format!("{name}.self"), group, d.width, d.heads, false, rng),
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), group, d.width, rng),
            ff: FeedForward::new(ps, &format!("{name}.ff"), group, d.width, d.ffn_hidden, rng),
        }
    }

    /// `ext` holds the image patches followed by the text embeddings.
    fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>, ext: &Mat<T>) -> (Mat<T>, HybridBlockTrace<T>) {
        let (xn, ln_q) = self.ln_q.forward(ps, x);
        let (en, ln_ctx) = self.ln_ctx.forward(ps, ext);
        let ctx = Mat::vstack(&[&xn, &en]);
        let (c, cross) = self.cross.forward(ps, &xn, &ctx);
        let mut h = x.clone();
        h.add_assign(&c);
        let (sn, ln_self) = self.ln_self.forward(ps, &h);
        let (s, self_attn) = self.self_attn.forward(ps, &sn, &sn);
        h.add_assign(&s);
        let (fnn, ln_ff) = self.ln_ff.forward(ps, &h);
        let (f, ff) = self.ff.forward(ps, &fnn);
        h.add_assign(&f);
        (
            h,
            HybridBlockTrace {
                ln_q,
                ln_ctx,
                cross,
                ln_self,
                self_attn,
                ln_ff,
                ff,
            },
        )
    }

    /// Returns `(dL/dx, dL/dext)`.
    fn backward<T: Real>(&self, ps: &ParamStore<T>, tr: &HybridBlockTrace<T>, dy: &Mat<T>, g: &mut Grads<T>) -> (Mat<T>, Mat<T>) {
        let mut dh = dy.clone();
        let dfn = self.ff.backward(ps, &tr.ff, dy, g);
        dh.add_assign(&self.ln_ff.backward(ps, &tr.ln_ff, &dfn, g));
        let (dsq, dskv) = self.self_attn.backward(ps, &tr.self_attn, &dh, g);
        let mut dsn = dsq;
        dsn.add_assign(&dskv);
        dh.add_assign(&self.ln_self.backward(ps, &tr.ln_self, &dsn, g));
        let (dxq, dctx) = self.cross.backward(ps, &tr.cross, &dh, g);
        let nq = dxq.rows();
        let mut dxn = dxq;
        dxn.add_assign(&dctx.slice_rows(0, nq));
        let den = dctx.slice_rows(nq, dctx.rows());
        let mut dx = dh;
        dx.add_assign(&self.ln_q.backward(ps, &tr.ln_q, &dxn, g));
        let dext = self.ln_ctx.backward(ps, &tr.ln_ctx, &den, g);
        (dx, dext)
    }
}

/// Learnable-query transformer fusing image patches and text.
#[derive(Clone, Debug)]
pub struct HybridEncoder {
    queries: ParamId,
    tok_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<HybridBlock>,
    ln_out: LayerNorm,
    tokens: usize,
    width: usize,
    vocab_size: usize,
    max_text_len: usize,
}

#[derive(Clone, Debug)]
pub struct HybridTrace<T> {
    text: Vec<u32>,
    patches: usize,
    blocks: Vec<HybridBlockTrace<T>>,
    ln_out: LayerNormCache<T>,
}

impl HybridEncoder {
    fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, prefix: &str, group: ParamGroup, d: &EncoderDims, rng: &mut R) -> Self {
        let init = Init::TruncNormal(INIT_STD);
        Self {
            queries: ps.add(format!("{prefix}.queries"), group, &[d.tokens, d.width], init, rng),
            tok_embed: ps.add(format!("{prefix}.tok_embed"), group, &[d.vocab_size, d.width], init, rng),
            pos_embed: ps.add(format!("{prefix}.pos_embed"), group, &[d.max_text_len, d.width], init, rng),
            blocks: (0..d.hybrid_blocks)
                .map(|i| HybridBlock::new(ps, &format!("{prefix}.block{i}"), group, d, rng))
                .collect(),
            ln_out: LayerNorm::new(ps, &format!("{prefix}.ln_out"), group, d.width, rng),
            tokens: d.tokens,
            width: d.width,
            vocab_size: d.vocab_size,
            max_text_len: d.max_text_len,
        }
    }

    fn validate_text(&self, text: &[u32]) -> Result<()> {
        if text.len() > self.max_text_len {
            return Err(Error::Validation(format!(
                "modification has {} tokens, limit is {}",
                text.len(),
                self.max_text_len
            )));
        }
        if let Some(&t) = text.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::Validation(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
        }
        Ok(())
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, patches: &Mat<T>, text: &[u32]) -> Result<(Mat<T>, HybridTrace<T>)> {
        self.validate_text(text)?;
        if patches.cols() != self.width {
            return Err(Error::dim(format!("patch width {}", self.width), format!("patch width {}", patches.cols())));
        }
        let emb = ps.value(self.tok_embed);
        let pos = ps.value(self.pos_embed);
        let w = self.width;
        let mut text_rows = Mat::zeros(text.len(), w);
        for (t, &id) in text.iter().enumerate() {
            let row = text_rows.row_mut(t);
            let e = &emb[id as usize * w..(id as usize + 1) * w];
            let p = &pos[t * w..(t + 1) * w];
            for j in 0..w {
                row[j] = e[j] + p[j];
            }
        }
        let ext = Mat::vstack(&[patches, &text_rows]);
        let mut x = Mat::from_vec(self.tokens, w, ps.value(self.queries).to_vec());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, tr) = b.forward(ps, &x, &ext);
            blocks.push(tr);
            x = y;
        }
        let (y, ln_out) = self.ln_out.forward(ps, &x);
        Ok((
            y,
            HybridTrace {
                text: text.to_vec(),
                patches: patches.rows(),
                blocks,
                ln_out,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the patches.
    fn backward<T: Real>(&self, ps: &ParamStore<T>, tr: &HybridTrace<T>, dy: &Mat<T>, g: &mut Grads<T>) -> Mat<T> {
        let w = self.width;
        let mut dx = self.ln_out.backward(ps, &tr.ln_out, dy, g);
        let mut dext = Mat::zeros(tr.patches + tr.text.len(), w);
        for (b, btr) in self.blocks.iter().zip(&tr.blocks).rev() {
            let (d, de) = b.backward(ps, btr, &dx, g);
            dext.add_assign(&de);
            dx = d;
        }
        for (q, &v) in g.get_mut(self.queries).iter_mut().zip(dx.data()) {
            *q += v;
        }
        {
            let demb = g.get_mut(self.tok_embed);
            for (t, &id) in tr.text.iter().enumerate() {
                let src = dext.row(tr.patches + t);
                for (d, &v) in demb[id as usize * w..(id as usize + 1) * w].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        {
            let dpos = g.get_mut(self.pos_embed);
            for t in 0..tr.text.len() {
                let src = dext.row(tr.patches + t);
                for (d, &v) in dpos[t * w..(t + 1) * w].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        dext.slice_rows(0, tr.patches)
    }
}

/// One branch: hybrid encoder plus its projection layers.
#[derive(Clone, Debug)]
pub struct Branch {
    kind: BranchKind,
    encoder: HybridEncoder,
    /// Hybrid-modal mapping for (image, text) queries.
    linear_h: Linear,
    /// Image feature mapping; only the detail branch encodes bare images.
    linear_i: Option<Linear>,
}

/// Which projection a forward pass used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Projection {
    Hybrid,
    Image,
}

#[derive(Clone, Debug)]
pub struct BranchTrace<T> {
    hybrid: HybridTrace<T>,
    hidden: Mat<T>,
    projection: Projection,
}

impl Branch {
    pub(crate) fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, kind: BranchKind, d: &EncoderDims, rng: &mut R) -> Self {
        let group = kind.group();
        let prefix = kind.prefix();
        let init = Init::TruncNormal(INIT_STD);
        Self {
            kind,
            encoder: HybridEncoder::new(ps, prefix, group, d, rng),
            linear_h: Linear::new(ps, &format!("{prefix}.linear_h"), group, d.width, d.feature_dim, true, init, rng),
            linear_i: (kind == BranchKind::Detail)
                .then(|| Linear::new(ps, &format!("{prefix}.linear_i"), group, d.width, d.feature_dim, true, init, rng)),
        }
    }

    pub fn kind(&self) -> BranchKind {
        self.kind
    }

    /// Query path when `text` is given, image path otherwise.
    pub(crate) fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        patches: &Mat<T>,
        text: Option<&[u32]>,
    ) -> Result<(Mat<T>, BranchTrace<T>)> {
        let (projection, layer) = match text {
            Some(_) => (Projection::Hybrid, &self.linear_h),
            None => (
                Projection::Image,
                self.linear_i
                    .as_ref()
                    .ok_or_else(|| Error::Usage("only the detail branch encodes bare images".into()))?,
            ),
        };
        let (hidden, hybrid) = self.encoder.forward(ps, patches, text.unwrap_or(&[]))?;
        let out = layer.forward(ps, &hidden);
        Ok((
            out,
            BranchTrace {
                hybrid,
                hidden,
                projection,
            },
        ))
    }

    pub(crate) fn backward<T: Real>(&self, ps: &ParamStore<T>, tr: &BranchTrace<T>, dy: &Mat<T>, g: &mut Grads<T>) -> Mat<T> {
        let layer = match tr.projection {
            Projection::Hybrid => &self.linear_h,
            Projection::Image => self.linear_i.as_ref().expect("image projection exists"),
        };
        let dh = layer.backward(ps, &tr.hidden, dy, g);
        self.encoder.backward(ps, &tr.hybrid, &dh, g)
    }
}
