//! Adaptive feature compositor.
//!
//! Each side's overall-representation token first attends over the opposite
//! branch's tokens, then over its own branch's tokens. The two enriched
//! vectors are fused as `λ·g + (1 − λ)·f + bridge`, where `λ` comes from a
//! sigmoid-gated MLP and the bridge from a second MLP over the concatenation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TokenFeatures;
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, l2_normalize_backward, sigmoid, Attention, AttentionCache, Grads, Init, LayerNorm, LayerNormCache,
    Linear, Mat, Mlp, MlpCache, ParamGroup, ParamStore, Real,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    /// Cross-side then same-side attention layers.
    #[default]
    Attention,
    /// No extraction: the raw tokens go straight to fusion, which concatenates them.
    Concat,
    /// Per-side `relu(Linear(x))` projection before fusion.
    Projection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Gated convex combination plus bridging feature.
    #[default]
    PhiPsi,
    /// Gated convex combination only.
    PhiOnly,
    /// Midpoint plus bridging feature.
    PsiOnly,
    /// Plain midpoint `(g + f) / 2`.
    Average,
}

impl FusionMode {
    fn has_gate(self) -> bool {
        matches!(self, FusionMode::PhiPsi | FusionMode::PhiOnly)
    }

    fn has_bridge(self) -> bool {
        matches!(self, FusionMode::PhiPsi | FusionMode::PsiOnly)
    }
}

macro_rules! parse_mode {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

parse_mode!(ExtractionMode, "extraction mode",
    "attention" => ExtractionMode::Attention,
    "concat" => ExtractionMode::Concat,
    "projection" => ExtractionMode::Projection,
);
parse_mode!(FusionMode, "fusion mode",
    "phi_psi" => FusionMode::PhiPsi,
    "phi_only" => FusionMode::PhiOnly,
    "psi_only" => FusionMode::PsiOnly,
    "average" => FusionMode::Average,
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Global,
    Detail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositorConfig {
    /// Layers attending over the opposite branch's tokens.
    pub cross_layers: usize,
    /// Layers attending over the side's own tokens.
    pub same_layers: usize,
    pub extraction: ExtractionMode,
    pub fusion: FusionMode,
}

impl Default for CompositorConfig {
    fn default() -> Self {
        Self {
            cross_layers: 2,
            same_layers: 2,
            extraction: ExtractionMode::Attention,
            fusion: FusionMode::PhiPsi,
        }
    }
}

/// Fused query feature with the per-sample mixing coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T> {
    pub vector: Vec<T>,
    /// Weight on the global side; fixed at 0.5 for modes without a gate.
    pub lambda: T,
}

/// Single-query residual attention layer: `cls += attn(ln_q(cls), ln_kv(tokens))`.
#[derive(Clone, Debug)]
struct ClsLayer {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
}

#[derive(Clone, Debug)]
struct ClsLayerTrace<T> {
    ln_q: LayerNormCache<T>,
    ln_kv: LayerNormCache<T>,
    attn: AttentionCache<T>,
}

impl ClsLayer {
    fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Compositor;
        Self {
            ln_q: LayerNorm::new(ps, &format!("{name}.ln_q"), g, dim, rng),
            ln_kv: LayerNorm::new(ps, &format!("{name}.ln_kv"), g, dim, rng),
            attn: Attention::new(ps, &format!("{name}.attn"), g, dim, heads, true, rng),
        }
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, cls: &mut Mat<T>, tokens: &Mat<T>) -> ClsLayerTrace<T> {
        let (q, ln_q) = self.ln_q.forward(ps, cls);
        let (kv, ln_kv) = self.ln_kv.forward(ps, tokens);
        let (a, attn) = self.attn.forward(ps, &q, &kv);
        cls.add_assign(&a);
        ClsLayerTrace { ln_q, ln_kv, attn }
    }

    /// Turns `d_cls` (after the layer) into `d_cls` before it; accumulates token grads.
    fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        tr: &ClsLayerTrace<T>,
        d_cls: &mut Mat<T>,
        d_tokens: &mut Mat<T>,
        g: &mut Grads<T>,
    ) {
        let (dq, dkv) = self.attn.backward(ps, &tr.attn, d_cls, g);
        d_cls.add_assign(&self.ln_q.backward(ps, &tr.ln_q, &dq, g));
        d_tokens.add_assign(&self.ln_kv.backward(ps, &tr.ln_kv, &dkv, g));
    }
}

#[derive(Clone, Debug)]
struct SideExtractor {
    cross: Vec<ClsLayer>,
    same: Vec<ClsLayer>,
    projection: Option<Linear>,
}

#[derive(Clone, Debug)]
enum ExtractTrace<T> {
    Attention {
        cross: Vec<ClsLayerTrace<T>>,
        same: Vec<ClsLayerTrace<T>>,
    },
    Identity,
    Projection {
        input: Mat<T>,
        pre: Mat<T>,
    },
}

impl SideExtractor {
    fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        cfg: &CompositorConfig,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let mut out = Self {
            cross: Vec::new(),
            same: Vec::new(),
            projection: None,
        };
        match cfg.extraction {
            ExtractionMode::Attention => {
                out.cross = (0..cfg.cross_layers)
                    .map(|i| ClsLayer::new(ps, &format!("{name}.cross{i}"), dim, heads, rng))
                    .collect();
                out.same = (0..cfg.same_layers)
                    .map(|i| ClsLayer::new(ps, &format!("{name}.same{i}"), dim, heads, rng))
                    .collect();
            }
            ExtractionMode::Concat => {}
            ExtractionMode::Projection => {
                // Scaled so the projected features keep roughly the input magnitude.
                let init = Init::TruncNormal(1.0 / (dim as f64).sqrt());
                out.projection = Some(Linear::new(
                    ps,
                    &format!("{name}.projection"),
                    ParamGroup::Compositor,
                    dim,
                    dim,
                    true,
                    init,
                    rng,
                ));
            }
        }
        out
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, own: &Mat<T>, opposite: &Mat<T>) -> (Vec<T>, ExtractTrace<T>) {
        let mut cls = own.slice_rows(0, 1);
        if let Some(p) = &self.projection {
            let pre = p.forward(ps, &cls);
            let out = pre.data().iter().map(|&v| v.max(T::zero())).collect();
            return (out, ExtractTrace::Projection { input: cls, pre });
        }
        if self.cross.is_empty() && self.same.is_empty() {
            return (cls.into_vec(), ExtractTrace::Identity);
        }
        let cross = self.cross.iter().map(|l| l.forward(ps, &mut cls, opposite)).collect();
        let same = self.same.iter().map(|l| l.forward(ps, &mut cls, own)).collect();
        (cls.into_vec(), ExtractTrace::Attention { cross, same })
    }

    /// Returns gradients w.r.t. the own and opposite token matrices.
    fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        tr: &ExtractTrace<T>,
        d_out: &[T],
        shape: (usize, usize),
        g: &mut Grads<T>,
    ) -> (Mat<T>, Mat<T>) {
        let mut d_own = Mat::zeros(shape.0, shape.1);
        let mut d_opp = Mat::zeros(shape.0, shape.1);
        let mut d_cls = Mat::from_vec(1, shape.1, d_out.to_vec());
        match tr {
            ExtractTrace::Identity => {}
            ExtractTrace::Projection { input, pre } => {
                let p = self.projection.as_ref().expect("projection layer");
                for (d, &v) in d_cls.data_mut().iter_mut().zip(pre.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                d_cls = p.backward(ps, input, &d_cls, g);
            }
            ExtractTrace::Attention { cross, same } => {
                for (l, t) in self.same.iter().zip(same).rev() {
                    l.backward(ps, t, &mut d_cls, &mut d_own, g);
                }
                for (l, t) in self.cross.iter().zip(cross).rev() {
                    l.backward(ps, t, &mut d_cls, &mut d_opp, g);
                }
            }
        }
        for (d, &v) in d_own.row_mut(0).iter_mut().zip(d_cls.data()) {
            *d += v;
        }
        (d_own, d_opp)
    }
}

#[derive(Clone, Debug)]
pub struct Compositor {
    config: CompositorConfig,
    dim: usize,
    global: SideExtractor,
    detail: SideExtractor,
    /// Gate MLP `2d → 4d → 1`.
    phi: Option<Mlp>,
    /// Bridge MLP `2d → 4d → d`.
    psi: Option<Mlp>,
}

/// Everything a batched forward pass needs for its backward pass.
#[derive(Clone, Debug)]
pub struct ComposeTrace<T> {
    shape: (usize, usize),
    extract: Vec<(ExtractTrace<T>, ExtractTrace<T>)>,
    enriched_g: Mat<T>,
    enriched_f: Mat<T>,
    lambdas: Vec<T>,
    phi: Option<MlpCache<T>>,
    psi: Option<MlpCache<T>>,
    units: Mat<T>,
    norms: Vec<T>,
}

impl Compositor {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        config: CompositorConfig,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let global = SideExtractor::new(ps, "compositor.global", &config, dim, heads, rng);
        let detail = SideExtractor::new(ps, "compositor.detail", &config, dim, heads, rng);
        let g = ParamGroup::Compositor;
        let hidden = 4 * dim;
        let phi = config
            .fusion
            .has_gate()
            .then(|| Mlp::new(ps, "compositor.phi", g, 2 * dim, hidden, 1, rng));
        let psi = config
            .fusion
            .has_bridge()
            .then(|| Mlp::new(ps, "compositor.psi", g, 2 * dim, hidden, dim, rng));
        Self {
            config,
            dim,
            global,
            detail,
            phi,
            psi,
        }
    }

    pub fn config(&self) -> &CompositorConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Gate MLP, when the fusion mode has one.
    pub fn gate(&self) -> Option<&Mlp> {
        self.phi.as_ref()
    }

    /// Bridge MLP, when the fusion mode has one.
    pub fn bridge(&self) -> Option<&Mlp> {
        self.psi.as_ref()
    }

    fn check_tokens<T: Real>(&self, a: &TokenFeatures<T>, b: &TokenFeatures<T>) -> Result<()> {
        if a.dim() != self.dim || b.dim() != self.dim || a.len() != b.len() || a.is_empty() {
            return Err(Error::dim(
                format!("two equal-length token sets of width {}", self.dim),
                format!("{}x{} and {}x{}", a.len(), a.dim(), b.len(), b.dim()),
            ));
        }
        Ok(())
    }

    fn side(&self, side: Side) -> &SideExtractor {
        match side {
            Side::Global => &self.global,
            Side::Detail => &self.detail,
        }
    }

    /// Enriched overall-representation vector for one side.
    pub fn extract_cls<T: Real>(
        &self,
        ps: &ParamStore<T>,
        own: &TokenFeatures<T>,
        opposite: &TokenFeatures<T>,
        side: Side,
    ) -> Result<Vec<T>> {
        self.check_tokens(own, opposite)?;
        Ok(self.side(side).forward(ps, &own.tokens, &opposite.tokens).0)
    }

    /// Unnormalized fusion of two enriched vectors.
    pub fn fuse<T: Real>(&self, ps: &ParamStore<T>, global: &[T], detail: &[T]) -> Result<FusedFeature<T>> {
        if global.len() != self.dim || detail.len() != self.dim {
            return Err(Error::dim(self.dim, if global.len() != self.dim { global.len() } else { detail.len() }));
        }
        let g = Mat::from_vec(1, self.dim, global.to_vec());
        let f = Mat::from_vec(1, self.dim, detail.to_vec());
        let (out, lambdas, ..) = self.fuse_rows(ps, &g, &f);
        Ok(FusedFeature {
            vector: out.into_vec(),
            lambda: lambdas[0],
        })
    }

    fn fuse_rows<T: Real>(
        &self,
        ps: &ParamStore<T>,
        g: &Mat<T>,
        f: &Mat<T>,
    ) -> (Mat<T>, Vec<T>, Option<MlpCache<T>>, Option<MlpCache<T>>) {
        let (b, d) = (g.rows(), self.dim);
        let mut joint = Mat::zeros(b, 2 * d);
        for i in 0..b {
            joint.row_mut(i)[..d].copy_from_slice(g.row(i));
            joint.row_mut(i)[d..].copy_from_slice(f.row(i));
        }
        let half = T::lit(0.5);
        let (lambdas, phi_cache) = match &self.phi {
            Some(phi) => {
                let (logits, cache) = phi.forward(ps, &joint);
                (logits.data().iter().map(|&z| sigmoid(z)).collect(), Some(cache))
            }
            None => (vec![half; b], None),
        };
        let mut out = Mat::zeros(b, d);
        for i in 0..b {
            let row = out.row_mut(i);
            if self.phi.is_some() {
                let l = lambdas[i];
                for j in 0..d {
                    row[j] = l * g.row(i)[j] + (T::one() - l) * f.row(i)[j];
                }
            } else {
                for j in 0..d {
                    row[j] = (g.row(i)[j] + f.row(i)[j]) * half;
                }
            }
        }
        let psi_cache = self.psi.as_ref().map(|psi| {
            let (bridge, cache) = psi.forward(ps, &joint);
            out.add_assign(&bridge);
            cache
        });
        (out, lambdas, phi_cache, psi_cache)
    }

    /// Fused, unit-normalized feature for one query.
    pub fn compose<T: Real>(
        &self,
        ps: &ParamStore<T>,
        global: &TokenFeatures<T>,
        detail: &TokenFeatures<T>,
    ) -> Result<FusedFeature<T>> {
        let g = self.extract_cls(ps, global, detail, Side::Global)?;
        let f = self.extract_cls(ps, detail, global, Side::Detail)?;
        let raw = self.fuse(ps, &g, &f)?;
        let (vector, _) = l2_normalize(&raw.vector)
            .ok_or_else(|| Error::Numeric("fused feature has zero norm".into()))?;
        Ok(FusedFeature {
            vector,
            lambda: raw.lambda,
        })
    }

    pub fn compose_batch<T: Real>(
        &self,
        ps: &ParamStore<T>,
        global: &[TokenFeatures<T>],
        detail: &[TokenFeatures<T>],
    ) -> Result<Vec<FusedFeature<T>>> {
        Ok(self.forward_batch(ps, global, detail)?.0)
    }

    /// Batched forward that keeps what [`Compositor::backward_batch`] needs.
    pub fn forward_batch<T: Real>(
        &self,
        ps: &ParamStore<T>,
        global: &[TokenFeatures<T>],
        detail: &[TokenFeatures<T>],
    ) -> Result<(Vec<FusedFeature<T>>, ComposeTrace<T>)> {
        if global.len() != detail.len() || global.is_empty() {
            return Err(Error::Usage(format!(
                "compositor batch needs matching non-empty sides, got {} and {}",
                global.len(),
                detail.len()
            )));
        }
        let b = global.len();
        let mut enriched_g = Mat::zeros(b, self.dim);
        let mut enriched_f = Mat::zeros(b, self.dim);
        let mut extract = Vec::with_capacity(b);
        for (i, (gt, dt)) in global.iter().zip(detail).enumerate() {
            self.check_tokens(gt, dt)?;
            let (g, gtr) = self.global.forward(ps, &gt.tokens, &dt.tokens);
            let (f, ftr) = self.detail.forward(ps, &dt.tokens, &gt.tokens);
            enriched_g.row_mut(i).copy_from_slice(&g);
            enriched_f.row_mut(i).copy_from_slice(&f);
            extract.push((gtr, ftr));
        }
        let (raw, lambdas, phi, psi) = self.fuse_rows(ps, &enriched_g, &enriched_f);
        let mut units = Mat::zeros(b, self.dim);
        let mut norms = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let (u, n) = l2_normalize(raw.row(i)).ok_or_else(|| Error::Numeric("fused feature has zero norm".into()))?;
            units.row_mut(i).copy_from_slice(&u);
            norms.push(n);
            out.push(FusedFeature {
                vector: u,
                lambda: lambdas[i],
            });
        }
        let shape = (global[0].len(), self.dim);
        Ok((
            out,
            ComposeTrace {
                shape,
                extract,
                enriched_g,
                enriched_f,
                lambdas,
                phi,
                psi,
                units,
                norms,
            },
        ))
    }

    /// Backward from gradients on the unit-normalized outputs (`B × d`).
    ///
    /// Accumulates compositor parameter gradients and returns per-sample
    /// gradients w.r.t. the global and detail token matrices.
    pub fn backward_batch<T: Real>(
        &self,
        ps: &ParamStore<T>,
        tr: &ComposeTrace<T>,
        d_units: &Mat<T>,
        g: &mut Grads<T>,
    ) -> (Vec<Mat<T>>, Vec<Mat<T>>) {
        let (b, d) = (d_units.rows(), self.dim);
        let half = T::lit(0.5);
        let mut d_raw = Mat::zeros(b, d);
        for i in 0..b {
            let v = l2_normalize_backward(tr.units.row(i), tr.norms[i], d_units.row(i));
            d_raw.row_mut(i).copy_from_slice(&v);
        }
        let mut d_joint = Mat::zeros(b, 2 * d);
        if let (Some(psi), Some(cache)) = (&self.psi, &tr.psi) {
            d_joint.add_assign(&psi.backward(ps, cache, &d_raw, g));
        }
        let mut dg = Mat::zeros(b, d);
        let mut df = Mat::zeros(b, d);
        if let (Some(phi), Some(cache)) = (&self.phi, &tr.phi) {
            let mut d_logit = Mat::zeros(b, 1);
            for i in 0..b {
                let l = tr.lambdas[i];
                let (gr, fr, dr) = (tr.enriched_g.row(i), tr.enriched_f.row(i), d_raw.row(i));
                let mut dl = T::zero();
                for j in 0..d {
                    dl += dr[j] * (gr[j] - fr[j]);
                    dg.row_mut(i)[j] = l * dr[j];
                    df.row_mut(i)[j] = (T::one() - l) * dr[j];
                }
                d_logit.row_mut(i)[0] = dl * l * (T::one() - l);
            }
            d_joint.add_assign(&phi.backward(ps, cache, &d_logit, g));
        } else {
            for i in 0..b {
                for j in 0..d {
                    dg.row_mut(i)[j] = d_raw.row(i)[j] * half;
                    df.row_mut(i)[j] = d_raw.row(i)[j] * half;
                }
            }
        }
        for i in 0..b {
            for j in 0..d {
                dg.row_mut(i)[j] += d_joint.row(i)[j];
                df.row_mut(i)[j] += d_joint.row(i)[d + j];
            }
        }
        let mut d_global = Vec::with_capacity(b);
        let mut d_detail = Vec::with_capacity(b);
        for (i, (gtr, ftr)) in tr.extract.iter().enumerate() {
            let (mut g_own, g_opp) = self.global.backward(ps, gtr, dg.row(i), tr.shape, g);
            let (mut f_own, f_opp) = self.detail.backward(ps, ftr, df.row(i), tr.shape, g);
            g_own.add_assign(&f_opp);
            f_own.add_assign(&g_opp);
            d_global.push(g_own);
            d_detail.push(f_own);
        }
        (d_global, d_detail)
    }
}
