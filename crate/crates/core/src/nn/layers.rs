use rand::Rng;

use super::{accum_xt_dy, axpy, dot, matmul, matmul_wt, Grads, Init, Mat, ParamGroup, ParamId, ParamStore, Real};

/// Initialization scale shared by every weight matrix.
pub const INIT_STD: f64 = 0.02;

/// Affine map `y = x·W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        inp: usize,
        out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), group, &[inp, out], init, rng);
        let bias = bias.then(|| ps.add(format!("{name}.bias"), group, &[out], Init::Zeros, rng));
        Self {
            weight,
            bias,
            inp,
            out,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Mat<T> {
        debug_assert_eq!(x.cols(), self.inp);
        let mut y = matmul(x, ps.value(self.weight), self.out);
        if let Some(b) = self.bias {
            let b = ps.value(b);
            for i in 0..y.rows() {
                axpy(T::one(), b, y.row_mut(i));
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Mat<T>,
        dy: &Mat<T>,
        grads: &mut Grads<T>,
    ) -> Mat<T> {
        accum_xt_dy(x, dy, grads.get_mut(self.weight));
        if let Some(b) = self.bias {
            let db = grads.get_mut(b);
            for r in dy.row_iter() {
                axpy(T::one(), r, db);
            }
        }
        matmul_wt(dy, ps.value(self.weight), self.inp)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), group, &[width], Init::Ones, rng),
            beta: ps.add(format!("{name}.beta"), group, &[width], Init::Zeros, rng),
            width,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        let n = T::lit(self.width as f64);
        let gamma = ps.value(self.gamma);
        let beta = ps.value(self.beta);
        let mut xhat = Mat::zeros(x.rows(), x.cols());
        let mut y = Mat::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let r = x.row(i);
            let mean = r.iter().copied().sum::<T>() / n;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for (h, &v) in xh.iter_mut().zip(r) {
                *h = (v - mean) * is;
            }
            let yr = y.row_mut(i);
            for j in 0..self.width {
                yr[j] = xhat.row(i)[j] * gamma[j] + beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &LayerNormCache<T>,
        dy: &Mat<T>,
        grads: &mut Grads<T>,
    ) -> Mat<T> {
        let n = T::lit(self.width as f64);
        let gamma = ps.value(self.gamma);
        {
            let dg = grads.get_mut(self.gamma);
            for i in 0..dy.rows() {
                for j in 0..self.width {
                    dg[j] += dy.row(i)[j] * cache.xhat.row(i)[j];
                }
            }
        }
        {
            let db = grads.get_mut(self.beta);
            for r in dy.row_iter() {
                axpy(T::one(), r, db);
            }
        }
        let mut dx = Mat::zeros(dy.rows(), dy.cols());
        let mut dxhat = vec![T::zero(); self.width];
        for i in 0..dy.rows() {
            let xh = cache.xhat.row(i);
            for j in 0..self.width {
                dxhat[j] = dy.row(i)[j] * gamma[j];
            }
            let sum_d = dxhat.iter().copied().sum::<T>();
            let sum_dx = dot(&dxhat, xh);
            let is = cache.inv_std[i];
            let out = dx.row_mut(i);
            for j in 0..self.width {
                out[j] = is / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
            }
        }
        dx
    }
}

/// Multi-head scaled dot-product attention from `q_in` rows onto `kv_in` rows.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    q_in: Mat<T>,
    kv_in: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    ctx: Mat<T>,
}

impl Attention {
    /// With `zero_output` the output projection starts at zero, so a residual
    /// attention layer is initially the identity.
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        width: usize,
        heads: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width must divide into heads");
        let init = Init::TruncNormal(INIT_STD);
        let out_init = if zero_output { Init::Zeros } else { init };
        Self {
            q: Linear::new(ps, &format!("{name}.q"), group, width, width, true, init, rng),
            k: Linear::new(ps, &format!("{name}.k"), group, width, width, true, init, rng),
            v: Linear::new(ps, &format!("{name}.v"), group, width, width, true, init, rng),
            o: Linear::new(ps, &format!("{name}.o"), group, width, width, true, out_init, rng),
            heads,
            width,
        }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        q_in: &Mat<T>,
        kv_in: &Mat<T>,
    ) -> (Mat<T>, AttentionCache<T>) {
        let q = self.q.forward(ps, q_in);
        let k = self.k.forward(ps, kv_in);
        let v = self.v.forward(ps, kv_in);
        let dh = self.width / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (n, m) = (q.rows(), k.rows());
        let mut ctx = Mat::zeros(n, self.width);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Mat::zeros(n, m);
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let pr = p.row_mut(i);
                for j in 0..m {
                    pr[j] = dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(pr);
                let out = &mut ctx.row_mut(i)[cols.clone()];
                for j in 0..m {
                    axpy(p.row(i)[j], &v.row(j)[cols.clone()], out);
                }
            }
            probs.push(p);
        }
        let y = self.o.forward(ps, &ctx);
        let cache = AttentionCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        };
        (y, cache)
    }

    /// Returns `(dL/dq_in, dL/dkv_in)`.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &AttentionCache<T>,
        dy: &Mat<T>,
        grads: &mut Grads<T>,
    ) -> (Mat<T>, Mat<T>) {
        let dctx = self.o.backward(ps, &cache.ctx, dy, grads);
        let dh = self.width / self.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (n, m) = (cache.q.rows(), cache.k.rows());
        let mut dq = Mat::zeros(n, self.width);
        let mut dk = Mat::zeros(m, self.width);
        let mut dv = Mat::zeros(m, self.width);
        let mut dp = vec![T::zero(); m];
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[h];
            for i in 0..n {
                let dci = &dctx.row(i)[cols.clone()];
                let pr = p.row(i);
                for j in 0..m {
                    dp[j] = dot(dci, &cache.v.row(j)[cols.clone()]);
                    axpy(pr[j], dci, &mut dv.row_mut(j)[cols.clone()]);
                }
                let inner = dot(&dp, pr);
                for j in 0..m {
                    let ds = pr[j] * (dp[j] - inner) * scale;
                    if ds != T::zero() {
                        axpy(ds, &cache.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                        axpy(ds, &cache.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                    }
                }
            }
        }
        let dq_in = self.q.backward(ps, &cache.q_in, &dq, grads);
        let mut dkv_in = self.k.backward(ps, &cache.kv_in, &dk, grads);
        dkv_in.add_assign(&self.v.backward(ps, &cache.kv_in, &dv, grads));
        (dq_in, dkv_in)
    }
}

/// Position-wise `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache<T> {
    x: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        width: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let init = Init::TruncNormal(INIT_STD);
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), group, width, hidden, true, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), group, hidden, width, true, init, rng),
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> (Mat<T>, FeedForwardCache<T>) {
        let pre = self.fc1.forward(ps, x);
        let mut act = pre.clone();
        for v in act.data_mut() {
            *v = gelu(*v);
        }
        let y = self.fc2.forward(ps, &act);
        (
            y,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &FeedForwardCache<T>,
        dy: &Mat<T>,
        grads: &mut Grads<T>,
    ) -> Mat<T> {
        let mut da = self.fc2.backward(ps, &cache.act, dy, grads);
        for (d, &p) in da.data_mut().iter_mut().zip(cache.pre.data()) {
            *d *= gelu_grad(p);
        }
        self.fc1.backward(ps, &cache.x, &da, grads)
    }
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    x: Mat<T>,
    act: Mat<T>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        inp: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let init = Init::TruncNormal(INIT_STD);
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), group, inp, hidden, true, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), group, hidden, out, true, init, rng),
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let mut act = self.fc1.forward(ps, x);
        for v in act.data_mut() {
            *v = v.max(T::zero());
        }
        let y = self.fc2.forward(ps, &act);
        (y, MlpCache { x: x.clone(), act })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &MlpCache<T>,
        dy: &Mat<T>,
        grads: &mut Grads<T>,
    ) -> Mat<T> {
        let mut da = self.fc2.backward(ps, &cache.act, dy, grads);
        for (d, &a) in da.data_mut().iter_mut().zip(cache.act.data()) {
            if a <= T::zero() {
                *d = T::zero();
            }
        }
        self.fc1.backward(ps, &cache.x, &da, grads)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Returns the unit vector and the original norm; `None` for a zero vector.
pub fn l2_normalize<T: Real>(v: &[T]) -> Option<(Vec<T>, T)> {
    let norm = dot(v, v).sqrt();
    if !(norm > T::zero()) || !norm.is_finite() {
        return None;
    }
    Some((v.iter().map(|&x| x / norm).collect(), norm))
}

/// Gradient of `x / ‖x‖` given the unit output and the input norm.
pub fn l2_normalize_backward<T: Real>(unit: &[T], norm: T, dy: &[T]) -> Vec<T> {
    let proj = dot(unit, dy);
    unit.iter()
        .zip(dy)
        .map(|(&u, &d)| (d - u * proj) / norm)
        .collect()
}
