//! Length-agnostic channel-fusion modules `f: R^{T x C} -> R^{T x C}`.
//!
//! Two variants share one interface: a per-timestep two-layer perceptron and
//! a two-block 1-D convolution with replicate padding. Both carry an exact
//! reverse pass and start from a zeroed final layer so `f(X) = 0` at step 0.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dropout_backward, dropout_forward, layer_norm_backward, layer_norm_forward, silu, silu_grad,
    LayerNormCache, Matrix, Mode, RngStream,
};

pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const KERNEL_WIDTH: usize = 5;
const LN_EPS: f64 = 1e-5;

/// `min(max(2^ceil(log2 V), 32), 512)`.
pub fn hidden_dim(channels: usize) -> usize {
    assert!(channels >= 1);
    channels.next_power_of_two().clamp(32, 512)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Mlp,
    Cnn,
}

/// How to build a fusion module for a given channel count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub kind: FusionKind,
    /// Overrides [`hidden_dim`] when set.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self {
            kind: FusionKind::Mlp,
            hidden: None,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

impl FusionSpec {
    pub fn hidden_for(&self, channels: usize) -> usize {
        self.hidden.unwrap_or_else(|| hidden_dim(channels))
    }
}

fn uniform_init(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// `f(X)^t = W2 · dropout(silu(W1 · X^t + b1)) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFusion {
    /// `D x C`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `C x D`
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
    mask: Option<Vec<f64>>,
}

impl MlpCache {
    pub fn bytes(&self) -> usize {
        8 * (self.x.as_slice().len()
            + self.pre.as_slice().len()
            + self.act.as_slice().len()
            + self.mask.as_ref().map_or(0, Vec::len))
    }
}

impl MlpFusion {
    pub fn random(channels: usize, hidden: usize, dropout_rate: f64, init: &RngStream) -> Self {
        let mut rng = init.rng();
        let w1 = Matrix::new(
            hidden,
            channels,
            uniform_init(&mut rng, hidden * channels, channels),
        )
        .expect("shape");
        let b1 = uniform_init(&mut rng, hidden, channels);
        let w2 = Matrix::new(
            channels,
            hidden,
            uniform_init(&mut rng, hidden * channels, hidden),
        )
        .expect("shape");
        let b2 = uniform_init(&mut rng, channels, hidden);
        Self {
            w1,
            b1,
            w2,
            b2,
            dropout_rate,
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn forward(&self, x: &Matrix, mode: Mode, rng: &RngStream) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.channels() {
            return Err(Error::shape(
                "mlp_forward channels",
                self.channels(),
                x.cols(),
            ));
        }
        let mut pre = x.matmul(&self.w1.transpose())?;
        for t in 0..pre.rows() {
            for (v, b) in pre.row_mut(t).iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        let (act, mask) = dropout_forward(&pre.map(silu), self.dropout_rate, mode, rng);
        let mut out = act.matmul(&self.w2.transpose())?;
        for t in 0..out.rows() {
            for (v, b) in out.row_mut(t).iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        Ok((
            out,
            MlpCache {
                x: x.clone(),
                pre,
                act,
                mask,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads`, returns `∂/∂X`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &Matrix,
        grads: &mut MlpFusion,
    ) -> Result<Matrix> {
        if upstream.shape() != (cache.x.rows(), self.channels()) {
            return Err(Error::shape(
                "mlp_backward upstream",
                format!("{:?}", (cache.x.rows(), self.channels())),
                format!("{:?}", upstream.shape()),
            ));
        }
        grads
            .w2
            .add_assign(&upstream.transpose().matmul(&cache.act)?)?;
        for t in 0..upstream.rows() {
            for (g, u) in grads.b2.iter_mut().zip(upstream.row(t)) {
                *g += u;
            }
        }
        let d_act = dropout_backward(&upstream.matmul(&self.w2)?, cache.mask.as_deref());
        let d_pre = d_act.zip_map(&cache.pre, |g, p| g * silu_grad(p))?;
        grads.w1.add_assign(&d_pre.transpose().matmul(&cache.x)?)?;
        for t in 0..d_pre.rows() {
            for (g, u) in grads.b1.iter_mut().zip(d_pre.row(t)) {
                *g += u;
            }
        }
        d_pre.matmul(&self.w1)
    }
}

// ---------------------------------------------------------------------------
// CNN
// ---------------------------------------------------------------------------

/// `conv2(dropout(silu(layernorm(conv1(X)))))`, kernel width 5, stride 1,
/// replicate padding. Kernels are stored `out x in x K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnFusion {
    pub channels: usize,
    pub hidden: usize,
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone)]
pub struct CnnCache {
    x: Matrix,
    normed: Matrix,
    ln: Vec<LayerNormCache>,
    act: Matrix,
    mask: Option<Vec<f64>>,
}

impl CnnCache {
    pub fn bytes(&self) -> usize {
        8 * (self.x.as_slice().len()
            + self.normed.as_slice().len() * 2
            + self.act.as_slice().len()
            + self.ln.len() * 3
            + self.mask.as_ref().map_or(0, Vec::len))
    }
}

#[inline]
fn tap(t: usize, k: usize, len: usize) -> usize {
    let pad = KERNEL_WIDTH / 2;
    (t + k).saturating_sub(pad).min(len - 1)
}

/// Cross-correlation with replicate padding; output has the input's length.
fn conv1d(x: &Matrix, w: &[f64], b: &[f64], out_ch: usize) -> Matrix {
    let (len, in_ch) = x.shape();
    let mut out = Matrix::zeros(len, out_ch);
    for t in 0..len {
        let row = out.row_mut(t);
        row.copy_from_slice(b);
        for k in 0..KERNEL_WIDTH {
            let src = x.row(tap(t, k, len));
            for (o, acc) in row.iter_mut().enumerate() {
                let base = o * in_ch * KERNEL_WIDTH;
                for (i, xv) in src.iter().enumerate() {
                    *acc += w[base + i * KERNEL_WIDTH + k] * xv;
                }
            }
        }
    }
    out
}

fn conv1d_backward(
    x: &Matrix,
    w: &[f64],
    upstream: &Matrix,
    dw: &mut [f64],
    db: &mut [f64],
) -> Matrix {
    let (len, in_ch) = x.shape();
    let mut dx = Matrix::zeros(len, in_ch);
    for t in 0..len {
        let g = upstream.row(t);
        for (o, gv) in g.iter().enumerate() {
            db[o] += gv;
        }
        for k in 0..KERNEL_WIDTH {
            let s = tap(t, k, len);
            for (o, gv) in g.iter().enumerate() {
                if *gv == 0.0 {
                    continue;
                }
                let base = o * in_ch * KERNEL_WIDTH;
                for i in 0..in_ch {
                    let idx = base + i * KERNEL_WIDTH + k;
                    dw[idx] += gv * x[(s, i)];
                    dx[(s, i)] += gv * w[idx];
                }
            }
        }
    }
    dx
}

impl CnnFusion {
    pub fn random(channels: usize, hidden: usize, dropout_rate: f64, init: &RngStream) -> Self {
        let mut rng = init.rng();
        let fan1 = channels * KERNEL_WIDTH;
        let fan2 = hidden * KERNEL_WIDTH;
        Self {
            channels,
            hidden,
            conv1_w: uniform_init(&mut rng, hidden * fan1, fan1),
            conv1_b: uniform_init(&mut rng, hidden, fan1),
            norm_gamma: vec![1.0; hidden],
            norm_beta: vec![0.0; hidden],
            conv2_w: uniform_init(&mut rng, channels * fan2, fan2),
            conv2_b: uniform_init(&mut rng, channels, fan2),
            dropout_rate,
        }
    }

    pub fn forward(&self, x: &Matrix, mode: Mode, rng: &RngStream) -> Result<(Matrix, CnnCache)> {
        if x.cols() != self.channels {
            return Err(Error::shape(
                "cnn_forward channels",
                self.channels,
                x.cols(),
            ));
        }
        if x.rows() == 0 {
            return Err(Error::Invalid("cnn_forward needs T >= 1".into()));
        }
        let h1 = conv1d(x, &self.conv1_w, &self.conv1_b, self.hidden);
        let mut normed = Matrix::zeros(x.rows(), self.hidden);
        let mut ln = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let (row, cache) =
                layer_norm_forward(h1.row(t), &self.norm_gamma, &self.norm_beta, LN_EPS);
            normed.row_mut(t).copy_from_slice(&row);
            ln.push(cache);
        }
        let (act, mask) = dropout_forward(&normed.map(silu), self.dropout_rate, mode, rng);
        let out = conv1d(&act, &self.conv2_w, &self.conv2_b, self.channels);
        Ok((
            out,
            CnnCache {
                x: x.clone(),
                normed,
                ln,
                act,
                mask,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &CnnCache,
        upstream: &Matrix,
        grads: &mut CnnFusion,
    ) -> Result<Matrix> {
        if upstream.shape() != cache.x.shape() {
            return Err(Error::shape(
                "cnn_backward upstream",
                format!("{:?}", cache.x.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let d_act = conv1d_backward(
            &cache.act,
            &self.conv2_w,
            upstream,
            &mut grads.conv2_w,
            &mut grads.conv2_b,
        );
        let d_act = dropout_backward(&d_act, cache.mask.as_deref());
        let d_normed = d_act.zip_map(&cache.normed, |g, n| g * silu_grad(n))?;
        let mut d_h1 = Matrix::zeros(cache.x.rows(), self.hidden);
        for t in 0..cache.x.rows() {
            let d = layer_norm_backward(
                &cache.ln[t],
                &self.norm_gamma,
                d_normed.row(t),
                &mut grads.norm_gamma,
                &mut grads.norm_beta,
            );
            d_h1.row_mut(t).copy_from_slice(&d);
        }
        Ok(conv1d_backward(
            &cache.x,
            &self.conv1_w,
            &d_h1,
            &mut grads.conv1_w,
            &mut grads.conv1_b,
        ))
    }
}

// ---------------------------------------------------------------------------
// Variant dispatch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum Fusion {
    Mlp(MlpFusion),
    Cnn(CnnFusion),
}

#[derive(Debug, Clone)]
pub enum FusionCache {
    Mlp(MlpCache),
    Cnn(CnnCache),
}

impl FusionCache {
    pub fn bytes(&self) -> usize {
        match self {
            FusionCache::Mlp(c) => c.bytes(),
            FusionCache::Cnn(c) => c.bytes(),
        }
    }
}

impl Fusion {
    /// Random initialization of every layer (uniform in `±1/sqrt(fan_in)`).
    pub fn random(spec: &FusionSpec, channels: usize, init: &RngStream) -> Self {
        let hidden = spec.hidden_for(channels);
        match spec.kind {
            FusionKind::Mlp => Fusion::Mlp(MlpFusion::random(channels, hidden, spec.dropout, init)),
            FusionKind::Cnn => Fusion::Cnn(CnnFusion::random(channels, hidden, spec.dropout, init)),
        }
    }

    /// Random earlier layers, zeroed final layer.
    pub fn init(spec: &FusionSpec, channels: usize, init: &RngStream) -> Self {
        let mut f = Self::random(spec, channels, init);
        f.zero_init_final();
        f
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Mlp(_) => FusionKind::Mlp,
            Fusion::Cnn(_) => FusionKind::Cnn,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Fusion::Mlp(m) => m.channels(),
            Fusion::Cnn(c) => c.channels,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Fusion::Mlp(m) => m.hidden(),
            Fusion::Cnn(c) => c.hidden,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        match self {
            Fusion::Mlp(m) => m.dropout_rate,
            Fusion::Cnn(c) => c.dropout_rate,
        }
    }

    pub fn set_dropout_rate(&mut self, rate: f64) {
        match self {
            Fusion::Mlp(m) => m.dropout_rate = rate,
            Fusion::Cnn(c) => c.dropout_rate = rate,
        }
    }

    /// Zeroes the final layer's weights and bias.
    pub fn zero_init_final(&mut self) {
        match self {
            Fusion::Mlp(m) => {
                m.w2.as_mut_slice().fill(0.0);
                m.b2.fill(0.0);
            }
            Fusion::Cnn(c) => {
                c.conv2_w.fill(0.0);
                c.conv2_b.fill(0.0);
            }
        }
    }

    pub fn forward(
        &self,
        x: &Matrix,
        mode: Mode,
        rng: &RngStream,
    ) -> Result<(Matrix, FusionCache)> {
        match self {
            Fusion::Mlp(m) => m
                .forward(x, mode, rng)
                .map(|(y, c)| (y, FusionCache::Mlp(c))),
            Fusion::Cnn(m) => m
                .forward(x, mode, rng)
                .map(|(y, c)| (y, FusionCache::Cnn(c))),
        }
    }

    /// Accumulates into `grads` (same variant and shape), returns the input gradient.
    pub fn backward(
        &self,
        cache: &FusionCache,
        upstream: &Matrix,
        grads: &mut Fusion,
    ) -> Result<Matrix> {
        match (self, cache, grads) {
            (Fusion::Mlp(m), FusionCache::Mlp(c), Fusion::Mlp(g)) => m.backward(c, upstream, g),
            (Fusion::Cnn(m), FusionCache::Cnn(c), Fusion::Cnn(g)) => m.backward(c, upstream, g),
            _ => Err(Error::Invalid(
                "fusion variant mismatch between parameters, cache and gradient buffer".into(),
            )),
        }
    }

    /// Same shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Fusion::Mlp(m) => vec![
                ("fc1.weight", m.w1.as_slice()),
                ("fc1.bias", &m.b1),
                ("fc2.weight", m.w2.as_slice()),
                ("fc2.bias", &m.b2),
            ],
            Fusion::Cnn(c) => vec![
                ("conv1.weight", &c.conv1_w),
                ("conv1.bias", &c.conv1_b),
                ("norm.weight", &c.norm_gamma),
                ("norm.bias", &c.norm_beta),
                ("conv2.weight", &c.conv2_w),
                ("conv2.bias", &c.conv2_b),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            Fusion::Mlp(m) => vec![
                ("fc1.weight", m.w1.as_mut_slice()),
                ("fc1.bias", &mut m.b1),
                ("fc2.weight", m.w2.as_mut_slice()),
                ("fc2.bias", &mut m.b2),
            ],
            Fusion::Cnn(c) => vec![
                ("conv1.weight", &mut c.conv1_w),
                ("conv1.bias", &mut c.conv1_b),
                ("norm.weight", &mut c.norm_gamma),
                ("norm.bias", &mut c.norm_beta),
                ("conv2.weight", &mut c.conv2_w),
                ("conv2.bias", &mut c.conv2_b),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new("test", seed).rng();
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
    }

    fn flatten(f: &Fusion) -> Vec<f64> {
        f.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.to_vec())
            .collect()
    }

    fn unflatten(f: &mut Fusion, theta: &[f64]) {
        let mut off = 0;
        for (_, t) in f.tensors_mut() {
            t.copy_from_slice(&theta[off..off + t.len()]);
            off += t.len();
        }
    }

    /// Checks parameter and input gradients of `sum(upstream ⊙ f(X))`.
    fn check_fusion(mut f: Fusion, t_len: usize, seed: u64, tol: f64) {
        f.set_dropout_rate(0.0);
        let c = f.channels();
        let x = random_matrix(t_len, c, seed);
        let up = random_matrix(t_len, c, seed + 1);
        let rng = RngStream::new("dropout", 0);
        let (_, cache) = f.forward(&x, Mode::Train, &rng).unwrap();
        let mut grads = f.zeros_like();
        let dx = f.backward(&cache, &up, &mut grads).unwrap();

        let theta = flatten(&f);
        let loss_params = |t: &[f64]| {
            let mut g = f.clone();
            unflatten(&mut g, t);
            let (y, _) = g.forward(&x, Mode::Eval, &rng).unwrap();
            y.hadamard(&up).unwrap().as_slice().iter().sum::<f64>()
        };
        let report = grad_check(&flatten(&grads), loss_params, &theta, 1e-5);
        assert!(report.max_rel_error < tol, "params: {report:?}");

        let loss_input = |t: &[f64]| {
            let xm = Matrix::new(t_len, c, t.to_vec()).unwrap();
            let (y, _) = f.forward(&xm, Mode::Eval, &rng).unwrap();
            y.hadamard(&up).unwrap().as_slice().iter().sum::<f64>()
        };
        let report = grad_check(dx.as_slice(), loss_input, x.as_slice(), 1e-5);
        assert!(report.max_rel_error < tol, "input: {report:?}");
    }

    #[test]
    fn hidden_dim_rule() {
        assert_eq!(hidden_dim(7), 32);
        assert_eq!(hidden_dim(321), 512);
        assert_eq!(hidden_dim(21), 32);
        assert_eq!(hidden_dim(33), 64);
        assert_eq!(hidden_dim(2000), 512);
        assert_eq!(hidden_dim(1), 32);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..3 {
            let spec = FusionSpec {
                kind: FusionKind::Mlp,
                hidden: Some(4),
                dropout: 0.0,
            };
            let f = Fusion::random(&spec, 3, &RngStream::new("init", seed));
            check_fusion(f, 3, 10 + seed, 1e-5);
        }
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        for seed in 0..3 {
            let spec = FusionSpec {
                kind: FusionKind::Cnn,
                hidden: Some(4),
                dropout: 0.0,
            };
            let mut f = Fusion::random(&spec, 2, &RngStream::new("init", seed));
            // Perturb the norm affine so its gradients are exercised away from (1, 0).
            if let Fusion::Cnn(c) = &mut f {
                for (k, g) in c.norm_gamma.iter_mut().enumerate() {
                    *g += 0.1 * k as f64;
                }
                c.norm_beta.iter_mut().for_each(|b| *b = 0.05);
            }
            check_fusion(f, 7, 20 + seed, 1e-5);
        }
        // Sequences shorter than the kernel still work under replicate padding.
        let spec = FusionSpec {
            kind: FusionKind::Cnn,
            hidden: Some(3),
            dropout: 0.0,
        };
        check_fusion(
            Fusion::random(&spec, 2, &RngStream::new("init", 9)),
            2,
            40,
            1e-5,
        );
    }

    #[test]
    fn mlp_backward_with_dropout_reuses_mask() {
        let spec = FusionSpec {
            kind: FusionKind::Mlp,
            hidden: Some(6),
            dropout: 0.5,
        };
        let f = Fusion::random(&spec, 3, &RngStream::new("init", 4));
        let x = random_matrix(4, 3, 1);
        let up = random_matrix(4, 3, 2);
        let rng = RngStream::new("dropout", 3).at(7);
        let (_, cache) = f.forward(&x, Mode::Train, &rng).unwrap();
        let mut grads = f.zeros_like();
        let dx = f.backward(&cache, &up, &mut grads).unwrap();
        // With the mask pinned by the stream address, train-mode forward is a
        // deterministic function of X and can be differenced directly.
        let loss = |t: &[f64]| {
            let xm = Matrix::new(4, 3, t.to_vec()).unwrap();
            let (y, _) = f.forward(&xm, Mode::Train, &rng).unwrap();
            y.hadamard(&up).unwrap().as_slice().iter().sum::<f64>()
        };
        let report = grad_check(dx.as_slice(), loss, x.as_slice(), 1e-5);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn zero_init_gives_zero_output() {
        for kind in [FusionKind::Mlp, FusionKind::Cnn] {
            let spec = FusionSpec {
                kind,
                ..FusionSpec::default()
            };
            let f = Fusion::init(&spec, 4, &RngStream::new("init", 1));
            for seed in 0..100 {
                let x = random_matrix(1 + seed as usize % 9, 4, seed);
                let (y, _) = f
                    .forward(&x, Mode::Train, &RngStream::new("dropout", seed))
                    .unwrap();
                assert_eq!(y.max_abs(), 0.0);
            }
        }
    }

    #[test]
    fn zero_init_keeps_earlier_layers() {
        let spec = FusionSpec::default();
        let stream = RngStream::new("init", 5);
        let random = Fusion::random(&spec, 3, &stream);
        let init = Fusion::init(&spec, 3, &stream);
        let (Fusion::Mlp(r), Fusion::Mlp(i)) = (&random, &init) else {
            unreachable!()
        };
        assert_eq!(r.w1, i.w1);
        assert_eq!(r.b1, i.b1);
        assert!(i.w2.max_abs() == 0.0 && i.b2.iter().all(|v| *v == 0.0));
        assert_eq!(init, Fusion::init(&spec, 3, &stream));
        let bound = 1.0 / 3f64.sqrt();
        assert!(i.w1.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_init_gradient_structure() {
        let spec = FusionSpec {
            kind: FusionKind::Mlp,
            hidden: Some(5),
            dropout: 0.0,
        };
        let f = Fusion::init(&spec, 3, &RngStream::new("init", 2));
        let x = random_matrix(6, 3, 3);
        let up = random_matrix(6, 3, 4);
        let (_, cache) = f.forward(&x, Mode::Eval, &RngStream::new("d", 0)).unwrap();
        let mut g = f.zeros_like();
        f.backward(&cache, &up, &mut g).unwrap();
        let Fusion::Mlp(g) = g else { unreachable!() };
        for c in 0..3 {
            let col_sum: f64 = up.col(c).iter().sum();
            assert!((g.b2[c] - col_sum).abs() < 1e-12);
        }
        assert_eq!(g.w1.max_abs(), 0.0);
        assert!(g.b1.iter().all(|v| *v == 0.0));

        let mut g0 = f.zeros_like();
        f.backward(&cache, &Matrix::zeros(6, 3), &mut g0).unwrap();
        assert_eq!(g0, f.zeros_like());
    }

    #[test]
    fn eval_is_deterministic_and_length_agnostic() {
        let spec = FusionSpec::default();
        let f = Fusion::random(&spec, 3, &RngStream::new("init", 3));
        let a = random_matrix(8, 3, 1);
        let b = random_matrix(4, 3, 2);
        let rng = RngStream::new("dropout", 0);
        let (ya, _) = f.forward(&a, Mode::Eval, &rng).unwrap();
        assert_eq!(ya, f.forward(&a, Mode::Eval, &rng).unwrap().0);
        let (yb, _) = f.forward(&b, Mode::Eval, &rng).unwrap();
        let (yab, _) = f
            .forward(&Matrix::vstack(&[&a, &b]).unwrap(), Mode::Eval, &rng)
            .unwrap();
        assert_eq!(yab, Matrix::vstack(&[&ya, &yb]).unwrap());
    }

    #[test]
    fn cnn_preserves_constancy() {
        let spec = FusionSpec {
            kind: FusionKind::Cnn,
            hidden: Some(6),
            dropout: 0.1,
        };
        let f = Fusion::random(&spec, 3, &RngStream::new("init", 8));
        let x = Matrix::from_fn(11, 3, |_, c| c as f64 - 0.7);
        let (y, _) = f.forward(&x, Mode::Eval, &RngStream::new("d", 0)).unwrap();
        for t in 1..11 {
            for c in 0..3 {
                assert!((y[(t, c)] - y[(0, c)]).abs() < 1e-12);
            }
        }
        assert_eq!(y.shape(), (11, 3));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        for kind in [FusionKind::Mlp, FusionKind::Cnn] {
            let spec = FusionSpec {
                kind,
                ..FusionSpec::default()
            };
            let f = Fusion::init(&spec, 3, &RngStream::new("init", 1));
            assert!(f
                .forward(&Matrix::zeros(5, 4), Mode::Eval, &RngStream::new("d", 0))
                .is_err());
        }
    }
}
