//! Surrogate construction, closed-form reconstruction and the end-to-end
//! forward pass.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecaster::{predict_channels, Forecaster, FrozenForecaster};
use crate::fusion::{Fusion, FusionCache, FusionSpec};
use crate::numerics::{Matrix, Mode, RngStream};

/// Smallest admissible `|w_α + w_β|` per channel.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Dropout lanes: each window gets one lane per fusion pass.
pub(crate) fn pass_stream(rng: &RngStream, window: usize, target_pass: bool) -> RngStream {
    rng.lane(2 * window as u64 + u64::from(target_pass))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Dual,
    /// Single positive surrogate; no reconstruction to the original space.
    Single,
}

/// Channel-wise linear weights of the two surrogates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateWeights {
    pub w_alpha: Vec<f64>,
    pub w_beta: Vec<f64>,
}

impl SurrogateWeights {
    pub fn ones(channels: usize) -> Self {
        Self {
            w_alpha: vec![1.0; channels],
            w_beta: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.w_alpha.len()
    }

    /// `w_α + w_β` per channel, checked against [`DENOM_FLOOR`].
    pub fn denominators(&self) -> Result<Vec<f64>> {
        self.w_alpha
            .iter()
            .zip(&self.w_beta)
            .enumerate()
            .map(|(channel, (a, b))| {
                let s = a + b;
                if s.abs() > DENOM_FLOOR && s.is_finite() {
                    Ok(s)
                } else {
                    Err(Error::DenominatorFloor {
                        channel,
                        value: s,
                        floor: DENOM_FLOOR,
                    })
                }
            })
            .collect()
    }
}

/// Everything that is trained: the fusion module and both weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub fusion: Fusion,
    pub weights: SurrogateWeights,
}

impl SurrogateParams {
    pub fn init(spec: &FusionSpec, channels: usize, seed: u64) -> Self {
        Self {
            fusion: Fusion::init(spec, channels, &RngStream::new("init", seed)),
            weights: SurrogateWeights::ones(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.channels()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fusion: self.fusion.zeros_like(),
            weights: SurrogateWeights {
                w_alpha: vec![0.0; self.channels()],
                w_beta: vec![0.0; self.channels()],
            },
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut v = self.fusion.tensors();
        v.push(("w_alpha", &self.weights.w_alpha));
        v.push(("w_beta", &self.weights.w_beta));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v = self.fusion.tensors_mut();
        v.push(("w_alpha", &mut self.weights.w_alpha));
        v.push(("w_beta", &mut self.weights.w_beta));
        v
    }

    pub fn param_count(&self) -> usize {
        self.fusion.param_count() + 2 * self.channels()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn unflatten(&mut self, theta: &[f64]) {
        let mut off = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&theta[off..off + t.len()]);
            off += t.len();
        }
        assert_eq!(off, theta.len(), "parameter vector length mismatch");
    }

    /// Adds `other` into `self` tensor by tensor.
    pub fn accumulate(&mut self, other: &SurrogateParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Trainable surrogate parameters plus a handle to the frozen forecaster.
#[derive(Debug, Clone)]
pub struct DualSurrogateModel {
    pub params: SurrogateParams,
    pub forecaster: Arc<FrozenForecaster>,
    pub variant: Variant,
}

/// Input-pass output for a batch.
pub struct InputSurrogates {
    pub s_alpha: Vec<Matrix>,
    pub s_beta: Vec<Matrix>,
    pub caches: Vec<FusionCache>,
}

/// Target-pass output for a batch.
pub struct TargetSurrogates {
    pub s_alpha: Vec<Matrix>,
    pub s_beta: Vec<Matrix>,
    pub caches: Vec<FusionCache>,
}

/// Full forward output: reconstruction plus per-channel surrogate forecasts.
pub struct ForwardOutput {
    pub y_hat: Vec<Matrix>,
    pub s_alpha: Vec<Matrix>,
    pub s_beta: Vec<Matrix>,
    pub s_hat_alpha: Vec<Matrix>,
    pub s_hat_beta: Vec<Matrix>,
}

/// Paired surrogate inputs, targets, forecasts and fusion caches for one window.
#[derive(Debug, Clone)]
pub struct WindowSurrogates {
    pub s_alpha: Matrix,
    pub s_beta: Matrix,
    pub target_alpha: Matrix,
    pub target_beta: Matrix,
    pub pred_alpha: Matrix,
    pub pred_beta: Matrix,
    pub cache_x: FusionCache,
    pub cache_y: FusionCache,
}

/// One [`WindowSurrogates`] per window of a batch.
#[derive(Debug, Clone)]
pub struct SurrogateBatch {
    pub windows: Vec<WindowSurrogates>,
}

/// `(f(M) + w_α ⊙ M, f(M) - w_β ⊙ M)` given the fusion output `f(M)`.
fn pair_from(fused: &Matrix, m: &Matrix, w: &SurrogateWeights) -> (Matrix, Matrix) {
    let mut a = fused.clone();
    let mut b = fused.clone();
    for t in 0..m.rows() {
        let rm = m.row(t);
        for (c, v) in a.row_mut(t).iter_mut().enumerate() {
            *v += w.w_alpha[c] * rm[c];
        }
        for (c, v) in b.row_mut(t).iter_mut().enumerate() {
            *v -= w.w_beta[c] * rm[c];
        }
    }
    (a, b)
}

fn check_channels(context: &'static str, expected: usize, m: &Matrix) -> Result<()> {
    if m.cols() != expected {
        return Err(Error::shape(context, expected, m.cols()));
    }
    Ok(())
}

/// `f(M)` evaluated once and shared by both surrogates.
fn surrogate_pair(
    params: &SurrogateParams,
    m: &Matrix,
    mode: Mode,
    rng: &RngStream,
) -> Result<(Matrix, Matrix, FusionCache)> {
    check_channels("surrogate input channels", params.channels(), m)?;
    let (fused, cache) = params.fusion.forward(m, mode, rng)?;
    let (a, b) = pair_from(&fused, m, &params.weights);
    Ok((a, b, cache))
}

impl DualSurrogateModel {
    pub fn new(
        params: SurrogateParams,
        forecaster: Arc<FrozenForecaster>,
        variant: Variant,
    ) -> Result<Self> {
        if params.fusion.channels() != params.channels() {
            return Err(Error::shape(
                "fusion vs weights channels",
                params.channels(),
                params.fusion.channels(),
            ));
        }
        params.weights.denominators()?;
        Ok(Self {
            params,
            forecaster,
            variant,
        })
    }

    pub fn channels(&self) -> usize {
        self.params.channels()
    }

    fn check_window(&self, x: &Matrix, rows: usize, context: &'static str) -> Result<()> {
        if x.shape() != (rows, self.channels()) {
            return Err(Error::shape(
                context,
                format!("{:?}", (rows, self.channels())),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// `S_α = f(X) + w_α ⊙ X`, `S_β = f(X) - w_β ⊙ X` for every window.
    pub fn make_input_surrogates(
        &self,
        xs: &[Matrix],
        mode: Mode,
        rng: &RngStream,
    ) -> Result<InputSurrogates> {
        let mut out = InputSurrogates {
            s_alpha: Vec::with_capacity(xs.len()),
            s_beta: Vec::with_capacity(xs.len()),
            caches: Vec::with_capacity(xs.len()),
        };
        for (b, x) in xs.iter().enumerate() {
            self.check_window(x, self.forecaster.lookback(), "input window")?;
            let (a, s, c) = surrogate_pair(&self.params, x, mode, &pass_stream(rng, b, false))?;
            out.s_alpha.push(a);
            out.s_beta.push(s);
            out.caches.push(c);
        }
        Ok(out)
    }

    /// `S̃_α = f(Y) + w_α ⊙ Y`, `S̃_β = f(Y) - w_β ⊙ Y` with the same fusion parameters.
    pub fn make_target_surrogates(
        &self,
        ys: &[Matrix],
        mode: Mode,
        rng: &RngStream,
    ) -> Result<TargetSurrogates> {
        let mut out = TargetSurrogates {
            s_alpha: Vec::with_capacity(ys.len()),
            s_beta: Vec::with_capacity(ys.len()),
            caches: Vec::with_capacity(ys.len()),
        };
        for (b, y) in ys.iter().enumerate() {
            check_channels("target window", self.channels(), y)?;
            let (a, s, c) = surrogate_pair(&self.params, y, mode, &pass_stream(rng, b, true))?;
            out.s_alpha.push(a);
            out.s_beta.push(s);
            out.caches.push(c);
        }
        Ok(out)
    }

    /// Reconstructed forecasts plus per-channel surrogate forecasts.
    pub fn forward(&self, xs: &[Matrix], mode: Mode, rng: &RngStream) -> Result<ForwardOutput> {
        if self.variant == Variant::Single {
            return Err(Error::Unsupported(
                "the single-surrogate variant has no reconstruction to the original space",
            ));
        }
        let denominators = self.params.weights.denominators()?;
        let per_window: Vec<(Matrix, Matrix, Matrix, Matrix, Matrix)> = xs
            .par_iter()
            .enumerate()
            .map(|(b, x)| {
                self.check_window(x, self.forecaster.lookback(), "input window")?;
                let (sa, sb, _) =
                    surrogate_pair(&self.params, x, mode, &pass_stream(rng, b, false))?;
                let pa = predict_channels(self.forecaster.as_ref(), &sa)?;
                let pb = predict_channels(self.forecaster.as_ref(), &sb)?;
                let y = reconstruct_with(&pa, &pb, &denominators)?;
                Ok((y, sa, sb, pa, pb))
            })
            .collect::<Result<_>>()?;
        let mut out = ForwardOutput {
            y_hat: Vec::new(),
            s_alpha: Vec::new(),
            s_beta: Vec::new(),
            s_hat_alpha: Vec::new(),
            s_hat_beta: Vec::new(),
        };
        for (y, sa, sb, pa, pb) in per_window {
            out.y_hat.push(y);
            out.s_alpha.push(sa);
            out.s_beta.push(sb);
            out.s_hat_alpha.push(pa);
            out.s_hat_beta.push(pb);
        }
        Ok(out)
    }

    /// Eval-mode reconstructed forecasts.
    pub fn predict(&self, xs: &[Matrix]) -> Result<Vec<Matrix>> {
        Ok(self
            .forward(xs, Mode::Eval, &RngStream::new("dropout", 0))?
            .y_hat)
    }

    /// Channel-independent forecasts of the frozen model on the raw inputs.
    pub fn baseline(&self, xs: &[Matrix]) -> Result<Vec<Matrix>> {
        xs.par_iter()
            .map(|x| predict_channels(self.forecaster.as_ref(), x))
            .collect()
    }

    /// Builds surrogates, targets and forecasts for one window.
    pub fn window_surrogates(
        &self,
        x: &Matrix,
        y: &Matrix,
        window: usize,
        mode: Mode,
        rng: &RngStream,
    ) -> Result<WindowSurrogates> {
        self.check_window(x, self.forecaster.lookback(), "input window")?;
        self.check_window(y, self.forecaster.horizon(), "target window")?;
        let (s_alpha, s_beta, cache_x) =
            surrogate_pair(&self.params, x, mode, &pass_stream(rng, window, false))?;
        let (target_alpha, target_beta, cache_y) =
            surrogate_pair(&self.params, y, mode, &pass_stream(rng, window, true))?;
        let pred_alpha = predict_channels(self.forecaster.as_ref(), &s_alpha)?;
        let pred_beta = match self.variant {
            Variant::Dual => predict_channels(self.forecaster.as_ref(), &s_beta)?,
            Variant::Single => Matrix::zeros(0, 0),
        };
        Ok(WindowSurrogates {
            s_alpha,
            s_beta,
            target_alpha,
            target_beta,
            pred_alpha,
            pred_beta,
            cache_x,
            cache_y,
        })
    }

    pub fn surrogate_batch(
        &self,
        xs: &[Matrix],
        ys: &[Matrix],
        mode: Mode,
        rng: &RngStream,
    ) -> Result<SurrogateBatch> {
        if xs.len() != ys.len() {
            return Err(Error::shape("batch size", xs.len(), ys.len()));
        }
        let windows = xs
            .par_iter()
            .zip(ys.par_iter())
            .enumerate()
            .map(|(b, (x, y))| self.window_surrogates(x, y, b, mode, rng))
            .collect::<Result<_>>()?;
        Ok(SurrogateBatch { windows })
    }

    /// Single-surrogate pass: `S = f(X) + w_α ⊙ X`, its target and forecast.
    pub fn single_forward(
        &self,
        xs: &[Matrix],
        ys: &[Matrix],
        mode: Mode,
        rng: &RngStream,
    ) -> Result<SingleOutput> {
        let mut out = SingleOutput {
            s: Vec::new(),
            target: Vec::new(),
            pred: Vec::new(),
            loss: 0.0,
        };
        let batch = DualSurrogateModel {
            variant: Variant::Single,
            ..self.clone()
        }
        .surrogate_batch(xs, ys, mode, rng)?;
        let mut sq = 0.0;
        let mut n = 0usize;
        for w in batch.windows {
            for (p, t) in w
                .pred_alpha
                .as_slice()
                .iter()
                .zip(w.target_alpha.as_slice())
            {
                sq += (p - t).powi(2);
                n += 1;
            }
            out.s.push(w.s_alpha);
            out.target.push(w.target_alpha);
            out.pred.push(w.pred_alpha);
        }
        out.loss = if n == 0 { 0.0 } else { sq / n as f64 };
        Ok(out)
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            variant: self.variant,
            params: self.params.clone(),
            forecaster: (*self.forecaster).clone(),
            forecaster_digest: self.forecaster.digest(),
        }
    }
}

/// Output of [`DualSurrogateModel::single_forward`].
pub struct SingleOutput {
    pub s: Vec<Matrix>,
    pub target: Vec<Matrix>,
    pub pred: Vec<Matrix>,
    /// Channel-mean of per-channel MSEs (equal channel weights make this the pooled MSE).
    pub loss: f64,
}

/// The single variant defines no map back to the original space.
pub fn reconstruct_single(_pred: &[Matrix]) -> Result<Vec<Matrix>> {
    Err(Error::Unsupported(
        "the single-surrogate variant has no reconstruction to the original space",
    ))
}

fn reconstruct_with(pa: &Matrix, pb: &Matrix, denominators: &[f64]) -> Result<Matrix> {
    if pa.shape() != pb.shape() || pa.cols() != denominators.len() {
        return Err(Error::shape(
            "reconstruct",
            format!("{:?} with {} channels", pa.shape(), denominators.len()),
            format!("{:?}", pb.shape()),
        ));
    }
    let mut out = pa.clone();
    for t in 0..out.rows() {
        for (c, v) in out.row_mut(t).iter_mut().enumerate() {
            *v = (*v - pb[(t, c)]) / denominators[c];
        }
    }
    Ok(out)
}

/// `Ŷ = (Ŝ_α - Ŝ_β) / (w_α + w_β)` channel by channel; no learned parameters.
pub fn reconstruct(
    s_hat_alpha: &[Matrix],
    s_hat_beta: &[Matrix],
    weights: &SurrogateWeights,
) -> Result<Vec<Matrix>> {
    if s_hat_alpha.len() != s_hat_beta.len() {
        return Err(Error::shape(
            "reconstruct batch",
            s_hat_alpha.len(),
            s_hat_beta.len(),
        ));
    }
    let denominators = weights.denominators()?;
    s_hat_alpha
        .iter()
        .zip(s_hat_beta)
        .map(|(a, b)| reconstruct_with(a, b, &denominators))
        .collect()
}

/// JSON checkpoint: variant, trainable tensors and the frozen forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub variant: Variant,
    pub params: SurrogateParams,
    pub forecaster: FrozenForecaster,
    pub forecaster_digest: String,
}

impl ModelCheckpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ModelCheckpoint = serde_json::from_str(&text)?;
        if ckpt.forecaster.digest() != ckpt.forecaster_digest {
            return Err(Error::Invalid(format!(
                "{}: forecaster digest does not match its parameters",
                path.display()
            )));
        }
        Ok(ckpt)
    }

    pub fn into_model(self) -> Result<DualSurrogateModel> {
        DualSurrogateModel::new(self.params, Arc::new(self.forecaster), self.variant)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::RidgeArParams;
    use crate::fusion::FusionKind;
    use rand::Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn random_params(channels: usize, seed: u64, kind: FusionKind) -> SurrogateParams {
        let spec = FusionSpec {
            kind,
            hidden: Some(6),
            dropout: 0.1,
        };
        let mut rng = RngStream::new("test", seed).rng();
        let weights = SurrogateWeights {
            w_alpha: (0..channels).map(|_| rng.random_range(0.2..2.0)).collect(),
            w_beta: (0..channels).map(|_| rng.random_range(0.2..2.0)).collect(),
        };
        SurrogateParams {
            fusion: Fusion::random(&spec, channels, &RngStream::new("init", seed)),
            weights,
        }
    }

    fn ridge(lookback: usize, horizon: usize, seed: u64) -> Arc<FrozenForecaster> {
        let mut rng = RngStream::new("test", seed).rng();
        let p = 3.min(lookback);
        Arc::new(
            FrozenForecaster::ridge_ar(
                lookback,
                RidgeArParams {
                    order: p,
                    coefficients: rand_matrix(horizon, p, &mut rng).scale(0.3),
                    ridge_lambda: 1.0,
                    intercept: None,
                },
            )
            .unwrap(),
        )
    }

    #[test]
    fn zero_init_surrogates_are_signed_inputs() {
        let spec = FusionSpec::default();
        let params = SurrogateParams::init(&spec, 2, 0);
        let model = DualSurrogateModel::new(params, ridge(2, 1, 0), Variant::Dual).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let rng = RngStream::new("dropout", 0);
        let s = model
            .make_input_surrogates(std::slice::from_ref(&x), Mode::Train, &rng)
            .unwrap();
        assert_eq!(s.s_alpha[0], x);
        assert_eq!(s.s_beta[0], x.scale(-1.0));
        let t = model
            .make_target_surrogates(std::slice::from_ref(&x), Mode::Train, &rng)
            .unwrap();
        assert_eq!(t.s_alpha[0], x);
        assert_eq!(t.s_beta[0], x.scale(-1.0));
    }

    #[test]
    fn channel_weights_scale_surrogates() {
        let mut params = SurrogateParams::init(&FusionSpec::default(), 2, 0);
        params.weights.w_alpha = vec![2.0, 0.0];
        let model = DualSurrogateModel::new(params, ridge(1, 1, 0), Variant::Dual).unwrap();
        let x = Matrix::from_rows(&[[1.0, 5.0]]);
        let s = model
            .make_input_surrogates(&[x], Mode::Eval, &RngStream::new("d", 0))
            .unwrap();
        assert_eq!(s.s_alpha[0].row(0), &[2.0, 0.0]);
    }

    #[test]
    fn surrogate_difference_cancels_fusion() {
        let mut rng = RngStream::new("test", 1).rng();
        for seed in 0..10 {
            let params = random_params(3, seed, FusionKind::Mlp);
            let w = params.weights.clone();
            let model = DualSurrogateModel::new(params, ridge(5, 2, seed), Variant::Dual).unwrap();
            let xs: Vec<Matrix> = (0..3).map(|_| rand_matrix(5, 3, &mut rng)).collect();
            let ys: Vec<Matrix> = (0..3).map(|_| rand_matrix(2, 3, &mut rng)).collect();
            let d = RngStream::new("dropout", seed);
            let s = model.make_input_surrogates(&xs, Mode::Train, &d).unwrap();
            let t = model.make_target_surrogates(&ys, Mode::Train, &d).unwrap();
            for (b, x) in xs.iter().enumerate() {
                let diff = s.s_alpha[b].sub(&s.s_beta[b]).unwrap();
                let expect = Matrix::from_fn(5, 3, |r, c| (w.w_alpha[c] + w.w_beta[c]) * x[(r, c)]);
                assert!(diff.sub(&expect).unwrap().max_abs() < 1e-12);
                let tdiff = t.s_alpha[b].sub(&t.s_beta[b]).unwrap();
                let texp =
                    Matrix::from_fn(2, 3, |r, c| (w.w_alpha[c] + w.w_beta[c]) * ys[b][(r, c)]);
                assert!(tdiff.sub(&texp).unwrap().max_abs() < 1e-12);
            }
            // Y = 0 gives equal targets f(0).
            let t0 = model
                .make_target_surrogates(&[Matrix::zeros(2, 3)], Mode::Eval, &d)
                .unwrap();
            assert_eq!(t0.s_alpha[0], t0.s_beta[0]);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let w = SurrogateWeights::ones(1);
        let a = Matrix::from_rows(&[[2.0], [4.0]]);
        let b = Matrix::from_rows(&[[0.0], [-2.0]]);
        let y = reconstruct(&[a.clone()], &[b], &w).unwrap();
        assert_eq!(y[0], Matrix::from_rows(&[[1.0], [3.0]]));
        let y = reconstruct(&[a.clone()], &[a], &w).unwrap();
        assert_eq!(y[0].max_abs(), 0.0);
    }

    #[test]
    fn reconstruct_rejects_collapsed_denominator() {
        let w = SurrogateWeights {
            w_alpha: vec![1.0, 0.5],
            w_beta: vec![1.0, -0.5],
        };
        let m = Matrix::zeros(2, 2);
        match reconstruct(&[m.clone()], &[m], &w) {
            Err(Error::DenominatorFloor { channel, .. }) => assert_eq!(channel, 1),
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn reconstructing_targets_recovers_y() {
        let mut rng = RngStream::new("test", 2).rng();
        for seed in 0..20 {
            let kind = if seed % 2 == 0 {
                FusionKind::Mlp
            } else {
                FusionKind::Cnn
            };
            let params = random_params(4, seed, kind);
            let model = DualSurrogateModel::new(params, ridge(6, 3, seed), Variant::Dual).unwrap();
            let ys: Vec<Matrix> = (0..2).map(|_| rand_matrix(3, 4, &mut rng)).collect();
            let t = model
                .make_target_surrogates(&ys, Mode::Train, &RngStream::new("d", seed))
                .unwrap();
            let back = reconstruct(&t.s_alpha, &t.s_beta, &model.params.weights).unwrap();
            for (a, b) in back.iter().zip(&ys) {
                assert!(a.sub(b).unwrap().max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_init_forward_equals_baseline() {
        let mut rng = RngStream::new("test", 3).rng();
        let forecasters = [
            ridge(8, 4, 1),
            Arc::new(FrozenForecaster::persistence(8, 4).unwrap()),
            Arc::new(FrozenForecaster::seasonal_naive(8, 4, 3).unwrap()),
        ];
        for f in forecasters {
            let params = SurrogateParams::init(&FusionSpec::default(), 3, 4);
            let model = DualSurrogateModel::new(params, f, Variant::Dual).unwrap();
            let xs: Vec<Matrix> = (0..4).map(|_| rand_matrix(8, 3, &mut rng)).collect();
            let out = model
                .forward(&xs, Mode::Train, &RngStream::new("d", 1))
                .unwrap();
            let base = model.baseline(&xs).unwrap();
            for (a, b) in out.y_hat.iter().zip(&base) {
                assert!(a.sub(b).unwrap().max_abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_init_persistence_repeats_last_row() {
        let params = SurrogateParams::init(&FusionSpec::default(), 2, 4);
        let model = DualSurrogateModel::new(
            params,
            Arc::new(FrozenForecaster::persistence(3, 2).unwrap()),
            Variant::Dual,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0], [0.25, -1.5]]);
        let y = model.predict(&[x]).unwrap();
        assert_eq!(y[0], Matrix::from_rows(&[[0.25, -1.5], [0.25, -1.5]]));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = RngStream::new("test", 4).rng();
        let model = DualSurrogateModel::new(
            random_params(3, 5, FusionKind::Cnn),
            ridge(6, 2, 2),
            Variant::Dual,
        )
        .unwrap();
        let xs: Vec<Matrix> = (0..3).map(|_| rand_matrix(6, 3, &mut rng)).collect();
        assert_eq!(model.predict(&xs).unwrap(), model.predict(&xs).unwrap());
    }

    #[test]
    fn single_variant() {
        let mut rng = RngStream::new("test", 5).rng();
        let params = SurrogateParams::init(&FusionSpec::default(), 3, 1);
        let single =
            DualSurrogateModel::new(params.clone(), ridge(6, 2, 3), Variant::Single).unwrap();
        let xs: Vec<Matrix> = (0..2).map(|_| rand_matrix(6, 3, &mut rng)).collect();
        let ys: Vec<Matrix> = (0..2).map(|_| rand_matrix(2, 3, &mut rng)).collect();
        let d = RngStream::new("d", 0);
        let out = single.single_forward(&xs, &ys, Mode::Train, &d).unwrap();
        assert_eq!(out.s, xs);
        assert_eq!(out.target, ys);
        assert!(matches!(
            single.forward(&xs, Mode::Eval, &d),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            reconstruct_single(&out.pred),
            Err(Error::Unsupported(_))
        ));

        let random = random_params(3, 7, FusionKind::Mlp);
        let dual = DualSurrogateModel::new(random.clone(), ridge(6, 2, 3), Variant::Dual).unwrap();
        let single = DualSurrogateModel::new(random, ridge(6, 2, 3), Variant::Single).unwrap();
        let s1 = single.single_forward(&xs, &ys, Mode::Train, &d).unwrap();
        let s2 = dual.make_input_surrogates(&xs, Mode::Train, &d).unwrap();
        assert_eq!(s1.s, s2.s_alpha);
    }

    #[test]
    fn model_calls_leave_forecaster_untouched() {
        let f = ridge(6, 2, 9);
        let before = f.digest();
        let model = DualSurrogateModel::new(
            random_params(2, 1, FusionKind::Mlp),
            f.clone(),
            Variant::Dual,
        )
        .unwrap();
        let mut rng = RngStream::new("test", 6).rng();
        let xs: Vec<Matrix> = (0..2).map(|_| rand_matrix(6, 2, &mut rng)).collect();
        let ys: Vec<Matrix> = (0..2).map(|_| rand_matrix(2, 2, &mut rng)).collect();
        model
            .forward(&xs, Mode::Train, &RngStream::new("d", 0))
            .unwrap();
        model
            .surrogate_batch(&xs, &ys, Mode::Train, &RngStream::new("d", 0))
            .unwrap();
        assert_eq!(model.forecaster.digest(), before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = DualSurrogateModel::new(
            random_params(3, 2, FusionKind::Cnn),
            ridge(6, 2, 1),
            Variant::Dual,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.checkpoint().save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(back, model.checkpoint());
        assert_eq!(
            back.into_model().unwrap().params.digest(),
            model.params.digest()
        );
    }
}
