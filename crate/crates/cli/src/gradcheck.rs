//! Finite-difference verification of every analytic gradient on a tiny
//! instance: both fusion modules, every forecaster's VJP, and the full
//! objective including the bound path.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use weave_core::data::WindowBatch;
use weave_core::forecaster::{Forecaster, FrozenForecaster, RidgeArParams};
use weave_core::fusion::{Fusion, FusionKind, FusionSpec};
use weave_core::numerics::{finite_diff_grad, rel_error, Matrix, Mode, RngStream};
use weave_core::objective::{batch_grads, batch_loss, ChannelBaseline};
use weave_core::surrogate::{DualSurrogateModel, SurrogateParams, SurrogateWeights, Variant};

pub const THRESHOLD: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

/// Instance dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyInstance {
    pub batch: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TinyInstance {
    fn default() -> Self {
        Self {
            batch: 2,
            lookback: 8,
            horizon: 4,
            channels: 3,
            hidden: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckEntry {
    pub suite: String,
    pub tensor: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instance: TinyInstance,
    pub threshold: f64,
    pub h: f64,
    pub entries: Vec<CheckEntry>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

struct Checker {
    entries: Vec<CheckEntry>,
}

impl Checker {
    /// Compares `analytic` (split into named tensors) with central differences of `f`.
    fn check(
        &mut self,
        suite: &str,
        named: &[(&str, Vec<f64>)],
        f: impl Fn(&[f64]) -> f64,
        theta: &[f64],
    ) {
        let numeric = finite_diff_grad(f, theta, STEP);
        let mut off = 0;
        for (name, analytic) in named {
            let worst = analytic
                .iter()
                .zip(&numeric[off..off + analytic.len()])
                .map(|(a, n)| {
                    let e = rel_error(*a, *n);
                    if e.is_nan() {
                        f64::INFINITY
                    } else {
                        e
                    }
                })
                .fold(0.0, f64::max);
            off += analytic.len();
            self.entries.push(CheckEntry {
                suite: suite.to_string(),
                tensor: name.to_string(),
                max_rel_error: worst,
                passed: worst < THRESHOLD,
            });
        }
        assert_eq!(off, theta.len());
    }
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn fusion_theta(f: &Fusion) -> Vec<f64> {
    f.tensors()
        .into_iter()
        .flat_map(|(_, t)| t.to_vec())
        .collect()
}

fn set_fusion_theta(f: &mut Fusion, theta: &[f64]) {
    let mut off = 0;
    for (_, t) in f.tensors_mut() {
        t.copy_from_slice(&theta[off..off + t.len()]);
        off += t.len();
    }
}

fn tiny_fusion(kind: FusionKind, inst: &TinyInstance) -> Fusion {
    let spec = FusionSpec {
        kind,
        hidden: Some(inst.hidden),
        dropout: 0.0,
    };
    // Not zero-initialized, and scaled up, so every path carries signal.
    let mut f = Fusion::random(&spec, inst.channels, &RngStream::new("init", inst.seed));
    for (_, t) in f.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= 2.0);
    }
    f
}

fn check_fusion(c: &mut Checker, kind: FusionKind, inst: &TinyInstance) -> weave_core::Result<()> {
    let suite = format!(
        "fusion/{}",
        if kind == FusionKind::Mlp {
            "mlp"
        } else {
            "cnn"
        }
    );
    let mut rng = RngStream::new("gradcheck", inst.seed)
        .lane(kind as u64)
        .rng();
    let fusion = tiny_fusion(kind, inst);
    let x = random_matrix(&mut rng, inst.lookback, inst.channels, 2.0);
    let upstream = random_matrix(&mut rng, inst.lookback, inst.channels, 1.0);
    let drop = RngStream::new("dropout", 0);
    let (_, cache) = fusion.forward(&x, Mode::Eval, &drop)?;
    let mut grads = fusion.zeros_like();
    let dx = fusion.backward(&cache, &upstream, &mut grads)?;

    let weighted = |f: &Fusion, x: &Matrix| -> f64 {
        let (y, _) = f.forward(x, Mode::Eval, &drop).expect("fusion forward");
        y.as_slice()
            .iter()
            .zip(upstream.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    let named: Vec<(&str, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.to_vec()))
        .collect();
    let theta = fusion_theta(&fusion);
    c.check(
        &suite,
        &named,
        |th| {
            let mut f = fusion.clone();
            set_fusion_theta(&mut f, th);
            weighted(&f, &x)
        },
        &theta,
    );
    c.check(
        &suite,
        &[("input", dx.as_slice().to_vec())],
        |th| {
            weighted(
                &fusion,
                &Matrix::new(x.rows(), x.cols(), th.to_vec()).expect("shape"),
            )
        },
        x.as_slice(),
    );
    Ok(())
}

fn tiny_ridge(inst: &TinyInstance, intercept: bool) -> weave_core::Result<FrozenForecaster> {
    let mut rng = RngStream::new("gradcheck", inst.seed)
        .lane(10 + intercept as u64)
        .rng();
    let order = inst.lookback.min(4);
    FrozenForecaster::ridge_ar(
        inst.lookback,
        RidgeArParams {
            order,
            coefficients: random_matrix(&mut rng, inst.horizon, order, 0.6),
            ridge_lambda: 1.0,
            intercept: intercept.then(|| {
                (0..inst.horizon)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            }),
        },
    )
}

fn check_forecasters(c: &mut Checker, inst: &TinyInstance) -> weave_core::Result<()> {
    let models = [
        (
            "persistence",
            FrozenForecaster::persistence(inst.lookback, inst.horizon)?,
        ),
        (
            "seasonal_naive",
            FrozenForecaster::seasonal_naive(inst.lookback, inst.horizon, 3.min(inst.lookback))?,
        ),
        ("ridge_ar", tiny_ridge(inst, false)?),
        ("ridge_ar_intercept", tiny_ridge(inst, true)?),
    ];
    let mut rng = RngStream::new("gradcheck", inst.seed).lane(20).rng();
    for (name, m) in &models {
        let x: Vec<f64> = (0..inst.lookback)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let u: Vec<f64> = (0..inst.horizon)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let vjp = m.input_grad(&x, &u)?;
        c.check(
            &format!("forecaster/{name}"),
            &[("input", vjp)],
            |th| {
                m.predict(th)
                    .expect("predict")
                    .iter()
                    .zip(&u)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &x,
        );
    }
    Ok(())
}

fn check_objective(
    c: &mut Checker,
    kind: FusionKind,
    inst: &TinyInstance,
    corrupt: bool,
) -> weave_core::Result<()> {
    let mut rng = RngStream::new("gradcheck", inst.seed)
        .lane(30 + kind as u64)
        .rng();
    let weights = SurrogateWeights {
        w_alpha: (0..inst.channels)
            .map(|_| rng.random_range(0.3..1.5))
            .collect(),
        w_beta: (0..inst.channels)
            .map(|_| rng.random_range(0.3..1.5))
            .collect(),
    };
    let model = DualSurrogateModel::new(
        SurrogateParams {
            fusion: tiny_fusion(kind, inst),
            weights,
        },
        Arc::new(tiny_ridge(inst, false)?),
        Variant::Dual,
    )?;
    let batch = WindowBatch {
        x: (0..inst.batch)
            .map(|_| random_matrix(&mut rng, inst.lookback, inst.channels, 2.0))
            .collect(),
        y: (0..inst.batch)
            .map(|_| random_matrix(&mut rng, inst.horizon, inst.channels, 2.0))
            .collect(),
        start_indices: (0..inst.batch).collect(),
    };
    let natural = ChannelBaseline::compute(model.forecaster.as_ref(), &batch)?;
    // Shrinking E_ori puts every channel on the Ω branch of the MAX.
    let mut active = natural.clone();
    active.e_ori.iter_mut().for_each(|e| *e *= 1e-3);
    let kind_name = if kind == FusionKind::Mlp {
        "mlp"
    } else {
        "cnn"
    };
    let drop = RngStream::new("dropout", 0);
    for (label, baseline) in [("bound_active", &active), ("natural", &natural)] {
        let g = batch_grads(&model, &batch, baseline, 1.0, Mode::Eval, &drop)?;
        let mut named: Vec<(&str, Vec<f64>)> = g
            .grads
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect();
        if corrupt {
            if let Some((_, w)) = named.iter_mut().find(|(n, _)| *n == "w_alpha") {
                w[0] += 1e-2 * (1.0 + w[0].abs());
            }
        }
        c.check(
            &format!("objective/{kind_name}/{label}"),
            &named,
            |th| {
                let mut m = model.clone();
                m.params.unflatten(th);
                batch_loss(&m, &batch, baseline, 1.0, Mode::Eval, &drop)
                    .expect("loss")
                    .l_total
            },
            &model.params.flatten(),
        );
    }
    Ok(())
}

/// Runs every suite. `corrupt` perturbs one analytic coordinate of the
/// objective gradient so the failure path can be exercised.
pub fn run(inst: &TinyInstance, corrupt: bool) -> weave_core::Result<GradcheckReport> {
    let mut c = Checker {
        entries: Vec::new(),
    };
    for kind in [FusionKind::Mlp, FusionKind::Cnn] {
        check_fusion(&mut c, kind, inst)?;
    }
    check_forecasters(&mut c, inst)?;
    for kind in [FusionKind::Mlp, FusionKind::Cnn] {
        check_objective(&mut c, kind, inst, corrupt)?;
    }
    let passed = c.entries.iter().all(|e| e.passed);
    Ok(GradcheckReport {
        instance: *inst,
        threshold: THRESHOLD,
        h: STEP,
        entries: c.entries,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_instance_passes_and_names_every_tensor() {
        let r = run(&TinyInstance::default(), false).unwrap();
        assert!(
            r.passed,
            "{:#?}",
            r.entries.iter().filter(|e| !e.passed).collect::<Vec<_>>()
        );
        for name in [
            "fc1.weight",
            "fc2.bias",
            "conv1.weight",
            "norm.weight",
            "conv2.bias",
            "w_alpha",
            "w_beta",
            "input",
        ] {
            assert!(r.entries.iter().any(|e| e.tensor == name), "{name} missing");
        }
        assert!(r.entries.iter().any(|e| e.suite == "forecaster/ridge_ar"));
    }

    #[test]
    fn corruption_is_detected() {
        let r = run(&TinyInstance::default(), true).unwrap();
        assert!(!r.passed);
        assert!(r
            .entries
            .iter()
            .filter(|e| !e.passed)
            .all(|e| e.tensor == "w_alpha"));
    }
}
