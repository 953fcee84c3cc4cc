//! Fixed-seed fixtures shared by the benchmarks.

use std::sync::Arc;

use weave_core::data::{gen_coupled_ar, windows, WindowBatch};
use weave_core::forecaster::{fit_ridge_ar, FrozenForecaster};
use weave_core::fusion::{FusionKind, FusionSpec};
use weave_core::objective::ChannelBaseline;
use weave_core::surrogate::{DualSurrogateModel, SurrogateParams, Variant};

pub struct Fixture {
    pub model: DualSurrogateModel,
    pub batch: WindowBatch,
    pub baseline: ChannelBaseline,
}

/// A coupled-AR panel with a ridge-AR forecaster fitted on its first 80%, and
/// one batch of `batch` windows drawn from the remainder.
pub fn fixture(
    kind: FusionKind,
    channels: usize,
    lookback: usize,
    horizon: usize,
    batch: usize,
) -> Fixture {
    let len = 4 * (lookback + horizon) * batch.max(8);
    let series = gen_coupled_ar(0, len, channels, 0.8, 0.9, 1.0).expect("generator");
    let cut = len * 4 / 5;
    let forecaster: FrozenForecaster =
        fit_ridge_ar(&series, 0..cut, 4, 1e-3, lookback, horizon).expect("ridge fit");
    let ws = windows(&series, cut - lookback..len, lookback, horizon, 1);
    let batch = WindowBatch::from_windows(ws.iter().take(batch));
    let spec = FusionSpec {
        kind,
        hidden: None,
        dropout: 0.1,
    };
    let mut params = SurrogateParams::init(&spec, channels, 0);
    // Move off the zero-initialized state so every path does real work.
    let mut k = 0.0;
    for (_, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            k += 1.0;
            *v += 1e-2 * f64::sin(k);
        }
    }
    let baseline = ChannelBaseline::compute(&forecaster, &batch).expect("baseline");
    let model =
        DualSurrogateModel::new(params, Arc::new(forecaster), Variant::Dual).expect("model");
    Fixture {
        model,
        batch,
        baseline,
    }
}
