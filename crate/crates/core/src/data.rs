//! Panel ingestion, standardization, splits, windowing, synthetic panels and
//! the channel perturbations used by the sweep experiments.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

/// A `T x C` real panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    pub values: Matrix,
    pub channel_names: Vec<String>,
    pub frequency: String,
    /// Whether the source file carried a leading timestamp column.
    #[serde(default)]
    pub had_timestamp: bool,
}

impl MultivariateSeries {
    pub fn new(
        values: Matrix,
        channel_names: Vec<String>,
        frequency: impl Into<String>,
    ) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Invalid("series needs T >= 1 and C >= 1".into()));
        }
        if channel_names.len() != values.cols() {
            return Err(Error::shape(
                "MultivariateSeries",
                values.cols(),
                channel_names.len(),
            ));
        }
        if !values.is_finite() {
            return Err(Error::Invalid("series contains non-finite values".into()));
        }
        Ok(Self {
            values,
            channel_names,
            frequency: frequency.into(),
            had_timestamp: false,
        })
    }

    /// Names channels `ch_0..ch_{C-1}`.
    pub fn unnamed(values: Matrix) -> Result<Self> {
        let names = (0..values.cols()).map(|c| format!("ch_{c}")).collect();
        Self::new(values, names, "")
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.col(c)
    }
}

fn parse_cell(cell: &str, path: &Path, line: usize, column: &str) -> Result<f64> {
    let trimmed = cell.trim();
    let parsed = trimmed.parse::<f64>().ok().filter(|v| v.is_finite());
    parsed.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("non-numeric or non-finite cell {trimmed:?} in channel column '{column}'"),
    })
}

/// Reads a header-row CSV. A leading column whose first data cell is not a
/// number is treated as a timestamp and dropped.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "empty header".into(),
        });
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut skip_first: Option<bool> = None;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let skip = *skip_first
            .get_or_insert_with(|| headers.len() > 1 && record[0].trim().parse::<f64>().is_err());
        let start = usize::from(skip);
        let row = (start..record.len())
            .map(|k| parse_cell(&record[k], path, line, &headers[k]))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 2,
            message: "no data rows".into(),
        });
    }
    let skip = skip_first.unwrap_or(false);
    let names = headers[usize::from(skip)..].to_vec();
    let mut series = MultivariateSeries::new(Matrix::from_rows(&rows), names, "")?;
    series.had_timestamp = skip;
    Ok(series)
}

/// Writes the panel as a header-row CSV using shortest round-trip formatting.
pub fn write_csv(series: &MultivariateSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&series.channel_names.join(","));
    out.push('\n');
    for r in 0..series.len() {
        let row: Vec<String> = series.values.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Contiguous train / validation / test row counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSpec {
    /// Train and validation take the given fractions; test gets the remainder.
    pub fn from_fractions(total: usize, train: f64, val: f64) -> Self {
        let n_train = (total as f64 * train).floor() as usize;
        let n_val = (total as f64 * val).floor() as usize;
        Self {
            train: n_train,
            val: n_val,
            test: total - n_train - n_val,
        }
    }

    pub fn validate(&self, total: usize, lookback: usize, horizon: usize) -> Result<()> {
        if self.train + self.val + self.test > total {
            return Err(Error::Invalid(format!(
                "split {}+{}+{} exceeds series length {total}",
                self.train, self.val, self.test
            )));
        }
        let need = lookback + horizon;
        for (name, n) in [
            ("train", self.train),
            ("val", self.val),
            ("test", self.test),
        ] {
            if n < need {
                return Err(Error::Invalid(format!(
                    "{name} split has {n} rows; need at least L+H = {need}"
                )));
            }
        }
        Ok(())
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train..self.train + self.val
    }

    pub fn test_range(&self) -> Range<usize> {
        self.train + self.val..self.train + self.val + self.test
    }
}

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

/// Fits mean and population standard deviation on `train_range` only.
pub fn fit_scaler(series: &MultivariateSeries, train_range: Range<usize>) -> Result<ScalerState> {
    if train_range.is_empty() || train_range.end > series.len() {
        return Err(Error::Invalid(format!(
            "training range {train_range:?} invalid for length {}",
            series.len()
        )));
    }
    let n = train_range.len() as f64;
    let c = series.channels();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for t in train_range.clone() {
        for (m, v) in mean.iter_mut().zip(series.values.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for t in train_range {
        for (k, v) in series.values.row(t).iter().enumerate() {
            std[k] += (v - mean[k]).powi(2);
        }
    }
    for (k, s) in std.iter_mut().enumerate() {
        *s = (*s / n).sqrt();
        if *s <= MIN_STD {
            return Err(Error::ZeroVariance {
                channel: series.channel_names[k].clone(),
            });
        }
    }
    Ok(ScalerState { mean, std })
}

impl ScalerState {
    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.transform(series, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        self.transform(series, |v, m, s| v * s + m)
    }

    fn transform(
        &self,
        series: &MultivariateSeries,
        f: impl Fn(f64, f64, f64) -> f64,
    ) -> Result<MultivariateSeries> {
        if series.channels() != self.mean.len() {
            return Err(Error::shape(
                "ScalerState",
                self.mean.len(),
                series.channels(),
            ));
        }
        let values = Matrix::from_fn(series.len(), series.channels(), |r, c| {
            f(series.values[(r, c)], self.mean[c], self.std[c])
        });
        Ok(MultivariateSeries {
            values,
            ..series.clone()
        })
    }
}

pub fn apply_scaler(
    series: &MultivariateSeries,
    state: &ScalerState,
) -> Result<MultivariateSeries> {
    state.apply(series)
}

/// One lookback/target pair. `start` is the absolute row of `x`'s first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x: Matrix,
    pub y: Matrix,
    pub start: usize,
}

/// Every window of `range` at the given stride; the tail is never dropped.
/// A range shorter than `L + H` yields no windows.
pub fn windows(
    series: &MultivariateSeries,
    range: Range<usize>,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Vec<Window> {
    assert!(stride >= 1 && lookback >= 1 && horizon >= 1);
    let range = range.start..range.end.min(series.len());
    let span = lookback + horizon;
    if range.len() < span {
        return Vec::new();
    }
    let count = (range.len() - span) / stride + 1;
    (0..count)
        .map(|k| {
            let start = range.start + k * stride;
            Window {
                x: series.values.slice_rows(start, start + lookback),
                y: series.values.slice_rows(start + lookback, start + span),
                start,
            }
        })
        .collect()
}

/// A batch of windows: `x` holds `B` matrices of `L x C`, `y` holds `B` of `H x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub x: Vec<Matrix>,
    pub y: Vec<Matrix>,
    pub start_indices: Vec<usize>,
}

impl WindowBatch {
    pub fn from_windows<'a>(items: impl IntoIterator<Item = &'a Window>) -> Self {
        let mut batch = WindowBatch {
            x: Vec::new(),
            y: Vec::new(),
            start_indices: Vec::new(),
        };
        for w in items {
            batch.x.push(w.x.clone());
            batch.y.push(w.y.clone());
            batch.start_indices.push(w.start);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Coupled autoregressive panel. Channel 0 is AR(1) with coefficient `phi`
/// and innovations of standard deviation `noise_std`; channel `j >= 1`
/// follows `x_j[t] = coupling * x_{j-1}[t-1] + (1 - coupling) * e_j[t]`.
pub fn gen_coupled_ar(
    seed: u64,
    len: usize,
    channels: usize,
    phi: f64,
    coupling: f64,
    noise_std: f64,
) -> Result<MultivariateSeries> {
    if phi.abs() >= 1.0 {
        return Err(Error::Invalid(format!("|phi| must be < 1, got {phi}")));
    }
    if !(0.0..=1.0).contains(&coupling) {
        return Err(Error::Invalid(format!(
            "coupling must be in [0, 1], got {coupling}"
        )));
    }
    if len == 0 || channels == 0 {
        return Err(Error::Invalid("need T >= 1 and C >= 1".into()));
    }
    let stream = RngStream::new("data", seed);
    let mut values = Matrix::zeros(len, channels);
    let mut rng0 = stream.lane(0).rng();
    let stationary = noise_std / (1.0 - phi * phi).sqrt();
    values[(0, 0)] = stationary * rng0.sample::<f64, _>(StandardNormal);
    for t in 1..len {
        let e: f64 = rng0.sample(StandardNormal);
        values[(t, 0)] = phi * values[(t - 1, 0)] + noise_std * e;
    }
    for j in 1..channels {
        let mut rng = stream.lane(j as u64).rng();
        for t in 0..len {
            let e: f64 = rng.sample(StandardNormal);
            let lagged = if t == 0 { 0.0 } else { values[(t - 1, j - 1)] };
            values[(t, j)] = coupling * lagged + (1.0 - coupling) * e;
        }
    }
    let mut series = MultivariateSeries::unnamed(values)?;
    series.frequency = "synthetic".into();
    Ok(series)
}

/// Appends `k` channels of i.i.d. standard normal draws named `noise_1..k`.
pub fn inject_noise_channels(
    series: &MultivariateSeries,
    k: usize,
    seed: u64,
) -> MultivariateSeries {
    if k == 0 {
        return series.clone();
    }
    let c = series.channels();
    let stream = RngStream::new("noise", seed);
    let noise: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut rng = stream.lane(j as u64).rng();
            (0..series.len())
                .map(|_| rng.sample(StandardNormal))
                .collect()
        })
        .collect();
    let values = Matrix::from_fn(series.len(), c + k, |r, col| {
        if col < c {
            series.values[(r, col)]
        } else {
            noise[col - c][r]
        }
    });
    let mut names = series.channel_names.clone();
    names.extend((1..=k).map(|j| format!("noise_{j}")));
    MultivariateSeries {
        values,
        channel_names: names,
        ..series.clone()
    }
}

/// Keeps channels `0..n` in order.
pub fn take_first_channels(series: &MultivariateSeries, n: usize) -> Result<MultivariateSeries> {
    if n == 0 || n > series.channels() {
        return Err(Error::ChannelRange {
            requested: n,
            available: series.channels(),
        });
    }
    let values = Matrix::from_fn(series.len(), n, |r, c| series.values[(r, c)]);
    Ok(MultivariateSeries {
        values,
        channel_names: series.channel_names[..n].to_vec(),
        ..series.clone()
    })
}

/// Pearson correlation of two equal-length slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_basic_and_timestamp() {
        let f = write_tmp("a,b\n1,2\n3,4\n5,6\n");
        let s = load_csv(f.path()).unwrap();
        assert_eq!((s.len(), s.channels()), (3, 2));
        assert!(!s.had_timestamp);

        let f = write_tmp("date,x,y\n2020-01-01,1.5,2\n2020-01-02,3,4\n");
        let s = load_csv(f.path()).unwrap();
        assert_eq!(s.channel_names, vec!["x", "y"]);
        assert!(s.had_timestamp);
        assert_eq!(s.values.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let f = write_tmp("a,b\n1,2\n3,oops\n");
        match load_csv(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("a,b\n1,2\n3\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { .. })));
        let f = write_tmp("a,b\n1,\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { .. })));
        let f = write_tmp("a,b\n1,NaN\n");
        assert!(matches!(load_csv(f.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let s = gen_coupled_ar(3, 50, 3, 0.5, 0.4, 1.0).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&s, f.path()).unwrap();
        let back = load_csv(f.path()).unwrap();
        assert_eq!(back.values, s.values);
    }

    #[test]
    fn ettm_like_row_count_is_preserved() {
        let rows = 8545 + 2881 + 2881;
        let mut text = String::from("date,a,b,c,d,e,f,g\n");
        for t in 0..rows {
            text.push_str(&format!("t{t},{t},1,2,3,4,5,6\n"));
        }
        let f = write_tmp(&text);
        let s = load_csv(f.path()).unwrap();
        assert_eq!((s.len(), s.channels()), (rows, 7));
        let split = SplitSpec {
            train: 8545,
            val: 2881,
            test: 2881,
        };
        assert!(split.validate(s.len(), 96, 96).is_ok());
        assert_eq!(split.test_range().end, s.len());
    }

    #[test]
    fn scaler_standardizes_train_slice() {
        let s = gen_coupled_ar(1, 500, 3, 0.7, 0.5, 1.0).unwrap();
        let shifted = MultivariateSeries {
            values: s.values.map(|v| 3.0 * v + 100.0),
            ..s.clone()
        };
        let state = fit_scaler(&shifted, 0..300).unwrap();
        let z = state.apply(&shifted).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..300).map(|t| z.values[(t, c)]).collect();
            let m = col.iter().sum::<f64>() / 300.0;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 300.0).sqrt();
            assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        }
        let back = state.invert(&z).unwrap();
        for (a, b) in back.values.as_slice().iter().zip(shifted.values.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Re-fitting on already-standardized data is a near-identity.
        let again = fit_scaler(&z, 0..300).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(again.std.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn scaler_ignores_non_training_rows() {
        let s = gen_coupled_ar(2, 400, 2, 0.5, 0.5, 1.0).unwrap();
        let a = fit_scaler(&s, 0..200).unwrap();
        let mut mutated = s.clone();
        for t in 200..400 {
            mutated.values.row_mut(t).iter_mut().for_each(|v| *v = 1e6);
        }
        assert_eq!(fit_scaler(&mutated, 0..200).unwrap(), a);
    }

    #[test]
    fn scaler_rejects_constant_channel() {
        let values = Matrix::from_fn(10, 2, |r, c| if c == 0 { r as f64 } else { 5.0 });
        let s = MultivariateSeries::new(values, vec!["ok".into(), "flat".into()], "").unwrap();
        match fit_scaler(&s, 0..10) {
            Err(Error::ZeroVariance { channel }) => assert_eq!(channel, "flat"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn window_counts() {
        let s = MultivariateSeries::unnamed(Matrix::from_fn(100, 1, |r, _| r as f64)).unwrap();
        assert_eq!(windows(&s, 0..100, 10, 5, 1).len(), 86);
        assert_eq!(windows(&s, 0..15, 10, 5, 1).len(), 1);
        assert_eq!(windows(&s, 0..100, 10, 5, 2).len(), 43);
        assert!(windows(&s, 0..14, 10, 5, 1).is_empty());
    }

    #[test]
    fn windows_tile_targets_and_follow_lookback() {
        let s =
            MultivariateSeries::unnamed(Matrix::from_fn(40, 2, |r, c| (r * 2 + c) as f64)).unwrap();
        let ws = windows(&s, 0..40, 6, 3, 1);
        let mut covered = std::collections::BTreeSet::new();
        for w in &ws {
            assert_eq!(w.y[(0, 0)], w.x[(5, 0)] + 2.0);
            for h in 0..3 {
                covered.insert(w.start + 6 + h);
            }
        }
        assert_eq!(covered, (6..40).collect());
    }

    #[test]
    fn coupled_ar_properties() {
        let a = gen_coupled_ar(11, 300, 3, 0.8, 0.6, 1.0).unwrap();
        let b = gen_coupled_ar(11, 300, 3, 0.8, 0.6, 1.0).unwrap();
        assert_eq!(a, b);

        // coupling = 1 removes channel 1's own innovation entirely.
        let lagged = gen_coupled_ar(5, 200, 2, 0.8, 1.0, 1.0).unwrap();
        for t in 1..200 {
            assert_eq!(lagged.values[(t, 1)], lagged.values[(t - 1, 0)]);
        }

        let indep = gen_coupled_ar(7, 10_000, 3, 0.8, 0.0, 1.0).unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                let r = pearson(&indep.channel(i), &indep.channel(j));
                assert!(r.abs() < 0.05, "corr({i},{j}) = {r}");
            }
        }

        let coupled = gen_coupled_ar(8, 10_000, 3, 0.8, 0.5, 1.0).unwrap();
        for j in 1..3 {
            let prev = coupled.channel(j - 1);
            let cur = coupled.channel(j);
            let lag0 = pearson(&prev, &cur);
            let lag1 = pearson(&prev[..9_999], &cur[1..]);
            assert!(lag1 > lag0 + 0.1, "lag1 {lag1} lag0 {lag0}");
        }
    }

    #[test]
    fn noise_injection() {
        let s = gen_coupled_ar(1, 10_000, 7, 0.5, 0.3, 1.0).unwrap();
        assert_eq!(inject_noise_channels(&s, 0, 3), s);
        let n = inject_noise_channels(&s, 3, 3);
        assert_eq!(n.channels(), 10);
        for c in 0..7 {
            assert_eq!(n.channel(c), s.channel(c));
        }
        assert_eq!(&n.channel_names[7..], &["noise_1", "noise_2", "noise_3"]);
        let mean = n.channel(8).iter().sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn channel_prefix() {
        let s = gen_coupled_ar(1, 50, 6, 0.5, 0.3, 1.0).unwrap();
        assert_eq!(take_first_channels(&s, 6).unwrap(), s);
        let one = take_first_channels(&s, 1).unwrap();
        assert_eq!(one.channels(), 1);
        assert_eq!(one.channel(0), s.channel(0));
        assert!(take_first_channels(&s, 0).is_err());
        assert!(take_first_channels(&s, 7).is_err());
        let wide = gen_coupled_ar(1, 20, 321, 0.5, 0.3, 1.0).unwrap();
        assert_eq!(take_first_channels(&wide, 5).unwrap().channels(), 5);
    }
}
