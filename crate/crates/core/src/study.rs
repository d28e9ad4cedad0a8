//! Dataset-size study and speed sweeps.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataSettings, Sample};
use crate::error::{Error, Result};
use crate::metrics::{masked_mse, to_f64, MreAccumulator};
use crate::nn::{NetConfig, ResSeUNet};
use crate::params::{Param, ParameterVector};
use crate::pipeline::PREDICT_CLOUD_SEED;
use crate::raster_input::build_input;
use crate::tensor::Tensor;
use crate::train::{stack_batch, TargetKind, TrainConfig, Trainer};

/// Masked MSE pooled over all test pixels, and the pooled MRE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub mse: f64,
    pub mre: f64,
}

/// Eval-mode predictions of `net` for every sample, in order.
pub fn predict_all(
    net: &ResSeUNet<f32>,
    samples: &[Sample],
    kind: TargetKind,
    batch: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = stack_batch(&refs, kind)?;
        let y = net.predict(&x)?;
        for i in 0..chunk.len() {
            let item = y.batch_item(i)?;
            let dims = item.dims()[1..].to_vec();
            out.push(item.reshape(&dims)?);
        }
    }
    Ok(out)
}

pub fn test_metrics(preds: &[Tensor<f32>], samples: &[Sample], kind: TargetKind) -> Result<TestMetrics> {
    if preds.len() != samples.len() || samples.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    let parts: Vec<(f64, usize, MreAccumulator)> = preds
        .par_iter()
        .zip(samples)
        .map(|(p, s)| {
            let c = kind.channels();
            let mask: Vec<f64> = (0..c).flat_map(|_| s.mask.iter().map(|&m| f64::from(m))).collect();
            let (pd, gt) = (to_f64(p), to_f64(kind.target(s)));
            let pixels = mask.iter().filter(|&&m| m > 0.0).count();
            let mse = masked_mse(&pd, &gt, &mask)?;
            let mut acc = MreAccumulator::default();
            acc.add(&pd, &gt, &mask)?;
            Ok((mse * pixels as f64, pixels, acc))
        })
        .collect::<Result<_>>()?;
    let mut sse = 0.0;
    let mut count = 0;
    let mut acc = MreAccumulator::default();
    for (s, c, a) in parts {
        sse += s;
        count += c;
        acc.abs_error += a.abs_error;
        acc.abs_truth += a.abs_truth;
    }
    Ok(TestMetrics {
        mse: sse / count as f64,
        mre: acc.value()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub seed: u64,
    pub mse: f64,
    pub mre: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeAggregate {
    pub size: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub mean_mre: f64,
    pub std_mre: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeStudy {
    pub rows: Vec<SizeRow>,
    pub aggregates: Vec<SizeAggregate>,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One thinning network per (size, seed), each trained on `size` geometries
/// drawn from `pool` by a seeded shuffle and scored on the shared `test` set.
/// `progress` sees every row together with the network that produced it.
pub fn size_study(
    pool: &[Sample],
    test: &[Sample],
    sizes: &[usize],
    seeds: &[u64],
    net: &NetConfig,
    train: &TrainConfig,
    mut progress: impl FnMut(&SizeRow, &ResSeUNet<f32>),
) -> Result<SizeStudy> {
    if sizes.is_empty() || seeds.is_empty() || test.is_empty() {
        return Err(Error::EmptyRequest("size study needs sizes, seeds and a test set"));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > pool.len()) {
        return Err(Error::InvalidArgument(format!(
            "size {s} with a pool of {} geometries",
            pool.len()
        )));
    }
    let test_keys: HashSet<[u64; 4]> = test.iter().map(|s| s.params.geometry_key()).collect();
    if let Some(s) = pool.iter().find(|s| test_keys.contains(&s.params.geometry_key())) {
        return Err(Error::Dataset(format!(
            "training geometry `{}` also appears in the test set",
            s.id
        )));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        for &seed in seeds {
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let subset: Vec<Sample> = order[..size].iter().map(|&i| pool[i].clone()).collect();
            let cfg = TrainConfig { seed, ..*train };
            let mut t = Trainer::new(net.clone(), TargetKind::Thinning, cfg)?;
            t.run(&subset, test, None)?;
            let preds = predict_all(&t.net, test, TargetKind::Thinning, cfg.batch_size)?;
            let m = test_metrics(&preds, test, TargetKind::Thinning)?;
            let row = SizeRow {
                size,
                seed,
                mse: m.mse,
                mre: m.mre,
            };
            progress(&row, &t.net);
            rows.push(row);
        }
    }
    let aggregates = sizes
        .iter()
        .map(|&size| {
            let pick = |f: fn(&SizeRow) -> f64| rows.iter().filter(|r| r.size == size).map(f).collect::<Vec<_>>();
            let (mean_mse, std_mse) = mean_std(&pick(|r| r.mse));
            let (mean_mre, std_mre) = mean_std(&pick(|r| r.mre));
            SizeAggregate {
                size,
                mean_mse,
                std_mse,
                mean_mre,
                std_mre,
            }
        })
        .collect();
    Ok(SizeStudy { rows, aggregates })
}

impl SizeStudy {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_aggregate_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for a in &self.aggregates {
            out.serialize(a).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepFrame {
    pub t_init: f64,
    pub speed: f64,
    #[serde(skip)]
    pub thinning: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedSweep {
    pub base: ParameterVector,
    pub speeds: Vec<f64>,
    pub temps: Vec<f64>,
    pub ascending: bool,
    /// Temperature-major, speeds in the given order.
    pub frames: Vec<SweepFrame>,
    #[serde(skip)]
    pub mask: Vec<f64>,
}

/// Predicted thinning for every (temperature, speed) pair with all other
/// parameters held at `base`. Speeds must be strictly monotone.
pub fn speed_sweep(
    net: &ResSeUNet<f32>,
    settings: &DataSettings,
    base: &ParameterVector,
    speeds: &[f64],
    temps: &[f64],
) -> Result<SpeedSweep> {
    if speeds.len() < 2 || temps.is_empty() {
        return Err(Error::EmptyRequest(
            "a sweep needs at least two speeds and one temperature",
        ));
    }
    let ascending = speeds[1] > speeds[0];
    let monotone = speeds
        .windows(2)
        .all(|w| if ascending { w[1] > w[0] } else { w[1] < w[0] });
    if !monotone {
        return Err(Error::InvalidArgument("sweep speeds must be sorted".into()));
    }
    if net.config().out_channels != 1 || net.config().resolution != settings.resolution {
        return Err(Error::Architecture(
            "sweep needs a thinning network at the data resolution".into(),
        ));
    }
    let grid = settings.grid()?;
    let mut frames = Vec::with_capacity(speeds.len() * temps.len());
    let mut mask = Vec::new();
    for &t in temps {
        let inputs = speeds
            .iter()
            .map(|&v| {
                let pv = base.with(Param::TInit, t).with(Param::Speed, v);
                build_input(
                    &pv,
                    &settings.bounds,
                    grid,
                    settings.cloud_spacing_mm,
                    PREDICT_CLOUD_SEED,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        mask = inputs[0].mask.iter().map(|&m| f64::from(m)).collect();
        let x = Tensor::stack(&inputs.iter().map(|i| &i.data).collect::<Vec<_>>())?;
        let y = net.predict(&x)?;
        let per = grid.len();
        for (k, &v) in speeds.iter().enumerate() {
            let img = y.data()[k * per..(k + 1) * per]
                .iter()
                .zip(&mask)
                .map(|(&p, m)| f64::from(p) * m)
                .collect();
            frames.push(SweepFrame {
                t_init: t,
                speed: v,
                thinning: img,
            });
        }
    }
    Ok(SpeedSweep {
        base: *base,
        speeds: speeds.to_vec(),
        temps: temps.to_vec(),
        ascending,
        frames,
        mask,
    })
}

impl SpeedSweep {
    pub fn frames_at(&self, t_init: f64) -> Vec<&SweepFrame> {
        self.frames.iter().filter(|f| f.t_init == t_init).collect()
    }

    /// Per temperature: largest in-mask change between adjacent frames
    /// divided by the in-mask value range over the whole sweep at that
    /// temperature. Returns the worst ratio.
    pub fn smoothness(&self) -> f64 {
        let inside: Vec<usize> = (0..self.mask.len()).filter(|&i| self.mask[i] > 0.0).collect();
        self.temps
            .iter()
            .map(|&t| {
                let frames = self.frames_at(t);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for f in &frames {
                    for &i in &inside {
                        lo = lo.min(f.thinning[i]);
                        hi = hi.max(f.thinning[i]);
                    }
                }
                let step = frames
                    .windows(2)
                    .flat_map(|w| inside.iter().map(move |&i| (w[1].thinning[i] - w[0].thinning[i]).abs()))
                    .fold(0.0, f64::max);
                if hi > lo {
                    step / (hi - lo)
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn csv_header() {
        let s = SizeStudy {
            rows: vec![SizeRow {
                size: 8,
                seed: 1,
                mse: 0.5,
                mre: 0.25,
            }],
            aggregates: vec![],
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "size,seed,mse,mre\n8,1,0.5,0.25\n");
    }
}
