//! Evaluation: denormalized pixel MSE, binarized confusion counts,
//! precision/recall/accuracy/F1, reported per lead time and aggregated,
//! for a model and the persistence baseline.

use std::path::Path;

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::model::SsaUnet;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::train::stack_windows;

/// Pixel-level confusion counts; tp + fp + tn + fn equals the number of
/// evaluated pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Binarizes both tensors at `threshold` (positive iff value is strictly
/// greater) and accumulates counts over every element.
pub fn binarize<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    threshold: f64,
) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "binarize shapes differ: {} vs {}",
            pred.shape(),
            target.shape()
        )));
    }
    let thr = T::from_f64_lossy(threshold);
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        match (p > thr, t > thr) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// One evaluation row: a model at one lead time (or the "all" aggregate).
#[derive(Clone, Debug)]
pub struct MetricsRecord {
    pub model: String,
    /// Lead time in minutes; `None` is the "all" aggregate.
    pub horizon_min: Option<u32>,
    pub mse: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    /// Set when a zero denominator forced a metric to 0.
    pub degenerate: bool,
    pub threshold: f64,
}

/// Derives (precision, recall, accuracy, f1, degenerate) from counts;
/// zero-denominator metrics return 0 with the flag set.
pub fn metrics_from_counts(c: &ConfusionCounts) -> (f64, f64, f64, f64, bool) {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| -> f64 {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let accuracy = ratio(c.tp + c.tn, c.total());
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    (precision, recall, accuracy, f1, degenerate)
}

fn record_from(
    model: &str,
    horizon_min: Option<u32>,
    sse: f64,
    pixels: u64,
    counts: ConfusionCounts,
    threshold: f64,
) -> MetricsRecord {
    let (precision, recall, accuracy, f1, degenerate) = metrics_from_counts(&counts);
    MetricsRecord {
        model: model.to_string(),
        horizon_min,
        mse: sse / pixels as f64,
        precision,
        recall,
        accuracy,
        f1,
        counts,
        degenerate,
        threshold,
    }
}

/// Evaluation knobs; `norm` is the training-set normalization constant
/// used to denormalize values before the MSE and the binarization.
#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    pub threshold: f64,
    pub norm: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 0.5,
            norm: 1.0,
            batch_size: 6,
        }
    }
}

/// Evaluates any batched predictor: one record per lead time plus the
/// "all" aggregate. Accumulation is in fixed window order.
fn evaluate_predictions<T: Scalar, F>(
    predict: F,
    model_id: &str,
    windows: &[SampleWindow<T>],
    cfg: &EvalConfig,
) -> Result<Vec<MetricsRecord>>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if windows.is_empty() {
        return Err(Error::data("evaluation dataset is empty"));
    }
    let offsets = &windows[0].offsets;
    let interval = windows[0].interval_min;
    for w in windows {
        if &w.offsets != offsets || w.interval_min != interval {
            return Err(Error::data(
                "all evaluated windows must share the horizon specification",
            ));
        }
    }
    let n_out = offsets.len();
    let mut sse = vec![0.0f64; n_out];
    let mut pixels = vec![0u64; n_out];
    let mut counts = vec![ConfusionCounts::default(); n_out];
    let norm = cfg.norm;

    let idxs: Vec<usize> = (0..windows.len()).collect();
    for chunk in idxs.chunks(cfg.batch_size) {
        let (x, t) = stack_windows(windows, chunk)?;
        let y = predict(&x)?;
        if y.shape() != t.shape() {
            return Err(Error::dim(format!(
                "prediction shape {} does not match targets {}",
                y.shape(),
                t.shape()
            )));
        }
        let s = t.shape();
        for b in 0..s.n {
            for c in 0..n_out {
                let yp = y.plane(b, c);
                let tp = t.plane(b, c);
                let mut acc = 0.0;
                for (&pv, &tv) in yp.iter().zip(tp) {
                    let d = (pv.to_f64_lossy() - tv.to_f64_lossy()) * norm;
                    acc += d * d;
                }
                sse[c] += acc;
                pixels[c] += yp.len() as u64;
                let mut cc = ConfusionCounts::default();
                for (&pv, &tv) in yp.iter().zip(tp) {
                    match (
                        pv.to_f64_lossy() * norm > cfg.threshold,
                        tv.to_f64_lossy() * norm > cfg.threshold,
                    ) {
                        (true, true) => cc.tp += 1,
                        (true, false) => cc.fp += 1,
                        (false, false) => cc.tn += 1,
                        (false, true) => cc.fn_ += 1,
                    }
                }
                counts[c].add(&cc);
            }
        }
    }

    let mut records = Vec::with_capacity(n_out + 1);
    for c in 0..n_out {
        records.push(record_from(
            model_id,
            Some(offsets[c] as u32 * interval),
            sse[c],
            pixels[c],
            counts[c],
            cfg.threshold,
        ));
    }
    let total_sse: f64 = sse.iter().sum();
    let total_pixels: u64 = pixels.iter().sum();
    let mut total_counts = ConfusionCounts::default();
    for c in &counts {
        total_counts.add(c);
    }
    records.push(record_from(
        model_id,
        None,
        total_sse,
        total_pixels,
        total_counts,
        cfg.threshold,
    ));
    Ok(records)
}

/// Evaluates a trained model in eval mode.
pub fn evaluate_model<T: Scalar>(
    model: &SsaUnet<T>,
    model_id: &str,
    windows: &[SampleWindow<T>],
    cfg: &EvalConfig,
) -> Result<Vec<MetricsRecord>> {
    evaluate_predictions(|x| model.forward(x), model_id, windows, cfg)
}

/// Evaluates the persistence baseline (repeat the last input frame).
pub fn evaluate_persistence<T: Scalar>(
    windows: &[SampleWindow<T>],
    cfg: &EvalConfig,
) -> Result<Vec<MetricsRecord>> {
    let n_out = windows
        .first()
        .ok_or_else(|| Error::data("evaluation dataset is empty"))?
        .offsets
        .len();
    evaluate_predictions(
        |x| {
            let s = x.shape();
            let mut y = Tensor::zeros(Shape::new(s.n, n_out, s.h, s.w)?);
            for b in 0..s.n {
                let last = x.plane(b, s.c - 1).to_vec();
                for c in 0..n_out {
                    y.plane_mut(b, c).copy_from_slice(&last);
                }
            }
            Ok(y)
        },
        "persistence",
        windows,
        cfg,
    )
}

/// CSV with the stable column order (model, horizon_min, mse, precision,
/// recall, accuracy, f1, tp, fp, tn, fn); reals carry 6 significant
/// digits, so two identical runs produce byte-identical files.
pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from("model,horizon_min,mse,precision,recall,accuracy,f1,tp,fp,tn,fn\n");
    for r in records {
        let horizon = match r.horizon_min {
            Some(m) => m.to_string(),
            None => "all".to_string(),
        };
        s.push_str(&format!(
            "{},{},{:.5e},{:.5e},{:.5e},{:.5e},{:.5e},{},{},{},{}\n",
            r.model,
            horizon,
            r.mse,
            r.precision,
            r.recall,
            r.accuracy,
            r.f1,
            r.counts.tp,
            r.counts.fp,
            r.counts.tn,
            r.counts.fn_,
        ));
    }
    s
}

pub fn report_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, records_to_csv(records))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_tensors_have_no_false_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::rand_uniform(Shape::new(1, 2, 4, 4).unwrap(), 0.0, 1.0, &mut rng);
        let c = binarize(&a, &a, 0.5).unwrap();
        assert_eq!(c.fp, 0);
        assert_eq!(c.fn_, 0);
        assert_eq!(c.total(), 32);
    }

    #[test]
    fn all_positive_pred_vs_all_negative_target() {
        let p = Tensor::<f64>::ones(Shape::new(1, 1, 4, 4).unwrap());
        let t = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4).unwrap());
        let c = binarize(&p, &t, 0.5).unwrap();
        assert_eq!(c.fp, 16);
        assert_eq!(c.tp + c.tn + c.fn_, 0);
    }

    #[test]
    fn binarize_matches_pixel_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let p =
                Tensor::<f64>::rand_uniform(Shape::new(1, 1, 4, 4).unwrap(), 0.0, 1.0, &mut rng);
            let t =
                Tensor::<f64>::rand_uniform(Shape::new(1, 1, 4, 4).unwrap(), 0.0, 1.0, &mut rng);
            let got = binarize(&p, &t, 0.4).unwrap();
            let mut want = ConfusionCounts::default();
            for i in 0..16 {
                let pp = p.data()[i] > 0.4;
                let tt = t.data()[i] > 0.4;
                if pp && tt {
                    want.tp += 1;
                } else if pp {
                    want.fp += 1;
                } else if tt {
                    want.fn_ += 1;
                } else {
                    want.tn += 1;
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn hand_computed_metrics() {
        let c = ConfusionCounts {
            tp: 5,
            fp: 5,
            tn: 10,
            fn_: 0,
        };
        let (p, r, a, f1, degenerate) = metrics_from_counts(&c);
        assert_eq!(p, 0.5);
        assert_eq!(r, 1.0);
        assert_eq!(a, 0.75);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(!degenerate);
    }

    #[test]
    fn degenerate_counts_flagged() {
        let c = ConfusionCounts {
            tp: 0,
            fp: 0,
            tn: 8,
            fn_: 0,
        };
        let (p, r, a, f1, degenerate) = metrics_from_counts(&c);
        assert_eq!((p, r, f1), (0.0, 0.0, 0.0));
        assert_eq!(a, 1.0);
        assert!(degenerate);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let c = ConfusionCounts {
            tp: 7,
            fp: 0,
            tn: 9,
            fn_: 0,
        };
        let (p, r, a, f1, degenerate) = metrics_from_counts(&c);
        assert_eq!((p, r, a, f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!degenerate);
    }

    fn constant_window(v_in: f64, v_target: f64, n_out: usize) -> SampleWindow<f64> {
        let mut inputs = Tensor::zeros(Shape::new(1, 3, 4, 4).unwrap());
        inputs.plane_mut(0, 2).fill(v_in);
        SampleWindow {
            inputs,
            targets: Tensor::full(Shape::new(1, n_out, 4, 4).unwrap(), v_target),
            offsets: (1..=n_out).collect(),
            interval_min: 5,
        }
    }

    #[test]
    fn persistence_on_static_targets_is_exact() {
        let windows = vec![constant_window(0.8, 0.8, 2)];
        let cfg = EvalConfig {
            threshold: 0.5,
            norm: 1.0,
            batch_size: 6,
        };
        let records = evaluate_persistence(&windows, &cfg).unwrap();
        assert_eq!(records.len(), 3);
        for r in &records {
            assert_eq!(r.mse, 0.0);
            assert_eq!((r.precision, r.recall, r.accuracy, r.f1), (1.0, 1.0, 1.0, 1.0));
        }
        assert_eq!(records[0].horizon_min, Some(5));
        assert_eq!(records[1].horizon_min, Some(10));
        assert_eq!(records[2].horizon_min, None);
    }

    #[test]
    fn persistence_mse_matches_hand_computation() {
        // last input 0.25 everywhere, target 0.75 everywhere, norm 2.0:
        // denormalized error (0.25 - 0.75)*2 = -1.0 per pixel -> MSE 1.0
        let windows = vec![constant_window(0.25, 0.75, 1)];
        let cfg = EvalConfig {
            threshold: 0.5,
            norm: 2.0,
            batch_size: 6,
        };
        let records = evaluate_persistence(&windows, &cfg).unwrap();
        assert!((records[0].mse - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluator_mse_equals_training_mse_without_denorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = constant_window(0.0, 0.0, 2);
        w.targets = Tensor::rand_uniform(Shape::new(1, 2, 4, 4).unwrap(), 0.0, 1.0, &mut rng);
        w.inputs = Tensor::rand_uniform(Shape::new(1, 3, 4, 4).unwrap(), 0.0, 1.0, &mut rng);
        let windows = vec![w.clone()];
        let cfg = EvalConfig {
            threshold: 0.5,
            norm: 1.0,
            batch_size: 1,
        };
        let records = evaluate_persistence(&windows, &cfg).unwrap();
        let pred = crate::model::persistence_predict(&w);
        let (loss, _) = crate::train::mse_loss(&pred, &w.targets).unwrap();
        let all = records.last().unwrap();
        assert!((all.mse - loss).abs() < 1e-12);
    }

    #[test]
    fn aggregate_mse_is_mean_of_equal_sized_horizons() {
        let mut w = constant_window(0.0, 0.0, 2);
        w.targets.plane_mut(0, 0).fill(1.0); // horizon 1 error 1.0
        w.targets.plane_mut(0, 1).fill(3.0); // horizon 2 error 9.0
        let cfg = EvalConfig {
            threshold: 0.5,
            norm: 1.0,
            batch_size: 4,
        };
        let records = evaluate_persistence(&[w], &cfg).unwrap();
        let h: Vec<f64> = records[..2].iter().map(|r| r.mse).collect();
        let all = records[2].mse;
        assert!((all - (h[0] + h[1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_an_explicit_error() {
        let cfg = EvalConfig::default();
        assert!(evaluate_persistence::<f64>(&[], &cfg).is_err());
    }

    #[test]
    fn csv_has_stable_header_and_round_trips() {
        let mut single = constant_window(0.25, 0.75, 1);
        single.offsets = vec![6]; // the 1-output config targets +30 min
        let windows = vec![single];
        let cfg = EvalConfig {
            threshold: 0.5,
            norm: 1.0,
            batch_size: 6,
        };
        let records = evaluate_persistence(&windows, &cfg).unwrap();
        let csv = records_to_csv(&records);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model,horizon_min,mse,precision,recall,accuracy,f1,tp,fp,tn,fn"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "persistence");
        assert_eq!(row[1], "30");
        let parsed: f64 = row[2].parse().unwrap();
        assert!((parsed - records[0].mse).abs() <= 1e-5 * records[0].mse.abs().max(1.0));
        // byte-identical across runs
        let csv2 = records_to_csv(&evaluate_persistence(&windows, &cfg).unwrap());
        assert_eq!(csv, csv2);
        // header-only for empty record list
        assert_eq!(records_to_csv(&[]).lines().count(), 1);
    }
}
