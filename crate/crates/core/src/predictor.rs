//! Inference with the two task models, logistic calibration of the raw
//! logit, submission CSV, and accuracy/AUC evaluation.

use std::collections::HashSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::imageops::{to_tensor, ImageOpsError, InputTensor};
use crate::neuralnet::{model_forward, NetError, Tensor};
use crate::raster::{DatasetManifest, ImageSource, SourceError};
use crate::trainer::{ModelCheckpoint, Task};

pub const SUBMISSION_HEADER: &str = "image_id,melanoma,seborrheic_keratosis";

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("calibration slope must be positive and finite, got a={0}")]
    Slope(f64),
    #[error("calibration threshold must be finite, got b={0}")]
    Threshold(f64),
    #[error("model expects {expected}x{expected} inputs, got {actual}x{actual}")]
    InputSize { expected: usize, actual: usize },
    #[error("checkpoint for {found} passed where {expected} was expected")]
    WrongTask { expected: Task, found: Task },
    #[error("image {id}: {source}")]
    Image { id: String, source: ImageOpsError },
    #[error("image id {0:?} not in ground truth")]
    MissingTruth(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Slope `a` and midpoint `b` of `1 / (1 + exp(−a·(x − b)))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    a: f64,
    b: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self { a: 1.0, b: 0.0 }
    }
}

impl CalibrationParams {
    pub fn new(a: f64, b: f64) -> Result<Self, PredictError> {
        if !(a.is_finite() && a > 0.0) {
            return Err(PredictError::Slope(a));
        }
        if !b.is_finite() {
            return Err(PredictError::Threshold(b));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

// Saturated logistic values are pulled back inside the open interval.
const SCORE_MIN: f64 = f64::MIN_POSITIVE;
const SCORE_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Maps a raw logit to (0, 1); exactly 0.5 at `x = b`.
pub fn calibrate(x: f64, p: CalibrationParams) -> f64 {
    let z = p.a * (x - p.b);
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(SCORE_MIN, SCORE_MAX)
}

/// The model's single output logit for one preprocessed image.
pub fn predict_raw(ckpt: &ModelCheckpoint, input: &InputTensor) -> Result<f64, PredictError> {
    let actual = input.size();
    if actual != ckpt.input_size || input.data.shape() != [3, actual, actual] {
        return Err(PredictError::InputSize {
            expected: ckpt.input_size,
            actual,
        });
    }
    let batch = Tensor::stack(&[&input.data])?;
    let (logits, _) = model_forward(&ckpt.architecture, &ckpt.params, &batch)?;
    Ok(logits.data()[0] as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub image_id: String,
    pub melanoma: f64,
    pub seborrheic_keratosis: f64,
}

impl PredictionRow {
    pub fn score(&self, task: Task) -> f64 {
        match task {
            Task::Melanoma => self.melanoma,
            Task::Keratosis => self.seborrheic_keratosis,
        }
    }
}

/// One row per test image, in manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionTable {
    pub rows: Vec<PredictionRow>,
}

fn score_with(
    ckpt: &ModelCheckpoint,
    params: CalibrationParams,
    id: &str,
    img: &crate::raster::Image,
) -> Result<f64, PredictError> {
    if img.width() != ckpt.input_size || img.height() != ckpt.input_size {
        return Err(PredictError::Image {
            id: id.to_string(),
            source: ImageOpsError::WrongSize {
                expected: ckpt.input_size,
                width: img.width(),
                height: img.height(),
            },
        });
    }
    let input = to_tensor(img, ckpt.input_size, ckpt.channel_means).map_err(|source| {
        PredictError::Image {
            id: id.to_string(),
            source,
        }
    })?;
    Ok(calibrate(predict_raw(ckpt, &input)?, params))
}

pub fn predict_dataset(
    melanoma: (&ModelCheckpoint, CalibrationParams),
    keratosis: (&ModelCheckpoint, CalibrationParams),
    manifest: &DatasetManifest,
    source: &dyn ImageSource,
) -> Result<PredictionTable, PredictError> {
    for (ckpt, task) in [(melanoma.0, Task::Melanoma), (keratosis.0, Task::Keratosis)] {
        if ckpt.task != task {
            return Err(PredictError::WrongTask {
                expected: task,
                found: ckpt.task,
            });
        }
        ckpt.params
            .check(&ckpt.architecture, ckpt.input_size)
            .map_err(PredictError::Net)?;
    }
    let rows = manifest
        .entries()
        .par_iter()
        .map(|e| {
            let id = e.image_id.as_str();
            let img = source.load(id).map_err(|s: SourceError| PredictError::Image {
                id: id.to_string(),
                source: s.into(),
            })?;
            Ok(PredictionRow {
                image_id: id.to_string(),
                melanoma: score_with(melanoma.0, melanoma.1, id, &img)?,
                seborrheic_keratosis: score_with(keratosis.0, keratosis.1, id, &img)?,
            })
        })
        .collect::<Result<Vec<_>, PredictError>>()?;
    Ok(PredictionTable { rows })
}

/// Six decimals, kept strictly inside (0, 1) after rounding.
fn format_score(s: f64) -> String {
    format!("{:.6}", s.clamp(0.000_001, 0.999_999))
}

pub fn write_submission(table: &PredictionTable) -> String {
    let mut out = String::from(SUBMISSION_HEADER);
    out.push('\n');
    for r in &table.rows {
        out.push_str(&r.image_id);
        out.push(',');
        out.push_str(&format_score(r.melanoma));
        out.push(',');
        out.push_str(&format_score(r.seborrheic_keratosis));
        out.push('\n');
    }
    out
}

pub fn parse_submission(text: &str) -> Result<PredictionTable, PredictError> {
    let err = |line: usize, message: String| PredictError::Parse { line, message };
    let mut lines = text
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == SUBMISSION_HEADER => {}
        Some((n, _)) => return Err(err(n, format!("expected header {SUBMISSION_HEADER:?}"))),
        None => return Err(err(1, "empty submission".into())),
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(err(n, format!("expected 3 columns, found {}", cells.len())));
        }
        let score = |c: &str| -> Result<f64, PredictError> {
            c.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| err(n, format!("score {c:?} is not a number in [0, 1]")))
        };
        let id = cells[0].trim().to_string();
        if !seen.insert(id.clone()) {
            return Err(err(n, format!("duplicate image id {id:?}")));
        }
        rows.push(PredictionRow {
            image_id: id,
            melanoma: score(cells[1])?,
            seborrheic_keratosis: score(cells[2])?,
        });
    }
    Ok(PredictionTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub task: Task,
    /// Fraction with `(score ≥ 0.5) == label`.
    pub accuracy: f64,
    /// Absent when one class is empty.
    pub auc: Option<f64>,
}

impl TaskMetrics {
    pub const CSV_HEADER: &'static str = "task,accuracy,auc";

    pub fn csv_line(&self) -> String {
        let auc = self.auc.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        format!("{},{:.6},{auc}", self.task.tag(), self.accuracy)
    }
}

/// Mann–Whitney AUC with ties counted half, via a sort and per-group counts.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // twice the Mann-Whitney U, kept integral
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let group = &order[start..end];
        let group_pos = group.iter().filter(|&&i| labels[i]).count() as u64;
        let group_neg = group.len() as u64 - group_pos;
        twice_u += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        start = end;
    }
    Some(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Accuracy and AUC for both tasks. Every table id must exist in `truth`.
pub fn evaluate(table: &PredictionTable, truth: &DatasetManifest) -> Result<[TaskMetrics; 2], PredictError> {
    let mut joined = Vec::with_capacity(table.rows.len());
    for r in &table.rows {
        let e = truth
            .get(&r.image_id)
            .ok_or_else(|| PredictError::MissingTruth(r.image_id.clone()))?;
        joined.push((r, e));
    }
    Ok(Task::ALL.map(|task| {
        let scores: Vec<f64> = joined.iter().map(|(r, _)| r.score(task)).collect();
        let labels: Vec<bool> = joined
            .iter()
            .map(|(_, e)| match task {
                Task::Melanoma => e.melanoma,
                Task::Keratosis => e.seborrheic_keratosis,
            })
            .collect();
        let correct = scores
            .iter()
            .zip(&labels)
            .filter(|(&s, &l)| (s >= 0.5) == l)
            .count();
        TaskMetrics {
            task,
            accuracy: if scores.is_empty() {
                0.0
            } else {
                correct as f64 / scores.len() as f64
            },
            auc: auc(&scores, &labels),
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{Architecture, Parameters};
    use crate::raster::{Image, ManifestEntry, MemorySource};
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let (mut gt, mut ties, mut pos, mut neg) = (0u64, 0u64, 0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                pos += 1;
            } else {
                neg += 1;
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                if scores[i] > scores[j] {
                    gt += 1;
                } else if scores[i] == scores[j] {
                    ties += 1;
                }
            }
        }
        if pos == 0 || neg == 0 {
            return None;
        }
        Some((gt as f64 + 0.5 * ties as f64) / (pos as f64 * neg as f64))
    }

    #[test]
    fn calibration_values() {
        assert_eq!(calibrate(0.0, CalibrationParams::default()), 0.5);
        let p = CalibrationParams::new(2.0, 0.5).unwrap();
        assert_eq!(calibrate(0.5, p), 0.5);
        // 1/(1+e^-2) = 0.880797077977882...
        assert!((calibrate(1.5, p) - 0.880_797_077_977_882).abs() < 1e-12);
        assert!(CalibrationParams::new(0.0, 0.0).is_err());
        assert!(CalibrationParams::new(-1.0, 0.0).is_err());
        assert!(CalibrationParams::new(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn calibration_stays_open() {
        let p = CalibrationParams::default();
        for x in [-1e6, -800.0, -40.0, 40.0, 800.0, 1e6] {
            let s = calibrate(x, p);
            assert!(s > 0.0 && s < 1.0, "{x} -> {s}");
        }
    }

    proptest! {
        #[test]
        fn midpoint_is_half(a in 0.01f64..50.0, b in -100.0f64..100.0) {
            let p = CalibrationParams::new(a, b).unwrap();
            prop_assert_eq!(calibrate(b, p), 0.5);
        }

        #[test]
        fn threshold_equivalence(a in 0.01f64..10.0, b in -5.0f64..5.0, x in -20.0f64..20.0) {
            let p = CalibrationParams::new(a, b).unwrap();
            prop_assume!((x - b).abs() > 1e-9);
            prop_assert_eq!(calibrate(x, p) >= 0.5, x >= b);
        }

        #[test]
        fn submission_round_trip(scores in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..30)) {
            let table = PredictionTable {
                rows: scores.iter().enumerate().map(|(i, &(m, k))| PredictionRow {
                    image_id: format!("id{i}"),
                    melanoma: m,
                    seborrheic_keratosis: k,
                }).collect(),
            };
            let back = parse_submission(&write_submission(&table)).unwrap();
            prop_assert_eq!(back.rows.len(), table.rows.len());
            for (a, b) in back.rows.iter().zip(&table.rows) {
                prop_assert_eq!(&a.image_id, &b.image_id);
                prop_assert!((a.melanoma - b.melanoma).abs() <= 1e-6);
                prop_assert!((a.seborrheic_keratosis - b.seborrheic_keratosis).abs() <= 1e-6);
                prop_assert!(a.melanoma > 0.0 && a.melanoma < 1.0);
            }
        }

        #[test]
        fn auc_matches_pairwise(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 1..120)
        ) {
            let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64 * 0.1).collect();
            let labels: Vec<bool> = data.iter().map(|&(_, l)| l).collect();
            prop_assert_eq!(auc(&scores, &labels), pairwise_auc(&scores, &labels));
        }
    }

    #[test]
    fn submission_format() {
        assert_eq!(write_submission(&PredictionTable::default()), format!("{SUBMISSION_HEADER}\n"));
        let table = PredictionTable {
            rows: vec![
                PredictionRow { image_id: "z".into(), melanoma: 0.5, seborrheic_keratosis: 0.25 },
                PredictionRow { image_id: "a".into(), melanoma: 0.123_456_7, seborrheic_keratosis: 1.0 },
            ],
        };
        assert_eq!(
            write_submission(&table),
            "image_id,melanoma,seborrheic_keratosis\nz,0.500000,0.250000\na,0.123457,0.999999\n"
        );
        assert!(parse_submission("image_id,melanoma\n").is_err());
        assert!(parse_submission(&format!("{SUBMISSION_HEADER}\na,0.1,2\n")).is_err());
        assert!(parse_submission(&format!("{SUBMISSION_HEADER}\na,0.1,0.2\na,0.1,0.2\n")).is_err());
    }

    #[test]
    fn auc_edges() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]), Some(0.0));
        assert_eq!(auc(&[0.4; 6], &[true, false, true, false, false, true]), Some(0.5));
        assert_eq!(auc(&[0.3, 0.4], &[true, true]), None);
        assert_eq!(auc(&[], &[]), None);
    }

    fn zero_model(task: Task, size: usize) -> ModelCheckpoint {
        let architecture: Architecture = "conv(2),relu,maxpool,fc(1)".parse().unwrap();
        let params = Parameters::<f32>::init(&architecture, size, 1).unwrap().zeros_like();
        ModelCheckpoint {
            task,
            architecture,
            input_size: size,
            channel_means: [0.5; 3],
            params,
            seed: 1,
            epochs: 1,
        }
    }

    fn test_set(n: usize, size: usize) -> (DatasetManifest, MemorySource) {
        let mut src = MemorySource::new();
        let mut entries = Vec::new();
        for i in 0..n {
            let id = format!("t{}", n - i);
            src.insert(id.clone(), Image::filled(size, size, [(i * 30) as u8, 10, 200]).unwrap());
            entries.push(ManifestEntry::new(id, i % 2 == 0, false));
        }
        (DatasetManifest::new(entries).unwrap(), src)
    }

    #[test]
    fn raw_score_of_zero_model_is_final_bias() {
        let mut m = zero_model(Task::Melanoma, 4);
        m.params.layers_mut()[3].as_mut().unwrap().bias.data_mut()[0] = -1.25;
        let img = Image::filled(4, 4, [3, 4, 5]).unwrap();
        let input = to_tensor(&img, 4, m.channel_means).unwrap();
        assert_eq!(predict_raw(&m, &input).unwrap(), -1.25);
        assert_eq!(predict_raw(&m, &input).unwrap(), predict_raw(&m, &input).unwrap());
        let small = to_tensor(&Image::filled(2, 2, [0; 3]).unwrap(), 2, [0.0; 3]).unwrap();
        assert!(matches!(predict_raw(&m, &small), Err(PredictError::InputSize { .. })));
    }

    /// Independent loop implementation of conv(2) → relu → maxpool → fc(1).
    #[test]
    fn raw_score_matches_loop_oracle() {
        let size = 4;
        let architecture: Architecture = "conv(2),relu,maxpool,fc(1)".parse().unwrap();
        let params = Parameters::<f32>::init(&architecture, size, 17).unwrap();
        let ckpt = ModelCheckpoint {
            task: Task::Melanoma,
            architecture,
            input_size: size,
            channel_means: [0.1, 0.2, 0.3],
            params: params.clone(),
            seed: 17,
            epochs: 0,
        };
        let mut rng = SplitMix64::new(4);
        let img = Image::from_fn(size, size, |_, _| {
            let v = rng.next_u64().to_le_bytes();
            [v[0], v[1], v[2]]
        })
        .unwrap();
        let input = to_tensor(&img, size, ckpt.channel_means).unwrap();

        let x = |c: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= size as isize || xx >= size as isize {
                0.0
            } else {
                img.get(xx as usize, y as usize)[c] as f64 / 255.0 - ckpt.channel_means[c] as f64
            }
        };
        let conv = params.layer(0).unwrap();
        let fc = params.layer(3).unwrap();
        let mut act = vec![vec![vec![0.0f64; size]; size]; 2];
        for k in 0..2 {
            for y in 0..size {
                for xx in 0..size {
                    let mut acc = conv.bias.data()[k] as f64;
                    for c in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += conv.weights.data()[((k * 3 + c) * 3 + dy) * 3 + dx] as f64
                                    * x(c, y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            }
                        }
                    }
                    act[k][y][xx] = acc.max(0.0);
                }
            }
        }
        let mut logit = fc.bias.data()[0] as f64;
        let mut f = 0;
        for plane in &act {
            for py in 0..2 {
                for px in 0..2 {
                    let m = plane[2 * py][2 * px]
                        .max(plane[2 * py][2 * px + 1])
                        .max(plane[2 * py + 1][2 * px])
                        .max(plane[2 * py + 1][2 * px + 1]);
                    logit += fc.weights.data()[f] as f64 * m;
                    f += 1;
                }
            }
        }
        let got = predict_raw(&ckpt, &input).unwrap();
        assert!((got - logit).abs() < 1e-5, "{got} vs {logit}");
    }

    #[test]
    fn dataset_prediction() {
        let m1 = zero_model(Task::Melanoma, 4);
        let m2 = zero_model(Task::Keratosis, 4);
        let p = CalibrationParams::default();
        let (empty, src) = test_set(0, 4);
        assert!(predict_dataset((&m1, p), (&m2, p), &empty, &src).unwrap().rows.is_empty());

        let (manifest, src) = test_set(5, 4);
        let table = predict_dataset((&m1, p), (&m2, p), &manifest, &src).unwrap();
        assert_eq!(table.rows.len(), 5);
        assert_eq!(
            table.rows.iter().map(|r| r.image_id.as_str()).collect::<Vec<_>>(),
            manifest.ids().collect::<Vec<_>>()
        );
        assert!(table.rows.iter().all(|r| r.melanoma == 0.5 && r.seborrheic_keratosis == 0.5));

        assert!(matches!(
            predict_dataset((&m2, p), (&m1, p), &manifest, &src),
            Err(PredictError::WrongTask { .. })
        ));
        let (_, wrong) = test_set(5, 8);
        assert!(predict_dataset((&m1, p), (&m2, p), &manifest, &wrong).is_err());
        assert!(predict_dataset((&m1, p), (&m2, p), &manifest, &MemorySource::new()).is_err());
    }

    #[test]
    fn evaluation() {
        let truth = DatasetManifest::new(vec![
            ManifestEntry::new("a", true, false),
            ManifestEntry::new("b", false, true),
            ManifestEntry::new("c", false, false),
        ])
        .unwrap();
        let table = PredictionTable {
            rows: vec![
                PredictionRow { image_id: "a".into(), melanoma: 0.9, seborrheic_keratosis: 0.2 },
                PredictionRow { image_id: "b".into(), melanoma: 0.6, seborrheic_keratosis: 0.7 },
                PredictionRow { image_id: "c".into(), melanoma: 0.1, seborrheic_keratosis: 0.7 },
            ],
        };
        let [m, k] = evaluate(&table, &truth).unwrap();
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.auc, Some(1.0));
        assert!((k.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(k.auc, Some(0.75));
        assert_eq!(k.csv_line(), "2,0.666667,0.750000");

        let partial = DatasetManifest::new(vec![ManifestEntry::new("a", true, false)]).unwrap();
        assert!(matches!(evaluate(&table, &partial), Err(PredictError::MissingTruth(_))));
        let one = PredictionTable { rows: table.rows[..1].to_vec() };
        let [m, _] = evaluate(&one, &truth).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.csv_line(), "1,1.000000,NA");
    }
}
