//! Click-budget evaluation: DSC, NoC, failure rate, MaxDSC and the dataset harness.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid, PromptSet};
use crate::io::{write_atomic, Sample};
use crate::model::{ImageEmbedding, PromptSegModel};
use crate::prompting::{
    session_rng, simulate_session, InteractionTrace, SamplerConfig, SessionOptions, StartMode,
};

/// Dice similarity; two empty masks agree perfectly.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    gt.ensure_same_shape(pred)?;
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection_count(gt) as f64 / total as f64)
}

fn non_empty(traces: &[InteractionTrace]) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::Empty("trace set"));
    }
    if traces.iter().any(InteractionTrace::is_empty) {
        return Err(Error::Empty("interaction trace"));
    }
    Ok(())
}

/// Clicks needed to reach `threshold` for one trace, or `cap` if never reached.
pub fn clicks_to_reach(trace: &InteractionTrace, threshold: f64, cap: usize) -> usize {
    trace
        .dsc_per_click
        .iter()
        .position(|&d| d >= threshold)
        .map_or(cap, |i| (i + 1).min(cap))
}

pub fn noc_at(threshold: f64, traces: &[InteractionTrace], cap: usize) -> Result<f64> {
    non_empty(traces)?;
    let total: usize = traces
        .iter()
        .map(|t| clicks_to_reach(t, threshold, cap))
        .sum();
    Ok(total as f64 / traces.len() as f64)
}

/// Fraction of traces that never reach `threshold` within `budget` clicks.
pub fn failure_rate(threshold: f64, traces: &[InteractionTrace], budget: usize) -> Result<f64> {
    non_empty(traces)?;
    let failed = traces
        .iter()
        .filter(|t| !t.dsc_per_click.iter().take(budget).any(|&d| d >= threshold))
        .count();
    Ok(failed as f64 / traces.len() as f64)
}

/// Mean DSC at clicks `1..=budget`; traces that ended early carry their last value forward.
pub fn mean_dsc_curve(traces: &[InteractionTrace], budget: usize) -> Result<Vec<f64>> {
    non_empty(traces)?;
    if budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    let n = traces.len() as f64;
    Ok((0..budget)
        .map(|k| {
            traces
                .iter()
                .map(|t| t.dsc_per_click[k.min(t.len() - 1)])
                .sum::<f64>()
                / n
        })
        .collect())
}

pub fn max_dsc(traces: &[InteractionTrace], budget: usize) -> Result<f64> {
    Ok(mean_dsc_curve(traces, budget)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub model_id: String,
    pub start_mode: StartMode,
    pub budget: usize,
    pub cap: usize,
    pub mean_dsc_curve: Vec<f64>,
    pub noc80: f64,
    pub noc90: f64,
    pub fr80: f64,
    pub fr90: f64,
    pub max_dsc: f64,
    pub trace_count: usize,
    pub failed_count: usize,
    #[serde(default)]
    pub failed_ids: Vec<String>,
}

impl MetricsReport {
    /// Aggregates a trace set; a pure function of its inputs.
    pub fn from_traces(
        dataset_id: &str,
        model_id: &str,
        start_mode: StartMode,
        traces: &[InteractionTrace],
        budget: usize,
        cap: usize,
    ) -> Result<Self> {
        if cap < budget {
            return Err(Error::Config(format!(
                "NoC cap {cap} must be at least the budget {budget}"
            )));
        }
        let curve = mean_dsc_curve(traces, budget)?;
        Ok(Self {
            dataset_id: dataset_id.to_string(),
            model_id: model_id.to_string(),
            start_mode,
            budget,
            cap,
            max_dsc: curve.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_dsc_curve: curve,
            noc80: noc_at(0.8, traces, cap)?,
            noc90: noc_at(0.9, traces, cap)?,
            fr80: failure_rate(0.8, traces, budget)?,
            fr90: failure_rate(0.9, traces, budget)?,
            trace_count: traces.len(),
            failed_count: 0,
            failed_ids: Vec::new(),
        })
    }

    /// Final-click mean DSC.
    pub fn final_dsc(&self) -> f64 {
        *self.mean_dsc_curve.last().expect("budget >= 1")
    }
}

/// A model opened on one image; prompts accumulate across calls within the session.
pub trait ImageSession {
    fn predict(&mut self, prompts: &PromptSet) -> Result<BinaryMask>;
}

/// Uniform protocol through which the harness drives any segmentation model.
pub trait SegmentationModel: Sync {
    fn model_id(&self) -> String;
    fn open<'a>(&'a self, image_id: &str, image: &ImageGrid) -> Result<Box<dyn ImageSession + 'a>>;
}

/// Session over one encoded image.
pub struct EmbeddedSession<'a> {
    model: &'a PromptSegModel,
    embedding: ImageEmbedding,
}

impl ImageSession for EmbeddedSession<'_> {
    fn predict(&mut self, prompts: &PromptSet) -> Result<BinaryMask> {
        Ok(self.model.predict_embedded(&self.embedding, prompts)?.1)
    }
}

impl SegmentationModel for PromptSegModel {
    fn model_id(&self) -> String {
        self.checksum()
            .map(|c| format!("promptseg-{}", &c[..12]))
            .unwrap_or_else(|_| "promptseg".into())
    }

    fn open<'a>(&'a self, _image_id: &str, image: &ImageGrid) -> Result<Box<dyn ImageSession + 'a>> {
        Ok(Box::new(EmbeddedSession {
            model: self,
            embedding: self.encode_image(image)?,
        }))
    }
}

struct FixedSession(BinaryMask);

impl ImageSession for FixedSession {
    fn predict(&mut self, _prompts: &PromptSet) -> Result<BinaryMask> {
        Ok(self.0.clone())
    }
}

/// Returns the ground truth for every prompt.
pub struct OracleModel {
    truth: HashMap<String, BinaryMask>,
}

impl OracleModel {
    pub fn new(samples: &[Sample]) -> Self {
        Self {
            truth: samples.iter().map(|s| (s.id.clone(), s.gt.clone())).collect(),
        }
    }
}

impl SegmentationModel for OracleModel {
    fn model_id(&self) -> String {
        "oracle".into()
    }

    fn open<'a>(&'a self, image_id: &str, _image: &ImageGrid) -> Result<Box<dyn ImageSession + 'a>> {
        let gt = self
            .truth
            .get(image_id)
            .ok_or_else(|| Error::Adapter(format!("oracle has no mask for {image_id}")))?;
        Ok(Box::new(FixedSession(gt.clone())))
    }
}

/// Always predicts an empty mask.
pub struct EmptyModel;

impl SegmentationModel for EmptyModel {
    fn model_id(&self) -> String {
        "empty".into()
    }

    fn open<'a>(&'a self, _image_id: &str, image: &ImageGrid) -> Result<Box<dyn ImageSession + 'a>> {
        Ok(Box::new(FixedSession(BinaryMask::empty(
            image.height(),
            image.width(),
        ))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub budget: usize,
    pub cap: usize,
    pub start_mode: StartMode,
    pub seed: u64,
    pub workers: usize,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budget: 10,
            cap: 20,
            start_mode: StartMode::Point,
            seed: 0,
            workers: 1,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub traces: Vec<InteractionTrace>,
}

/// Runs one eval session per sample and aggregates. Samples whose adapter call fails are
/// excluded and counted; results are ordered by sample order regardless of `workers`.
pub fn evaluate_dataset(
    model: &dyn SegmentationModel,
    samples: &[Sample],
    dataset_id: &str,
    config: &EvalConfig,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    if config.budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    config.sampler.validate()?;
    let options = SessionOptions {
        start: config.start_mode,
        ..SessionOptions::eval(config.budget)
    };
    let run_one = |sample: &Sample| -> Result<InteractionTrace> {
        let mut rng = session_rng(config.seed, &sample.id);
        let mut session = model.open(&sample.id, &sample.image)?;
        let (trace, _, _) = simulate_session(
            |p| session.predict(p),
            &sample.id,
            &sample.gt,
            &options,
            &config.sampler,
            &mut rng,
        )?;
        Ok(trace)
    };
    let results: Vec<Result<InteractionTrace>> = if config.workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| samples.par_iter().map(run_one).collect())
    } else {
        samples.iter().map(run_one).collect()
    };
    let mut traces = Vec::with_capacity(samples.len());
    let mut failed_ids = Vec::new();
    for (sample, result) in samples.iter().zip(results) {
        match result {
            Ok(trace) => traces.push(trace),
            Err(e) => {
                tracing::warn!(image = %sample.id, error = %e, "evaluation failed; image excluded");
                failed_ids.push(sample.id.clone());
            }
        }
    }
    if traces.is_empty() {
        return Err(Error::Adapter(format!(
            "all {} images failed evaluation",
            samples.len()
        )));
    }
    let mut report = MetricsReport::from_traces(
        dataset_id,
        &model.model_id(),
        config.start_mode,
        &traces,
        config.budget,
        config.cap,
    )?;
    report.failed_count = failed_ids.len();
    report.failed_ids = failed_ids;
    Ok(EvalOutcome { report, traces })
}

/// Tab-separated DSC-vs-clicks table, one series per report.
pub fn emit_curves(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    let mut out = String::from("model\tdataset\tstart_mode\tclicks\tmean_dsc\n");
    for r in reports {
        let mode = match r.start_mode {
            StartMode::Point => "point",
            StartMode::Box => "box",
        };
        for (k, v) in r.mean_dsc_curve.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}\t{}", r.model_id, r.dataset_id, mode, k + 1, v)
                .expect("string write");
        }
    }
    Ok(out)
}

/// Writes `report.json`, `traces.jsonl` and `curves.tsv` under `dir`.
pub fn write_outcome(outcome: &EvalOutcome, dir: &Path) -> Result<()> {
    let report = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
    write_atomic(&dir.join("report.json"), report.as_bytes())?;
    write_atomic(&dir.join("traces.jsonl"), traces_to_jsonl(&outcome.traces).as_bytes())?;
    write_atomic(
        &dir.join("curves.tsv"),
        emit_curves(std::slice::from_ref(&outcome.report))?.as_bytes(),
    )
}

pub fn traces_to_jsonl(traces: &[InteractionTrace]) -> String {
    traces
        .iter()
        .map(|t| serde_json::to_string(t).expect("trace serializes") + "\n")
        .collect()
}

pub fn read_traces(path: &Path) -> Result<Vec<InteractionTrace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::data(path, format!("trace line {}: {e}", i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(d: &[f64]) -> InteractionTrace {
        InteractionTrace {
            image_id: String::new(),
            dsc_per_click: d.to_vec(),
            prompts: Vec::new(),
        }
    }

    #[test]
    fn dsc_cases() {
        let a = BinaryMask::new(1, 6, vec![1, 1, 1, 1, 0, 0]).unwrap();
        let b = BinaryMask::new(1, 6, vec![0, 0, 1, 1, 1, 1]).unwrap();
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let c = BinaryMask::new(1, 6, vec![0, 0, 0, 0, 1, 1]).unwrap();
        assert_eq!(dsc(&a, &c).unwrap(), 0.0);
        let e = BinaryMask::empty(1, 6);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert!(dsc(&a, &BinaryMask::empty(2, 3)).is_err());
    }

    #[test]
    fn noc_hand_computed() {
        let t = [trace(&[0.9]), trace(&[0.1, 0.5, 0.85]), trace(&[0.1, 0.2])];
        assert_eq!(noc_at(0.8, &t, 20).unwrap(), 8.0);
        assert_eq!(noc_at(0.99, &t, 20).unwrap(), 20.0);
        assert_eq!(noc_at(0.05, &t, 20).unwrap(), 1.0);
        assert!(noc_at(0.8, &[], 20).is_err());
    }

    #[test]
    fn failure_rate_cases() {
        let t = [trace(&[0.9]), trace(&[0.95]), trace(&[0.1, 0.85]), trace(&[0.2])];
        assert_eq!(failure_rate(0.8, &t, 10).unwrap(), 0.25);
        assert_eq!(failure_rate(0.0, &t, 10).unwrap(), 0.0);
        assert_eq!(failure_rate(0.8, &t, 1).unwrap(), 0.5);
    }

    #[test]
    fn max_dsc_carry_forward() {
        assert_eq!(max_dsc(&[trace(&[0.5, 0.9, 0.8])], 3).unwrap(), 0.9);
        let t = [trace(&[1.0]), trace(&[0.0, 0.8])];
        assert_eq!(mean_dsc_curve(&t, 2).unwrap(), vec![0.5, 0.9]);
        assert_eq!(max_dsc(&t, 2).unwrap(), 0.9);
        assert_eq!(max_dsc(&[trace(&[0.3; 4]), trace(&[0.3])], 4).unwrap(), 0.3);
    }

    #[test]
    fn curves_table_layout() {
        let t = [trace(&[0.5, 0.75])];
        let a = MetricsReport::from_traces("d", "m1", StartMode::Point, &t, 2, 20).unwrap();
        let b = MetricsReport {
            model_id: "m2".into(),
            ..a.clone()
        };
        let table = emit_curves(&[a, b]).unwrap();
        let lines: Vec<_> = table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "m1\td\tpoint\t2\t0.75");
        assert!(emit_curves(&[]).is_err());
    }
}
