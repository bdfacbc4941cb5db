//! End-to-end evaluation: parse, refine, upsample, select, score.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, EvalRecord};
use super::metrics::{aggregate_metrics, MetricsReport};
use super::overlay;
use crate::backend::{Backend, BackendFactory};
use crate::dump;
use crate::error::{Error, Result};
use crate::heatmap::{BinaryMask, ImageHeatmap, Tensor3, DEFAULT_TIE_EPSILON};
use crate::igrs::{run_refinement, RefinementConfig, RefinementState};
use crate::parser::Parser;
use crate::rle::{load_proposals, Rle};
use crate::select::{select_mask, Connectivity, Relaxation, SelectionResult, DEFAULT_KAPPA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub refinement: RefinementConfig,
    pub kappa: usize,
    pub connectivity: Connectivity,
    pub tie_epsilon: f64,
    /// Worker threads, each with its own backend connection.
    pub jobs: usize,
    pub trace: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            refinement: RefinementConfig::default(),
            kappa: DEFAULT_KAPPA,
            connectivity: Connectivity::Four,
            tie_epsilon: DEFAULT_TIE_EPSILON,
            jobs: 1,
            trace: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.refinement.validate()?;
        if self.kappa < 1 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        if self.tie_epsilon.is_nan() || self.tie_epsilon < 0.0 {
            return Err(Error::Config("tie epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub proposal_id: u64,
    pub mask: Rle,
    /// Last committed iteration.
    pub iterations: usize,
    pub backend_calls: usize,
    pub stopped_early: bool,
    pub scores: Vec<f64>,
    pub relaxation: Relaxation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub sample_id: String,
    pub error: String,
}

/// Everything computed for one sample.
#[derive(Debug, Clone)]
pub struct SampleResult {
    pub prediction: Prediction,
    pub mask: BinaryMask,
    pub state: RefinementState,
    pub final_heat: ImageHeatmap,
    pub selection: SelectionResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub metrics: MetricsReport,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Sorted by sample id.
    pub results: Vec<SampleResult>,
    pub failures: Vec<Failure>,
    pub report: RunReport,
}

impl PipelineOutput {
    pub fn predictions(&self) -> impl Iterator<Item = &Prediction> {
        self.results.iter().map(|r| &r.prediction)
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs one record against an open backend.
pub fn process_sample(
    backend: &mut dyn Backend,
    dataset: &Dataset,
    record: &EvalRecord,
    parser: &Parser,
    cfg: &PipelineConfig,
) -> Result<SampleResult> {
    let parsed = parser.parse(&record.expression)?;
    let proposals = load_proposals(&dataset.resolve(&record.proposals))?;
    let state = run_refinement(backend, &parsed, record.image_ref(), &cfg.refinement)?;
    if state.image_size != record.image_size() {
        return Err(Error::Shape(format!(
            "backend reports image {:?}, record says {:?}",
            state.image_size,
            record.image_size()
        )));
    }
    let final_heat = state.final_heat()?;
    let selection = select_mask(&proposals, &final_heat, cfg.kappa, cfg.connectivity, cfg.tie_epsilon)?;
    let mask = proposals
        .iter()
        .find(|p| p.id == selection.selected_id)
        .map(|p| p.mask.clone())
        .ok_or(Error::NoCandidate(proposals.len()))?;
    let prediction = Prediction {
        sample_id: record.sample_id.clone(),
        proposal_id: selection.selected_id,
        mask: Rle::encode(&mask),
        iterations: state.t,
        backend_calls: state.backend_calls,
        stopped_early: state.stopped_early,
        scores: state.scores.clone(),
        relaxation: selection.relaxation,
    };
    Ok(SampleResult {
        prediction,
        mask,
        state,
        final_heat,
        selection,
    })
}

type Outcome = (usize, Result<SampleResult>);

fn run_worker(
    factory: &dyn BackendFactory,
    dataset: &Dataset,
    indices: &[usize],
    parser: &Parser,
    cfg: &PipelineConfig,
) -> Result<Vec<Outcome>> {
    let mut backend = factory.connect()?;
    Ok(indices
        .iter()
        .map(|&i| {
            let rec = &dataset.records[i];
            let out = process_sample(backend.as_mut(), dataset, rec, parser, cfg);
            if let Err(e) = &out {
                log::warn!("sample {:?} failed: {e}", rec.sample_id);
            }
            (i, out)
        })
        .collect())
}

/// Evaluates the whole dataset. Per-sample failures are collected; failing
/// to open a backend connection aborts the run.
pub fn run_pipeline(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    factory: &dyn BackendFactory,
    parser: &Parser,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let n = dataset.records.len();
    let jobs = cfg
        .jobs
        .max(1)
        .min(factory.max_connections().unwrap_or(usize::MAX))
        .min(n.max(1));
    let buckets: Vec<Vec<usize>> = (0..jobs)
        .map(|k| (k..n).step_by(jobs).collect())
        .collect();

    let mut outcomes: Vec<Outcome> = if jobs == 1 {
        run_worker(factory, dataset, &buckets[0], parser, cfg)?
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = buckets
                .iter()
                .map(|b| s.spawn(move || run_worker(factory, dataset, b, parser, cfg)))
                .collect();
            let mut all = Vec::with_capacity(n);
            for h in handles {
                all.extend(h.join().expect("pipeline worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    outcomes.sort_by(|a, b| dataset.records[a.0].sample_id.cmp(&dataset.records[b.0].sample_id));

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (i, out) in outcomes {
        match out {
            Ok(r) => results.push(r),
            Err(e) => failures.push(Failure {
                sample_id: dataset.records[i].sample_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let predicted: BTreeMap<String, BinaryMask> = results
        .iter()
        .map(|r| (r.prediction.sample_id.clone(), r.mask.clone()))
        .collect();
    let metrics = aggregate_metrics(&dataset.records, &predicted, parser)?;
    let report = RunReport {
        config: cfg.clone(),
        metrics,
        failures: failures.clone(),
    };
    Ok(PipelineOutput {
        results,
        failures,
        report,
    })
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TRACE_DIR: &str = "trace";

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

pub fn predictions_jsonl<'a>(predictions: impl IntoIterator<Item = &'a Prediction>) -> Result<String> {
    let mut text = String::new();
    for p in predictions {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    Ok(text)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TraceStep {
    t: usize,
    itm: f64,
    relevance: f64,
    score: f64,
    committed: bool,
}

/// Writes predictions, the report and (optionally) per-sample traces.
pub fn write_outputs(
    output: &PipelineOutput,
    dataset: &Dataset,
    out_dir: &Path,
    trace: bool,
) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join(PREDICTIONS_FILE), predictions_jsonl(output.predictions())?)?;
    write(
        &out_dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&output.report)? + "\n",
    )?;
    if !trace {
        return Ok(());
    }
    let records: BTreeMap<&str, &EvalRecord> = dataset
        .records
        .iter()
        .map(|r| (r.sample_id.as_str(), r))
        .collect();
    for r in &output.results {
        let dir: PathBuf = out_dir.join(TRACE_DIR).join(safe_name(&r.prediction.sample_id));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut steps = Vec::new();
        for rec in &r.state.trace {
            overlay::save_normalized_png(&rec.heat, &dir.join(format!("iter{}_heat.png", rec.t)))?;
            overlay::save_mask_png(&rec.mask, &dir.join(format!("iter{}_mask.png", rec.t)))?;
            steps.push(TraceStep {
                t: rec.t,
                itm: rec.itm,
                relevance: rec.relevance,
                score: rec.score,
                committed: rec.committed,
            });
        }
        write(&dir.join("trace.json"), serde_json::to_string_pretty(&steps)? + "\n")?;
        overlay::save_unit_map_png(&r.final_heat, &dir.join("refined.png"))?;
        let (h, w) = r.final_heat.dims();
        let as_tensor = Tensor3::new(1, h, w, r.final_heat.values().to_vec())?;
        dump::write(&dir.join("final_heat.irpe"), &as_tensor)?;
        let base = match records
            .get(r.prediction.sample_id.as_str())
            .and_then(|rec| rec.image.path.as_ref())
        {
            Some(p) => Some(overlay::load_base(&dataset.resolve(p))?),
            None => None,
        };
        overlay::render_overlay(base.as_ref(), &r.final_heat, &r.mask, &dir.join("overlay.png"))?;
    }
    Ok(())
}
