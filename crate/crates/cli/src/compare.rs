//! Three runs that differ only in the projection kind.

use std::fs;
use std::path::{Path, PathBuf};

use nalab::attention::ProjectionKind;
use nalab::eval::BLEU_METHOD;
use serde::Serialize;

use crate::config::{ExperimentConfig, ProjectionSetting, ResolvedConfig};
use crate::error::{io_error, CliError};
use crate::train::{self, TrainReport};

pub const COMPARE_CSV: &str = "compare.csv";
pub const COMPARE_REPORT: &str = "compare_report.json";
pub const COMPARE_HEADER: [&str; 6] = ["variant", "bleu", "perplexity", "accuracy", "params", "steps_to_99acc"];

/// BLEU points within which two variants count as level.
pub const LEVEL_BLEU: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub variant: ProjectionKind,
    pub output_dir: PathBuf,
    pub params: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl VariantResult {
    pub fn bleu(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.final_eval.bleu)
    }

    fn record(&self) -> [String; 6] {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let e = self.report.as_ref().map(|r| r.final_eval);
        [
            self.variant.to_string(),
            f(self.bleu()),
            f(e.map(|e| e.perplexity)),
            f(e.map(|e| e.eval_accuracy)),
            self.params.to_string(),
            self.report
                .as_ref()
                .and_then(|r| r.steps_to_99acc)
                .map(|s| s.to_string())
                .unwrap_or_default(),
        ]
    }
}

/// Whether `neural ≥ dlp ≈ standard` holds on final BLEU.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingReport {
    pub hypothesis: String,
    pub metric: String,
    pub observed: Vec<(ProjectionKind, f64)>,
    pub neural_at_least_dlp: Option<bool>,
    pub dlp_level_with_standard: Option<bool>,
    pub holds: Option<bool>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub variants: Vec<VariantResult>,
    pub ordering: OrderingReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_method: Option<String>,
}

impl CompareReport {
    pub fn failures(&self) -> Vec<&VariantResult> {
        self.variants.iter().filter(|v| v.error.is_some()).collect()
    }
}

/// Resolved configs of the three variants; errors unless they agree on
/// everything but the projections and the output directory.
pub fn variant_configs(base: &ExperimentConfig, vocab_size: usize, out: &Path) -> Result<Vec<ResolvedConfig>, CliError> {
    let mut configs = Vec::new();
    for kind in ProjectionKind::ALL {
        let mut cfg = base.clone();
        cfg.projection = ProjectionSetting::Roles(base.projection.with_kind(kind));
        cfg.output_dir = Some(out.join(kind.name()));
        configs.push(cfg.resolve(vocab_size)?);
    }
    let strip = |c: &ResolvedConfig| {
        let mut v = serde_json::to_value(c.to_experiment()).expect("config serializes");
        let m = v.as_object_mut().expect("object");
        m.remove("projection");
        m.remove("output_dir");
        v
    };
    let first = strip(&configs[0]);
    for c in &configs[1..] {
        if strip(c) != first {
            return Err(CliError::config("variant configs differ outside the projection section"));
        }
    }
    Ok(configs)
}

fn ordering(variants: &[VariantResult]) -> OrderingReport {
    let bleu = |k: ProjectionKind| variants.iter().find(|v| v.variant == k).and_then(VariantResult::bleu);
    let mut observed: Vec<(ProjectionKind, f64)> =
        variants.iter().filter_map(|v| v.bleu().map(|b| (v.variant, b))).collect();
    observed.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (s, d, n) = (
        bleu(ProjectionKind::Standard),
        bleu(ProjectionKind::DualLinear),
        bleu(ProjectionKind::NeuralMlp),
    );
    let ge = n.zip(d).map(|(n, d)| n >= d);
    let level = d.zip(s).map(|(d, s)| (d - s).abs() <= LEVEL_BLEU);
    let holds = ge.zip(level).map(|(a, b)| a && b);
    let note = match holds {
        None => "not every variant produced a BLEU score".to_string(),
        Some(h) if observed.iter().all(|(_, b)| *b >= 99.0) => format!(
            "all variants are within a point of the ceiling, so the ordering {} only by noise",
            if h { "holds" } else { "is broken" }
        ),
        Some(true) => "the ordering appears at this scale".to_string(),
        Some(false) => "the ordering does not appear at this scale".to_string(),
    };
    OrderingReport {
        hypothesis: "neural >= dlp ~= standard".into(),
        metric: format!("final validation BLEU; level means within {LEVEL_BLEU} point"),
        observed,
        neural_at_least_dlp: ge,
        dlp_level_with_standard: level,
        holds,
        note,
    }
}

/// Train all three variants under `out`, write `compare.csv` and
/// `compare_report.json`. A failed variant is recorded and the others
/// still run.
pub fn run(base: &ExperimentConfig, out: &Path) -> Result<CompareReport, CliError> {
    let (obj, first) = train::prepare(base)?;
    let mut base = base.clone();
    base.data = first.data.clone();
    let configs = variant_configs(&base, obj.vocab().len(), out)?;
    let mut variants = Vec::new();
    for cfg in &configs {
        let variant = cfg.model.projection.headline_kind();
        log::info!("variant {variant}: {} parameters", cfg.model.parameter_count());
        println!("{}", cfg.to_json());
        let (report, error) = match train::run(cfg, &obj, None) {
            Ok(o) => (Some(o.report), None),
            Err(e) => {
                log::error!("variant {variant} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        variants.push(VariantResult {
            variant,
            output_dir: cfg.output_dir.clone(),
            params: cfg.model.parameter_count(),
            report,
            error,
        });
    }
    let report = CompareReport {
        ordering: ordering(&variants),
        bleu_method: variants.iter().any(|v| v.bleu().is_some()).then(|| BLEU_METHOD.to_string()),
        variants,
    };
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let path = out.join(COMPARE_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
    w.write_record(COMPARE_HEADER).map_err(|e| io_error(&path, e))?;
    for v in &report.variants {
        w.write_record(v.record()).map_err(|e| io_error(&path, e))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;
    let path = out.join(COMPARE_REPORT);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(|e| io_error(&path, e))?;
    Ok(report)
}
