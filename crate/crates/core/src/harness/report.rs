//! Metric reports: per-image rows, per-dataset aggregates with and without failures, and
//! their CSV / JSON / markdown renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::clustering::Clusterer;
use crate::dataset::{DatasetId, LoadIssue};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, CxrImage};
use crate::metrics::{ConfusionCounts, MaskScores};
use crate::prompting::PromptWarning;
use crate::segmenter::BackboneId;

use super::config::{Aggregation, ExperimentConfig};
use super::pipeline::StageFailure;

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "metrics.csv";
pub const REPORT_MD: &str = "report.md";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowFlag {
    /// Dice below the failure threshold.
    Failure,
    /// A stage errored; the row scores an empty prediction.
    PipelineFailure,
    EmptyAgreement,
    KappaDegenerate,
    ConstantInput,
    HeartAbsent,
    HeartTooSmall,
    SingleLobe,
}

impl RowFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            RowFlag::Failure => "failure",
            RowFlag::PipelineFailure => "pipeline_failure",
            RowFlag::EmptyAgreement => "empty_agreement",
            RowFlag::KappaDegenerate => "kappa_degenerate",
            RowFlag::ConstantInput => "constant_input",
            RowFlag::HeartAbsent => "heart_absent",
            RowFlag::HeartTooSmall => "heart_too_small",
            RowFlag::SingleLobe => "single_lobe",
        }
    }
}

impl From<PromptWarning> for RowFlag {
    fn from(w: PromptWarning) -> Self {
        match w {
            PromptWarning::HeartAbsent => RowFlag::HeartAbsent,
            PromptWarning::HeartTooSmall => RowFlag::HeartTooSmall,
            PromptWarning::SingleLobe => RowFlag::SingleLobe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image_id: String,
    pub dataset: DatasetId,
    pub backbone: BackboneId,
    pub clusterer: Clusterer,
    pub dice: f64,
    pub iou: f64,
    pub kappa: f64,
    pub counts: ConfusionCounts,
    pub failure: bool,
    pub flags: Vec<RowFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_error: Option<StageFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f32>,
    pub region_violations: usize,
}

impl ImageRow {
    pub fn flags_string(&self) -> String {
        let mut parts: Vec<String> = self.flags.iter().map(|f| f.as_str().to_owned()).collect();
        if let Some(e) = &self.stage_error {
            if let Some(p) = parts.iter_mut().find(|p| *p == "pipeline_failure") {
                *p = format!("pipeline_failure:{}", e.stage);
            }
        }
        parts.join(";")
    }
}

/// Mean scores over a set of rows; `None` when the set is empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub images: usize,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub kappa: Option<f64>,
}

impl MeanScores {
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a ImageRow>, aggregation: Aggregation) -> Self {
        let rows: Vec<&ImageRow> = rows.into_iter().collect();
        let n = rows.len();
        if n == 0 {
            return Self::default();
        }
        match aggregation {
            Aggregation::PerImage => {
                let mean = |f: fn(&ImageRow) -> f64| Some(rows.iter().map(|r| f(r)).sum::<f64>() / n as f64);
                Self {
                    images: n,
                    dice: mean(|r| r.dice),
                    iou: mean(|r| r.iou),
                    kappa: mean(|r| r.kappa),
                }
            }
            Aggregation::Pooled => {
                let s = MaskScores::from_counts(rows.iter().map(|r| r.counts).sum());
                Self {
                    images: n,
                    dice: Some(s.dice),
                    iou: Some(s.iou),
                    kappa: Some(s.kappa),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetAggregate {
    /// Dataset name, or `all` for the whole report.
    pub dataset: String,
    pub images: usize,
    pub failures: usize,
    pub failure_fraction: f64,
    pub all_images: MeanScores,
    /// Rows with Dice at or above the failure threshold.
    pub excluding_failures: MeanScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl DatasetAggregate {
    fn of(name: &str, rows: &[&ImageRow], aggregation: Aggregation) -> Self {
        let failures = rows.iter().filter(|r| r.failure).count();
        let kept = rows.iter().copied().filter(|r| !r.failure);
        let excluding_failures = MeanScores::of(kept, aggregation);
        let note = (excluding_failures.images == 0)
            .then(|| "every image is below the failure threshold; no aggregate without failures".to_owned());
        Self {
            dataset: name.to_owned(),
            images: rows.len(),
            failures,
            failure_fraction: if rows.is_empty() {
                0.0
            } else {
                failures as f64 / rows.len() as f64
            },
            all_images: MeanScores::of(rows.iter().copied(), aggregation),
            excluding_failures,
            note,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub backbone: BackboneId,
    pub clusterer: Clusterer,
    /// Name of the segmenter implementation.
    pub segmenter: String,
    pub failure_threshold: f64,
    pub aggregation: Aggregation,
    pub rows: Vec<ImageRow>,
    pub datasets: Vec<DatasetAggregate>,
    pub overall: DatasetAggregate,
    pub failures: Vec<String>,
    pub skipped: Vec<LoadIssue>,
}

impl MetricReport {
    pub fn build(config: &ExperimentConfig, segmenter: String, rows: Vec<ImageRow>, skipped: Vec<LoadIssue>) -> Self {
        let mut by_dataset: BTreeMap<DatasetId, Vec<&ImageRow>> = BTreeMap::new();
        for r in &rows {
            by_dataset.entry(r.dataset).or_default().push(r);
        }
        let datasets = by_dataset
            .iter()
            .map(|(d, rs)| DatasetAggregate::of(d.as_str(), rs, config.aggregation))
            .collect();
        let all: Vec<&ImageRow> = rows.iter().collect();
        let overall = DatasetAggregate::of("all", &all, config.aggregation);
        let failures = rows.iter().filter(|r| r.failure).map(|r| r.image_id.clone()).collect();
        Self {
            version: REPORT_VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            backbone: config.segmenter.backbone,
            clusterer: config.clusterer,
            segmenter,
            failure_threshold: config.failure_threshold,
            aggregation: config.aggregation,
            rows,
            datasets,
            overall,
            failures,
            skipped,
        }
    }

    pub fn model_label(&self) -> String {
        if self.segmenter.starts_with("sam") {
            self.backbone.model_label().to_owned()
        } else {
            format!("{} ({})", self.segmenter, self.backbone)
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Reads `report.json` from a run directory.
    pub fn load_run(run_dir: &Path) -> Result<Self> {
        Self::load(&run_dir.join(REPORT_JSON))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_id", "dataset", "backbone", "clusterer", "dice", "iou", "kappa", "flags"])?;
        for r in &self.rows {
            w.write_record([
                r.image_id.clone(),
                r.dataset.to_string(),
                r.backbone.to_string(),
                r.clusterer.to_string(),
                r.dice.to_string(),
                r.iou.to_string(),
                r.kappa.to_string(),
                r.flags_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        render_markdown(std::slice::from_ref(self))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json(),
            ReportFormat::Md => Ok(self.to_markdown()),
        }
    }

    /// Writes one rendering to `path`.
    pub fn write(&self, format: ReportFormat, path: &Path) -> Result<()> {
        fs::write(path, self.render(format)?).map_err(|e| Error::io(path, e))
    }

    /// Writes all three renderings into `dir` under their standard names.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for f in ReportFormat::ALL {
            self.write(f, &dir.join(f.file_name()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Md,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Md];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Csv => REPORT_CSV,
            ReportFormat::Json => REPORT_JSON,
            ReportFormat::Md => REPORT_MD,
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "md" | "markdown" => Ok(ReportFormat::Md),
            _ => Err(Error::invalid(format!("unknown report format {s:?}"))),
        }
    }
}

fn dataset_title(name: &str) -> String {
    let mut c = name.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

/// Markdown tables with one row per (dataset, model) across `reports`: scores without
/// failures first, then over all images.
pub fn render_markdown(reports: &[MetricReport]) -> String {
    let mut rows: Vec<(&str, String, &DatasetAggregate)> = reports
        .iter()
        .flat_map(|r| r.datasets.iter().map(move |d| (d.dataset.as_str(), r.model_label(), d)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0).then_with(|| a.1.cmp(&b.1)));

    let mut out = String::new();
    let table = |out: &mut String, title: &str, pick: fn(&DatasetAggregate) -> &MeanScores| {
        let _ = writeln!(out, "### {title}\n");
        let _ = writeln!(out, "| Dataset | Model | Dice | IoU | Kappa | Images | Failures |");
        let _ = writeln!(out, "|---|---|---|---|---|---|---|");
        for (dataset, model, agg) in &rows {
            let m = pick(agg);
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} ({:.1}%) |",
                dataset_title(dataset),
                model,
                pct(m.dice),
                pct(m.iou),
                pct(m.kappa),
                m.images,
                agg.failures,
                100.0 * agg.failure_fraction,
            );
        }
        out.push('\n');
    };
    let threshold = reports.first().map(|r| r.failure_threshold).unwrap_or_default();
    table(
        &mut out,
        &format!("Excluding failures (Dice < {threshold:.2})"),
        |a| &a.excluding_failures,
    );
    table(&mut out, "All images", |a| &a.all_images);
    for r in reports {
        let _ = writeln!(
            out,
            "- {}: clusterer {}, seed {}, {} aggregation, config `{}`",
            r.model_label(),
            r.clusterer,
            r.seed,
            match r.aggregation {
                Aggregation::PerImage => "per-image",
                Aggregation::Pooled => "pooled",
            },
            &r.config_hash[..r.config_hash.len().min(12)],
        );
        for d in r.datasets.iter().filter_map(|d| d.note.as_ref().map(|n| (d, n))) {
            let _ = writeln!(out, "  - {}: {}", dataset_title(&d.0.dataset), d.1);
        }
    }
    out
}

/// Radiograph with true positives tinted green, false positives red and false negatives blue.
pub fn overlay(image: &CxrImage, gt: &BinaryMask, pred: &BinaryMask) -> CxrImage {
    let gray = image.gray_f32();
    let (rows, cols) = image.dims();
    let data = Array3::from_shape_fn((rows, cols, 3), |(r, c, ch)| {
        let p = (r, c);
        let inside = |m: &BinaryMask| m.dims() == (rows, cols) && m.get(p);
        let tint = match (inside(pred), inside(gt)) {
            (true, true) => Some([0.0, 255.0, 0.0]),
            (true, false) => Some([255.0, 0.0, 0.0]),
            (false, true) => Some([0.0, 0.0, 255.0]),
            (false, false) => None,
        };
        let g = gray[p];
        match tint {
            Some(t) => (0.6 * g + 0.4 * t[ch]).round() as u8,
            None => g.round() as u8,
        }
    });
    CxrImage::new(data).expect("three channels")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub image_id: String,
    pub dice_a: f64,
    pub dice_b: f64,
    /// `dice_a - dice_b`.
    pub delta: f64,
}

/// Side-by-side comparison of two runs over the same images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClustererComparison {
    pub clusterer_a: Clusterer,
    pub clusterer_b: Clusterer,
    pub mean_dice_a: f64,
    pub mean_dice_b: f64,
    pub mean_delta: f64,
    /// Prompt points outside their intended region, summed over images.
    pub region_violations_a: usize,
    pub region_violations_b: usize,
    pub deltas: Vec<PairedDelta>,
}

pub fn compare_clusterers(a: &MetricReport, b: &MetricReport) -> Result<ClustererComparison> {
    if a.seed != b.seed {
        return Err(Error::SplitMismatch(format!("seeds differ: {} vs {}", a.seed, b.seed)));
    }
    let ids = |r: &MetricReport| r.rows.iter().map(|x| x.image_id.clone()).collect::<Vec<_>>();
    if ids(a) != ids(b) {
        return Err(Error::SplitMismatch(format!(
            "runs scored different images ({} vs {})",
            a.rows.len(),
            b.rows.len()
        )));
    }
    if a.rows.is_empty() {
        return Err(Error::invalid("nothing to compare: both runs are empty"));
    }
    let deltas: Vec<PairedDelta> = a
        .rows
        .iter()
        .zip(&b.rows)
        .map(|(x, y)| PairedDelta {
            image_id: x.image_id.clone(),
            dice_a: x.dice,
            dice_b: y.dice,
            delta: x.dice - y.dice,
        })
        .collect();
    let n = deltas.len() as f64;
    Ok(ClustererComparison {
        clusterer_a: a.clusterer,
        clusterer_b: b.clusterer,
        mean_dice_a: deltas.iter().map(|d| d.dice_a).sum::<f64>() / n,
        mean_dice_b: deltas.iter().map(|d| d.dice_b).sum::<f64>() / n,
        mean_delta: deltas.iter().map(|d| d.delta).sum::<f64>() / n,
        region_violations_a: a.rows.iter().map(|r| r.region_violations).sum(),
        region_violations_b: b.rows.iter().map(|r| r.region_violations).sum(),
        deltas,
    })
}

impl ClustererComparison {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| | A ({}) | B ({}) |", self.clusterer_a, self.clusterer_b);
        let _ = writeln!(out, "|---|---|---|");
        let _ = writeln!(out, "| Mean Dice | {:.4} | {:.4} |", self.mean_dice_a, self.mean_dice_b);
        let _ = writeln!(
            out,
            "| Region violations | {} | {} |",
            self.region_violations_a, self.region_violations_b
        );
        let _ = writeln!(out, "\nMean paired delta (A - B): {:+.4} over {} images", self.mean_delta, self.deltas.len());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;

    fn row(id: &str, dataset: DatasetId, counts: ConfusionCounts, threshold: f64) -> ImageRow {
        let s = MaskScores::from_counts(counts);
        ImageRow {
            image_id: id.into(),
            dataset,
            backbone: BackboneId::VitL,
            clusterer: Clusterer::Kmedoids,
            dice: s.dice,
            iou: s.iou,
            kappa: s.kappa,
            counts,
            failure: s.dice < threshold,
            flags: Vec::new(),
            stage_error: None,
            confidence: Some(0.93),
            region_violations: 0,
        }
    }

    fn report() -> MetricReport {
        let c = ExperimentConfig::hermetic("m.json".into(), "out".into());
        let rows = vec![
            row("montgomery/a", DatasetId::Montgomery, ConfusionCounts::new(90, 5, 900, 5), 0.7),
            row("montgomery/b", DatasetId::Montgomery, ConfusionCounts::new(10, 50, 900, 40), 0.7),
            row("shenzhen/c", DatasetId::Shenzhen, ConfusionCounts::new(80, 10, 900, 10), 0.7),
        ];
        MetricReport::build(&c, "fake-region-grow".into(), rows, Vec::new())
    }

    #[test]
    fn aggregates_exclude_exactly_the_failures() {
        let r = report();
        assert_eq!(r.failures, vec!["montgomery/b".to_owned()]);
        let m = &r.datasets[0];
        assert_eq!((m.dataset.as_str(), m.images, m.failures), ("montgomery", 2, 1));
        assert_eq!(m.excluding_failures.dice, Some(r.rows[0].dice));
        assert_eq!(m.all_images.dice, Some((r.rows[0].dice + r.rows[1].dice) / 2.0));
        assert!(m.excluding_failures.dice >= m.all_images.dice);
        assert_eq!(r.overall.images, 3);
    }

    #[test]
    fn renderings() {
        let r = report();
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + r.rows.len());
        assert!(csv.starts_with("image_id,dataset,backbone,clusterer,dice,iou,kappa,flags\n"));
        assert_eq!(MetricReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let md = r.to_markdown();
        assert_eq!(md.matches("| Montgomery |").count(), 2);
        assert_eq!(md.matches("| Shenzhen |").count(), 2);
    }

    #[test]
    fn all_failures_gives_empty_aggregate_with_note() {
        let c = ExperimentConfig::hermetic("m.json".into(), "out".into());
        let rows = vec![row("other/x", DatasetId::Other, ConfusionCounts::new(0, 10, 10, 10), 0.7)];
        let r = MetricReport::build(&c, "fake".into(), rows, Vec::new());
        assert_eq!(r.overall.excluding_failures.dice, None);
        assert!(r.overall.note.is_some());
        assert!(r.to_markdown().contains("n/a"));
        assert_eq!(MetricReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let r = report();
        let cmp = compare_clusterers(&r, &r).unwrap();
        assert!(cmp.deltas.iter().all(|d| d.delta == 0.0));
        assert_eq!(cmp.mean_delta, 0.0);
        let mut other = r.clone();
        other.rows.pop();
        assert!(matches!(compare_clusterers(&r, &other), Err(Error::SplitMismatch(_))));
    }

    #[test]
    fn overlay_colours() {
        let img = CxrImage::from_gray(&ndarray::Array2::from_elem((2, 2), 100u8));
        let gt = BinaryMask::from_fn(2, 2, |(r, _)| r == 0);
        let pred = BinaryMask::from_fn(2, 2, |(_, c)| c == 0);
        let o = overlay(&img, &gt, &pred);
        let a = o.as_array();
        assert_eq!([a[[0, 0, 0]], a[[0, 0, 1]]], [60, 162]);
        assert_eq!(a[[1, 0, 0]], 162);
        assert_eq!(a[[0, 1, 2]], 162);
        assert_eq!(a[[1, 1, 1]], 100);
    }
}
