//! End-to-end experiments on simulated captures: clustering, binary and
//! three-class CNN classification, a distribution-shift test, and the
//! leakage/Fano demonstration.

use crate::anonymity::{fano_lower_bound, length_leakage_demo, uniform_fano, AnonymityError, FanoReport, LengthLeakage};
use crate::learn::{
    ablation_suite, cnn_assign, cnn_evaluate, cnn_train, elbow_ratio, elbow_scan, kmeans_fit_from, pearson_correlations,
    trace_labels, Correlation, Dataset, EvalReport, Hyper, LearnError, Normalization, TrainReport,
};
use crate::learn::{balanced_indices, stratified_split_indices};
use crate::netdb::NodeAddr;
use crate::report::{bar_chart, csv_bytes, elbow_svg, json_bytes, write_file, xy_chart, ReportError, Series, Style};
use crate::sim::scenario::{CaptureSpec, ClientSpec, FlowSpec, Scenario, ServiceSpec};
use crate::sim::{LatencySpec, SimConfig, SimError};
use crate::trace::pcap::import_pcap;
use crate::trace::{curate, summarize, FeatureSet, FeatureVariant, MetaField, Protocol, Trace, TraceError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment spec: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Anonymity(#[from] AnonymityError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "Exp1_KMeans")]
    Exp1KMeans,
    #[serde(rename = "Exp2_Binary")]
    Exp2Binary,
    #[serde(rename = "Exp3_MultiClass")]
    Exp3MultiClass,
    #[serde(rename = "Exp4_Shift")]
    Exp4Shift,
    FanoDemo,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::Exp1KMeans,
        ExperimentId::Exp2Binary,
        ExperimentId::Exp3MultiClass,
        ExperimentId::Exp4Shift,
        ExperimentId::FanoDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Exp1KMeans => "Exp1_KMeans",
            ExperimentId::Exp2Binary => "Exp2_Binary",
            ExperimentId::Exp3MultiClass => "Exp3_MultiClass",
            ExperimentId::Exp4Shift => "Exp4_Shift",
            ExperimentId::FanoDemo => "FanoDemo",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = String;

    /// Accepts the full name or its prefix before `_`, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase();
        ExperimentId::ALL
            .into_iter()
            .find(|id| {
                let name = id.name().to_ascii_lowercase();
                name == s || name.split('_').next() == Some(s.as_str())
            })
            .ok_or_else(|| format!("unknown experiment {s:?}; expected one of Exp1, Exp2, Exp3, Exp4, FanoDemo"))
    }
}

pub const SENDER: NodeAddr = NodeAddr::new(10, 8, 0, 2);
pub const TARGET_A: NodeAddr = NodeAddr::new(10, 8, 0, 11);
pub const TARGET_B: NodeAddr = NodeAddr::new(10, 8, 0, 12);

/// Everything that determines an experiment's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub seed: u64,
    /// Feature variants to train; empty selects the experiment's default set.
    pub variants: Vec<FeatureVariant>,
    pub hyper: Hyper,
    /// Requests per target service.
    pub requests: usize,
    /// Simulated seconds per scenario.
    pub duration: f64,
    /// The lab network; its seed is replaced by `seed`.
    pub lab: SimConfig,
    /// The evaluation world for the shift experiment.
    pub shifted: SimConfig,
    pub kmeans_max_k: usize,
    pub kmeans_restarts: usize,
    /// k used for the cluster-size table.
    pub cluster_table_k: usize,
    /// Anonymity-set size for the Fano demonstration.
    pub nodes: usize,
    /// Optional capture to classify with every trained model.
    pub pcap: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec::new(ExperimentId::Exp2Binary)
    }
}

impl ExperimentSpec {
    pub fn new(id: ExperimentId) -> Self {
        ExperimentSpec {
            id,
            seed: 7,
            variants: Vec::new(),
            hyper: Hyper {
                max_per_class: Some(300),
                ..Hyper::default()
            },
            requests: 200,
            duration: 240.0,
            lab: SimConfig::default(),
            shifted: SimConfig {
                seed: 1_000_003,
                link_latency: LatencySpec {
                    mean_ms: 40.0,
                    jitter_ms: 15.0,
                },
                cell_size: 1100,
                background_rate: 3.0,
                udp_probability: 0.4,
                ip_ttl: 128,
                port_range: (20000, 40000),
                ..SimConfig::default()
            },
            kmeans_max_k: 30,
            kmeans_restarts: 10,
            cluster_table_k: 4,
            nodes: 1024,
            pcap: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if self.requests == 0 || !(self.duration > 0.0) {
            return bad("requests and duration must be positive");
        }
        if self.id == ExperimentId::Exp4Shift && self.lab_config() == self.shifted {
            return bad("the shifted world must differ from the lab configuration");
        }
        if self.id == ExperimentId::FanoDemo && self.nodes < 3 {
            return bad("nodes must be at least 3");
        }
        if self.kmeans_max_k == 0 || self.cluster_table_k == 0 {
            return bad("k values must be positive");
        }
        self.lab.validate()?;
        self.shifted.validate()?;
        Ok(())
    }

    fn lab_config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.lab.clone()
        }
    }

    fn variants_or(&self, default: &[FeatureVariant]) -> Vec<FeatureVariant> {
        if self.variants.is_empty() {
            default.to_vec()
        } else {
            self.variants.clone()
        }
    }
}

/// Lab scenario: one client requesting pages from target A (class 2) and,
/// for three classes, target B (class 3), observed at the targets' inbound
/// gateways.
pub fn lab_scenario(spec: &ExperimentSpec, network: SimConfig, three_class: bool) -> Scenario {
    let mut services = vec![ServiceSpec {
        name: "A".into(),
        node: TARGET_A,
        class: 2,
        outbound_tunnels: 1,
    }];
    if three_class {
        services.push(ServiceSpec {
            name: "B".into(),
            node: TARGET_B,
            class: 3,
            outbound_tunnels: 1,
        });
    }
    let flows = services
        .iter()
        .map(|s| FlowSpec {
            client: SENDER,
            service: s.name.clone(),
            requests: spec.requests,
            start: 1.0,
            mean_interval: (spec.duration - 20.0).max(1.0) / spec.requests as f64,
            payload_bytes: (200, 1800),
        })
        .collect();
    let vantage = services.iter().map(|s| format!("gateway:{}", s.name)).collect();
    Scenario {
        duration: spec.duration,
        network,
        services,
        clients: vec![ClientSpec {
            node: SENDER,
            outbound_tunnels: 2,
        }],
        flows,
        capture: CaptureSpec { vantage },
    }
}

/// Runs a scenario and returns its raw and curated captures.
pub fn capture_scenario(scenario: &Scenario) -> Result<(Trace, Trace), ExperimentError> {
    let run = scenario.run()?;
    let raw = run.capture()?;
    let curated = curate(&raw)?;
    Ok((raw, curated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSummary {
    pub raw_records: usize,
    pub curated_records: usize,
    pub raw_classes: BTreeMap<u8, usize>,
    pub curated_classes: BTreeMap<u8, usize>,
    pub tcp_size_mode: Option<usize>,
    pub udp_size_mode: Option<usize>,
    pub mean_entropy: Option<f64>,
}

fn capture_summary(raw: &Trace, curated: &Trace) -> Result<CaptureSummary, ExperimentError> {
    let stats = summarize(curated);
    Ok(CaptureSummary {
        raw_records: raw.len(),
        curated_records: curated.len(),
        raw_classes: crate::learn::class_counts(&trace_labels(raw)?),
        curated_classes: crate::learn::class_counts(&trace_labels(curated)?),
        tcp_size_mode: stats.size_mode(Protocol::Tcp),
        udp_size_mode: stats.size_mode(Protocol::Udp),
        mean_entropy: stats.mean_entropy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: usize,
    pub size: usize,
    /// Ground-truth class composition of the cluster.
    pub classes: BTreeMap<u8, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp1Result {
    pub capture: CaptureSummary,
    pub features: Vec<String>,
    pub samples: usize,
    /// `(k, best WCSS)`.
    pub elbow: Vec<(usize, f64)>,
    pub elbow_ratio: Option<f64>,
    pub cluster_k: usize,
    pub clusters: Vec<ClusterRow>,
    pub checks: Vec<Check>,
}

/// Standardized `[src_port, dst_port, payload_size, protocol]` per record.
pub fn clustering_points(trace: &Trace) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = trace
        .records
        .iter()
        .map(|r| {
            vec![
                r.src_port as f64,
                r.dst_port as f64,
                r.payload_size as f64,
                if r.protocol == Protocol::Udp { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    let norm = Normalization::fit(&raw, 4);
    raw.iter().map(|v| norm.apply(v)).collect()
}

pub fn exp1_kmeans(spec: &ExperimentSpec) -> Result<(Exp1Result, Trace), ExperimentError> {
    let (raw, curated) = capture_scenario(&lab_scenario(spec, spec.lab_config(), false))?;
    let points = clustering_points(&curated);
    let labels = trace_labels(&curated)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let max_k = spec.kmeans_max_k.min(points.len());
    let scan = elbow_scan(&points, 1..=max_k, spec.kmeans_restarts, &mut rng)?;
    let elbow: Vec<(usize, f64)> = scan.iter().map(|m| (m.k, m.wcss)).collect();
    let table_k = spec.cluster_table_k.min(max_k);
    let model = kmeans_fit_from(&points, scan[table_k - 1].centers.clone(), scan[table_k - 1].seed)?;
    let mut clusters: Vec<ClusterRow> = (0..table_k)
        .map(|cluster| ClusterRow {
            cluster,
            size: 0,
            classes: BTreeMap::new(),
        })
        .collect();
    for (p, l) in points.iter().zip(&labels) {
        let row = &mut clusters[model.assign(p)];
        row.size += 1;
        *row.classes.entry(*l).or_insert(0) += 1;
    }
    let monotone = elbow.windows(2).all(|w| w[1].1 <= w[0].1);
    let result = Exp1Result {
        capture: capture_summary(&raw, &curated)?,
        features: vec!["src_port".into(), "dst_port".into(), "payload_size".into(), "protocol".into()],
        samples: points.len(),
        elbow_ratio: elbow_ratio(&scan),
        elbow,
        cluster_k: table_k,
        clusters,
        checks: vec![check("wcss_non_increasing", monotone, format!("k = 1..={max_k}"))],
    };
    Ok((result, curated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub features: String,
    pub report: TrainReport,
    /// The trained model applied to every curated record.
    pub full_trace: EvalReport,
    /// Predicted class counts on the optional imported capture.
    pub pcap_assignments: Option<BTreeMap<u8, usize>>,
    #[serde(skip)]
    pub model_json: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    pub capture: CaptureSummary,
    pub variants: Vec<VariantResult>,
    pub correlations: Vec<Correlation>,
    pub checks: Vec<Check>,
}

impl ClassifyResult {
    pub fn variant(&self, label: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.features == label)
    }
}

fn train_variants(spec: &ExperimentSpec, trace: &Trace, sets: &[FeatureSet], pcap: Option<&Trace>) -> Result<Vec<VariantResult>, ExperimentError> {
    let entries = ablation_suite(trace, sets, &spec.hyper, spec.seed)?;
    entries
        .into_iter()
        .map(|e| {
            let full = cnn_evaluate(&e.model, &Dataset::from_trace(trace, &e.features)?)?;
            let pcap_assignments = pcap
                .map(|p| {
                    let vectors: Vec<Vec<f64>> = p.records.iter().map(|r| e.features.extract(r)).collect();
                    cnn_assign(&e.model, &vectors)
                })
                .transpose()?;
            Ok(VariantResult {
                features: e.features.label(),
                report: e.report,
                full_trace: full,
                pcap_assignments,
                model_json: e.model.to_json(),
            })
        })
        .collect()
}

fn load_pcap(spec: &ExperimentSpec) -> Result<Option<Trace>, ExperimentError> {
    let Some(path) = &spec.pcap else {
        return Ok(None);
    };
    let bytes = std::fs::read(path).map_err(|source| ReportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(Some(curate(&import_pcap(&bytes)?.trace)?))
}

/// Metadata-column ablations of the without-payload variant.
pub fn metadata_ablations() -> Vec<FeatureSet> {
    vec![
        FeatureSet::dropping(FeatureVariant::WithoutPayload, &[MetaField::TcpAck, MetaField::TcpSeq]),
        FeatureSet::dropping(FeatureVariant::WithoutPayload, &[MetaField::DstPort]),
        FeatureSet::dropping(FeatureVariant::WithoutPayload, &[MetaField::PayloadSize]),
    ]
}

fn classify(spec: &ExperimentSpec, three_class: bool, default: &[FeatureVariant]) -> Result<(ClassifyResult, Trace), ExperimentError> {
    let (raw, curated) = capture_scenario(&lab_scenario(spec, spec.lab_config(), three_class))?;
    let pcap = load_pcap(spec)?;
    let variants = spec.variants_or(default);
    let mut sets: Vec<FeatureSet> = variants.iter().map(|&v| v.into()).collect();
    if !three_class && variants.contains(&FeatureVariant::WithoutPayload) {
        sets.extend(metadata_ablations());
    }
    let results = train_variants(spec, &curated, &sets, pcap.as_ref())?;
    let correlations = pearson_correlations(&Dataset::from_trace(&curated, &FeatureVariant::WithoutPayload.into())?)?;
    let mut out = ClassifyResult {
        capture: capture_summary(&raw, &curated)?,
        variants: results,
        correlations,
        checks: Vec::new(),
    };
    let val = |l: &str| out.variant(l).map(|v| v.report.final_validation_accuracy);
    let class1 = |l: &str| out.variant(l).and_then(|v| v.full_trace.class_accuracy(1));
    let mut checks = Vec::new();
    if !three_class {
        if let Some(wp) = val("without-payload") {
            checks.push(check("without_payload_validation_accuracy", wp >= 0.95, format!("{wp:.4} >= 0.95")));
            if let Some(po) = val("payload-only") {
                checks.push(check("metadata_beats_payload", wp > po, format!("{wp:.4} > {po:.4}")));
            }
        }
        if let (Some(wp), Some(ar)) = (class1("without-payload"), class1("all-raw")) {
            checks.push(check("full_trace_class1_without_payload_beats_all_raw", wp > ar, format!("{wp:.4} > {ar:.4}")));
        }
    } else if let (Some(wp), Some(ar)) = (class1("without-payload"), class1("all-raw")) {
        checks.push(check("full_trace_class1_without_payload_at_least_all_raw", wp >= ar, format!("{wp:.4} >= {ar:.4}")));
    }
    out.checks = checks;
    Ok((out, curated))
}

pub fn exp2_binary(spec: &ExperimentSpec) -> Result<(ClassifyResult, Trace), ExperimentError> {
    classify(spec, false, &FeatureVariant::ALL)
}

pub fn exp3_multiclass(spec: &ExperimentSpec) -> Result<(ClassifyResult, Trace), ExperimentError> {
    classify(spec, true, &[FeatureVariant::AllRaw, FeatureVariant::WithoutPayload])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftResult {
    pub features: String,
    pub lab_capture: CaptureSummary,
    pub shifted_capture: CaptureSummary,
    pub lab: TrainReport,
    pub shifted: EvalReport,
    pub lab_balanced_accuracy: f64,
    pub shifted_balanced_accuracy: f64,
    /// Lab minus shifted balanced accuracy.
    pub drop: f64,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub model_json: String,
}

pub fn exp4_shift(spec: &ExperimentSpec) -> Result<ShiftResult, ExperimentError> {
    let variant = spec.variants_or(&[FeatureVariant::WithoutPayload])[0];
    let fs = FeatureSet::from(variant);
    let (lab_raw, lab) = capture_scenario(&lab_scenario(spec, spec.lab_config(), false))?;
    let (shift_raw, shifted) = capture_scenario(&lab_scenario(spec, spec.shifted.clone(), false))?;

    let labels = trace_labels(&lab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chosen = balanced_indices(&labels, spec.hyper.max_per_class, &mut rng)?;
    let chosen_labels: Vec<u8> = chosen.iter().map(|&i| labels[i]).collect();
    let (t, v) = stratified_split_indices(&chosen_labels, spec.hyper.validation_fraction, &mut rng);
    let all = Dataset::from_trace(&lab, &fs)?;
    let pick = |idx: &[usize]| all.subset(&idx.iter().map(|&j| chosen[j]).collect::<Vec<_>>());
    let (model, report) = cnn_train(&pick(&t), &pick(&v), &spec.hyper, spec.seed)?;
    let eval = cnn_evaluate(&model, &Dataset::from_trace(&shifted, &fs)?)?;
    let drop = report.balanced_accuracy - eval.balanced_accuracy;
    let checks = vec![
        check(
            "shifted_below_lab",
            eval.balanced_accuracy < report.balanced_accuracy,
            format!("{:.4} < {:.4}", eval.balanced_accuracy, report.balanced_accuracy),
        ),
        check("drop_at_least_10pp", drop >= 0.10, format!("{drop:.4} >= 0.10")),
    ];
    Ok(ShiftResult {
        features: fs.label(),
        lab_capture: capture_summary(&lab_raw, &lab)?,
        shifted_capture: capture_summary(&shift_raw, &shifted)?,
        lab_balanced_accuracy: report.balanced_accuracy,
        shifted_balanced_accuracy: eval.balanced_accuracy,
        drop,
        lab: report,
        shifted: eval,
        checks,
        model_json: model.to_json(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanoDemoResult {
    pub nodes: usize,
    /// Uniform prior over all nodes, no leakage.
    pub uniform: FanoReport,
    pub leakage: LengthLeakage,
    /// Bound on guessing the route length in each onion mode.
    pub route_length_naive: FanoReport,
    pub route_length_padded: FanoReport,
    pub checks: Vec<Check>,
}

pub fn fano_demo(spec: &ExperimentSpec) -> Result<FanoDemoResult, ExperimentError> {
    let uniform = uniform_fano(spec.nodes)?;
    let hops = [1, 2, 3];
    let leakage = length_leakage_demo(&spec.lab_config(), &hops, spec.requests)?;
    let h = leakage.entropy_x;
    let naive = fano_lower_bound(h, leakage.mi_naive.min(h), hops.len())?;
    let padded = fano_lower_bound(h, leakage.mi_padded.min(h), hops.len())?;
    let checks = vec![check(
        "padding_removes_length_leakage",
        leakage.mi_padded < leakage.mi_naive,
        format!("{:.4} < {:.4}", leakage.mi_padded, leakage.mi_naive),
    )];
    Ok(FanoDemoResult {
        nodes: spec.nodes,
        uniform,
        leakage,
        route_length_naive: naive,
        route_length_padded: padded,
        checks,
    })
}

/// Files written and declared checks of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub id: ExperimentId,
    pub seed: u64,
    pub checks: Vec<Check>,
    /// Absolute in the returned value, relative to the experiment directory in outcome.json.
    pub files: Vec<PathBuf>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn confusion_csv(classes: &[u8], confusion: &[Vec<usize>]) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["true_class".to_string()];
    head.extend(classes.iter().map(|c| format!("predicted_{c}")));
    w.write_record(&head)?;
    for (c, row) in classes.iter().zip(confusion) {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(|n| n.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| ReportError::Io {
        path: PathBuf::from("<csv>"),
        source: e.into_error(),
    })
}

fn curves_svg(report: &TrainReport) -> String {
    let pts = |f: fn(&crate::learn::EpochRecord) -> f64| report.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect();
    xy_chart(
        &format!("Training curves: {}", report.features),
        "epoch",
        "loss / accuracy",
        &[
            Series {
                name: "train loss".into(),
                points: pts(|e| e.train_loss),
            },
            Series {
                name: "validation loss".into(),
                points: pts(|e| e.val_loss),
            },
            Series {
                name: "train accuracy".into(),
                points: pts(|e| e.train_accuracy),
            },
            Series {
                name: "validation accuracy".into(),
                points: pts(|e| e.val_accuracy),
            },
        ],
        Style::Lines,
        None,
    )
}

fn write_classify(dir: &Path, r: &ClassifyResult, trace: &Trace, files: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    files.push(write_file(&dir.join("summary.json"), json_bytes(r))?);
    files.push(write_file(&dir.join("capture.jsonl"), trace.to_jsonl())?);
    files.push(write_file(&dir.join("correlations.csv"), csv_bytes(&r.correlations)?)?);
    for v in &r.variants {
        let d = dir.join(&v.features);
        files.push(write_file(&d.join("report.json"), json_bytes(&v.report))?);
        files.push(write_file(&d.join("full_trace.json"), json_bytes(&v.full_trace))?);
        files.push(write_file(&d.join("confusion_validation.csv"), confusion_csv(&v.report.classes, &v.report.confusion)?)?);
        files.push(write_file(&d.join("confusion_full_trace.csv"), confusion_csv(&v.full_trace.classes, &v.full_trace.confusion)?)?);
        files.push(write_file(&d.join("curves.svg"), curves_svg(&v.report))?);
        files.push(write_file(&d.join("model.json"), &v.model_json)?);
    }
    let bars: Vec<(String, f64)> = r
        .variants
        .iter()
        .map(|v| (v.features.clone(), v.report.final_validation_accuracy))
        .collect();
    files.push(write_file(&dir.join("accuracy.svg"), bar_chart("Validation accuracy per feature set", "accuracy", &bars))?);
    Ok(())
}

#[derive(Serialize)]
struct ElbowRow {
    k: usize,
    wcss: f64,
}

/// Runs the experiment and writes its artifacts under `out_root/<id>/`.
pub fn run_experiment(spec: &ExperimentSpec, out_root: &Path) -> Result<ExperimentOutcome, ExperimentError> {
    spec.validate()?;
    let dir = out_root.join(spec.id.name());
    let mut files = Vec::new();
    let checks = match spec.id {
        ExperimentId::Exp1KMeans => {
            let (r, trace) = exp1_kmeans(spec)?;
            let rows: Vec<ElbowRow> = r.elbow.iter().map(|&(k, wcss)| ElbowRow { k, wcss }).collect();
            files.push(write_file(&dir.join("elbow.csv"), csv_bytes(&rows)?)?);
            files.push(write_file(&dir.join("elbow.svg"), elbow_svg(&r.elbow))?);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["cluster", "size", "class_1", "class_2"]).map_err(ReportError::from)?;
            for c in &r.clusters {
                let n = |k: u8| c.classes.get(&k).copied().unwrap_or(0).to_string();
                w.write_record([c.cluster.to_string(), c.size.to_string(), n(1), n(2)])
                    .map_err(ReportError::from)?;
            }
            let bytes = w.into_inner().map_err(|e| ReportError::Io {
                path: dir.join("clusters.csv"),
                source: e.into_error(),
            })?;
            files.push(write_file(&dir.join("clusters.csv"), bytes)?);
            files.push(write_file(&dir.join("capture.jsonl"), trace.to_jsonl())?);
            files.push(write_file(&dir.join("summary.json"), json_bytes(&r))?);
            r.checks
        }
        ExperimentId::Exp2Binary => {
            let (r, trace) = exp2_binary(spec)?;
            write_classify(&dir, &r, &trace, &mut files)?;
            r.checks
        }
        ExperimentId::Exp3MultiClass => {
            let (r, trace) = exp3_multiclass(spec)?;
            write_classify(&dir, &r, &trace, &mut files)?;
            r.checks
        }
        ExperimentId::Exp4Shift => {
            let r = exp4_shift(spec)?;
            files.push(write_file(&dir.join("summary.json"), json_bytes(&r))?);
            files.push(write_file(&dir.join("confusion_lab_validation.csv"), confusion_csv(&r.lab.classes, &r.lab.confusion)?)?);
            files.push(write_file(&dir.join("confusion_shifted.csv"), confusion_csv(&r.shifted.classes, &r.shifted.confusion)?)?);
            files.push(write_file(&dir.join("curves.svg"), curves_svg(&r.lab))?);
            files.push(write_file(&dir.join("model.json"), &r.model_json)?);
            let bars = vec![
                ("lab validation".to_string(), r.lab_balanced_accuracy),
                ("shifted world".to_string(), r.shifted_balanced_accuracy),
            ];
            files.push(write_file(&dir.join("accuracy.svg"), bar_chart("Balanced accuracy", "accuracy", &bars))?);
            r.checks
        }
        ExperimentId::FanoDemo => {
            let r = fano_demo(spec)?;
            files.push(write_file(&dir.join("fano.json"), json_bytes(&r))?);
            r.checks
        }
    };
    let outcome = ExperimentOutcome {
        id: spec.id,
        seed: spec.seed,
        checks,
        files,
    };
    // Paths in outcome.json are relative so the artifacts do not depend on out_root.
    let relative = ExperimentOutcome {
        files: files_relative(&dir, &outcome.files),
        ..outcome.clone()
    };
    let mut files = outcome.files.clone();
    files.push(write_file(&dir.join("outcome.json"), json_bytes(&relative))?);
    Ok(ExperimentOutcome { files, ..outcome })
}

fn files_relative(dir: &Path, files: &[PathBuf]) -> Vec<PathBuf> {
    files
        .iter()
        .map(|f| f.strip_prefix(dir).map(Path::to_path_buf).unwrap_or_else(|_| f.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_parse() {
        assert_eq!("Exp2".parse::<ExperimentId>().unwrap(), ExperimentId::Exp2Binary);
        assert_eq!("exp1_kmeans".parse::<ExperimentId>().unwrap(), ExperimentId::Exp1KMeans);
        assert_eq!("FanoDemo".parse::<ExperimentId>().unwrap(), ExperimentId::FanoDemo);
        assert!("Exp9".parse::<ExperimentId>().is_err());
    }

    #[test]
    fn spec_from_toml() {
        let spec = ExperimentSpec::from_toml_str("id = \"Exp4_Shift\"\nseed = 3\n[hyper]\nmax_epochs = 5\n").unwrap();
        assert_eq!(spec.id, ExperimentId::Exp4Shift);
        assert_eq!(spec.hyper.max_epochs, 5);
        assert_eq!(spec.hyper.batch_size, 32);
        let err = ExperimentSpec::from_toml_str("id = \"Exp2_Binary\"\nseeds = 3\n").unwrap_err().to_string();
        assert!(err.contains("line") && err.contains("seeds"), "{err}");
        let mut same = ExperimentSpec::new(ExperimentId::Exp4Shift);
        same.shifted = same.lab_config();
        assert!(same.validate().is_err());
    }

    #[test]
    fn lab_scenario_shape() {
        let spec = ExperimentSpec::new(ExperimentId::Exp3MultiClass);
        let s = lab_scenario(&spec, spec.lab_config(), true);
        assert_eq!(s.services.len(), 2);
        assert_eq!(s.flows.iter().map(|f| f.requests).sum::<usize>(), 400);
        assert_eq!(s.capture.vantage, vec!["gateway:A", "gateway:B"]);
    }

    #[test]
    fn lab_capture_looks_like_tunnel_traffic() {
        let spec = ExperimentSpec::new(ExperimentId::Exp2Binary);
        let (raw, curated) = capture_scenario(&lab_scenario(&spec, spec.lab_config(), false)).unwrap();
        let s = capture_summary(&raw, &curated).unwrap();
        let mode = s.tcp_size_mode.unwrap();
        assert!((1072..=1100).contains(&mode), "{mode}");
        assert!(s.curated_classes.len() == 2);
        assert!(curated.curation_applied);
    }

    #[test]
    fn fano_demo_small() {
        let mut spec = ExperimentSpec::new(ExperimentId::FanoDemo);
        spec.requests = 60;
        let r = fano_demo(&spec).unwrap();
        assert!((r.uniform.lower_bound_pe - 0.90013).abs() < 1e-4);
        assert!(r.route_length_padded.lower_bound_pe >= r.route_length_naive.lower_bound_pe);
        assert!(r.checks.iter().all(|c| c.passed));
    }
}
