use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tunnelsim::anonymity::{fano_lower_bound, uniform_fano};
use tunnelsim::learn::{
    cnn_assign, cnn_evaluate, cnn_train, elbow_scan, pearson_correlations, stratified_split, trace_labels, Dataset,
};
use tunnelsim::report::{report_dir, report_trace};
use tunnelsim::trace::pcap::{export_pcap, import_pcap};
use tunnelsim::trace::{curate, summarize};
use tunnelsim::{
    run_experiment, CnnModel, ExperimentId, ExperimentSpec, FeatureSet, FeatureVariant, Hyper, MetaField, Scenario, Trace,
};

/// I2P-style mix-net simulator and passive-adversary analysis harness.
#[derive(Parser)]
#[command(name = "tunnelsim", version)]
struct Cli {
    /// Default output root for `run`.
    #[arg(long, global = true, env = "TUNNELSIM_OUT", default_value = "results")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script; write the NetDB snapshot and statistics.
    Simulate {
        scenario: PathBuf,
        #[arg(short, long, default_value = "simulation")]
        out: PathBuf,
    },
    /// Produce a trace from a scenario's vantage points or from a pcap file.
    Capture {
        #[arg(long, conflicts_with = "pcap", required_unless_present = "pcap")]
        scenario: Option<PathBuf>,
        #[arg(long)]
        pcap: Option<PathBuf>,
        /// Override the scenario's vantage points.
        #[arg(long, value_delimiter = ',')]
        vantage: Vec<tunnelsim::NodeAddr>,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write the trace as a pcap file.
        #[arg(long)]
        export_pcap: Option<PathBuf>,
    },
    /// Drop retransmissions, duplicate ACKs and empty TCP segments.
    Curate {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Export feature vectors (and Pearson correlations) as CSV.
    Features {
        input: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(short, long)]
        out: PathBuf,
        /// Write per-feature correlation with the class label here.
        #[arg(long)]
        correlations: Option<PathBuf>,
    },
    /// Port, size and payload-entropy report for a trace.
    Entropy {
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Fano lower bound on the adversary's error probability.
    Fano {
        /// Uniform prior over this many nodes, no leakage.
        #[arg(long, conflicts_with_all = ["entropy", "mi", "set"])]
        nodes: Option<usize>,
        #[arg(long, requires = "set")]
        entropy: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        mi: f64,
        #[arg(long)]
        set: Option<usize>,
    },
    /// Elbow scan over k on port/size/protocol features.
    Kmeans {
        input: PathBuf,
        #[arg(long, default_value_t = 30)]
        max_k: usize,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train a CNN on a labelled trace.
    Train {
        input: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// TOML file with hyperparameters.
        #[arg(long)]
        hyper: Option<PathBuf>,
        /// Model checkpoint output.
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Apply a trained model to a trace (labelled or not).
    Eval {
        #[arg(long)]
        model: PathBuf,
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment: Exp1, Exp2, Exp3, Exp4 or FanoDemo.
    Run(RunArgs),
    /// CSV and SVG reports for a trace file or a results directory.
    Report {
        input: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FeatureArgs {
    #[arg(long, default_value = "without-payload")]
    variant: FeatureVariant,
    /// Metadata columns to remove.
    #[arg(long, value_delimiter = ',')]
    drop: Vec<MetaField>,
}

impl FeatureArgs {
    fn set(&self) -> FeatureSet {
        FeatureSet::dropping(self.variant, &self.drop)
    }
}

#[derive(Args)]
struct RunArgs {
    id: ExperimentId,
    /// Experiment spec in TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "variant")]
    variants: Vec<FeatureVariant>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    requests: Option<usize>,
    /// Classify this capture with every trained model.
    #[arg(long)]
    pcap: Option<PathBuf>,
}

fn read_trace(path: &Path) -> Result<Trace> {
    if path.extension().is_some_and(|e| e == "pcap") {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(import_pcap(&bytes)?.trace);
    }
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Trace::read_jsonl(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Scenario::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether all declared checks passed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { scenario, out } => {
            let run = load_scenario(&scenario)?.run()?;
            write(&out.join("netdb.json"), run.sim.netdb().snapshot_json())?;
            write(&out.join("stats.json"), json(run.sim.stats()))?;
            println!("{}", json(run.sim.stats()));
        }
        Command::Capture {
            scenario,
            pcap,
            vantage,
            out,
            export_pcap: pcap_out,
        } => {
            let trace = match (scenario, pcap) {
                (Some(s), _) => {
                    let run = load_scenario(&s)?.run()?;
                    if vantage.is_empty() {
                        run.capture()?
                    } else {
                        run.sim.capture(&vantage)?
                    }
                }
                (None, Some(p)) => {
                    let imported = import_pcap(&fs::read(&p).with_context(|| format!("reading {}", p.display()))?)?;
                    if imported.skipped > 0 {
                        eprintln!("skipped {} non-IPv4 or non-TCP/UDP frames", imported.skipped);
                    }
                    imported.trace
                }
                (None, None) => bail!("need --scenario or --pcap"),
            };
            write(&out, trace.to_jsonl())?;
            if let Some(p) = pcap_out {
                write(&p, export_pcap(&trace))?;
            }
            println!("{} records", trace.len());
        }
        Command::Curate { input, out } => {
            let raw = read_trace(&input)?;
            let cur = curate(&raw)?;
            write(&out, cur.to_jsonl())?;
            println!("{} of {} records kept", cur.len(), raw.len());
        }
        Command::Features {
            input,
            features,
            out,
            correlations,
        } => {
            let trace = read_trace(&input)?;
            let fs_ = features.set();
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut head = fs_.columns();
            head.push("class".into());
            w.write_record(&head)?;
            for r in &trace.records {
                let mut row: Vec<String> = fs_.extract(r).iter().map(|v| v.to_string()).collect();
                row.push(r.ground_truth_class.map(|c| c.to_string()).unwrap_or_default());
                w.write_record(&row)?;
            }
            write(&out, w.into_inner()?)?;
            if let Some(path) = correlations {
                let rows = pearson_correlations(&Dataset::from_trace(&trace, &fs_)?)?;
                let mut w = csv::Writer::from_writer(Vec::new());
                for r in &rows {
                    w.serialize(r)?;
                }
                write(&path, w.into_inner()?)?;
            }
        }
        Command::Entropy { input, out } => {
            let trace = read_trace(&input)?;
            let stats = summarize(&trace);
            match stats.mean_entropy {
                Some(m) => println!("mean payload entropy {m:.4} bits over {} packets", stats.entropy_series.len()),
                None => println!("no payload-bearing packets"),
            }
            if let Some(dir) = out {
                report_trace(&trace, &dir)?;
            }
        }
        Command::Fano { nodes, entropy, mi, set } => {
            let report = match (nodes, entropy, set) {
                (Some(n), _, _) => uniform_fano(n)?,
                (None, Some(h), Some(s)) => fano_lower_bound(h, mi, s)?,
                _ => bail!("give --nodes, or --entropy with --set"),
            };
            println!("{}", json(&report));
        }
        Command::Kmeans {
            input,
            max_k,
            restarts,
            seed,
            out,
        } => {
            use rand::SeedableRng;
            let trace = read_trace(&input)?;
            let points = tunnelsim::experiment::clustering_points(&trace);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scan = elbow_scan(&points, 1..=max_k.min(points.len()), restarts, &mut rng)?;
            let rows: Vec<(usize, f64)> = scan.iter().map(|m| (m.k, m.wcss)).collect();
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["k", "wcss"])?;
            for (k, v) in &rows {
                w.write_record([k.to_string(), v.to_string()])?;
            }
            write(&out.join("elbow.csv"), w.into_inner()?)?;
            write(&out.join("elbow.svg"), tunnelsim::report::elbow_svg(&rows))?;
            if let Some(r) = tunnelsim::learn::elbow_ratio(&scan) {
                println!("elbow ratio (W3-W4)/(W4-W5) = {r:.3}");
            }
        }
        Command::Train {
            input,
            features,
            seed,
            hyper,
            out,
            report,
        } => {
            use rand::SeedableRng;
            let hyper: Hyper = match hyper {
                Some(p) => toml::from_str(&fs::read_to_string(&p)?).with_context(|| format!("in {}", p.display()))?,
                None => Hyper::default(),
            };
            let trace = read_trace(&input)?;
            let labels = trace_labels(&trace)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let idx = tunnelsim::learn::balanced_indices(&labels, hyper.max_per_class, &mut rng)?;
            let data = Dataset::from_trace(&trace, &features.set())?.subset(&idx);
            let (train, val) = stratified_split(&data, hyper.validation_fraction, &mut rng);
            let (model, rep) = cnn_train(&train, &val, &hyper, seed)?;
            write(&out, model.to_json())?;
            if let Some(p) = report {
                write(&p, json(&rep))?;
            }
            println!(
                "validation accuracy {:.4} (best epoch {} of {})",
                rep.final_validation_accuracy,
                rep.best_epoch,
                rep.epochs.len()
            );
        }
        Command::Eval { model, input, out } => {
            let model = CnnModel::from_json(&fs::read_to_string(&model)?)?;
            let trace = read_trace(&input)?;
            let text = if trace.records.iter().all(|r| r.ground_truth_class.is_some()) {
                let rep = cnn_evaluate(&model, &Dataset::from_trace(&trace, &model.features)?)?;
                println!("accuracy {:.4}, balanced {:.4}", rep.accuracy, rep.balanced_accuracy);
                json(&rep)
            } else {
                let vectors: Vec<Vec<f64>> = trace.records.iter().map(|r| model.features.extract(r)).collect();
                let counts = cnn_assign(&model, &vectors)?;
                println!("assignments {counts:?}");
                json(&counts)
            };
            if let Some(p) = out {
                write(&p, text)?;
            }
        }
        Command::Run(args) => {
            let mut spec = match &args.config {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    let mut s = ExperimentSpec::from_toml_str(&text).with_context(|| format!("in {}", p.display()))?;
                    s.id = args.id;
                    s
                }
                None => ExperimentSpec::new(args.id),
            };
            if let Some(s) = args.seed {
                spec.seed = s;
            }
            if !args.variants.is_empty() {
                spec.variants = args.variants.clone();
            }
            if let Some(n) = args.nodes {
                spec.nodes = n;
            }
            if let Some(n) = args.requests {
                spec.requests = n;
            }
            if args.pcap.is_some() {
                spec.pcap = args.pcap.clone();
            }
            spec.validate()?;
            let outcome = run_experiment(&spec, &cli.out_root)?;
            for c in &outcome.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("artifacts in {}", cli.out_root.join(spec.id.name()).display());
            return Ok(outcome.passed());
        }
        Command::Report { input, out } => {
            let files = if input.is_dir() {
                report_dir(&input)?
            } else {
                let dir = out.unwrap_or_else(|| input.with_extension("report"));
                report_trace(&read_trace(&input)?, &dir)?
            };
            println!("{} files written", files.len());
        }
    }
    Ok(true)
}
