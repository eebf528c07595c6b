//! Command-line entry points.
//!
//! Every command writes its artifacts under `--out` with fixed names and ends
//! by writing `manifest.json` there. Running a command twice with the same
//! inputs rewrites identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::detector::{load_checkpoint, Detector, Label, Network};
use crate::error::{Error, Result};
use crate::evaluation::{
    clustering_quality, detect_scenes, fill_detection_metrics, fill_discovery_metrics, kmeans,
    MetricReport, TrackingMetrics, CSV_HEADER,
};
use crate::geometry::{iou, BBox};
use crate::synthdata::{
    generate_scenes, load_dataset, serialize_dataset, Dataset, OracleTeacher, Roster, Scene, Split,
};
use crate::tracker::{
    gt_track_boxes, oracle_detections, run as track_frames, run_detections, TrackRun,
};
use crate::trainer::{self, load_splits, RunManifest, TrainConfig, MANIFEST_FILE, METRICS_FILE};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "OWD_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "owd",
    version,
    about = "Desk-scale open-world detection, discovery and tracking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset in the annotation format.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Write the configured tracking sequences instead of still scenes.
        #[arg(long)]
        sequences: bool,
    },
    /// Train a detector.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Resume from a `last.ckpt` of an interrupted run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// mAP and U-Recall of a checkpoint.
    EvalDetect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Clustering quality of embeddings at unknown ground-truth boxes.
    EvalEmbed {
        #[command(flatten)]
        common: Common,
        /// One or more checkpoints; each becomes a row of `embed.csv`.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Cluster the embeddings of detected unknown objects.
    Discover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Cluster every detection, not only those labelled unknown.
        #[arg(long)]
        all_detections: bool,
    },
    /// Track objects through sequences.
    Track {
        #[command(flatten)]
        common: Common,
        /// Detector checkpoint; without it ground-truth boxes with oracle
        /// teacher embeddings are tracked.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence dataset written by `gen-data --sequences`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Merge run directories into a comparison table and loss plots.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Manifest written by every command except `train`, which writes a [`RunManifest`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_report: Option<String>,
    pub outputs: Vec<String>,
}

impl CommandManifest {
    fn new(command: &str, cfg: &TrainConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            checkpoints: Vec::new(),
            dataset: cfg.data.dataset.as_ref().map(|p| p.display().to_string()),
            metric_report: None,
            outputs: Vec::new(),
        }
    }

    fn save(&self, out: &Path) -> Result<()> {
        write_text(
            &out.join(MANIFEST_FILE),
            &(serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"),
        )
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint and checks it against the roster.
pub fn load_network(path: &Path, roster: &Roster) -> Result<Network> {
    let ck = load_checkpoint(path)?;
    if ck.detector.num_classes != roster.num_known() {
        return Err(Error::schema(
            path,
            format!(
                "checkpoint has {} classes, roster has {} known categories",
                ck.detector.num_classes,
                roster.num_known()
            ),
        ));
    }
    Network::from_params(ck.detector, ck.params)
}

/// Evaluation scenes: a whole dataset when given, else the configured test split.
fn eval_scenes(cfg: &TrainConfig, dataset: Option<&Path>) -> Result<(Roster, Vec<Scene>)> {
    match dataset {
        Some(dir) => {
            let ds = load_dataset(dir)?;
            Ok((ds.roster, ds.scenes))
        }
        None => {
            let (roster, _, _, test) = load_splits(cfg)?;
            Ok((roster, test))
        }
    }
}

fn config_echo(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli.command),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            Ok(())
        }
        Err(e) => Err(Error::Config(e.to_string())),
    }
}

/// Caps the global worker pool from `OWD_THREADS`. Call once, before any work.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer")))?;
        if n == 0 {
            return Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer"
            )));
        }
        // A pool built earlier in the process wins; that is not an error.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, sequences } => gen_data(&common, sequences),
        Command::Train {
            common,
            dataset,
            checkpoint,
        } => train(&common, dataset, checkpoint),
        Command::EvalDetect {
            common,
            checkpoint,
            dataset,
        } => eval_detect(&common, &checkpoint, dataset.as_deref()),
        Command::EvalEmbed {
            common,
            checkpoint,
            dataset,
        } => eval_embed(&common, &checkpoint, dataset.as_deref()),
        Command::Discover {
            common,
            checkpoint,
            dataset,
            all_detections,
        } => discover(&common, &checkpoint, dataset.as_deref(), all_detections),
        Command::Track {
            common,
            checkpoint,
            dataset,
        } => track(&common, checkpoint.as_deref(), dataset.as_deref()),
        Command::Report { out, runs } => report(&out, &runs).map(|_| ()),
    }
}

/// Instance counts of a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub images: usize,
    pub instances: usize,
    pub known: usize,
    pub unknown: usize,
}

impl DatasetCounts {
    pub fn of(scenes: &[Scene]) -> Self {
        let mut c = Self {
            images: scenes.len(),
            ..Self::default()
        };
        for r in scenes.iter().flat_map(|s| &s.records) {
            c.instances += 1;
            match r.split {
                Split::Known => c.known += 1,
                Split::Unknown => c.unknown += 1,
            }
        }
        c
    }
}

fn gen_data(common: &Common, sequences: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let spec = &cfg.data.scene;
    let scenes: Vec<Scene> = if sequences {
        // Frame ids restart in every sequence; the dataset needs unique ids.
        let mut frames: Vec<Scene> = cfg.tracking.generate(spec)?.into_iter().flatten().collect();
        for (i, s) in frames.iter_mut().enumerate() {
            s.image_id = i as u64;
        }
        frames
    } else {
        let n = cfg.data.train_scenes + cfg.data.val_scenes + cfg.data.test_scenes;
        generate_scenes(cfg.data_seed(), 0, n, spec)?
    };
    let counts = DatasetCounts::of(&scenes);
    create_dir(&common.out)?;
    serialize_dataset(
        &Dataset {
            roster: spec.roster.clone(),
            scenes,
        },
        &common.out,
    )?;
    println!(
        "images {} instances {} known {} unknown {}",
        counts.images, counts.instances, counts.known, counts.unknown
    );
    let mut m = CommandManifest::new("gen-data", &cfg);
    m.outputs = vec![
        crate::synthdata::ANNOTATION_FILE.into(),
        "images".into(),
        "masks".into(),
    ];
    m.save(&common.out)
}

fn train(common: &Common, dataset: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if dataset.is_some() {
        cfg.data.dataset = dataset;
    }
    let m = match checkpoint {
        Some(ck) => trainer::resume(&cfg, &common.out, &ck)?,
        None => trainer::train(&cfg, &common.out)?,
    };
    let r = MetricReport::load(&common.out.join(&m.metric_report))?;
    println!(
        "best epoch {} val U-Recall {:.4}; test mAP {:.4} U-Recall {:.4} NMI {:.4}",
        m.best_epoch,
        m.best_val_u_recall,
        r.map.unwrap_or(0.0),
        r.u_recall.unwrap_or(0.0),
        r.unknown_nmi.unwrap_or(0.0)
    );
    Ok(())
}

fn eval_detect(common: &Common, checkpoint: &Path, dataset: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let (roster, scenes) = eval_scenes(&cfg, dataset)?;
    let net = load_network(checkpoint, &roster)?;
    let mut report = MetricReport::new(cfg.seed, config_echo(&cfg));
    fill_detection_metrics(&mut report, &net, &scenes, &roster, &cfg.eval)?;
    create_dir(&common.out)?;
    report.save(&common.out.join(METRICS_FILE))?;
    println!(
        "mAP {:.4} U-Recall {:.4}",
        report.map.unwrap_or(0.0),
        report.u_recall.unwrap_or(0.0)
    );
    let mut m = CommandManifest::new("eval-detect", &cfg);
    m.checkpoints = vec![checkpoint.display().to_string()];
    m.dataset = dataset.map(|p| p.display().to_string());
    m.metric_report = Some(METRICS_FILE.into());
    m.outputs = vec![METRICS_FILE.into()];
    m.save(&common.out)
}

pub const EMBED_CSV: &str = "embed.csv";

fn eval_embed(common: &Common, checkpoints: &[PathBuf], dataset: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let (roster, scenes) = eval_scenes(&cfg, dataset)?;
    create_dir(&common.out)?;
    let mut csv = format!("{CSV_HEADER}\n");
    let mut outputs = Vec::new();
    for (i, ck) in checkpoints.iter().enumerate() {
        let net = load_network(ck, &roster)?;
        let mut report = MetricReport::new(cfg.seed, config_echo(&cfg));
        fill_discovery_metrics(&mut report, &net, &scenes, &roster, &cfg.eval)?;
        let name = if checkpoints.len() == 1 {
            METRICS_FILE.to_string()
        } else {
            format!("metrics-{i}.json")
        };
        report.save(&common.out.join(&name))?;
        csv.push_str(&report.csv_row(&ck.display().to_string()));
        csv.push('\n');
        println!(
            "{}: NMI {:.4} purity {:.4}",
            ck.display(),
            report.unknown_nmi.unwrap_or(0.0),
            report.unknown_purity.unwrap_or(0.0)
        );
        outputs.push(name);
    }
    write_text(&common.out.join(EMBED_CSV), &csv)?;
    let mut m = CommandManifest::new("eval-embed", &cfg);
    m.checkpoints = checkpoints
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    m.dataset = dataset.map(|p| p.display().to_string());
    m.metric_report = Some(outputs[0].clone());
    outputs.push(EMBED_CSV.into());
    m.outputs = outputs;
    m.save(&common.out)
}

/// One clustered detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredInstance {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub cluster: usize,
    /// Unknown category of the matched ground truth, when there is one.
    pub category: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    pub k: usize,
    pub instances: Vec<DiscoveredInstance>,
}

pub const DISCOVERY_FILE: &str = "discovery.json";

fn discover(common: &Common, checkpoint: &Path, dataset: Option<&Path>, all: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let (roster, scenes) = eval_scenes(&cfg, dataset)?;
    let net = load_network(checkpoint, &roster)?;
    let results = detect_scenes(&net, &scenes, &roster)?;
    let mut instances = Vec::new();
    let mut embeddings = Vec::new();
    for (scene, res) in scenes.iter().zip(&results) {
        for p in res
            .predictions
            .iter()
            .filter(|p| all || p.label == Label::Unknown)
        {
            let category = scene
                .unknown_records()
                .map(|r| (iou(&r.bbox, &p.bbox), r.category))
                .filter(|(v, _)| *v >= cfg.eval.iou_thresh)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, c)| c);
            instances.push(DiscoveredInstance {
                image_id: scene.image_id,
                bbox: p.bbox,
                score: p.objectness,
                cluster: 0,
                category,
            });
            embeddings.push(p.embedding.clone());
        }
    }
    let k = cfg.eval.discovery_k.unwrap_or_else(|| roster.num_unknown());
    let mut report = MetricReport::new(cfg.seed, config_echo(&cfg));
    if embeddings.len() >= k && k > 0 {
        let clusters = kmeans(&embeddings, k, cfg.seed)?;
        for (inst, c) in instances.iter_mut().zip(clusters) {
            inst.cluster = c;
        }
        let (e, l): (Vec<Vec<f64>>, Vec<u32>) = instances
            .iter()
            .zip(&embeddings)
            .filter_map(|(i, e)| i.category.map(|c| (e.clone(), c)))
            .unzip();
        match clustering_quality(&e, &l, k, cfg.seed) {
            Ok(q) => {
                report.unknown_nmi = Some(q.nmi);
                report.unknown_purity = Some(q.purity);
            }
            Err(Error::DegenerateInput(_)) => report.unknown_nmi = Some(0.0),
            Err(e) => return Err(e),
        }
    } else {
        report.unknown_nmi = Some(0.0);
    }
    create_dir(&common.out)?;
    let d = Discovery { k, instances };
    write_text(
        &common.out.join(DISCOVERY_FILE),
        &(serde_json::to_string_pretty(&d).expect("discovery serializes") + "\n"),
    )?;
    report.save(&common.out.join(METRICS_FILE))?;
    let matched = d.instances.iter().filter(|i| i.category.is_some()).count();
    println!(
        "{} instances in {k} clusters; {matched} on unknown objects, NMI {:.4}",
        d.instances.len(),
        report.unknown_nmi.unwrap_or(0.0)
    );
    let mut m = CommandManifest::new("discover", &cfg);
    m.checkpoints = vec![checkpoint.display().to_string()];
    m.dataset = dataset.map(|p| p.display().to_string());
    m.metric_report = Some(METRICS_FILE.into());
    m.outputs = vec![DISCOVERY_FILE.into(), METRICS_FILE.into()];
    m.save(&common.out)
}

/// Groups dataset frames into sequences ordered by frame index.
fn dataset_sequences(dir: &Path) -> Result<(Roster, Vec<Vec<Scene>>)> {
    let ds = load_dataset(dir)?;
    let mut seqs: BTreeMap<u64, Vec<Scene>> = BTreeMap::new();
    for s in ds.scenes {
        let Some((seq, _)) = s.frame else {
            return Err(Error::schema(
                dir,
                format!("image {} is not a sequence frame", s.image_id),
            ));
        };
        seqs.entry(seq).or_default().push(s);
    }
    let mut out = Vec::with_capacity(seqs.len());
    for (_, mut frames) in seqs {
        frames.sort_by_key(|s| s.frame.map(|f| f.1));
        out.push(frames);
    }
    Ok((ds.roster, out))
}

pub const TRACKS_DIR: &str = "tracks";
pub const TRACK_LOG_FILE: &str = "track_log.json";

/// Tracks each sequence and scores it against the ground truth.
pub fn track_sequences(
    sequences: &[Vec<Scene>],
    detector: Option<&(dyn Detector + Sync)>,
    cfg: &TrainConfig,
    roster: &Roster,
) -> Result<Vec<(TrackRun, TrackingMetrics)>> {
    let teacher = OracleTeacher::new(roster, cfg.teacher.clone())?;
    sequences
        .iter()
        .map(|frames| {
            let run = match detector {
                Some(d) => track_frames(frames, d, &cfg.tracker)?,
                None => {
                    run_detections(&oracle_detections(frames, &teacher, roster)?, &cfg.tracker)?
                }
            };
            let m =
                crate::evaluation::tracking_metrics(&run.track_boxes(), &gt_track_boxes(frames))?;
            Ok((run, m))
        })
        .collect()
}

fn track(common: &Common, checkpoint: Option<&Path>, dataset: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let (roster, sequences) = match dataset {
        Some(dir) => dataset_sequences(dir)?,
        None => (
            cfg.data.scene.roster.clone(),
            cfg.tracking.generate(&cfg.data.scene)?,
        ),
    };
    let net = checkpoint.map(|p| load_network(p, &roster)).transpose()?;
    let runs = track_sequences(
        &sequences,
        net.as_ref().map(|n| n as &(dyn Detector + Sync)),
        &cfg,
        &roster,
    )?;
    let tracks_dir = common.out.join(TRACKS_DIR);
    create_dir(&tracks_dir)?;
    let mut logs = Vec::with_capacity(runs.len());
    for (i, (run, _)) in runs.iter().enumerate() {
        run.save_mot(&tracks_dir.join(format!("seq_{i:03}.txt")))?;
        logs.push(serde_json::json!({ "sequence": i, "frames": run.log }));
    }
    write_text(
        &common.out.join(TRACK_LOG_FILE),
        &(serde_json::to_string_pretty(&logs).expect("log serializes") + "\n"),
    )?;
    let metrics: Vec<TrackingMetrics> = runs.into_iter().map(|(_, m)| m).collect();
    let pooled = TrackingMetrics::pooled(&metrics);
    let mut report = MetricReport::new(cfg.seed, config_echo(&cfg));
    report.tracking = Some(pooled.clone());
    report.save(&common.out.join(METRICS_FILE))?;
    println!(
        "{} sequences: id switches {} (mean {:.2}), idf1 {:.4}, precision {:.4}, recall {:.4}",
        metrics.len(),
        pooled.id_switches,
        pooled.id_switches as f64 / metrics.len().max(1) as f64,
        pooled.idf1_like,
        pooled.precision,
        pooled.recall
    );
    let mut m = CommandManifest::new("track", &cfg);
    m.checkpoints = checkpoint
        .map(|p| vec![p.display().to_string()])
        .unwrap_or_default();
    m.dataset = dataset.map(|p| p.display().to_string());
    m.metric_report = Some(METRICS_FILE.into());
    m.outputs = vec![
        TRACKS_DIR.into(),
        TRACK_LOG_FILE.into(),
        METRICS_FILE.into(),
    ];
    m.save(&common.out)
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub refine: Option<bool>,
    pub transfer: Option<bool>,
    pub report: MetricReport,
    pub curve: Vec<trainer::EpochRecord>,
}

pub const REPORT_TABLE: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const PLOTS_DIR: &str = "plots";

/// Reads the manifest and metric report of a run directory.
pub fn read_run(dir: &Path) -> Result<ReportRow> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::schema(&path, "manifest not found"));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::schema(&path, e.to_string()))?;
    let (report_file, refine, transfer, curve) =
        match serde_json::from_value::<RunManifest>(value.clone()) {
            Ok(m) => (
                Some(m.metric_report),
                Some(m.enable_refine),
                Some(m.enable_transfer),
                m.curve,
            ),
            Err(_) => {
                let m: CommandManifest = serde_json::from_value(value)
                    .map_err(|e| Error::schema(&path, e.to_string()))?;
                (m.metric_report, None, None, Vec::new())
            }
        };
    let report_file =
        report_file.ok_or_else(|| Error::schema(&path, "manifest names no metric report"))?;
    Ok(ReportRow {
        run: dir.display().to_string(),
        refine,
        transfer,
        report: MetricReport::load(&dir.join(report_file))?,
        curve,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn fmt_flag(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "+",
        Some(false) => "-",
        None => "",
    }
}

/// Markdown ablation table, one row per run.
pub fn render_table(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "| run | refine | transfer | seed | mAP | U-Recall | NMI | purity | id switches | idf1 |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let t = r.report.tracking.as_ref();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.run,
            fmt_flag(r.refine),
            fmt_flag(r.transfer),
            r.report.seed,
            fmt_opt(r.report.map),
            fmt_opt(r.report.u_recall),
            fmt_opt(r.report.unknown_nmi),
            fmt_opt(r.report.unknown_purity),
            t.map_or("-".into(), |t| t.id_switches.to_string()),
            fmt_opt(t.map(|t| t.idf1_like)),
        );
    }
    s
}

/// Line plot of named series against epoch, as SVG.
pub fn loss_plot_svg(title: &str, series: &[(&str, Vec<f64>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 6] = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
    ];
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let x = |i: usize| {
        M + (W - 2.0 * M)
            * if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            }
    };
    let y = |v: f64| H - M - (H - 2.0 * M) * (v / ymax);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{M}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"4\" y=\"{t}\" font-family=\"sans-serif\" font-size=\"10\">{ymax:.3}</text>\n\
         <text x=\"{r}\" y=\"{l}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">epoch {n}</text>\n",
        xml_escape(title),
        b = H - M,
        r = W - M,
        t = M + 4.0,
        l = H - M + 14.0,
    );
    for (k, (name, v)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = v
            .iter()
            .enumerate()
            .map(|(i, &p)| format!("{:.2},{:.2}", x(i), y(p)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>",
            W - M - 90.0,
            M + 14.0 * k as f64,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes the comparison table, CSV and per-run loss plots. Returns the rows.
pub fn report(out: &Path, runs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    let rows: Vec<ReportRow> = runs.iter().map(|d| read_run(d)).collect::<Result<_>>()?;
    create_dir(out)?;
    let table = render_table(&rows);
    write_text(&out.join(REPORT_TABLE), &table)?;
    let mut csv = format!("{CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.report.csv_row(&r.run));
        csv.push('\n');
    }
    write_text(&out.join(REPORT_CSV), &csv)?;
    let plots = out.join(PLOTS_DIR);
    create_dir(&plots)?;
    let mut outputs = vec![REPORT_TABLE.to_string(), REPORT_CSV.to_string()];
    for (i, r) in rows.iter().enumerate().filter(|(_, r)| !r.curve.is_empty()) {
        let pick =
            |f: fn(&trainer::EpochRecord) -> f64| r.curve.iter().map(f).collect::<Vec<f64>>();
        let svg = loss_plot_svg(
            &format!("{} loss", r.run),
            &[
                ("total", pick(|e| e.loss.total)),
                ("detection", pick(|e| e.loss.detection)),
                ("refine", pick(|e| e.loss.refine)),
                ("transfer", pick(|e| e.loss.transfer)),
            ],
        );
        let name = format!("{PLOTS_DIR}/run_{i:02}_loss.svg");
        write_text(&out.join(&name), &svg)?;
        outputs.push(name);
    }
    print!("{table}");
    let m = CommandManifest {
        command: "report".into(),
        config_hash: String::new(),
        seed: 0,
        checkpoints: Vec::new(),
        dataset: None,
        metric_report: None,
        outputs,
    };
    m.save(out)?;
    Ok(rows)
}
