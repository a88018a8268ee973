//! Command-line front end.

use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::adaptation::{process_stream, Resources, StreamRecord};
use crate::clustering::{adjusted_rand_index, kmeans};
use crate::config::{load_config, ConfigOverrides, Mode, PseudoLabeling, RunConfig, Toggles};
use crate::encoder::{serve, Encoder, FixtureCache, RemoteEncoder};
use crate::error::{Result, TataError};
use crate::io::{
    manifest_path, read_bank, read_raw, row_to_embedding, to_f32_rows, write_bank,
    write_embedding_file, write_predictions, write_summary, EmbeddingFile, FileKind, Manifest,
};
use crate::numerics::{Embedding, Role};
use crate::synthetic::{SyntheticBenchmark, SyntheticParams};

#[derive(Debug, Parser)]
#[command(
    name = "tata",
    version,
    about = "Adapt zero-shot classification to a shifted embedding stream"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags below take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Prompt fixture cache file, `tcp://host:port`, or `exec:<command>`.
    #[arg(long, global = true)]
    pub encoder: Option<String>,
    /// Seconds to wait for each encoder response.
    #[arg(long, global = true, default_value_t = 30)]
    pub encoder_timeout: u64,
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Enabled components, e.g. `aap,bdc,mac,sv` or `none`.
    #[arg(long, global = true)]
    pub toggle: Option<String>,
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    #[arg(long, global = true)]
    pub k1: Option<usize>,
    #[arg(long, global = true)]
    pub k3: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub tau_tilde: Option<f64>,
    #[arg(long, global = true)]
    pub tau_vv: Option<f64>,
    #[arg(long, global = true)]
    pub n_attr: Option<usize>,
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    #[arg(long, global = true)]
    pub capacity: Option<usize>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub recluster: Option<usize>,
    #[arg(long, global = true)]
    pub pseudo_labeling: Option<PseudoLabeling>,
}

impl GlobalArgs {
    fn overrides(&self) -> Result<ConfigOverrides> {
        Ok(ConfigOverrides {
            classes: self.classes,
            k1: self.k1,
            k3: self.k3,
            alpha: self.alpha,
            tau: self.tau,
            tau_tilde: self.tau_tilde,
            tau_vv: self.tau_vv,
            n_attr: self.n_attr,
            theta: self.theta,
            capacity: self.capacity,
            warmup: self.warmup,
            recluster: self.recluster,
            mode: self.mode,
            pseudo_labeling: self.pseudo_labeling,
            seed: self.seed,
            toggles: self.toggle.as_deref().map(Toggles::parse).transpose()?,
        })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        load_config(self.config.as_deref(), &self.overrides()?)
    }

    fn open_encoder(&self) -> Result<Box<dyn Encoder>> {
        let endpoint = self
            .encoder
            .as_deref()
            .ok_or_else(|| TataError::InvalidValue {
                field: "encoder",
                reason: "pass --encoder with a prompt cache file or an endpoint".into(),
            })?;
        let timeout = Duration::from_secs(self.encoder_timeout);
        if endpoint.starts_with("tcp://") || endpoint.starts_with("exec:") {
            return Ok(Box::new(RemoteEncoder::from_endpoint(endpoint, timeout)?));
        }
        let path = Path::new(endpoint);
        if path.exists() {
            Ok(Box::new(load_prompt_cache(path)?))
        } else if endpoint.contains(':') {
            Ok(Box::new(RemoteEncoder::from_endpoint(endpoint, timeout)?))
        } else {
            Err(TataError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("encoder cache {endpoint} not found"),
            )))
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify an image-embedding stream.
    Run(RunArgs),
    /// K-means on an image-embedding file.
    Cluster(ClusterArgs),
    /// Check the distance-covariance kernel against naive loops.
    BdcSelftest(SelftestArgs),
    /// Write a synthetic benchmark (images, banks, prompt cache) to a directory.
    ExportFixtures(ExportArgs),
    /// Answer encoder protocol requests on stdin/stdout from a prompt cache.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub nouns: Option<PathBuf>,
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    /// Predictions, one JSON object per line; the summary goes to `<out>.summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Cluster count; defaults to the class count in the manifest.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub per_class: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub cache: PathBuf,
}

pub fn load_prompt_cache(path: &Path) -> Result<FixtureCache> {
    let bank = read_bank(path)?;
    let texts: Vec<String> = (0..bank.len()).map(|i| bank.text(i).to_string()).collect();
    let embs: Vec<Embedding> = (0..bank.len()).map(|i| bank.embedding(i).clone()).collect();
    FixtureCache::from_texts(&texts, &embs)
}

pub fn write_prompt_cache(path: &Path, cache: &FixtureCache) -> Result<()> {
    let entries = cache.text_entries();
    let dim = entries.first().map_or(0, |(_, e)| e.dim());
    let texts = entries.iter().map(|(t, _)| t.to_string()).collect();
    let embs: Vec<Embedding> = entries.iter().map(|(_, e)| (*e).clone()).collect();
    write_embedding_file(
        path,
        &EmbeddingFile {
            manifest: Manifest::for_texts(FileKind::Prompts, texts, dim),
            rows: to_f32_rows(&embs),
        },
    )
}

/// Loaded image stream. `malformed` counts rows that failed to parse.
pub struct ImageStream {
    pub records: Vec<StreamRecord>,
    pub class_names: Option<Vec<String>>,
    pub malformed: usize,
}

pub fn load_images(path: &Path) -> Result<ImageStream> {
    let file = read_raw(path)?;
    let m = file.manifest;
    let mut records = Vec::with_capacity(file.rows.len());
    let mut malformed = 0;
    for (i, row) in file.rows.iter().enumerate() {
        match row_to_embedding(row, Role::Image) {
            Ok(e) => records.push(StreamRecord::new(
                m.ids[i].clone(),
                e,
                m.labels.as_ref().map(|l| l[i]),
            )),
            Err(e) => {
                warn!("skipping row {} ({}): {e}", i, m.ids[i]);
                malformed += 1;
            }
        }
    }
    Ok(ImageStream {
        records,
        class_names: m.class_names,
        malformed,
    })
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

fn run(global: &GlobalArgs, args: &RunArgs) -> Result<()> {
    let config = global.run_config()?;
    let stream = load_images(&args.images)?;
    let class_names = stream.class_names.ok_or_else(|| {
        TataError::ManifestMismatch(format!(
            "{} lists no class_names",
            manifest_path(&args.images).display()
        ))
    })?;
    let nouns = args.nouns.as_deref().map(read_bank).transpose()?;
    let attributes = args.attributes.as_deref().map(read_bank).transpose()?;
    let encoder = global.open_encoder()?;
    let res = Resources {
        class_names: &class_names,
        nouns: nouns.as_ref(),
        attributes: attributes.as_ref(),
        encoder: encoder.as_ref(),
    };
    let outcome = process_stream(&stream.records, &res, &config)?;
    write_predictions(&outcome.predictions, &args.out)?;
    let mut summary = outcome.summary;
    summary.skipped += stream.malformed;
    write_summary(&summary, &summary_path(&args.out))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct ClusterLine<'a> {
    id: &'a str,
    cluster: usize,
}

#[derive(Serialize)]
struct ClusterReport {
    clusters: usize,
    iterations: usize,
    inertia: f64,
    sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adjusted_rand_index: Option<f64>,
}

fn cluster(global: &GlobalArgs, args: &ClusterArgs) -> Result<()> {
    let config = global.run_config()?;
    let stream = load_images(&args.images)?;
    let n = args
        .n
        .or(config.classes)
        .or(stream.class_names.as_ref().map(Vec::len))
        .ok_or_else(|| TataError::InvalidValue {
            field: "n",
            reason: "no cluster count given and the manifest lists no classes".into(),
        })?;
    let points: Vec<Embedding> = stream.records.iter().map(|r| r.image.clone()).collect();
    let model = kmeans(&points, n, config.seed)?;
    let mut text = String::new();
    for (r, &c) in stream.records.iter().zip(&model.assignments) {
        text.push_str(&serde_json::to_string(&ClusterLine {
            id: &r.id,
            cluster: c,
        })?);
        text.push('\n');
    }
    std::fs::write(&args.out, text)?;
    let labels: Option<Vec<usize>> = stream.records.iter().map(|r| r.label).collect();
    let report = ClusterReport {
        clusters: n,
        iterations: model.iterations,
        inertia: model.inertia,
        sizes: model.cluster_sizes(),
        adjusted_rand_index: labels.map(|l| adjusted_rand_index(&l, &model.assignments)),
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn selftest(args: &SelftestArgs) -> Result<bool> {
    let checks = crate::selftest::run(0, args.trials)?;
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn write_images(
    path: &Path,
    records: &[StreamRecord],
    class_names: &[String],
    notes: &str,
) -> Result<()> {
    let ids = records.iter().map(|r| r.id.clone()).collect();
    let embs: Vec<Embedding> = records.iter().map(|r| r.image.clone()).collect();
    let mut manifest = Manifest::new(FileKind::Images, ids, embs[0].dim());
    manifest.labels = records.iter().map(|r| r.label).collect();
    manifest.class_names = Some(class_names.to_vec());
    manifest.notes = Some(notes.to_string());
    write_embedding_file(
        path,
        &EmbeddingFile {
            manifest,
            rows: to_f32_rows(&embs),
        },
    )
}

pub fn export_fixtures(dir: &Path, seed: u64, per_class: usize, n_attr: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = SyntheticParams {
        per_class,
        ..SyntheticParams::default()
    };
    let bench = SyntheticBenchmark::generate(params, seed, n_attr)?;
    let names = bench.class_names();
    write_images(
        &dir.join("source.tata"),
        &bench.source,
        names,
        "synthetic source domain",
    )?;
    write_images(
        &dir.join("shifted.tata"),
        &bench.shifted,
        names,
        "synthetic shifted domain",
    )?;
    write_bank(&dir.join("nouns.tata"), FileKind::Nouns, &bench.nouns)?;
    write_bank(
        &dir.join("attributes.tata"),
        FileKind::Attributes,
        &bench.attributes,
    )?;
    write_prompt_cache(&dir.join("prompts.tata"), &bench.prompts)?;
    info!("wrote {} prompts to {}", bench.prompts.len(), dir.display());
    Ok(())
}

/// Runs the parsed command; returns the process exit code.
pub fn execute(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => run(&cli.global, a).map(|_| true),
        Command::Cluster(a) => cluster(&cli.global, a).map(|_| true),
        Command::BdcSelftest(a) => selftest(a),
        Command::ExportFixtures(a) => cli
            .global
            .run_config()
            .and_then(|c| export_fixtures(&a.out, c.seed, a.per_class, c.n_attr).map(|_| true)),
        Command::Serve(a) => load_prompt_cache(&a.cache).and_then(|cache| {
            let stdin = std::io::stdin().lock();
            serve(&cache, stdin, std::io::stdout().lock()).map(|_| true)
        }),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
