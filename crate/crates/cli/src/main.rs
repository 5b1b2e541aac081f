use std::collections::HashSet;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nnaug_core::cluster::{conditioning_manifest, kmeans, KMeansConfig, PromptSource};
use nnaug_core::dataset::{
    disjoint_validation_split, exclude_insufficient_classes, make_replicas, merge, stratified_subsample, DatasetManifest,
};
use nnaug_core::dedup::{estimate_true_duplicates, leakage_report, render_percent, CandidatePair, DEFAULT_RADIUS};
use nnaug_core::index::{ingest, RecordMeta};
use nnaug_core::matrix::Matrix;
use nnaug_core::prompts::{clip_prompts, sariyildiz_prompts, simple_prompt, ClassSynset, ClipTemplates, PromptSpec, SariyildizTemplates};
use nnaug_core::retrieval::RetrievalPolicy;
use nnaug_core::{jsonl, Index};
use nnaug_service::pipeline::{self, AssembleParams, DedupScanParams, DownloadParams, RetrieveParams};
use nnaug_service::{ServiceConfig, SplitsFile};

#[derive(Parser)]
#[command(name = "nnaug", version, about = "Retrieval-based training data augmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the embedding index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Generate class prompts.
    #[command(subcommand)]
    Prompts(PromptsCmd),
    /// Retrieve neighbors for every class in a prompt file.
    Retrieve(RetrieveArgs),
    /// Download retrieved images.
    Download(DownloadArgs),
    /// Perceptual-hash duplicate audit.
    #[command(subcommand)]
    Dedup(DedupCmd),
    /// Subsample, split, resample and merge dataset manifests.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Cluster one class's image embeddings for conditioning.
    Cluster(ClusterArgs),
    /// Run the review service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum IndexCmd {
    Build {
        /// Float32 embedding matrix, one row per record.
        #[arg(long)]
        embeddings: PathBuf,
        /// JSON-lines metadata, row-aligned with the matrix.
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Simple,
    SimpleNoWs,
    Clip,
    Sariyildiz,
}

#[derive(Subcommand)]
enum PromptsCmd {
    Emit {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        synsets: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Prompts per class for the CLIP method.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Prompts per template category for the Sariyildiz method.
        #[arg(long, default_value_t = 1)]
        per_category: usize,
        /// One background scene per line, for the Sariyildiz method.
        #[arg(long)]
        backgrounds: Option<PathBuf>,
        /// Replacement template file.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RetrieveArgs {
    /// JSON retrieval policy; defaults apply to missing fields.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Prompt embeddings, row-aligned with the prompt file.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hash cache keyed by record id, for perceptual duplicate screening.
    #[arg(long)]
    hashes: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RADIUS)]
    radius: u32,
}

#[derive(Args)]
struct DownloadArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    concurrency: usize,
    #[arg(long)]
    max_attempts: Option<u32>,
    #[arg(long)]
    backoff_ms: Option<u64>,
}

#[derive(Subcommand)]
enum DedupCmd {
    /// Find cross pairs within the radius between two image trees.
    Scan {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: u32,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        left_cache: Option<PathBuf>,
        #[arg(long)]
        right_cache: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extrapolate true duplicates from a reviewed sample.
    Estimate {
        #[arg(long)]
        candidates: u64,
        #[arg(long)]
        reviewed: u64,
        #[arg(long)]
        confirmed: u64,
        /// Size of the audited split, to print leakage rates.
        #[arg(long)]
        split_size: Option<u64>,
    },
    /// Leakage report from reviewed pairs.
    Report {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        splits: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Subsample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Validation {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        subsample: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Replicas {
        #[arg(long)]
        pool: PathBuf,
        /// Manifest whose per-class counts every replica matches.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    Merge {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        replica: PathBuf,
        /// Image ids to drop, one per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop classes whose retrieval came back insufficient.
    Exclude {
        #[arg(long)]
        statuses: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Replicas, merges and exclusions in one step.
    Assemble {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        name: String,
        #[arg(long)]
        statuses: Option<PathBuf>,
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    class: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Float32 image embeddings of the class.
    #[arg(long)]
    embeddings: PathBuf,
    /// Image ids, one per line, row-aligned with the embeddings.
    #[arg(long)]
    ids: PathBuf,
    #[arg(long)]
    synsets: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// TOML config; NNAUG_* variables and flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Index(IndexCmd::Build { embeddings, metadata, out }) => index_build(&embeddings, &metadata, &out),
        Cmd::Prompts(PromptsCmd::Emit {
            method,
            synsets,
            seed,
            count,
            per_category,
            backgrounds,
            templates,
            out,
        }) => {
            let synsets: Vec<ClassSynset> = jsonl::read(&synsets).with_context(|| format!("reading {}", synsets.display()))?;
            let mut prompts: Vec<PromptSpec> = Vec::new();
            match method {
                Method::Simple | Method::SimpleNoWs => {
                    for s in &synsets {
                        prompts.push(simple_prompt(s, matches!(method, Method::SimpleNoWs))?);
                    }
                }
                Method::Clip => {
                    let t = match templates {
                        Some(p) => ClipTemplates::from_file(p)?,
                        None => ClipTemplates::bundled(),
                    };
                    for s in &synsets {
                        prompts.extend(clip_prompts(s, &t, count, seed)?);
                    }
                }
                Method::Sariyildiz => {
                    let t = match templates {
                        Some(p) => SariyildizTemplates::from_file(p)?,
                        None => SariyildizTemplates::bundled(),
                    };
                    let bg: Vec<String> = match backgrounds {
                        Some(p) => std::fs::read_to_string(&p)
                            .with_context(|| format!("reading {}", p.display()))?
                            .lines()
                            .map(str::trim)
                            .filter(|l| !l.is_empty())
                            .map(String::from)
                            .collect(),
                        None => Vec::new(),
                    };
                    for s in &synsets {
                        prompts.extend(sariyildiz_prompts(s, &t, &bg, per_category, seed)?);
                    }
                }
            }
            write_lines(out.as_deref(), &prompts)
        }
        Cmd::Retrieve(a) => {
            let policy = match &a.policy {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => RetrievalPolicy::default(),
            };
            let params = RetrieveParams {
                index: a.index,
                prompts: a.prompts,
                queries: a.queries,
                out: a.out,
                policy,
                hashes: a.hashes,
                radius: a.radius,
            };
            let summary = pipeline::run_retrieve(&params, &|_| {})?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
        Cmd::Download(a) => {
            if a.concurrency == 0 {
                bail!("--concurrency must be positive");
            }
            let params = DownloadParams {
                manifest: a.manifest,
                out: a.out,
                concurrency: a.concurrency,
                max_attempts: a.max_attempts,
                base_backoff_ms: a.backoff_ms,
                timeout_secs: None,
            };
            let rt = tokio::runtime::Runtime::new()?;
            let counts = rt.block_on(pipeline::run_download(&params))?;
            println!("{}", serde_json::to_string(&counts)?);
            Ok(())
        }
        Cmd::Dedup(cmd) => dedup(cmd),
        Cmd::Dataset(cmd) => dataset(cmd),
        Cmd::Cluster(a) => cluster(a),
        Cmd::Serve(a) => {
            let mut cfg = ServiceConfig::load(a.config.as_deref())?;
            if let Some(addr) = a.addr {
                cfg.addr = addr;
            }
            if let Some(store) = a.store {
                cfg.store = store;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(nnaug_service::serve(
                cfg,
                |addr| {
                    println!("listening on {addr}");
                    let _ = io::stdout().flush();
                },
                async {
                    let _ = tokio::signal::ctrl_c().await;
                },
            ))?;
            Ok(())
        }
    }
}

fn write_lines<T: serde::Serialize>(out: Option<&Path>, items: &[T]) -> Result<()> {
    match out {
        Some(p) => jsonl::write(p, items).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            jsonl::write_to(&mut w, items)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn index_build(embeddings: &Path, metadata: &Path, out: &Path) -> Result<()> {
    let m = Matrix::load(embeddings).with_context(|| format!("reading {}", embeddings.display()))?;
    let meta: Vec<RecordMeta> = jsonl::read(metadata).with_context(|| format!("reading {}", metadata.display()))?;
    let dim = m.dim();
    let records = ingest(m.iter_rows().map(<[f32]>::to_vec), meta)?;
    let index = Index::build_with_dim(dim, records)?;
    index.save(out)?;
    println!("{} records, dimension {}", index.len(), index.dim());
    Ok(())
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn dedup(cmd: DedupCmd) -> Result<()> {
    match cmd {
        DedupCmd::Scan {
            left,
            right,
            radius,
            split,
            left_cache,
            right_cache,
            out,
        } => {
            let scan = pipeline::run_dedup_scan(&DedupScanParams {
                left,
                right,
                split,
                radius,
                left_cache,
                right_cache,
            })?;
            for id in &scan.unreadable {
                eprintln!("unreadable: {id}");
            }
            eprintln!(
                "{} candidate pairs ({} x {} images)",
                scan.pairs.len(),
                scan.left_images,
                scan.right_images
            );
            write_lines(out.as_deref(), &scan.pairs)
        }
        DedupCmd::Estimate {
            candidates,
            reviewed,
            confirmed,
            split_size,
        } => {
            let est = estimate_true_duplicates(candidates, reviewed, confirmed)?;
            println!("estimated true duplicates: {est}");
            if let Some(n) = split_size.filter(|&n| n > 0) {
                println!("confirmed leakage: {}", render_percent(confirmed as f64 / n as f64));
                println!("estimated leakage: {}", render_percent(est as f64 / n as f64));
            }
            Ok(())
        }
        DedupCmd::Report { pairs, splits } => {
            let pairs: Vec<CandidatePair> = jsonl::read(&pairs)?;
            let splits: SplitsFile = serde_json::from_str(&std::fs::read_to_string(&splits)?)?;
            let report = leakage_report(&pairs, &splits.splits, splits.augmentation_size)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn dataset(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Subsample {
            manifest,
            fraction,
            seed,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let sub = stratified_subsample(&m, fraction, seed)?;
            sub.save(&out)?;
            println!("{} of {} records", sub.len(), m.len());
        }
        DatasetCmd::Validation {
            manifest,
            subsample,
            seed,
            out,
        } => {
            let val = disjoint_validation_split(&DatasetManifest::load(&manifest)?, &DatasetManifest::load(&subsample)?, seed)?;
            val.save(&out)?;
            println!("{} records", val.len());
        }
        DatasetCmd::Replicas {
            pool,
            targets,
            n,
            seed,
            out_dir,
        } => {
            let replicas = make_replicas(&DatasetManifest::load(&pool)?, &DatasetManifest::load(&targets)?.class_counts(), n, seed)?;
            for id in pipeline::write_datasets(&out_dir, &replicas)? {
                println!("{id}");
            }
        }
        DatasetCmd::Merge {
            original,
            replica,
            exclude,
            out,
        } => {
            let exclusions: HashSet<String> = match exclude {
                Some(p) => read_id_list(&p)?.into_iter().collect(),
                None => HashSet::new(),
            };
            let merged = merge(&DatasetManifest::load(&original)?, &DatasetManifest::load(&replica)?, &exclusions)?;
            merged.save(&out)?;
            println!("{} records", merged.len());
        }
        DatasetCmd::Exclude {
            statuses,
            out_dir,
            manifests,
        } => {
            let loaded = manifests.iter().map(DatasetManifest::load).collect::<Result<Vec<_>, _>>()?;
            let (kept, log) = exclude_insufficient_classes(&loaded, &pipeline::read_statuses(&statuses)?);
            pipeline::write_datasets(&out_dir, &kept)?;
            println!("{}", serde_json::to_string_pretty(&log)?);
        }
        DatasetCmd::Assemble {
            original,
            pool,
            targets,
            n,
            seed,
            name,
            statuses,
            exclude,
            out_dir,
        } => {
            let exclusions = match exclude {
                Some(p) => read_id_list(&p)?,
                None => Vec::new(),
            };
            let (manifests, log) = pipeline::assemble(&AssembleParams {
                original,
                pool,
                targets,
                replicas: n,
                seed,
                name,
                statuses,
                exclusions,
            })?;
            for id in pipeline::write_datasets(&out_dir, &manifests)? {
                println!("{id}");
            }
            if !log.classes.is_empty() {
                eprintln!("{} classes excluded, {} records removed", log.classes.len(), log.total_removed());
            }
        }
    }
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let m = Matrix::load(&a.embeddings).with_context(|| format!("reading {}", a.embeddings.display()))?;
    let ids = read_id_list(&a.ids)?;
    let synsets: Vec<ClassSynset> = jsonl::read(&a.synsets)?;
    let synset = synsets
        .iter()
        .find(|s| s.wnid == a.class)
        .with_context(|| format!("class {} not in {}", a.class, a.synsets.display()))?;
    let rows: Vec<&[f32]> = m.iter_rows().collect();
    let model = kmeans(&rows, a.k, a.seed, KMeansConfig::default())?;
    let manifest = conditioning_manifest(synset, &model, &ids, PromptSource::SimpleNoWs)?;
    let text = serde_json::to_string_pretty(&manifest)?;
    match a.out {
        Some(p) => std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}
