//! The `aspectkg` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation, 3 numeric failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::air::{self, AirTrainConfig, CorrectionPolicy, DatasetSplit, ImageRetriever, ProjectionModel, TextBaseline};
use crate::encoder::{EncoderProvider, FileEncoder, MockEncoder, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::features::{self, EalInstance, FeatureInputs, FeatureSet, ImageSelection};
use crate::ingest::{self, BuildOptions, FixtureSearchClient, PageDoc, RateLimitedClient, SearchClient};
use crate::jsonl::{read_json, read_records, write_json, write_records};
use crate::kg::{self, AspectImageLink, AspectPath, TypeRegistry};
use crate::ltr::{self, LtrModel, QueryList, TrainConfig};
use crate::manifest::{json_digest, RunManifest};
use crate::metrics::{self, DEFAULT_KS};
use crate::synth;

/// Environment variable naming an offline search fixture directory.
pub const FIXTURES_ENV: &str = "ASPECTKG_FIXTURES";
const FEATURE_ORDER_FILE: &str = "feature_order.json";

#[derive(Debug, Parser)]
#[command(
    name = "aspectkg",
    version,
    about = "Build, train and evaluate aspect-based multimodal knowledge graphs"
)]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct KgArg {
    /// Knowledge graph directory.
    #[arg(long)]
    kg: PathBuf,
}

#[derive(Debug, Args)]
struct EmbeddingsArg {
    /// Embedding file (JSON lines of `{"id", "vec"}`), or `mock:<dim>`.
    #[arg(long)]
    embeddings: String,
}

#[derive(Debug, Args)]
struct CutoffArg {
    /// Metric cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a graph from candidate entities and their pages.
    Build {
        /// Candidate entities, JSON lines.
        #[arg(long)]
        candidates: PathBuf,
        /// Directory of `<entity_id>.html` or `<entity_id>.json` pages.
        #[arg(long)]
        pages: PathBuf,
        /// Search fixture directory; defaults to $ASPECTKG_FIXTURES.
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Truncate every aspect path to its first label.
    Flatten {
        #[command(flatten)]
        kg: KgArg,
    },
    /// Print graph statistics.
    Stats {
        #[command(flatten)]
        kg: KgArg,
    },
    /// Compute EAL feature rows for a dataset.
    Features {
        /// EAL instances, JSON lines.
        #[arg(long)]
        dataset: PathBuf,
        /// Feature indices or names, comma separated (default: all eight).
        #[arg(long)]
        features: Option<String>,
        #[arg(long)]
        kg: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<String>,
        /// Word embedding table, JSON lines.
        #[arg(long)]
        words: Option<PathBuf>,
        /// Select aspect images with this retrieval model.
        #[arg(long)]
        air_model: Option<PathBuf>,
    },
    /// Train the ranking model on a run file.
    LtrTrain {
        #[arg(long)]
        run: PathBuf,
        /// Run-file columns to use, comma separated (default: all).
        #[arg(long)]
        features: Option<String>,
    },
    /// Evaluate a ranking model on a run file.
    LtrEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        features: Option<String>,
        #[command(flatten)]
        k: CutoffArg,
    },
    /// Build retrieval triples from a graph and split them.
    AirTriples {
        #[command(flatten)]
        kg: KgArg,
        #[command(flatten)]
        embeddings: EmbeddingsArg,
    },
    /// Train the retrieval projection.
    AirTrain {
        /// Directory holding `train.jsonl` and `validation.jsonl`.
        #[arg(long)]
        triples: PathBuf,
        #[command(flatten)]
        embeddings: EmbeddingsArg,
        #[arg(long, value_enum, default_value_t = Init::Aspect)]
        init: Init,
    },
    /// Evaluate the retrieval model and the text baseline.
    AirEval {
        #[arg(long)]
        model: PathBuf,
        /// Directory holding `test.jsonl`, or a triple file.
        #[arg(long)]
        triples: PathBuf,
        #[command(flatten)]
        embeddings: EmbeddingsArg,
        #[command(flatten)]
        k: CutoffArg,
    },
    /// Remove aspect images the retrieval model rejects.
    KgCorrect {
        #[command(flatten)]
        kg: KgArg,
        /// Retrieval model; the text baseline when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        embeddings: EmbeddingsArg,
        #[arg(long, conflicts_with = "keep_top", required_unless_present = "keep_top")]
        threshold: Option<f64>,
        #[arg(long)]
        keep_top: Option<usize>,
    },
    /// Assign new images to an entity's best-matching aspect.
    KgExpand {
        #[command(flatten)]
        kg: KgArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        embeddings: EmbeddingsArg,
        #[arg(long)]
        entity: String,
        /// Image ids, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        images: Vec<String>,
    },
    /// Write a synthetic world for trying the pipeline.
    Synth {
        #[arg(long, value_enum)]
        world: World,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Init {
    /// `[0 | I]`: start from the text baseline.
    Aspect,
    /// `[I | 0]`: start from the overall image.
    Overall,
    /// Small Gaussian entries.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum World {
    Eal,
    Air,
    Planted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    seed: u64,
    build: BuildOptions,
    /// Search calls per second; unlimited when absent.
    search_rate_limit: Option<f64>,
    ltr: TrainConfig,
    air: AirTrainConfig,
    ks: Vec<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            build: BuildOptions::default(),
            search_rate_limit: None,
            ltr: TrainConfig::default(),
            air: AirTrainConfig::default(),
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

impl Config {
    fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut config: Config = match path {
            Some(p) => read_json(p)?,
            None => Config::default(),
        };
        if let Some(seed) = seed {
            config.seed = seed;
        }
        config.ltr.seed = config.seed;
        config.air.seed = config.seed;
        Ok(config)
    }

    fn cutoffs(&self, flag: &CutoffArg) -> Result<Vec<usize>> {
        let ks = if flag.k.is_empty() {
            self.ks.clone()
        } else {
            flag.k.clone()
        };
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::usage("metric cutoffs must be positive"));
        }
        Ok(ks)
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn out_dir(cli_out: Option<&PathBuf>) -> Result<PathBuf> {
    let dir = cli_out
        .cloned()
        .ok_or_else(|| Error::usage("this command needs --out <DIR>"))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_encoder(source: &str, seed: u64) -> Result<Box<dyn EncoderProvider>> {
    match source.strip_prefix("mock:") {
        Some(dim) => {
            let dim: usize = dim
                .parse()
                .map_err(|_| Error::usage(format!("bad mock dimension in `{source}`")))?;
            Ok(Box::new(MockEncoder::new(seed, dim)?))
        }
        None => Ok(Box::new(FileEncoder::open(Path::new(source))?)),
    }
}

fn with_embeddings(manifest: RunManifest, source: &str) -> Result<RunManifest> {
    if source.starts_with("mock:") {
        let mut m = manifest;
        m.inputs.insert("embeddings".to_string(), source.to_string());
        Ok(m)
    } else {
        manifest.input("embeddings", Path::new(source))
    }
}

fn load_retriever(model: Option<&Path>) -> Result<Box<dyn ImageRetriever>> {
    match model {
        Some(p) => Ok(Box::new(ProjectionModel::load(p)?.0)),
        None => Ok(Box::new(TextBaseline)),
    }
}

fn parse_columns(list: &str) -> Result<Vec<usize>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::usage(format!("`{s}` is not a column index")))
        })
        .collect()
}

fn select_columns(lists: &[QueryList], columns: &[usize]) -> Result<Vec<QueryList>> {
    let width = lists.first().map(QueryList::n_features).unwrap_or(0);
    if let Some(c) = columns.iter().find(|&&c| c >= width) {
        return Err(Error::usage(format!("column {c} out of range, run file has {width}")));
    }
    lists
        .iter()
        .map(|l| {
            let rows = l
                .rows
                .iter()
                .map(|r| ltr::FeatureRow {
                    features: columns.iter().map(|&c| r.features[c]).collect(),
                    ..r.clone()
                })
                .collect();
            QueryList::new(&l.query_id, rows)
        })
        .collect()
}

/// Column names from `feature_order.json` next to the run file, or `f<i>`.
fn column_names(run: &Path, width: usize) -> Result<Vec<String>> {
    let sibling = run.with_file_name(FEATURE_ORDER_FILE);
    if sibling.exists() {
        let names: Vec<String> = read_json(&sibling)?;
        if names.len() == width {
            return Ok(names);
        }
        log::warn!(
            "{} lists {} names for {width} columns; ignoring it",
            sibling.display(),
            names.len()
        );
    }
    Ok((0..width).map(|i| format!("f{i}")).collect())
}

fn dispatch(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref(), cli.seed)?;
    let digest = json_digest(&config);
    let manifest = |name: &str| RunManifest::new(name, digest.clone()).seed(config.seed);
    let mut m = match &cli.config {
        Some(p) => manifest("").input("config", p)?,
        None => manifest(""),
    };

    match cli.command {
        Command::Build {
            candidates,
            pages,
            fixtures,
        } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "build".into();
            m = m.input("candidates", &candidates)?.input("pages", &pages)?;
            let candidates: Vec<kg::EntityRecord> = read_records(&candidates)?.into_iter().map(|(_, r)| r).collect();
            let (docs, warnings) = read_pages(&pages)?;
            let fixtures = fixtures.or_else(|| std::env::var_os(FIXTURES_ENV).map(PathBuf::from));
            let client: Option<Box<dyn SearchClient>> = match &fixtures {
                Some(dir) => {
                    m = m.input("fixtures", dir)?;
                    let c = FixtureSearchClient::open(dir)?;
                    Some(match config.search_rate_limit {
                        Some(rate) => Box::new(RateLimitedClient::per_second(c, rate)),
                        None => Box::new(c),
                    })
                }
                None => None,
            };
            let (graph, report) = ingest::build_kg(
                &candidates,
                &docs,
                client.as_deref(),
                &config.build,
                &TypeRegistry::standard(),
            )?;
            kg::save_kg(&graph, &out.join("kg"))?;
            let stats = kg::compute_stats(&graph);
            write_json(
                &out.join("build_report.json"),
                &serde_json::json!({ "build": report, "parse_warnings": warnings, "stats": stats }),
            )?;
            m.metrics(&stats).write(&out)
        }
        Command::Flatten { kg } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "flatten".into();
            m = m.input("kg", &kg.kg)?;
            let flat = kg::flatten_to_first_level(&kg::load_kg(&kg.kg)?);
            kg::save_kg(&flat, &out.join("kg"))?;
            m.metrics(&kg::compute_stats(&flat)).write(&out)
        }
        Command::Stats { kg } => {
            m.command = "stats".into();
            let stats = kg::compute_stats(&kg::load_kg(&kg.kg)?);
            println!("{}", serde_json::to_string_pretty(&stats).expect("serializable"));
            if let Some(out) = cli.out.as_ref() {
                let out = out_dir(Some(out))?;
                write_json(&out.join("stats.json"), &stats)?;
                m.input("kg", &kg.kg)?.metrics(&stats).write(&out)?;
            }
            Ok(())
        }
        Command::Features {
            dataset,
            features,
            kg,
            embeddings,
            words,
            air_model,
        } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "features".into();
            m = m.input("dataset", &dataset)?;
            let set = match features {
                Some(list) => FeatureSet::parse_list(&list)?,
                None => FeatureSet::full(),
            };
            let instances: Vec<EalInstance> = read_records(&dataset)?.into_iter().map(|(_, r)| r).collect();
            let graph = match &kg {
                Some(p) => {
                    m = m.input("kg", p)?;
                    Some(kg::load_kg(p)?)
                }
                None => None,
            };
            let encoder = match &embeddings {
                Some(source) => {
                    m = with_embeddings(m, source)?;
                    Some(load_encoder(source, config.seed)?)
                }
                None => None,
            };
            let table = match &words {
                Some(p) => {
                    m = m.input("words", p)?;
                    Some(WordEmbeddingTable::open(p)?)
                }
                None => None,
            };
            let model = match &air_model {
                Some(p) => {
                    m = m.input("air_model", p)?;
                    Some(ProjectionModel::load(p)?.0)
                }
                None => None,
            };
            let inputs = FeatureInputs {
                kg: graph.as_ref(),
                provider: encoder.as_deref(),
                words: table.as_ref(),
                image_selection: match &model {
                    Some(model) => ImageSelection::Retriever(model),
                    None => ImageSelection::AspectLabel,
                },
            };
            let lists = features::assemble_dataset(&instances, &inputs, &set)?;
            features::write_run_file(&out.join("features.run"), &lists)?;
            write_json(&out.join(FEATURE_ORDER_FILE), &set.names())?;
            m.metrics(&serde_json::json!({ "n_queries": lists.len(), "features": set.names() }))
                .write(&out)
        }
        Command::LtrTrain { run, features } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "ltr-train".into();
            m = m.input("run", &run)?;
            let lists = features::read_run_file(&run)?;
            if lists.is_empty() {
                return Err(Error::usage("run file has no queries"));
            }
            let width = lists[0].n_features();
            let names = column_names(&run, width)?;
            let columns = match &features {
                Some(list) => parse_columns(list)?,
                None => (0..width).collect(),
            };
            let lists = select_columns(&lists, &columns)?;
            let outcome = ltr::coordinate_ascent_train(&lists, &config.ltr)?;
            let model = LtrModel::new(
                &outcome,
                columns.iter().map(|&c| names[c].clone()).collect(),
                &config.ltr,
            )?;
            model.save(&out.join("ltr_model.json"))?;
            let summary = serde_json::json!({
                "train_map": outcome.train_map,
                "best_restart": outcome.best_restart,
                "restarts": outcome.restarts.iter().map(|r| serde_json::json!({
                    "restart": r.restart,
                    "train_map": r.train_map(),
                    "epochs": r.epochs(),
                    "accepted_steps": r.accepted.len(),
                })).collect::<Vec<_>>(),
            });
            write_json(&out.join("train_report.json"), &summary)?;
            m.metrics(&serde_json::json!({ "train_map": outcome.train_map }))
                .write(&out)
        }
        Command::LtrEval {
            model,
            run,
            features,
            k,
        } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "ltr-eval".into();
            m = m.input("model", &model)?.input("run", &run)?;
            let ks = config.cutoffs(&k)?;
            let model = LtrModel::load(&model)?;
            let lists = features::read_run_file(&run)?;
            if lists.is_empty() {
                return Err(Error::usage("evaluation set is empty"));
            }
            let width = lists[0].n_features();
            let columns = match &features {
                Some(list) => parse_columns(list)?,
                None => {
                    let names = column_names(&run, width)?;
                    model
                        .feature_order
                        .iter()
                        .map(|n| {
                            names
                                .iter()
                                .position(|c| c == n)
                                .ok_or_else(|| Error::usage(format!("run file has no column `{n}`; pass --features")))
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            let lists = select_columns(&lists, &columns)?;
            let (report, per_query) = metrics::eval_eal(&model, &lists, &ks)?;
            write_json(&out.join("report.json"), &report)?;
            metrics::write_query_tsv(&out.join("per_query.tsv"), &per_query, &ks)?;
            println!("MAP {:.4} over {} queries", report.map, report.n_queries);
            m.metrics(&report).write(&out)
        }
        Command::AirTriples { kg, embeddings } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "air-triples".into();
            m = with_embeddings(m.input("kg", &kg.kg)?, &embeddings.embeddings)?;
            let graph = kg::load_kg(&kg.kg)?;
            let encoder = load_encoder(&embeddings.embeddings, config.seed)?;
            let (triples, report) = air::build_triples(&graph, encoder.as_ref())?;
            let split = air::split_triples(&triples, config.seed);
            air::save_triples(&out.join("triples.jsonl"), &triples)?;
            air::save_triples(&out.join("train.jsonl"), &split.train)?;
            air::save_triples(&out.join("validation.jsonl"), &split.validation)?;
            air::save_triples(&out.join("test.jsonl"), &split.test)?;
            let sizes = serde_json::json!({
                "n_triples": report.n_triples,
                "train": split.train.len(),
                "validation": split.validation.len(),
                "test": split.test.len(),
                "skipped_entities": report.skipped_entities,
            });
            write_json(&out.join("triples_report.json"), &sizes)?;
            m.metrics(&sizes).write(&out)
        }
        Command::AirTrain {
            triples,
            embeddings,
            init,
        } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "air-train".into();
            m = with_embeddings(m.input("triples", &triples)?, &embeddings.embeddings)?;
            let encoder = load_encoder(&embeddings.embeddings, config.seed)?;
            let split = DatasetSplit {
                train: air::load_triples(&triples.join("train.jsonl"))?,
                validation: load_optional_triples(&triples.join("validation.jsonl"))?,
                test: Vec::new(),
            };
            let (idim, tdim) = (encoder.image_dim(), encoder.text_dim());
            let tau = config.air.tau;
            let start = match init {
                Init::Aspect if idim == tdim => ProjectionModel::aspect_identity(idim, tau)?,
                Init::Aspect => {
                    return Err(Error::usage("--init aspect needs equal text and image dimensions"));
                }
                Init::Overall => ProjectionModel::overall_identity(idim, tdim, tau)?,
                Init::Random => {
                    ProjectionModel::random(idim, tdim, tau, 1.0 / ((idim + tdim) as f64).sqrt(), config.seed)?
                }
            };
            let outcome = air::train(&start, &split, encoder.as_ref(), &config.air)?;
            outcome.model.save(&out.join("air_model.json"), &config.air.digest())?;
            let curves = serde_json::json!({
                "initial_loss": outcome.initial_loss,
                "train": outcome.loss_curve,
                "validation": outcome.validation_curve,
            });
            write_json(&out.join("loss_curve.json"), &curves)?;
            m.metrics(&curves).write(&out)
        }
        Command::AirEval {
            model,
            triples,
            embeddings,
            k,
        } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "air-eval".into();
            m = with_embeddings(
                m.input("model", &model)?.input("triples", &triples)?,
                &embeddings.embeddings,
            )?;
            let ks = config.cutoffs(&k)?;
            let encoder = load_encoder(&embeddings.embeddings, config.seed)?;
            let (model, _) = ProjectionModel::load(&model)?;
            let test_file = if triples.is_dir() {
                triples.join("test.jsonl")
            } else {
                triples
            };
            let test = air::load_triples(&test_file)?;
            let (report, per_query) = metrics::eval_air(&model, &test, encoder.as_ref(), &ks)?;
            let (baseline, baseline_per_query) = metrics::eval_air(&TextBaseline, &test, encoder.as_ref(), &ks)?;
            let both = serde_json::json!({ "air": report, "baseline": baseline });
            write_json(&out.join("report.json"), &both)?;
            metrics::write_query_tsv(&out.join("per_query.tsv"), &per_query, &ks)?;
            metrics::write_query_tsv(&out.join("baseline_per_query.tsv"), &baseline_per_query, &ks)?;
            for k in &ks {
                println!(
                    "Recall@{k}: model {:.4}  baseline {:.4}",
                    report.recall_at[k], baseline.recall_at[k]
                );
            }
            m.metrics(&both).write(&out)
        }
        Command::KgCorrect {
            kg,
            model,
            embeddings,
            threshold,
            keep_top,
        } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "kg-correct".into();
            m = with_embeddings(m.input("kg", &kg.kg)?, &embeddings.embeddings)?;
            if let Some(p) = &model {
                m = m.input("model", p)?;
            }
            let policy = match (threshold, keep_top) {
                (Some(t), None) => CorrectionPolicy::Threshold(t),
                (None, Some(n)) => CorrectionPolicy::KeepTop(n),
                _ => return Err(Error::usage("pass exactly one of --threshold and --keep-top")),
            };
            let graph = kg::load_kg(&kg.kg)?;
            let encoder = load_encoder(&embeddings.embeddings, config.seed)?;
            let retriever = load_retriever(model.as_deref())?;
            let (fixed, removed) = air::correct_kg(&graph, retriever.as_ref(), encoder.as_ref(), policy)?;
            kg::save_kg(&fixed, &out.join("kg"))?;
            write_records(&out.join("removed.jsonl"), &removed)?;
            println!("removed {} of {} links", removed.len(), graph.links().len());
            m.metrics(&serde_json::json!({ "removed": removed.len(), "links_before": graph.links().len() }))
                .write(&out)
        }
        Command::KgExpand {
            kg,
            model,
            embeddings,
            entity,
            images,
        } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "kg-expand".into();
            m = with_embeddings(m.input("kg", &kg.kg)?, &embeddings.embeddings)?;
            if let Some(p) = &model {
                m = m.input("model", p)?;
            }
            let graph = kg::load_kg(&kg.kg)?;
            let encoder = load_encoder(&embeddings.embeddings, config.seed)?;
            let retriever = load_retriever(model.as_deref())?;
            let mut assignments = Vec::new();
            let mut parts = graph.to_parts();
            let mut not_in_kg = Vec::new();
            for image in &images {
                let (label, score) = air::expand_assign(image, &entity, &graph, retriever.as_ref(), encoder.as_ref())?;
                assignments.push(Assignment {
                    image_id: image.clone(),
                    entity_id: entity.clone(),
                    aspect_label: label.clone(),
                    score,
                });
                let path = AspectPath::new([label]);
                let exists = parts
                    .links
                    .iter()
                    .any(|l| l.entity_id == entity && l.aspect_path == path && &l.image_id == image);
                if graph.image(image).is_none() {
                    not_in_kg.push(image.clone());
                } else if !exists {
                    parts
                        .links
                        .push(AspectImageLink::new(entity.clone(), path, image.clone()));
                }
            }
            let expanded = kg::AspectKg::new(parts)?;
            kg::save_kg(&expanded, &out.join("kg"))?;
            write_records(&out.join("assignments.jsonl"), &assignments)?;
            if !not_in_kg.is_empty() {
                log::warn!("{} images have no graph record and were not linked", not_in_kg.len());
            }
            m.metrics(&serde_json::json!({ "assigned": assignments.len(), "not_in_kg": not_in_kg }))
                .write(&out)
        }
        Command::Synth { world } => {
            let out = out_dir(cli.out.as_ref())?;
            m.command = "synth".into();
            write_synth(world, config.seed, &out)?;
            m.write(&out)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Assignment {
    image_id: String,
    entity_id: String,
    aspect_label: String,
    score: f64,
}

fn load_optional_triples(path: &Path) -> Result<Vec<air::AirTriple>> {
    if path.exists() {
        air::load_triples(path)
    } else {
        Ok(Vec::new())
    }
}

type PageWarnings = BTreeMap<String, Vec<String>>;

fn read_pages(dir: &Path) -> Result<(Vec<PageDoc>, PageWarnings)> {
    let mut paths = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    let mut docs = Vec::new();
    let mut warnings = BTreeMap::new();
    for path in paths {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        match path.extension().and_then(|e| e.to_str()) {
            Some("html") | Some("htm") => {
                let html = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let (doc, w) = ingest::parse_page_html_with_warnings(&html, stem);
                if !w.is_empty() {
                    warnings.insert(stem.to_string(), w);
                }
                docs.push(doc);
            }
            Some("json") => docs.push(read_json(&path)?),
            _ => log::debug!("ignoring {}", path.display()),
        }
    }
    Ok((docs, warnings))
}

fn write_synth(world: World, seed: u64, out: &Path) -> Result<()> {
    let save_world = |w: &synth::SynthWorld| -> Result<()> {
        kg::save_kg(&w.kg, &out.join("kg"))?;
        w.encoder.save(&out.join("embeddings.jsonl"))
    };
    match world {
        World::Eal => {
            let w = synth::eal_world(&synth::EalWorldConfig::default(), seed);
            save_world(&w.world)?;
            write_records(&out.join("words.jsonl"), w.words.records())?;
            let cut = w.instances.len() * 7 / 10;
            write_records(&out.join("eal_train.jsonl"), &w.instances[..cut])?;
            write_records(&out.join("eal_test.jsonl"), &w.instances[cut..])
        }
        World::Air => save_world(&synth::air_world(&synth::AirWorldConfig::default(), seed)),
        World::Planted => {
            let p = synth::planted_kg(seed, 200);
            save_world(&p.world)?;
            write_records(&out.join("planted.jsonl"), &p.planted)
        }
    }
}
