//! `kgexplain` command-line tool. Every subcommand reads and writes the same
//! record formats as the library and the HTTP service.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kgexplain::dataset::{
    read_instances, read_instances_with, read_manifest, split_dataset, validate, word_count_stats,
    write_instances, ReadMode, CONCEPT_COUNT,
};
use kgexplain::debugger::score_instance;
use kgexplain::embed::{
    Embedder, EmbeddingClientConfig, HashEmbedder, HttpEmbedder, HASH_EMBEDDING_DIM,
};
use kgexplain::evalkit::{build_report, read_responses, AccuracyResult, Metric};
use kgexplain::gat::synth::{planted_signal, SynthConfig};
use kgexplain::gat::{self, GatConfig, GatExample, GatParams, TrainConfig};
use kgexplain::kg::{import_conceptnet, load_triples, open_graph, save_graph, KnowledgeGraph};
use kgexplain::llm::{ChatClient, LlmClientConfig, MockClient, OpenAiClient};
use kgexplain::par::Execution;
use kgexplain::pipeline::{ExplainInput, Pipeline};
use kgexplain::prune::{
    prune_kg, ElementGraph, EmbeddingScorer, HashScorer, PruneConfig, QaContext, RelevanceScorer,
    ELEMENT_NODE_TYPES,
};
use kgexplain::retrieval::{
    build_icl_prompt, retrieve_demos, DemoStore, RetrievalIndex, SelectionWeights,
};
use kgexplain_service::{AppState, Demos, ReviewStore};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "kgexplain",
    version,
    about = "Knowledge-graph-grounded explanations for LLM question answering"
)]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a graph file from a relation/head/tail TSV.
    IngestKg {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert ConceptNet's assertion dump to the triple TSV.
    ImportConceptnet {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "en")]
        language: String,
    },
    /// Extract the element graph for one question.
    Prune {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        qa: QaArgs,
        #[arg(long, default_value_t = kgexplain::prune::DEFAULT_NODE_BUDGET)]
        n: usize,
        #[arg(long, default_value_t = kgexplain::prune::DEFAULT_HOPS)]
        hops: usize,
        #[arg(long, value_enum, default_value_t = ScorerKind::Hash)]
        scorer: ScorerKind,
        #[command(flatten)]
        embed: EmbedArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write planted-signal training examples.
    Synth {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        nodes: usize,
        #[arg(long, default_value_t = 4)]
        options: usize,
        #[arg(long, default_value_t = 8)]
        lm_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reasoner. `--data` holds one training example per line:
    /// either a pruned example (`graph`, `context`, `gold`) or, with
    /// `--graph`, a question record (`question`, `options`, `label`).
    TrainGat {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = gat::DEFAULT_LEARNING_RATE)]
        lr: f64,
        #[arg(long, default_value_t = gat::DEFAULT_BATCH_SIZE)]
        batch: usize,
        #[arg(long, default_value_t = gat::DEFAULT_DROPOUT)]
        dropout: f64,
        #[arg(long, default_value_t = gat::DEFAULT_LAYERS)]
        layers: usize,
        #[arg(long, default_value_t = gat::DEFAULT_HIDDEN)]
        dim: usize,
        #[arg(long, default_value_t = gat::DEFAULT_POOL_SIZE)]
        pool: usize,
        /// Number of answer options; inferred from question records.
        #[arg(long)]
        options: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        embed: EmbedArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer distribution and reason elements for an element graph.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        element_graph: PathBuf,
        /// Question and options supply the context embedding; without them a
        /// zero vector is used.
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        options: Option<String>,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Run the full pipeline and print one dataset record.
    Explain {
        #[arg(long)]
        model_ckpt: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        qa: QaArgs,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, value_enum, default_value_t = ScorerKind::Hash)]
        scorer: ScorerKind,
        #[command(flatten)]
        llm: LlmArgs,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Index a dataset's stored embeddings for retrieval.
    BuildIndex {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embedding model recorded in the index header.
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Similar questions, their best explanations, and the few-shot prompt.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        qa: QaArgs,
        #[arg(short, default_value_t = 3)]
        m: usize,
        /// faithfulness,completeness,accuracy,overall
        #[arg(long, default_value = "1,1,1,0")]
        weights: String,
        #[command(flatten)]
        embed: EmbedArgs,
    },
    /// Score every record with the debugger LLM.
    DebugScore {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        llm: LlmArgs,
    },
    /// Mean explanation word counts, overall and per split.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Check every record; exits 2 if any record is invalid.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Write one file per split named in the manifest.
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Aggregate human ratings.
    Eval {
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Metric pairs to correlate, e.g. `understandability:trustworthiness`.
        #[arg(long = "correlate")]
        correlate: Vec<String>,
        /// Line-delimited accuracy records {model, vanilla_correct, enhanced_correct, total}.
        #[arg(long)]
        accuracy: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Dataset the index was built from; required with `--index`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        review_store: PathBuf,
        #[arg(long, value_enum, default_value_t = ScorerKind::Hash)]
        scorer: ScorerKind,
        #[command(flatten)]
        llm: LlmArgs,
        #[command(flatten)]
        embed: EmbedArgs,
    },
}

#[derive(Args)]
struct QaArgs {
    #[arg(long)]
    question: String,
    /// Comma-separated answer options.
    #[arg(long)]
    options: String,
}

impl QaArgs {
    fn options(&self) -> Vec<String> {
        split_csv(&self.options)
    }
}

#[derive(Args)]
struct LlmArgs {
    #[arg(long, default_value = "https://api.openai.com/v1")]
    llm_base_url: String,
    #[arg(long, default_value = "gpt-4-turbo")]
    llm_model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    llm_key_env: String,
    /// Use the offline mock model instead of an endpoint.
    #[arg(long)]
    mock: bool,
}

impl LlmArgs {
    fn client(&self) -> Result<Arc<dyn ChatClient>> {
        if self.mock {
            return Ok(Arc::new(MockClient::pipeline()));
        }
        let cfg = LlmClientConfig {
            base_url: self.llm_base_url.clone(),
            model: self.llm_model.clone(),
            api_key_env: self.llm_key_env.clone(),
            ..LlmClientConfig::default()
        };
        Ok(Arc::new(OpenAiClient::new(cfg)?))
    }
}

#[derive(Args)]
struct EmbedArgs {
    /// Embedding endpoint; without it the offline hash embedder is used.
    #[arg(long)]
    embed_base_url: Option<String>,
    #[arg(long, default_value = kgexplain::embed::DEFAULT_EMBEDDING_MODEL)]
    embed_model: String,
    #[arg(long, default_value = "VOYAGE_API_KEY")]
    embed_key_env: String,
    #[arg(long)]
    embed_dim: Option<usize>,
}

impl EmbedArgs {
    fn embedder(&self) -> Result<Arc<dyn Embedder>> {
        match &self.embed_base_url {
            None => Ok(Arc::new(HashEmbedder::with_dimension(
                self.embed_dim.unwrap_or(HASH_EMBEDDING_DIM),
            ))),
            Some(url) => {
                let mut cfg = EmbeddingClientConfig {
                    base_url: url.clone(),
                    model: self.embed_model.clone(),
                    api_key_env: self.embed_key_env.clone(),
                    ..EmbeddingClientConfig::default()
                };
                if let Some(d) = self.embed_dim {
                    cfg.dimension = d;
                }
                Ok(Arc::new(HttpEmbedder::new(cfg)?))
            }
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerKind {
    /// Deterministic hash scores; needs no model.
    Hash,
    /// Linear head over the configured embedder.
    Lm,
}

fn scorer(kind: ScorerKind, embedder: &Arc<dyn Embedder>) -> Result<Arc<dyn RelevanceScorer>> {
    Ok(match kind {
        ScorerKind::Hash => Arc::new(HashScorer::new(0)),
        ScorerKind::Lm => Arc::new(EmbeddingScorer::seeded(embedder.clone(), 0)?),
    })
}

fn split_csv(s: &str) -> Vec<String> {
    s.split(',')
        .map(|o| o.trim().to_string())
        .filter(|o| !o.is_empty())
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("cannot open {}", path.display())
    })?))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    open_graph(path).with_context(|| format!("cannot load graph {}", path.display()))
}

#[derive(Deserialize)]
struct QaRecord {
    question: String,
    options: Vec<String>,
    label: String,
}

/// Reads training examples; question records are grounded against `graph`.
fn read_examples(
    path: &Path,
    graph: Option<&KnowledgeGraph>,
    embedder: &Arc<dyn Embedder>,
    prune: &PruneConfig,
) -> Result<Vec<GatExample>> {
    let mut out = Vec::new();
    let scorer = HashScorer::new(0);
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{}:{}", path.display(), i + 1);
        match graph {
            None => out.push(serde_json::from_str::<GatExample>(&line).with_context(ctx)?),
            Some(g) => {
                let r: QaRecord = serde_json::from_str(&line).with_context(ctx)?;
                let Some(gold) = r.options.iter().position(|o| *o == r.label) else {
                    bail!("{}: label {:?} is not an option", ctx(), r.label);
                };
                let mut qa = QaContext::new(r.question, r.options, Vec::new())?;
                qa.context_embedding = embedder.embed_one(&qa.qa_text())?;
                match prune_kg(&qa, g, &scorer, prune) {
                    Ok(eg) => out.push(GatExample {
                        graph: eg,
                        context: qa.context_embedding,
                        gold,
                    }),
                    Err(kgexplain::Error::NoSeedEntities) => {
                        log::warn!("{}: no graph entities, skipped", ctx())
                    }
                    Err(e) => return Err(e).with_context(ctx),
                }
            }
        }
    }
    if out.is_empty() {
        bail!("{} holds no usable examples", path.display());
    }
    Ok(out)
}

fn build_pipeline(
    graph: &Path,
    model: &Path,
    scorer_kind: ScorerKind,
    embedder: Arc<dyn Embedder>,
    exec: Execution,
) -> Result<Pipeline> {
    let graph = Arc::new(load_graph(graph)?);
    let params =
        GatParams::load(model).with_context(|| format!("cannot load model {}", model.display()))?;
    let scorer = scorer(scorer_kind, &embedder)?;
    let mut p = Pipeline::new(graph, Arc::new(params), scorer, embedder)?;
    p.prune.execution = exec;
    Ok(p)
}

fn load_demos(index: &Path, dataset: &Path) -> Result<Demos> {
    let index = RetrievalIndex::load(index)
        .with_context(|| format!("cannot load index {}", index.display()))?;
    let store = DemoStore::new(read_instances(dataset)?);
    for e in index.entries() {
        if !store.groups.contains_key(&e.id) {
            bail!("index entry {} is not in {}", e.id, dataset.display());
        }
    }
    Ok(Demos { store, index })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::IngestKg { triples, out } => {
            let g = load_triples(&triples)
                .with_context(|| format!("cannot read {}", triples.display()))?;
            save_graph(&g, &out)?;
            eprintln!(
                "{} nodes, {} edges, {} relations -> {}",
                g.node_count(),
                g.edge_count(),
                g.relation_type_count(),
                out.display()
            );
        }
        Command::ImportConceptnet {
            input,
            out,
            language,
        } => {
            let n = import_conceptnet(open(&input)?, create(&out)?, &language)?;
            eprintln!("{n} triples -> {}", out.display());
        }
        Command::Prune {
            graph,
            qa,
            n,
            hops,
            scorer: kind,
            embed,
            out,
        } => {
            let g = load_graph(&graph)?;
            let embedder = embed.embedder()?;
            let mut ctx = QaContext::new(qa.question.clone(), qa.options(), Vec::new())?;
            ctx.context_embedding = embedder.embed_one(&ctx.qa_text())?;
            let cfg = PruneConfig {
                node_budget: n,
                hops,
                execution: exec,
            };
            let eg = prune_kg(&ctx, &g, scorer(kind, &embedder)?.as_ref(), &cfg)?;
            let text = eg.to_json()?;
            match out {
                Some(p) => std::fs::write(&p, text + "\n")?,
                None => writeln!(io::stdout().lock(), "{text}")?,
            }
        }
        Command::Synth {
            count,
            nodes,
            options,
            lm_dim,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                nodes,
                options,
                lm_dim,
                ..SynthConfig::default()
            };
            let mut w = create(&out)?;
            for ex in planted_signal(&cfg, count, seed) {
                serde_json::to_writer(&mut w, &ex)?;
                writeln!(w)?;
            }
            w.flush()?;
        }
        Command::TrainGat {
            data,
            dev,
            graph,
            epochs,
            lr,
            batch,
            dropout,
            layers,
            dim,
            pool,
            options,
            seed,
            embed,
            out,
        } => {
            let embedder = embed.embedder()?;
            let kg = graph.as_deref().map(load_graph).transpose()?;
            let prune = PruneConfig {
                execution: exec,
                ..PruneConfig::default()
            };
            let train = read_examples(&data, kg.as_ref(), &embedder, &prune)?;
            let dev = dev
                .as_deref()
                .map(|p| read_examples(p, kg.as_ref(), &embedder, &prune))
                .transpose()?;
            let options = match options {
                Some(o) => o,
                None if kg.is_some() => {
                    // every record was checked to contain its label
                    let first: QaRecord = serde_json::from_str(
                        open(&data)?
                            .lines()
                            .find_map(|l| l.ok().filter(|l| !l.trim().is_empty()))
                            .as_deref()
                            .unwrap_or(""),
                    )?;
                    first.options.len()
                }
                None => bail!("--options is required for pre-pruned examples"),
            };
            let node_types = match &kg {
                Some(_) => ELEMENT_NODE_TYPES.len(),
                None => train[0].graph.node_types.len(),
            };
            let relation_types = match &kg {
                Some(g) => g.relation_type_count().max(1),
                None => train
                    .iter()
                    .map(|e| e.graph.relation_types.len())
                    .max()
                    .unwrap_or(1)
                    .max(1),
            };
            let cfg = GatConfig {
                hidden: dim,
                answer_hidden: dim,
                layers,
                pool_size: pool,
                dropout,
                ..GatConfig::new(node_types, relation_types, train[0].context.len(), options)
            };
            let mut params = GatParams::init(cfg, seed)?;
            let tc = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                epochs,
                seed,
                execution: exec,
                ..TrainConfig::default()
            };
            let report = gat::train(&mut params, &train, dev.as_deref(), &tc)?;
            eprintln!(
                "initial loss {:.4} accuracy {:.3}",
                report.initial_loss, report.initial_accuracy
            );
            for e in &report.epochs {
                match (e.dev_loss, e.dev_accuracy) {
                    (Some(dl), Some(da)) => eprintln!(
                        "epoch {:>3} loss {:.4} acc {:.3} dev loss {:.4} dev acc {:.3}",
                        e.epoch, e.loss, e.accuracy, dl, da
                    ),
                    _ => eprintln!(
                        "epoch {:>3} loss {:.4} acc {:.3}",
                        e.epoch, e.loss, e.accuracy
                    ),
                }
            }
            params.save(&out)?;
        }
        Command::Infer {
            model,
            element_graph,
            question,
            options,
            embed,
        } => {
            let params = GatParams::load(&model)?;
            let eg = ElementGraph::from_json(&std::fs::read_to_string(&element_graph)?)?;
            let context = match (question, options) {
                (Some(q), Some(o)) => {
                    let qa = QaContext::new(q, split_csv(&o), Vec::new())?;
                    embed.embedder()?.embed_one(&qa.qa_text())?
                }
                (None, None) => {
                    log::warn!("no question given; using a zero context embedding");
                    vec![0.0; params.config().lm_dim]
                }
                _ => bail!("--question and --options go together"),
            };
            let out = gat::forward(&params, &eg, &context)?;
            let reasons = gat::extract_reason_elements(&out.attention, &eg, CONCEPT_COUNT)?;
            print_json(&serde_json::json!({
                "probabilities": out.distribution.probabilities,
                "predicted": out.distribution.predicted(),
                "reason_elements": reasons.ranked,
            }))?;
        }
        Command::Explain {
            model_ckpt,
            graph,
            qa,
            label,
            scorer: kind,
            llm,
            embed,
        } => {
            let p = build_pipeline(&graph, &model_ckpt, kind, embed.embedder()?, exec)?;
            let input = ExplainInput {
                question: qa.question.clone(),
                options: qa.options(),
                label,
            };
            let out = p.explain(&input, llm.client()?.as_ref())?;
            print_json(&out.instance)?;
        }
        Command::BuildIndex {
            dataset,
            out,
            model_id,
        } => {
            let store = DemoStore::new(read_instances(&dataset)?);
            let id =
                model_id.unwrap_or_else(|| kgexplain::embed::DEFAULT_EMBEDDING_MODEL.to_string());
            let index = store.build_index(&id)?;
            index.save(&out)?;
            eprintln!(
                "{} questions, dimension {} -> {}",
                index.len(),
                index.dimension(),
                out.display()
            );
        }
        Command::Retrieve {
            index,
            dataset,
            qa,
            m,
            weights,
            embed,
        } => {
            let demos = load_demos(&index, &dataset)?;
            let weights = SelectionWeights::parse(&weights)?;
            let ctx = QaContext::new(qa.question.clone(), qa.options(), Vec::new())?;
            let query = embed.embedder()?.embed_one(&ctx.qa_text())?;
            let found = retrieve_demos(&demos.index, &demos.store, &query, m, &weights, exec)?;
            let pairs: Vec<_> = found
                .iter()
                .map(|d| (d.rank, &demos.store.instances[d.explanation]))
                .collect();
            let prompt = build_icl_prompt(&ctx, &pairs)?;
            print_json(&serde_json::json!({ "demos": found, "prompt": prompt }))?;
        }
        Command::DebugScore { dataset, out, llm } => {
            let mut instances = read_instances_with(&dataset, ReadMode::SchemaOnly)?;
            let client = llm.client()?;
            let retry = LlmClientConfig::default().retry_policy();
            for (i, inst) in instances.iter_mut().enumerate() {
                let s = score_instance(inst, client.as_ref(), &retry)
                    .with_context(|| format!("record {}", i + 1))?;
                inst.debugger_score = s.render();
            }
            write_instances(&out, &instances)?;
        }
        Command::Stats {
            dataset,
            manifest,
            json,
        } => {
            let instances = read_instances(&dataset)?;
            let splits = match manifest {
                Some(m) => split_dataset(&instances, &read_manifest(open(&m)?)?)?,
                None => BTreeMap::new(),
            };
            let stats = word_count_stats(&instances, &splits)?;
            if json {
                print_json(&stats)?;
            } else {
                write!(io::stdout().lock(), "{stats}")?;
            }
        }
        Command::Validate { dataset } => {
            let instances = read_instances_with(&dataset, ReadMode::SchemaOnly)?;
            let mut bad = 0;
            for (i, inst) in instances.iter().enumerate() {
                for v in validate(inst) {
                    writeln!(io::stdout().lock(), "record {}: {v}", i + 1)?;
                    bad += 1;
                }
            }
            eprintln!("{} records, {bad} violations", instances.len());
            if bad > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Split {
            dataset,
            manifest,
            out_dir,
        } => {
            let instances = read_instances(&dataset)?;
            let splits = split_dataset(&instances, &read_manifest(open(&manifest)?)?)?;
            std::fs::create_dir_all(&out_dir)?;
            for (name, idxs) in &splits {
                let part: Vec<_> = idxs.iter().map(|&i| instances[i].clone()).collect();
                let path = out_dir.join(format!("{name}.jsonl"));
                write_instances(&path, &part)?;
                eprintln!("{name}: {} records -> {}", part.len(), path.display());
            }
        }
        Command::Eval {
            responses,
            report,
            correlate,
            accuracy,
        } => {
            let responses = read_responses(open(&responses)?)?;
            let pairs = correlate
                .iter()
                .map(|c| {
                    let (a, b) = c
                        .split_once(':')
                        .context("correlations are written `metric:metric`")?;
                    let m = |k: &str| {
                        Metric::from_key(k.trim()).with_context(|| format!("unknown metric {k}"))
                    };
                    Ok((m(a)?, m(b)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let acc: Vec<AccuracyResult> = match accuracy {
                Some(p) => open(&p)?
                    .lines()
                    .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
                    .map(|l| Ok(serde_json::from_str(&l?)?))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let r = build_report(&responses, &pairs, &acc)?;
            write!(io::stdout().lock(), "{r}")?;
            let mut w = create(&report)?;
            serde_json::to_writer_pretty(&mut w, &r)?;
            writeln!(w)?;
            w.flush()?;
        }
        Command::Serve {
            graph,
            model,
            index,
            dataset,
            port,
            host,
            review_store,
            scorer: kind,
            llm,
            embed,
        } => {
            let embedder = embed.embedder()?;
            let reviews = Arc::new(ReviewStore::open(&review_store)?);
            let mut st = AppState::new(llm.client()?, embedder.clone(), reviews);
            st.execution = exec;
            st.pipeline = match (graph, model) {
                (Some(g), Some(m)) => Some(Arc::new(build_pipeline(&g, &m, kind, embedder, exec)?)),
                (None, None) => None,
                _ => bail!("--graph and --model go together"),
            };
            st.demos = match (index, dataset) {
                (Some(i), Some(d)) => Some(Arc::new(load_demos(&i, &d)?)),
                (None, None) => None,
                _ => bail!("--index needs --dataset"),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                eprintln!("listening on {}", listener.local_addr()?);
                kgexplain_service::serve(listener, Arc::new(st)).await
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
