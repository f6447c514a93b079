use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use vkb::corpus::{generate_synthetic_dataset, write_corpus, write_kb, write_questions, Corpus, Linker};
use vkb::encoders::{query_features, EncoderParams, EntityEmbeddings};
use vkb::pipeline::{
    all_questions, featurize, pretrain_stage, question_linker, AblationArm, RunConfig,
};
use vkb::reasoner::{FollowConfig, ReasonerContext};
use vkb::scaling::{follow_growth, run_scaling};
use vkb::training::{
    evaluate, freeze_and_index, prepare_questions, predict, rank_entities, slot_filling_accuracy,
    train_end_to_end, FrozenState, HopMode, PreparedQuestion, LINK_FALLBACK_N,
};

use crate::artifacts::{ArtifactFiles, DataFiles, Loaded};
use crate::PathArgs;

/// A property the command checks on its own output did not hold.
#[derive(Debug)]
pub struct AssertionFailed(pub String);

impl std::fmt::Display for AssertionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "assertion failed: {}", self.0)
    }
}

impl std::error::Error for AssertionFailed {}

/// 2 for usage, config and missing inputs, 3 for invalid data, 4 for
/// internal failures and failed assertions.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<AssertionFailed>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<vkb::Error>() {
            return match e {
                vkb::Error::Config(_) | vkb::Error::Io { .. } | vkb::Error::Generation(_) => 2,
                vkb::Error::Parse { .. }
                | vkb::Error::Validation(_)
                | vkb::Error::Linking(_)
                | vkb::Error::Format(_)
                | vkb::Error::Stale(_) => 3,
                vkb::Error::Contract(_) | vkb::Error::EmptyResult { .. } => 4,
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    4
}

fn load_config(paths: &PathArgs) -> Result<RunConfig> {
    let config = match &paths.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    log::info!("resolved config:\n{}", config.to_toml());
    Ok(config)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Writes `rows` as CSV to stdout and to `<name>.csv`, and the config the
/// report was produced with to `<name>.config.toml`.
fn report<T: Serialize>(files: &ArtifactFiles, name: &str, config: &RunConfig, rows: &[T]) -> Result<()> {
    files.create_dir()?;
    std::fs::write(files.path(&format!("{name}.config.toml")), config.to_toml())?;
    let path = files.path(&format!("{name}.csv"));
    let mut file = csv::Writer::from_writer(create(&path)?);
    let mut out = csv::Writer::from_writer(std::io::stdout().lock());
    for row in rows {
        file.serialize(row)?;
        out.serialize(row)?;
    }
    file.flush()?;
    out.flush()?;
    log::info!("report written to {}", path.display());
    Ok(())
}

pub fn datagen(paths: &PathArgs) -> Result<()> {
    let config = load_config(paths)?;
    let ds = generate_synthetic_dataset(&config.synthetic)?;
    let data = DataFiles::new(&paths.data_dir);
    std::fs::create_dir_all(data.dir())
        .with_context(|| format!("creating {}", data.dir().display()))?;
    write_corpus(&ds.corpus, &data.corpus(), &data.lexicon())?;
    write_kb(&ds.kb, &data.kb(), &data.relations())?;
    let questions = all_questions(&ds.questions);
    write_questions(&data.questions(), &questions)?;
    println!("documents\t{}", ds.corpus.n_docs());
    println!("entities\t{}", ds.corpus.n_entities());
    println!("mentions\t{}", ds.corpus.n_mentions());
    println!("triples\t{}", ds.kb.triples().len());
    for (hops, qs) in config.synthetic.hops.iter().zip(&ds.questions) {
        println!("questions_{hops}hop\t{}", qs.len());
    }
    Ok(())
}

pub fn index(paths: &PathArgs, checkpoint: Option<&Path>) -> Result<()> {
    let config = load_config(paths)?;
    let data = DataFiles::new(&paths.data_dir);
    let files = ArtifactFiles::new(&paths.artifacts_dir);
    let corpus = data.load_corpus()?;
    let f = featurize(&corpus, &config.tfidf, &config.cooc)?;
    files.create_dir()?;
    f.tfidf.save(&files.tfidf())?;
    f.a.save(&files.a())?;
    f.b.save(&files.b())?;
    println!("mentions\t{}", corpus.n_mentions());
    println!("tfidf_buckets\t{}", f.tfidf.n_buckets());
    println!("a_rows\t{}", f.a.n_rows());
    println!("a_nnz\t{}", f.a.nnz());
    println!("a_max_row_len\t{}", f.a.max_row_len());
    println!("a_bytes\t{}", f.a.memory_bytes());
    println!("mu\t{}", config.cooc.mu);
    println!("b_nnz\t{}", f.b.nnz());
    println!("b_bytes\t{}", f.b.memory_bytes());
    if let Some(ckpt) = checkpoint {
        let params = EncoderParams::load(ckpt)?;
        let index = freeze_and_index(&params, &corpus, &config.index)?;
        index.save(&files.index())?;
        println!("index_vectors\t{}", index.len());
        println!("index_bytes\t{}", index.memory_bytes());
    }
    if f.a.max_row_len() > config.cooc.mu {
        bail!(AssertionFailed(format!(
            "an entity row holds {} mentions, more than mu = {}",
            f.a.max_row_len(),
            config.cooc.mu
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary<'a> {
    report: &'a vkb::training::PretrainReport,
    heldout: vkb::training::SlotFillingAccuracy,
}

pub fn pretrain(paths: &PathArgs) -> Result<()> {
    let config = load_config(paths)?;
    let data = DataFiles::new(&paths.data_dir);
    let files = ArtifactFiles::new(&paths.artifacts_dir);
    let corpus = data.load_corpus()?;
    let kb = data.load_kb(&corpus)?;
    let pre = pretrain_stage(&corpus, &kb, &config)?;
    files.create_dir()?;
    pre.params.save(&files.pretrained())?;
    pre.index.save(&files.index())?;
    let linker = Linker::new(corpus.entities())?;
    let heldout = slot_filling_accuracy(&pre.params, &corpus, &pre.index, &pre.heldout, Some(&linker))?;
    let summary = PretrainSummary {
        report: &pre.report,
        heldout,
    };
    let json = serde_json::to_string(&summary)?;
    std::fs::write(files.path("pretrain.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn prepared(
    config: &RunConfig,
    data: &DataFiles,
    corpus: &Corpus,
    loaded: &Loaded,
) -> Result<Vec<PreparedQuestion>> {
    let questions = data.load_questions()?;
    let linker = question_linker(corpus, &loaded.tfidf)?;
    let (qs, unlinked) = prepare_questions(
        &questions,
        loaded.params.config(),
        &linker,
        config.train.dev_fraction,
        config.train.split_seed,
    )?;
    log::info!("{} questions prepared, {unlinked} unlinked", qs.len());
    Ok(qs)
}

pub fn train(paths: &PathArgs) -> Result<()> {
    let config = load_config(paths)?;
    let data = DataFiles::new(&paths.data_dir);
    let files = ArtifactFiles::new(&paths.artifacts_dir);
    let corpus = data.load_corpus()?;
    let loaded = Loaded::read(&files, &files.pretrained())?;
    let qs = prepared(&config, &data, &corpus, &loaded)?;
    let Loaded {
        a, b, index, mut params, ..
    } = loaded;
    let frozen = FrozenState {
        index: &index,
        a: &a,
        b: &b,
    };
    let mut log = create(&files.metrics())?;
    let records = train_end_to_end(&mut params, frozen, corpus.entities(), &qs, &config.train, Some(&mut log))?;
    log.flush()?;
    params.save(&files.model())?;
    if let Some(last) = records.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

#[derive(Args)]
pub struct QueryArgs {
    /// Question text, e.g. "Kalomi, employer, ?".
    pub question: String,

    /// Number of follow steps; without it the learned hop mixture is used.
    #[arg(long, conflicts_with = "mixture")]
    pub hops: Option<usize>,

    /// Use the learned mixture over 0, 1 and 2 hops.
    #[arg(long)]
    pub mixture: bool,

    /// Entities to print.
    #[arg(long, default_value_t = 10)]
    pub top: usize,

    /// Print one JSON record instead of tab-separated lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Serialize)]
struct RankedEntity {
    rank: usize,
    entity_id: u32,
    name: String,
    score: f64,
}

#[derive(Serialize)]
struct Evidence {
    entity_id: u32,
    name: String,
    weight: f64,
    doc_id: u32,
    span: String,
}

#[derive(Serialize)]
struct HopRecord {
    hop: usize,
    retrieved: usize,
    expanded: usize,
    nnz: usize,
    top: Vec<Evidence>,
}

#[derive(Serialize)]
struct QueryRecord {
    question: String,
    mode: String,
    entities: Vec<RankedEntity>,
    hops: Vec<HopRecord>,
}

pub fn query(paths: &PathArgs, args: &QueryArgs) -> Result<()> {
    let config = load_config(paths)?;
    let data = DataFiles::new(&paths.data_dir);
    let files = ArtifactFiles::new(&paths.artifacts_dir);
    let corpus = data.load_corpus()?;
    let loaded = Loaded::read(&files, &files.model())?;
    let n_hops = loaded.params.config().n_hops;
    let mode = match args.hops {
        Some(h) if h == 0 || h > n_hops => {
            bail!(vkb::Error::Config(format!("--hops must be in 1..={n_hops}")))
        }
        Some(_) => HopMode::Known,
        None => HopMode::Mixture,
    };
    let linker = question_linker(&corpus, &loaded.tfidf)?;
    let q = PreparedQuestion {
        text: args.question.clone(),
        hops: args.hops.unwrap_or(2),
        phi_q: query_features(loaded.params.config(), &args.question, Some(linker.linker())),
        z0: linker.link_with_fallback(&args.question, LINK_FALLBACK_N)?,
        answers: Default::default(),
        dev: false,
    };
    let emb = EntityEmbeddings::new(&loaded.params, corpus.entities());
    let ctx = loaded.frozen().context(&loaded.params, &emb);
    let record = match predict(&ctx, &q, &config.train.follow, mode) {
        Ok(p) => QueryRecord {
            question: q.text.clone(),
            mode: format!("{mode:?}").to_lowercase(),
            entities: p
                .z
                .ranked()
                .into_iter()
                .take(args.top)
                .enumerate()
                .map(|(i, (e, s))| RankedEntity {
                    rank: i + 1,
                    entity_id: e,
                    name: corpus.entity(e).surface_form.clone(),
                    score: s,
                })
                .collect(),
            hops: p
                .traces
                .iter()
                .map(|t| {
                    let best = t.argmax_mentions();
                    let mut top: Vec<Evidence> = t
                        .z
                        .iter()
                        .zip(best)
                        .map(|((e, w), (_, m))| {
                            let mention = corpus.mention(m);
                            Evidence {
                                entity_id: e,
                                name: corpus.entity(e).surface_form.clone(),
                                weight: w,
                                doc_id: mention.doc_id,
                                span: corpus.span_tokens(mention).join(" "),
                            }
                        })
                        .collect();
                    top.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.entity_id.cmp(&b.entity_id)));
                    top.truncate(args.top);
                    HopRecord {
                        hop: t.hop,
                        retrieved: t.retrieved.nnz(),
                        expanded: t.expanded_nnz,
                        nnz: t.z.nnz(),
                        top,
                    }
                })
                .collect(),
        },
        Err(vkb::Error::EmptyResult { hop, .. }) => {
            log::warn!("empty result at hop {hop}: no retrieved mention survived the filter");
            QueryRecord {
                question: q.text.clone(),
                mode: format!("{mode:?}").to_lowercase(),
                entities: Vec::new(),
                hops: Vec::new(),
            }
        }
        Err(e) => return Err(e.into()),
    };
    let mut out = std::io::stdout().lock();
    if args.json {
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
        return Ok(());
    }
    for e in &record.entities {
        writeln!(out, "{}\t{}\t{:.6}\t{}", e.rank, e.entity_id, e.score, e.name)?;
    }
    for h in &record.hops {
        writeln!(
            out,
            "# hop {}: retrieved {}, expanded {}, nnz {}",
            h.hop, h.retrieved, h.expanded, h.nnz
        )?;
        for ev in &h.top {
            writeln!(out, "#   {:.4}\t{}\tdoc {}: {}", ev.weight, ev.name, ev.doc_id, ev.span)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    mode: String,
    hops: String,
    n: usize,
    #[serde(rename = "hits@1")]
    hits_at_1: f64,
    #[serde(rename = "hits@5")]
    hits_at_5: f64,
    #[serde(rename = "hits@10")]
    hits_at_10: f64,
    empty_results: usize,
    sparsity_violations: usize,
}

fn eval_row(
    ctx: &ReasonerContext<'_>,
    qs: &[PreparedQuestion],
    follow: &FollowConfig,
    mode: HopMode,
    hops: String,
) -> Result<EvalRow> {
    let r = evaluate(ctx, qs, follow, mode)?;
    Ok(EvalRow {
        mode: format!("{mode:?}").to_lowercase(),
        hops,
        n: qs.len(),
        hits_at_1: r.hits.at(1).unwrap_or(0.0),
        hits_at_5: r.hits.at(5).unwrap_or(0.0),
        hits_at_10: r.hits.at(10).unwrap_or(0.0),
        empty_results: r.empty_results,
        sparsity_violations: r.sparsity_violations,
    })
}

pub fn eval(paths: &PathArgs) -> Result<()> {
    let config = load_config(paths)?;
    let data = DataFiles::new(&paths.data_dir);
    let files = ArtifactFiles::new(&paths.artifacts_dir);
    let corpus = data.load_corpus()?;
    let loaded = Loaded::read(&files, &files.model())?;
    let dev: Vec<PreparedQuestion> = prepared(&config, &data, &corpus, &loaded)?
        .into_iter()
        .filter(|q| q.dev)
        .collect();
    let emb = EntityEmbeddings::new(&loaded.params, corpus.entities());
    let ctx = loaded.frozen().context(&loaded.params, &emb);
    let follow = &config.train.follow;
    let mut hop_counts: Vec<usize> = dev.iter().map(|q| q.hops).collect();
    hop_counts.sort_unstable();
    hop_counts.dedup();
    let mut rows = Vec::new();
    for &h in &hop_counts {
        let qs: Vec<PreparedQuestion> = dev.iter().filter(|q| q.hops == h).cloned().collect();
        rows.push(eval_row(&ctx, &qs, follow, HopMode::Known, h.to_string())?);
    }
    let short: Vec<PreparedQuestion> = dev.iter().filter(|q| q.hops <= 2).cloned().collect();
    if !short.is_empty() {
        rows.push(eval_row(&ctx, &short, follow, HopMode::Mixture, "1-2".into())?);
    }
    report(&files, "eval", &config, &rows)?;
    let violations: usize = rows.iter().map(|r| r.sparsity_violations).sum();
    if violations > 0 {
        bail!(AssertionFailed(format!("{violations} hops had more than K = {} entities", follow.k)));
    }
    Ok(())
}

#[derive(Serialize)]
struct QpsRow {
    k: usize,
    threads: usize,
    queries: usize,
    qps: f64,
    latency_ms: f64,
    #[serde(rename = "hits@1")]
    hits_at_1: f64,
}

/// Top-1 entity of every question, or `None` on an empty result.
fn top1_all(ctx: &ReasonerContext<'_>, qs: &[PreparedQuestion], follow: &FollowConfig) -> Result<Vec<Option<u32>>> {
    qs.iter()
        .map(|q| match predict(ctx, q, follow, HopMode::Known) {
            Ok(p) => Ok(rank_entities(&p.z).first().copied()),
            Err(vkb::Error::EmptyResult { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        })
        .collect()
}

pub fn bench_qps(paths: &PathArgs) -> Result<()> {
    let config = load_config(paths)?;
    let data = DataFiles::new(&paths.data_dir);
    let files = ArtifactFiles::new(&paths.artifacts_dir);
    let corpus = data.load_corpus()?;
    let loaded = Loaded::read(&files, &files.model())?;
    let mut dev: Vec<PreparedQuestion> = prepared(&config, &data, &corpus, &loaded)?
        .into_iter()
        .filter(|q| q.dev)
        .collect();
    if config.qps.max_queries > 0 {
        dev.truncate(config.qps.max_queries);
    }
    if dev.is_empty() {
        bail!(vkb::Error::Validation("no dev questions to time".into()));
    }
    let emb = EntityEmbeddings::new(&loaded.params, corpus.entities());
    let ctx = loaded.frozen().context(&loaded.params, &emb);
    let threads = match config.qps.threads {
        0 => std::thread::available_parallelism().map_or(1, usize::from),
        n => n,
    };
    let mut rows = Vec::new();
    for &k in &config.qps.ks {
        let follow = FollowConfig {
            k,
            ..config.train.follow.clone()
        };
        let start = Instant::now();
        let top1 = top1_all(&ctx, &dev, &follow)?;
        let single = start.elapsed().as_secs_f64();
        let hits = dev
            .iter()
            .zip(&top1)
            .filter(|(q, t)| t.is_some_and(|e| q.answers.contains(&e)))
            .count() as f64
            / dev.len() as f64;

        let chunk = dev.len().div_ceil(threads);
        let start = Instant::now();
        std::thread::scope(|s| -> Result<()> {
            let handles: Vec<_> = dev
                .chunks(chunk)
                .map(|qs| s.spawn(|| top1_all(&ctx, qs, &follow)))
                .collect();
            for h in handles {
                h.join().expect("query worker panicked")?;
            }
            Ok(())
        })?;
        let parallel = start.elapsed().as_secs_f64();

        for (n_threads, secs) in [(1, single), (threads, parallel)] {
            rows.push(QpsRow {
                k,
                threads: n_threads,
                queries: dev.len(),
                qps: dev.len() as f64 / secs,
                latency_ms: secs * 1e3 / dev.len() as f64 * n_threads as f64,
                hits_at_1: hits,
            });
        }
    }
    report(&files, "bench_qps", &config, &rows)
}

pub fn bench_scaling(paths: &PathArgs) -> Result<()> {
    let config = load_config(paths)?;
    let files = ArtifactFiles::new(&paths.artifacts_dir);
    let rows = run_scaling(&config.scaling)?;
    report(&files, "bench_scaling", &config, &rows)?;
    let growth = follow_growth(&rows);
    log::info!("follow latency growth {growth:.3} (limit {})", config.scaling.max_growth);
    if growth >= config.scaling.max_growth {
        bail!(AssertionFailed(format!(
            "follow latency grew {growth:.2}x across entity counts, limit {}x",
            config.scaling.max_growth
        )));
    }
    Ok(())
}

pub fn ablate(paths: &PathArgs) -> Result<()> {
    let config = load_config(paths)?;
    let data = DataFiles::new(&paths.data_dir);
    let files = ArtifactFiles::new(&paths.artifacts_dir);
    let corpus = data.load_corpus()?;
    let checkpoint = if config.ablation.retrain {
        files.pretrained()
    } else {
        files.model()
    };
    let loaded = Loaded::read(&files, &checkpoint)?;
    let qs = prepared(&config, &data, &corpus, &loaded)?;
    let rows = vkb::pipeline::ablate(
        &loaded.params,
        loaded.frozen(),
        corpus.entities(),
        &qs,
        &config.train,
        &config.ablation,
        &AblationArm::ALL,
    )?;
    report(&files, "ablation", &config, &rows)
}
