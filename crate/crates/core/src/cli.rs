//! Command-line surface: `train`, `encode`, `search` and `eval`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conceptlab::{ConceptVocabulary, Vocabulary};
use crate::config::RunConfig;
use crate::data::{
    check_frame_dim, load_training_data, load_word_vectors, read_captions, read_features, sized_model, TrainingData,
    Vocabularies,
};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_bidirectional, rank_candidates};
use crate::index::EmbeddingIndex;
use crate::model::DualEncoding;
use crate::numcore::ParamStore;
use crate::trainer::{Checkpoint, EpochRecord, Trainer};

#[derive(Debug, Parser)]
#[command(name = "dualenc", version, about = "Dual encoding text-to-video retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes the best checkpoint to --out.
    Train(TrainArgs),
    /// Embed every video of a feature file into an index.
    Encode(EncodeArgs),
    /// Rank indexed videos for one query sentence.
    Search(SearchArgs),
    /// Bidirectional retrieval metrics of an index against captions.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Best checkpoint path. `<out>.last` and `<out>.log` are written too.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint (usually `<out>.last`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Return after this many epochs of this invocation; resume later
    /// with `--checkpoint <out>.last`.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub query: String,
    /// Weight of the latent similarity in the fused score.
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Encode(a) => cmd_encode(&a, out),
        Command::Search(a) => cmd_search(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io(Path::new("<stdout>"), e)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Run configuration and vocabularies stored next to the trainer state.
fn bundle(trainer: &Trainer, cfg: &RunConfig, vocab: &Vocabularies) -> Checkpoint {
    let mut c = trainer.checkpoint();
    c.metadata.insert("config".into(), cfg.hyperparameters_text());
    c.metadata.insert("vocab.words".into(), vocab.words.words().join("\n"));
    c.metadata.insert("vocab.concepts".into(), vocab.concepts.to_text());
    c
}

fn bundle_vocab(c: &Checkpoint, cfg: &RunConfig) -> Result<Vocabularies> {
    let words = c.meta("vocab.words")?;
    let words = Vocabulary::from_words(
        words.split('\n').filter(|w| !w.is_empty()).map(str::to_owned),
        cfg.min_count,
    );
    let concepts = ConceptVocabulary::parse(c.meta("vocab.concepts")?, "checkpoint concepts")?;
    Ok(Vocabularies { words, concepts })
}

/// A trained model restored from a checkpoint.
pub struct LoadedModel {
    pub config: RunConfig,
    pub vocab: Vocabularies,
    pub model: DualEncoding,
    pub store: ParamStore,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let c = Checkpoint::load(path)?;
    let config = RunConfig::parse(c.meta("config")?, &format!("{} (config)", path.display()))?;
    let vocab = bundle_vocab(&c, &config)?;
    let (model, mut store) = DualEncoding::new(sized_model(&config, &vocab), &mut ChaCha8Rng::seed_from_u64(0))?;
    c.restore_params(&mut store)?;
    Ok(LoadedModel {
        config,
        vocab,
        model,
        store,
    })
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &a.features {
        cfg.data.features = Some(p.clone());
    }
    if let Some(p) = &a.captions {
        cfg.data.captions = Some(p.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let TrainingData { vocab, train, val } = load_training_data(&cfg)?;

    let mut trainer = Trainer::new(sized_model(&cfg, &vocab), cfg.loss.clone(), cfg.train.clone())?;
    if let Some(p) = &cfg.data.embeddings {
        let n = load_word_vectors(p, &mut trainer.store, &trainer.model.text, &vocab.words)?;
        log::info!("initialized {n} of {} word vectors from {}", vocab.words.words().len(), p.display());
    }
    let resuming = a.checkpoint.is_some();
    if let Some(p) = &a.checkpoint {
        let c = Checkpoint::load(p)?;
        if bundle_vocab(&c, &cfg)? != vocab {
            return Err(Error::invalid(format!(
                "{}: checkpoint vocabulary differs from the training captions",
                p.display()
            )));
        }
        trainer.restore(&c)?;
    }

    let log_path = with_suffix(&a.out, ".log");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let header_needed = !resuming || log.metadata().map(|m| m.len() == 0).unwrap_or(true);
    if header_needed {
        writeln!(log, "{}", EpochRecord::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    }
    writeln!(out, "{}", EpochRecord::CSV_HEADER).map_err(stdout_err)?;
    let last_path = with_suffix(&a.out, ".last");
    let limit = a.stop_after.map_or(usize::MAX, |n| trainer.epoch.saturating_add(n));
    trainer.fit_until(&train, &val, limit, |rec, t| {
        let line = rec.csv_line();
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        writeln!(out, "{line}").map_err(stdout_err)?;
        let c = bundle(t, &cfg, &vocab);
        if rec.new_best {
            c.save(&a.out)?;
        }
        c.save(&last_path)
    })?;
    if !a.out.exists() {
        bundle(&trainer, &cfg, &vocab).save(&a.out)?;
    }
    Ok(())
}

pub fn cmd_encode(a: &EncodeArgs, out: &mut dyn Write) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let videos = read_features(&a.features)?;
    check_frame_dim(m.config.model.encoder.frame_dim, &videos, &a.features)?;
    let index = m.model.index_videos(&m.store, &videos, m.config.loss.alpha)?;
    index.write(&a.out)?;
    writeln!(out, "encoded {} videos into {}", index.len(), a.out.display()).map_err(stdout_err)
}

fn check_index(index: &EmbeddingIndex, m: &LoadedModel, path: &Path) -> Result<()> {
    let space = &m.model.config.space;
    if index.dim_lat() != space.latent_dim || index.dim_con() != space.concept_dim {
        return Err(Error::invalid(format!(
            "{}: index dimensions {}+{} do not match the checkpoint's {}+{}",
            path.display(),
            index.dim_lat(),
            index.dim_con(),
            space.latent_dim,
            space.concept_dim
        )));
    }
    Ok(())
}

pub fn cmd_search(a: &SearchArgs, out: &mut dyn Write) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let index = EmbeddingIndex::read(&a.index)?;
    check_index(&index, &m, &a.index)?;
    let tokens = m.vocab.words.sentence("query", &a.query)?;
    let q = m.model.embed_text(&m.store, &tokens)?;
    let ranking = rank_candidates("query", &q, &index, a.alpha)?;
    for (i, c) in ranking.ranked.iter().take(a.topk).enumerate() {
        writeln!(out, "{}\t{}\t{:.6}", i + 1, index.id(c.index), c.score).map_err(stdout_err)?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let index = EmbeddingIndex::read(&a.index)?;
    check_index(&index, &m, &a.index)?;
    let captions = read_captions(&a.captions)?;
    let texts: Vec<_> = captions
        .iter()
        .map(|c| m.vocab.words.encode(c.caption_id.clone(), &c.tokens))
        .collect();
    let sentences = m.model.index_texts(&m.store, &texts, a.alpha)?;
    let truth: Vec<String> = captions.iter().map(|c| c.video_id.clone()).collect();
    let report = evaluate_bidirectional(&index, &sentences, &truth, a.alpha)?;
    write!(out, "{}{}", report.to_table(), report.to_key_values()).map_err(stdout_err)
}
