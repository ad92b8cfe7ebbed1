//! `mmembed`: train and evaluate multimodal word embeddings.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mmembed::checkpoint::Checkpoint;
use mmembed::embeddings::Embeddings;
use mmembed::eval::{evaluate, read_triplets, write_triplets};
use mmembed::features::{load_features, DEFAULT_FEATURE_DIM};
use mmembed::mine::{aggregate_votes, mine, read_annotations, read_click_log, read_pool, read_votes, DEFAULT_TOP_K};
use mmembed::model::Variant;
use mmembed::synth::{generate, SynthConfig};
use mmembed::text::{build_vocab, prepare_corpus, read_corpus, ImageSentences, Vocabulary};
use mmembed::train::{train, TrainConfig, TrainingData};
use mmembed::{Error, Result};

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "mmembed", version, about = "Word embeddings trained with image-conditioned language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key=value file supplying defaults for any long flag; flags on the
    /// command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results are the same for any
    /// thread count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct Cleaning {
    /// Sentences with fewer tokens are dropped.
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    /// Unigram overlap ratio at which a sentence counts as a duplicate of an
    /// earlier one for the same image.
    #[arg(long, default_value_t = 0.9)]
    dedup_threshold: f64,
}

#[derive(Subcommand, Debug)]
#[command(args_override_self = true)]
enum Command {
    /// Count words in a corpus and write the vocabulary.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 50)]
        min_count: u64,
        #[command(flatten)]
        cleaning: Cleaning,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write a checkpoint plus a CSV training log.
    Train(TrainArgs),
    /// Triplet precision of a checkpoint or exported embedding file.
    Eval {
        #[command(flatten)]
        source: EmbeddingSource,
        #[arg(long)]
        triplets: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Mine triplets from a click log.
    Mine {
        #[arg(long)]
        clicklog: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        top_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Keep the triplets a strict majority of annotators agreed with.
    Clean {
        #[arg(long)]
        votes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Nearest words by cosine similarity.
    Nn {
        #[command(flatten)]
        source: EmbeddingSource,
        #[arg(long)]
        word: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write a checkpoint's word embeddings as text.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic corpus, feature file and triplet file.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct EmbeddingSource {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Text file as written by `export`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Vocabulary file; built from the corpus with --min-count when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = "a")]
    variant: Variant,
    #[arg(long, default_value_t = 128)]
    dim_embed: usize,
    #[arg(long, default_value_t = 512)]
    dim_state: usize,
    #[arg(long, default_value_t = 1024)]
    negatives: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 10.0)]
    clip: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 50)]
    min_count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    validation_fraction: f64,
    /// Steps between validation passes; 0 validates once per epoch.
    #[arg(long, default_value_t = 0)]
    eval_interval: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[command(flatten)]
    cleaning: Cleaning,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// CSV log path (default: checkpoint path + ".log.csv").
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    concepts: usize,
    #[arg(long, default_value_t = 200)]
    images_per_concept: usize,
    #[arg(long, default_value_t = 10)]
    sentences_per_image: usize,
    #[arg(long, default_value_t = 20)]
    words_per_concept: usize,
    #[arg(long, default_value_t = 100)]
    noise_words: usize,
    #[arg(long, default_value_t = 1)]
    concept_words_per_sentence: usize,
    #[arg(long, default_value_t = 3)]
    noise_words_per_sentence: usize,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.01)]
    feature_noise: f64,
    #[arg(long, default_value_t = 10_000)]
    num_triplets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    common: Common,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::BuildVocab { common, .. }
            | Command::Eval { common, .. }
            | Command::Mine { common, .. }
            | Command::Clean { common, .. }
            | Command::Nn { common, .. }
            | Command::Export { common, .. } => common,
            Command::Train(a) => &a.common,
            Command::Synth(a) => &a.common,
        }
    }
}

/// Turns `key = value` lines into `--key value` arguments. Blank lines and
/// lines starting with `#` are skipped.
fn config_args(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        out.push(format!("--{}", k.trim().replace('_', "-")));
        out.push(v.trim().to_owned());
    }
    Ok(out)
}

/// Splices config-file arguments right after the subcommand so that any
/// flag repeated on the command line overrides them.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_owned(),
        None => match args.get(pos + 1) {
            Some(p) => p.clone(),
            None => return Ok(args),
        },
    };
    let extra = config_args(Path::new(&path))?;
    let Some(sub) = args.iter().skip(1).position(|a| !a.starts_with('-')) else {
        return Ok(args);
    };
    let at = sub + 2;
    let mut out = args[..at].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

fn load_groups(corpus: &Path, cleaning: &Cleaning) -> Result<Vec<ImageSentences>> {
    let records = read_corpus(corpus)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: corpus is empty", corpus.display())));
    }
    let groups = prepare_corpus(&records, cleaning.min_len, cleaning.dedup_threshold);
    let kept: usize = groups.iter().map(|g| g.sentences.len()).sum();
    info!(
        "{} of {} sentences kept after cleaning, {} images",
        kept,
        records.len(),
        groups.len()
    );
    Ok(groups)
}

fn vocab_from(groups: &[ImageSentences], min_count: u64) -> Vocabulary {
    build_vocab(groups.iter().flat_map(|g| g.sentences.iter().map(Vec::as_slice)), min_count)
}

fn load_embeddings(src: &EmbeddingSource) -> Result<Embeddings> {
    match (&src.checkpoint, &src.embeddings) {
        (Some(c), _) => Checkpoint::load(c)?.embeddings(),
        (None, Some(e)) => Embeddings::load(e),
        (None, None) => Err(Error::Config("pass --checkpoint or --embeddings".into())),
    }
}

fn cmd_train(a: &TrainArgs, out_text: &mut String) -> Result<()> {
    if a.variant.uses_features() && a.features.is_none() {
        return Err(Error::Data(format!("variant {} needs --features", a.variant)));
    }
    let groups = load_groups(&a.corpus, &a.cleaning)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::read_tsv(p)?,
        None => vocab_from(&groups, a.min_count),
    };
    if vocab.is_empty() {
        return Err(Error::Data(format!(
            "no word reaches --min-count {}",
            a.min_count
        )));
    }
    let features = match &a.features {
        Some(p) if a.variant.uses_features() => Some(load_features(p, a.feature_dim)?),
        _ => None,
    };
    let cfg = TrainConfig {
        variant: a.variant,
        embed_dim: a.dim_embed,
        state_dim: a.dim_state,
        learning_rate: a.lr,
        batch_size: a.batch,
        clip_norm: a.clip,
        max_epochs: a.epochs,
        lambda: a.lambda,
        num_negatives: a.negatives,
        seed: a.seed,
        validation_fraction: a.validation_fraction,
        eval_interval: a.eval_interval,
        patience: a.patience,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let data = TrainingData::build(&groups, &vocab, features.as_ref(), &cfg)?;
    info!(
        "training {} on {} sentences ({} held out), vocabulary {}",
        cfg.variant,
        data.train.len(),
        data.validation.len(),
        vocab.len()
    );
    let out = train(&data, &vocab, a.feature_dim, &cfg)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    Checkpoint::new(cfg, vocab, out.params)?.save(&a.out)?;
    out.log.save(&log_path)?;
    *out_text = format!(
        "steps={}\nepochs={}\nstopped_early={}\nbest_val_loss={}\ncheckpoint={}\nlog={}\n",
        out.steps,
        out.epochs,
        out.stopped_early,
        out.best_val_loss.map_or("none".into(), |v| format!("{v:.6}")),
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

/// Runs one subcommand and returns what it prints on stdout.
fn run(cli: Cli) -> Result<String> {
    let mut text = String::new();
    if let Some(n) = cli.command.common().threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::BuildVocab {
            corpus,
            min_count,
            cleaning,
            out,
            ..
        } => {
            let groups = load_groups(corpus, cleaning)?;
            let vocab = vocab_from(&groups, *min_count);
            vocab.write_tsv(out)?;
            text = format!("words={}\nout={}\n", vocab.len(), out.display());
        }
        Command::Train(a) => cmd_train(a, &mut text)?,
        Command::Eval {
            source, triplets, ..
        } => {
            let emb = load_embeddings(source)?;
            let t = read_triplets(triplets)?;
            if t.is_empty() {
                return Err(Error::Data(format!("{}: no triplets", triplets.display())));
            }
            let report = evaluate(&t, &emb)?;
            text = format!("{report}\n{}", report.key_values());
        }
        Command::Mine {
            clicklog,
            annotations,
            pool,
            top_k,
            seed,
            out,
            ..
        } => {
            let clicks = read_click_log(clicklog)?;
            let ann = read_annotations(annotations)?;
            let pool = read_pool(pool)?;
            let triplets = mine(&clicks, &ann, &pool, *top_k, *seed)?;
            write_triplets(out, &triplets)?;
            text = format!("triplets={}\nout={}\n", triplets.len(), out.display());
        }
        Command::Clean { votes, out, .. } => {
            let summary = aggregate_votes(&read_votes(votes)?);
            write_triplets(out, &summary.accepted)?;
            text = format!(
                "accepted={}\nrejected={}\ninsufficient_votes={}\nout={}\n",
                summary.accepted.len(),
                summary.rejected,
                summary.insufficient,
                out.display()
            );
        }
        Command::Nn { source, word, k, .. } => {
            let emb = load_embeddings(source)?;
            let hits = emb
                .nearest(word, *k)
                .ok_or_else(|| Error::Data(format!("{word:?} is not in the vocabulary")))?;
            for (w, sim) in hits {
                text.push_str(&format!("{w}\t{sim:.4}\n"));
            }
        }
        Command::Export {
            checkpoint, out, ..
        } => {
            let emb = Checkpoint::load(checkpoint)?.embeddings()?;
            emb.save(out)?;
            text = format!("words={}\ndim={}\nout={}\n", emb.len(), emb.dim(), out.display());
        }
        Command::Synth(a) => {
            let cfg = SynthConfig {
                num_concepts: a.concepts,
                images_per_concept: a.images_per_concept,
                sentences_per_image: a.sentences_per_image,
                words_per_concept: a.words_per_concept,
                noise_words: a.noise_words,
                concept_words_per_sentence: a.concept_words_per_sentence,
                noise_words_per_sentence: a.noise_words_per_sentence,
                feature_dim: a.feature_dim,
                feature_noise: a.feature_noise,
                num_triplets: a.num_triplets,
                seed: a.seed,
            };
            let d = generate(&cfg)?;
            d.write(&a.out)?;
            text = format!(
                "images={}\nsentences={}\ntriplets={}\nout={}\n",
                d.image_concepts.len(),
                d.corpus.len(),
                d.triplets.len(),
                a.out.display()
            );
        }
    }
    Ok(text)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MMEMBED_LOG", "info")).init();
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(text) => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { EXIT_INPUT } else { EXIT_NUMERIC })
        }
    }
}
