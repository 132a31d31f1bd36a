use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn, LevelFilter};

use memcap::bleu::BLEU_HEADER;
use memcap::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use memcap::data::{
    assemble_dataset, load_captions, load_features, write_captions, write_features, Dataset,
    FeatureFormat, FeatureStore, Split, SplitSpec, SplitSpecLists, Vocabulary,
};
use memcap::decode::{decode_all, evaluate_with_candidates};
use memcap::grad::{gradcheck_config, gradient_check, GradCheckOptions};
use memcap::optim::{format_history, TrainSession};
use memcap::settings::{KeyGroup, Settings};
use memcap::{fsio, Activation, Error, FeedMode, Vector};

const EXIT_DATA: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "memcap", version, about = "Gated deep-transition RNN image captioner")]
struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best-dev checkpoint.
    Train(TrainArgs),
    /// Print a greedy caption for each image.
    Generate(GenerateArgs),
    /// Score greedy captions against reference captions with BLEU.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic caption corpus and its features.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Caption file, `image_id<TAB>caption` per line.
    #[arg(long)]
    captions: PathBuf,
    /// Feature file (TSV or binary, detected automatically).
    #[arg(long)]
    features: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-epoch loss history (default: `<out>.history`).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// File of image ids, one per line (default: every id in the feature file).
    #[arg(long)]
    ids: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    captions: PathBuf,
    /// train, dev or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Write `image_id<TAB>candidate` lines here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// tanh or relu.
    #[arg(long, default_value = "tanh")]
    activation: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// learned, first_step, always, none or all.
    #[arg(long, default_value = "all")]
    feed_mode: String,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Coordinates sampled per run.
    #[arg(long, default_value_t = 600)]
    samples: usize,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    images: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// tsv or binary.
    #[arg(long, default_value = "binary")]
    format: String,
}

enum Failure {
    Lib(Error),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        (false, _) => LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();

    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(EXIT_CHECK),
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) {
                EXIT_USAGE
            } else {
                EXIT_DATA
            })
        }
    }
}

fn apply_overrides(settings: &mut Settings, a: &TrainArgs) -> Result<(), Error> {
    if let Some(cfg) = &a.config {
        settings.apply_file(cfg)?;
    }
    for kv in &a.set {
        let (k, v) = Settings::split_assignment(kv)
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        settings.set(k, v)?;
    }
    if let Some(n) = a.epochs {
        settings.train.epochs = n;
    }
    Ok(())
}

/// Fills in a derived size, rejecting an explicit value that disagrees.
fn derive_size(slot: &mut usize, actual: usize, key: &str) -> Result<(), Error> {
    if *slot != 0 && *slot != actual {
        return Err(Error::Config(format!(
            "{key} = {} but the data gives {actual}",
            *slot
        )));
    }
    *slot = actual;
    Ok(())
}

fn checkpoint_split(ckpt: &Checkpoint) -> SplitSpec {
    SplitSpec::Explicit(SplitSpecLists {
        train: Some(ckpt.splits.train.clone()),
        dev: ckpt.splits.dev.clone(),
        test: ckpt.splits.test.clone(),
    })
}

fn history_path(a: &TrainArgs) -> PathBuf {
    a.history.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".history");
        s.into()
    })
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let resumed = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let mut settings = match &resumed {
        Some(c) => c.settings.clone(),
        None => Settings::default(),
    };
    apply_overrides(&mut settings, &a)?;
    settings.train.validate()?;

    let groups = load_captions(&a.captions)?;
    let features = load_features(&a.features, None)?;
    if let Some(c) = &resumed {
        for group in [KeyGroup::Model, KeyGroup::Data] {
            let changed = c.settings.changed_keys(&settings, group);
            if !changed.is_empty() {
                return Err(Error::Config(format!(
                    "cannot change {} when resuming",
                    changed.join(", ")
                ))
                .into());
            }
        }
        let changed: Vec<_> = c
            .settings
            .changed_keys(&settings, KeyGroup::Train)
            .into_iter()
            .filter(|k| *k != "epochs")
            .collect();
        if !changed.is_empty() {
            warn!(
                "resuming with changed {}; results will differ from an uninterrupted run",
                changed.join(", ")
            );
        }
    }
    derive_size(&mut settings.model.feature_dim, features.dim(), "feature_dim")
        .map_err(|e| retag_data(e, resumed.is_some()))?;

    let (split, vocab) = match &resumed {
        Some(c) => (checkpoint_split(c), Some(c.vocab.clone())),
        None => (settings.data.split_spec()?, None),
    };
    let (dataset, vocab) = assemble_dataset(groups, &features, &split, settings.data.min_count, vocab)?;
    derive_size(&mut settings.model.vocab_size, vocab.len(), "vocab_size")?;
    settings.model.validate()?;
    info!(
        "{} train / {} dev / {} test images, vocabulary {} words, feature dim {}",
        dataset.train.len(),
        dataset.dev.len(),
        dataset.test.len(),
        vocab.len(),
        features.dim()
    );
    let split_ids = dataset.split_ids();

    let mut session = match resumed {
        Some(c) => c.into_session(settings.train.clone())?,
        None => TrainSession::new(settings.model.clone(), settings.train.clone())?,
    };
    let history = history_path(&a);
    let persist = |session: &TrainSession| -> Result<(), Error> {
        save_checkpoint(&a.out, &Checkpoint::from_session(&settings, &vocab, &split_ids, session))?;
        fsio::write_atomic(&history, format_history(&session.history).as_bytes())
    };
    if session.is_finished() {
        info!(
            "already trained for {} of {} epochs; nothing to do",
            session.epochs_done(),
            session.train_cfg.epochs
        );
        persist(&session)?;
        return Ok(());
    }
    while !session.is_finished() {
        let record = session.run_epoch(&dataset)?;
        info!("{record}");
        persist(&session)?;
    }
    info!(
        "best dev loss {:.6}; checkpoint {}",
        session.best_dev,
        a.out.display()
    );
    Ok(())
}

/// A feature-size clash on resume is a data problem, not a usage one.
fn retag_data(e: Error, resumed: bool) -> Error {
    match e {
        Error::Config(msg) if resumed => Error::Data(msg),
        other => other,
    }
}

fn check_feature_dim(store: &FeatureStore, ckpt: &Checkpoint, path: &Path) -> Result<(), Error> {
    let want = ckpt.model_config().feature_dim;
    if store.dim() != want {
        return Err(Error::Data(format!(
            "{}: features have dimension {} but the model expects {want}",
            path.display(),
            store.dim()
        )));
    }
    Ok(())
}

fn caption_text(vocab: &Vocabulary, ids: &[usize]) -> String {
    vocab.decode(ids).join(" ")
}

fn cmd_generate(a: GenerateArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let store = load_features(&a.features, None)?;
    check_feature_dim(&store, &ckpt, &a.features)?;

    let ids: Vec<String> = match &a.ids {
        None => store.ids().map(String::from).collect(),
        Some(path) => {
            let wanted: BTreeSet<String> = fsio::read_to_string(path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let missing: Vec<&str> = wanted
                .iter()
                .filter(|id| store.get(id).is_none())
                .map(String::as_str)
                .collect();
            if !missing.is_empty() {
                return Err(Error::Data(format!(
                    "{}: no features for {}",
                    path.display(),
                    missing.join(", ")
                ))
                .into());
            }
            wanted.into_iter().collect()
        }
    };
    let feats: Vec<&Vector> = ids.iter().map(|id| store.get(id).expect("checked")).collect();
    let decoded = decode_all(&ckpt.params, ckpt.model_config(), &feats)?;
    let mut out = String::new();
    for (id, d) in ids.iter().zip(&decoded) {
        if d.truncated {
            warn!("caption for `{id}` hit max_decode_len without END");
        }
        out.push_str(id);
        out.push('\t');
        out.push_str(&caption_text(&ckpt.vocab, &d.tokens));
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    let split: Split = a.split.parse()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let store = load_features(&a.features, None)?;
    check_feature_dim(&store, &ckpt, &a.features)?;
    let groups = load_captions(&a.captions)?;
    let (dataset, vocab): (Dataset, _) = assemble_dataset(
        groups,
        &store,
        &checkpoint_split(&ckpt),
        ckpt.vocab.min_count(),
        Some(ckpt.vocab.clone()),
    )?;
    let images = dataset.get(split);
    if images.is_empty() {
        return Err(Error::Data(format!("the {} split has no images", a.split)).into());
    }
    let (report, decoded) = evaluate_with_candidates(&ckpt.params, ckpt.model_config(), images, &vocab)?;
    if let Some(path) = &a.dump {
        let mut text = String::new();
        for (img, d) in images.iter().zip(&decoded) {
            text.push_str(&format!("{}\t{}\n", img.image_id, caption_text(&vocab, &d.tokens)));
        }
        fsio::write_atomic(path, text.as_bytes())?;
    }
    eprintln!("{BLEU_HEADER}");
    println!("{report}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let activation: Activation = a.activation.parse()?;
    let modes: Vec<FeedMode> = if a.feed_mode == "all" {
        FeedMode::ALL.to_vec()
    } else {
        vec![a.feed_mode.parse()?]
    };
    let options = GradCheckOptions {
        samples: a.samples,
        inject_fault: a.inject_fault,
        ..Default::default()
    };
    let mut failed = false;
    for mode in modes {
        let config = gradcheck_config(activation, mode, a.depth);
        let report = gradient_check(&config, a.seed, &options)?;
        println!("{report}");
        failed |= !report.passed();
    }
    if failed {
        Err(Failure::Check)
    } else {
        Ok(())
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let format: FeatureFormat = a.format.parse()?;
    let corpus = memcap::data::gen_synthetic(a.images, a.feature_dim, a.seed)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let captions = a.out_dir.join("captions.tsv");
    let features = a.out_dir.join(match format {
        FeatureFormat::Tsv => "features.tsv",
        FeatureFormat::Binary => "features.bin",
    });
    write_captions(&captions, &corpus.captions)?;
    write_features(&features, &corpus.features, format)?;
    info!(
        "wrote {} images to {} and {}",
        a.images,
        captions.display(),
        features.display()
    );
    Ok(())
}
