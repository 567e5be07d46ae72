use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use recon_core::config::TrainConfig;
use recon_core::data::{
    generate_synthetic, inject_noise, read_corpus, write_corpus, Corpus, FeaturePair, Mixing,
    Split, SyntheticConfig,
};
use recon_core::division::{Divider, Division};
use recon_core::evaluation::{
    division_quality_from_assignments, evaluate_retrieval, render_division_table,
    render_retrieval_table, DivisionReport, RetrievalReport,
};
use recon_core::model::{read_checkpoint, write_checkpoint, SimilarityModel};
use recon_core::training::{train_with_observer, EpochReport};
use serde::{Deserialize, Serialize};

use crate::args::{DivideArgs, EvalArgs, GenerateArgs, MixingArg, ReportArgs, TrainArgs};
use crate::manifest::{CorpusRef, RunManifest, EPOCHS_FILE, MANIFEST_FILE, SUMMARY_FILE};
use crate::CliError;

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    if args.pairs == 0 {
        return Err(CliError::Usage("--pairs must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&args.noise) {
        return Err(CliError::Usage(format!("--noise {} outside [0, 1)", args.noise)));
    }
    let split = Split::from(args.split);
    if split != Split::Train && args.noise > 0.0 {
        return Err(CliError::Usage("noise can only be injected into the train split".into()));
    }
    let config = SyntheticConfig {
        n_pairs: args.pairs,
        vocab_size: args.vocab,
        items_per_modality: (args.items_min, args.items_max),
        objects_per_pair: (args.objects_min, args.objects_max),
        visual_dim: args.visual_dim,
        text_dim: args.text_dim,
        latent_dim: args.latent_dim,
        noise_sigma: args.sigma,
        mixing: match args.mixing {
            MixingArg::Identity => Mixing::Identity,
            MixingArg::Random => Mixing::Random,
        },
        seed: args.seed,
    };
    let mut corpus = generate_synthetic(&config, split)?;
    if args.noise > 0.0 {
        corpus = inject_noise(&corpus, args.noise, args.seed)?;
    }
    write_corpus(&corpus, &args.output)?;
    println!(
        "wrote {}: {} {} pairs, visual dim {}, text dim {}, noise rate {}, {} mismatched",
        args.output.display(),
        corpus.len(),
        corpus.split,
        corpus.visual_dim,
        corpus.text_dim,
        corpus.noise_rate,
        corpus.mismatch_count()
    );
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus, CliError> {
    read_corpus(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path, corpus: &Corpus) -> Result<SimilarityModel, CliError> {
    let model =
        read_checkpoint(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    if model.visual_dim() != corpus.visual_dim || model.text_dim() != corpus.text_dim {
        return Err(CliError::Input(format!(
            "checkpoint expects dims ({}, {}), corpus has ({}, {})",
            model.visual_dim(),
            model.text_dim(),
            corpus.visual_dim,
            corpus.text_dim
        )));
    }
    Ok(model)
}

/// What `train` leaves behind besides checkpoints and logs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs_completed: usize,
    /// `None` when no epoch beat the initial model (or no epoch ran).
    pub best_epoch: Option<usize>,
    pub initial_val_rsum: Option<f64>,
    pub best_val_rsum: Option<f64>,
    pub final_division: Option<DivisionReport>,
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let (config, corpus_ref, val_ref) = match &args.from_manifest {
        Some(path) => {
            let m = RunManifest::read(path)?;
            m.corpus.verify()?;
            if let Some(v) = &m.val_corpus {
                v.verify()?;
            }
            (args.flags.resolve(Some(m.config))?, m.corpus, m.val_corpus)
        }
        None => {
            let corpus = args.corpus.as_ref().expect("clap requires --corpus");
            (
                args.flags.resolve(None)?,
                CorpusRef::hash(corpus)?,
                args.val.as_deref().map(CorpusRef::hash).transpose()?,
            )
        }
    };
    let train_set = load_corpus(&corpus_ref.path)?;
    let val_set = val_ref.as_ref().map(|v| load_corpus(&v.path)).transpose()?;
    if train_set.is_empty() {
        return Err(CliError::Input(format!("{} has no pairs", corpus_ref.path.display())));
    }
    if val_set.as_ref().is_some_and(Corpus::is_empty) {
        return Err(CliError::Input("validation corpus has no pairs".into()));
    }

    let manifest = RunManifest::new(config.clone(), corpus_ref, val_ref);
    let dir = match &args.run_dir {
        Some(d) => d.clone(),
        None => {
            let stem = manifest.corpus.path.file_stem().map_or("run".into(), |s| s.to_string_lossy());
            args.run_root.join(format!("{stem}-{}", manifest.fingerprint()))
        }
    };
    prepare_run_dir(&dir, args.force)?;
    manifest.write(&dir)?;
    let art = &manifest.artifacts;

    let mut epochs = BufWriter::new(File::create(dir.join(&art.epochs))?);
    let mut timings = BufWriter::new(File::create(dir.join(&art.timings))?);
    let observed = train_with_observer(&train_set, val_set.as_ref(), &config, |report, _| {
        let line = serde_json::to_string(report)?;
        writeln!(epochs, "{line}")?;
        epochs.flush()?;
        writeln!(
            timings,
            "{}",
            serde_json::json!({ "epoch": report.epoch, "wall_clock_secs": report.wall_clock_secs })
        )?;
        Ok(())
    });
    epochs.flush()?;
    timings.flush()?;
    let outcome = observed?;

    write_checkpoint(&outcome.initial, &dir.join(&art.initial_checkpoint))?;
    write_checkpoint(&outcome.best, &dir.join(&art.best_checkpoint))?;
    write_checkpoint(&outcome.last, &dir.join(&art.final_checkpoint))?;
    if let Some(division) = &outcome.division {
        division.write_csv(BufWriter::new(File::create(dir.join(&art.partitions))?))?;
    }
    let best_val_rsum = match outcome.best_epoch {
        Some(e) => outcome.reports.iter().find(|r| r.epoch == e).and_then(|r| r.val_rsum),
        None => outcome.initial_val_rsum,
    };
    let summary = RunSummary {
        epochs_completed: outcome.reports.len(),
        best_epoch: outcome.best_epoch,
        initial_val_rsum: outcome.initial_val_rsum,
        best_val_rsum,
        final_division: outcome.reports.last().and_then(|r| r.division.clone()),
    };
    fs::write(dir.join(&art.summary), serde_json::to_string_pretty(&summary)? + "\n")?;

    println!("run directory: {}", dir.display());
    match best_val_rsum {
        Some(r) => println!("best checkpoint: val rSum {r:.2} (epoch {})", fmt_epoch(outcome.best_epoch)),
        None => println!("best checkpoint: final model (no validation corpus)"),
    }
    Ok(())
}

fn fmt_epoch(e: Option<usize>) -> String {
    e.map_or_else(|| "initial".into(), |e| e.to_string())
}

fn prepare_run_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.join(MANIFEST_FILE).exists() {
        if !force {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir.join("checkpoints"))?;
    Ok(())
}

fn divide_corpus(
    corpus: &Corpus,
    model: &SimilarityModel,
    config: &TrainConfig,
    epoch: u64,
) -> Result<Division, CliError> {
    if corpus.len() < 2 {
        return Err(CliError::Input("division needs at least two pairs".into()));
    }
    let pairs: Vec<&FeaturePair> = corpus.pairs.iter().collect();
    Ok(Divider::new().divide(&pairs, model, config, epoch)?)
}

pub fn divide(args: &DivideArgs) -> Result<(), CliError> {
    let config = args.flags.resolve(None)?;
    let corpus = load_corpus(&args.corpus)?;
    let model = load_checkpoint(&args.checkpoint, &corpus)?;
    let division = divide_corpus(&corpus, &model, &config, args.epoch)?;
    let sizes = division.sizes();
    match &args.output {
        Some(path) => {
            division.write_csv(BufWriter::new(File::create(path)?))?;
            println!(
                "clean {}, local {}, noisy {} -> {}",
                sizes.clean,
                sizes.local,
                sizes.noisy,
                path.display()
            );
            if corpus.has_ground_truth() {
                let q = division_quality_from_assignments(&division.assignments)?;
                print!("{}", render_division_table(&q));
            }
        }
        None => division.write_csv(io::stdout().lock())?,
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SuspectedMismatch {
    pair_id: u32,
    y_cm: f64,
    y_im: f64,
    ground_truth_match: Option<bool>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    split: Split,
    pairs: usize,
    retrieval: RetrievalReport,
    division: Option<DivisionReport>,
    suspected_mismatches: Option<Vec<SuspectedMismatch>>,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let config = args.flags.resolve(None)?;
    let corpus = load_corpus(&args.corpus)?;
    if let Some(expected) = args.split.map(Split::from) {
        if corpus.split != expected {
            return Err(CliError::Input(format!(
                "{} is a {} corpus, expected {expected}",
                args.corpus.display(),
                corpus.split
            )));
        }
    }
    if corpus.is_empty() {
        return Err(CliError::Input(format!("{} has no pairs", args.corpus.display())));
    }
    let model = load_checkpoint(&args.checkpoint, &corpus)?;
    let retrieval = evaluate_retrieval(&corpus, &model)?;

    let wants_division = corpus.has_ground_truth() || args.dump_mismatches.is_some();
    let division = if wants_division && corpus.len() >= 2 {
        Some(divide_corpus(&corpus, &model, &config, 0)?)
    } else {
        None
    };
    let quality = match &division {
        Some(d) if corpus.has_ground_truth() => Some(division_quality_from_assignments(&d.assignments)?),
        _ => None,
    };
    let suspects = args.dump_mismatches.map(|k| {
        division.as_ref().map_or_else(Vec::new, |d| {
            d.suspected_mismatches(config.omega1, k)
                .into_iter()
                .map(|a| SuspectedMismatch {
                    pair_id: a.pair_id,
                    y_cm: a.y_cm,
                    y_im: a.y_im,
                    ground_truth_match: a.ground_truth_match,
                })
                .collect()
        })
    });
    let report = EvalReport {
        split: corpus.split,
        pairs: corpus.len(),
        retrieval,
        division: quality,
        suspected_mismatches: suspects,
    };

    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let label = format!("{} ({} pairs)", report.split, report.pairs);
    print!("{}", render_retrieval_table(&[(label.as_str(), &report.retrieval)]));
    if let Some(q) = &report.division {
        println!();
        print!("{}", render_division_table(q));
    }
    if let Some(rows) = &report.suspected_mismatches {
        println!();
        println!("{:>8}  {:>8}  {:>8}  {:>11}", "pair_id", "y_cm", "y_im", "true_match");
        for r in rows {
            let truth = r.ground_truth_match.map_or("unknown", |t| if t { "yes" } else { "no" });
            println!("{:>8}  {:>8.4}  {:>8.4}  {:>11}", r.pair_id, r.y_cm, r.y_im, truth);
        }
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let manifest = RunManifest::read(&args.run_dir.join(MANIFEST_FILE))?;
    let epochs_path: PathBuf = args.run_dir.join(EPOCHS_FILE);
    let text = fs::read_to_string(&epochs_path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", epochs_path.display())))?;
    let reports = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<EpochReport>)
        .collect::<Result<Vec<_>, _>>()?;
    let summary: Option<RunSummary> = match fs::read(args.run_dir.join(SUMMARY_FILE)) {
        Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };

    if args.json {
        let value = serde_json::json!({ "manifest": manifest, "epochs": reports, "summary": summary });
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    print!("{}", render_epoch_table(&reports));
    match &summary {
        Some(s) => {
            let rsum = s.best_val_rsum.map_or_else(|| "-".into(), |v| format!("{v:.2}"));
            println!("best epoch {} (val rSum {rsum})", fmt_epoch(s.best_epoch));
        }
        None => println!("run did not finish"),
    }
    Ok(())
}

fn render_epoch_table(reports: &[EpochReport]) -> String {
    let opt = |v: Option<f64>, p: usize| v.map_or_else(|| "-".into(), |v| format!("{v:.p$}"));
    let mut out = format!(
        "{:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6} {:>9} {:>8}\n",
        "epoch", "phase", "lr", "warmup", "clean", "local", "noisy", "|Dc|", "|Dl|", "|Dn|", "Dc mism%", "val rSum"
    );
    for r in reports {
        let (c, l, n) = r
            .partition_sizes
            .map_or(("-".into(), "-".into(), "-".into()), |s| {
                (s.clean.to_string(), s.local.to_string(), s.noisy.to_string())
            });
        let mism = r.division.as_ref().map(|d| 100.0 * d.clean_mismatch_fraction());
        let phase = match r.phase {
            recon_core::training::Phase::Warmup => "warmup",
            recon_core::training::Phase::Divided => "divided",
        };
        out.push_str(&format!(
            "{:>5} {:>8} {:>8.4} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6} {:>9} {:>8}\n",
            r.epoch,
            phase,
            r.learning_rate,
            opt(r.warmup_loss, 4),
            opt(r.clean_loss, 4),
            opt(r.local_loss, 4),
            opt(r.noisy_loss, 4),
            c,
            l,
            n,
            opt(mism, 2),
            opt(r.val_rsum, 2),
        ));
    }
    out
}
