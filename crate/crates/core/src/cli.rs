//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsq::{read_codes, write_codes, CodeMatrix};
use crate::config::RunConfig;
use crate::corpus::{build_corpus, load_manifest, read_features, write_features, write_manifest, ManifestEntry};
use crate::editor::{edit_and_decode, plan, EditRecord, Policy};
use crate::error::{Error, Result};
use crate::importance::{
    cumulative_mass_curve, diagnostics, normalize, profile, write_curve, ImportanceProfile, PartitionSpec,
};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Tokenizer};
use crate::ola::{process_long, model_processor};
use crate::probe::{CentroidProbe, ProbeReport};
use crate::seed::derive_seed;
use crate::tensor::Matrix;
use crate::trainer::{exact_chunks, fit, split_indices, write_loss_trace};

/// Feature, code and checkpoint format versions, in that order.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (LATF v1, LATC v1, LATM v1)");

#[derive(Debug, Parser)]
#[command(name = "slotcodec", version = VERSION, about = "Latent-slot feature tokenizer and analysis tools")]
pub struct Cli {
    /// JSON run configuration; every field optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every utterance of a manifest into code files.
    Tokenize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Slot-importance profiles and diagnostics from tokenized codes.
    Analyze {
        /// `codes.json` written by `tokenize`.
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap slots between paired utterances and decode the result.
    Edit(EditArgs),
    /// Overlap-add resynthesis of whole utterances.
    Stitch {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        chunk_frames: Option<usize>,
        #[arg(long)]
        overlap_frames: Option<usize>,
        #[arg(long)]
        clamp_eps: Option<f64>,
    },
    /// Fit a nearest-centroid probe and score edits.
    Probe {
        /// Manifest the probe is fitted on.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        factor: String,
        /// Manifest to measure accuracy on; defaults to `--manifest`.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Edit manifests written by `edit`.
        #[arg(long)]
        edits: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Importance profile written by `analyze`.
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "importance", value_parser = parse_policy)]
    pub policy: Policy,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Source `i` is paired with target `(i + shift) mod n`.
    #[arg(long, default_value_t = 1)]
    pub shift: usize,
    /// Keep only sources whose label matches, e.g. `noise=clean`.
    #[arg(long = "source", value_name = "FACTOR=VALUE")]
    pub source_filters: Vec<String>,
    #[arg(long = "target", value_name = "FACTOR=VALUE")]
    pub target_filters: Vec<String>,
}

fn parse_policy(s: &str) -> std::result::Result<Policy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// One tokenized utterance in `codes.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodesEntry {
    pub id: String,
    pub frames: usize,
    pub labels: BTreeMap<String, String>,
    pub chunks: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Synth { out } => synth(&cfg, &out),
        Command::Train { manifest, out } => train(&cfg, &manifest, &out),
        Command::Tokenize { checkpoint, manifest, out } => tokenize(&cfg, &checkpoint, &manifest, &out),
        Command::Analyze { codes, out } => analyze(&cfg, &codes, &out),
        Command::Edit(args) => edit(&cfg, &args),
        Command::Stitch { checkpoint, manifest, out, chunk_frames, overlap_frames, clamp_eps } => {
            let mut cfg = cfg;
            if chunk_frames.is_some() {
                cfg.ola.chunk_frames = chunk_frames;
            }
            if let Some(o) = overlap_frames {
                cfg.ola.overlap_frames = o;
            }
            if let Some(e) = clamp_eps {
                cfg.ola.clamp_eps = e;
            }
            stitch(&cfg, &checkpoint, &manifest, &out)
        }
        Command::Probe { manifest, factor, eval, edits, out } => probe(&cfg, &manifest, &factor, eval.as_deref(), &edits, &out),
    }
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.echo(out)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn relative_to(base: &Path, rel: &str) -> PathBuf {
    base.parent().unwrap_or(Path::new(".")).join(rel)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let entries = build_corpus(&cfg.corpus, out)?;
    eprintln!("wrote {} utterances to {}", entries.len(), out.display());
    Ok(())
}

fn check_width(ck: &Checkpoint, x: &Matrix<f32>, id: &str) -> Result<()> {
    if x.cols() != ck.model.feature_dim {
        return Err(Error::input(format!("{id}: feature width {} but the model expects {}", x.cols(), ck.model.feature_dim)));
    }
    Ok(())
}

fn train(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let data = load_manifest(manifest)?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.train.val_fraction, cfg.train.seed);
    let frames = cfg.model.chunk_frames();
    let pick = |idx: &[usize]| -> Vec<Matrix<f32>> { idx.iter().map(|&i| data[i].1.frames.clone()).collect() };
    let train_chunks = exact_chunks(&pick(&train_idx), frames);
    let val_chunks = exact_chunks(&pick(&val_idx), frames);
    if let Some(c) = train_chunks.first() {
        if c.cols() != cfg.model.feature_dim {
            return Err(Error::input(format!("features have width {} but model.feature_dim is {}", c.cols(), cfg.model.feature_dim)));
        }
    }
    let outcome = fit(&train_chunks, &val_chunks, &cfg.model, &cfg.bsq, &cfg.train)?;
    save_checkpoint(&out.join("checkpoint.latm"), &cfg.model, &cfg.bsq, &outcome.best)?;
    write_loss_trace(&out.join("loss.csv"), &outcome.trace)?;
    eprintln!(
        "trained {} epochs on {} chunks; best epoch {} (val {:.6})",
        cfg.train.epochs,
        train_chunks.len(),
        outcome.best_epoch,
        outcome.trace[outcome.best_epoch].val_loss
    );
    Ok(())
}

fn tokenize(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let ck = load_checkpoint(checkpoint)?;
    let tok = Tokenizer::new(&ck.params, &ck.model, &ck.bsq);
    let data = load_manifest(manifest)?;
    std::fs::create_dir_all(out.join("codes"))?;
    let entries = data
        .par_iter()
        .map(|(e, seq)| {
            check_width(&ck, &seq.frames, &e.id)?;
            let chunks = tok.tokenize(&seq.frames)?;
            let mut paths = Vec::with_capacity(chunks.len());
            for (c, codes) in chunks.iter().enumerate() {
                let rel = format!("codes/{}_{c:03}.latc", e.id);
                write_codes(codes, &out.join(&rel))?;
                paths.push(rel);
            }
            Ok(CodesEntry { id: e.id.clone(), frames: seq.num_frames(), labels: e.labels.clone(), chunks: paths })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join("codes.json"), &entries)
}

pub fn read_codes_manifest(path: &Path) -> Result<Vec<(CodesEntry, Vec<CodeMatrix<f32>>)>> {
    let entries: Vec<CodesEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    entries
        .into_iter()
        .map(|e| {
            let chunks = e.chunks.iter().map(|c| read_codes(&relative_to(path, c))).collect::<Result<Vec<_>>>()?;
            Ok((e, chunks))
        })
        .collect()
}

fn analyze(cfg: &RunConfig, codes: &Path, out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let entries = read_codes_manifest(codes)?;
    let by_id: BTreeMap<String, Vec<CodeMatrix<f64>>> =
        entries.iter().map(|(e, c)| (e.id.clone(), c.iter().map(|m| m.cast()).collect())).collect();
    let mut profiles = Vec::new();
    for factor in &cfg.analysis.factors {
        let part = match PartitionSpec::from_labels(factor, entries.iter().map(|(e, _)| (e.id.as_str(), &e.labels))) {
            Ok(p) => p,
            Err(Error::Input(msg)) => {
                eprintln!("skipping factor {factor}: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut prof = profile(&by_id, &part)?;
        prof.provenance = format!("{} ({} groups)", codes.display(), part.num_groups());
        prof.save(&out.join(format!("profile_{factor}.json")))?;
        match normalize(&prof.g) {
            Ok(n) => {
                write_curve(&out.join(format!("curve_{factor}.csv")), &cumulative_mass_curve(&n))?;
                profiles.push(prof);
            }
            Err(Error::DegenerateProfile) => eprintln!("factor {factor}: all-zero profile, left out of diagnostics"),
            Err(e) => return Err(e),
        }
    }
    write_json(&out.join("diagnostics.json"), &diagnostics(&profiles, &cfg.analysis.top_k)?)
}

fn parse_filters(filters: &[String]) -> Result<Vec<(String, String)>> {
    filters
        .iter()
        .map(|f| {
            f.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::input(format!("filter {f:?} is not FACTOR=VALUE")))
        })
        .collect()
}

fn matches(entry: &ManifestEntry, filters: &[(String, String)]) -> bool {
    filters.iter().all(|(k, v)| entry.labels.get(k) == Some(v))
}

fn edit(cfg: &RunConfig, args: &EditArgs) -> Result<()> {
    prepare_out(cfg, &args.out)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let tok = Tokenizer::new(&ck.params, &ck.model, &ck.bsq);
    let prof = ImportanceProfile::load(&args.profile)?;
    if prof.num_slots != ck.model.num_slots() {
        return Err(Error::input(format!("profile has {} slots, model has {}", prof.num_slots, ck.model.num_slots())));
    }
    let gbar = normalize(&prof.g)?;
    let data = load_manifest(&args.manifest)?;
    let (src_f, tgt_f) = (parse_filters(&args.source_filters)?, parse_filters(&args.target_filters)?);
    let sources: Vec<usize> = (0..data.len()).filter(|&i| matches(&data[i].0, &src_f)).collect();
    let targets: Vec<usize> = (0..data.len()).filter(|&i| matches(&data[i].0, &tgt_f)).collect();
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::input("filters leave no source or no target utterances"));
    }
    std::fs::create_dir_all(args.out.join("edited"))?;
    let records = sources
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let t = targets[(i + args.shift) % targets.len()];
            let (src, tgt) = (&data[s], &data[t]);
            check_width(&ck, &src.1.frames, &src.0.id)?;
            check_width(&ck, &tgt.1.frames, &tgt.0.id)?;
            let p = plan(args.policy, &gbar, args.gamma, derive_seed(args.seed, i as u64))?;
            let edited = edit_and_decode(&tok, &src.1.frames, &tgt.1.frames, &p)?;
            let rel = format!("edited/{}__{}.latf", src.0.id, tgt.0.id);
            write_features(&edited, &args.out.join(&rel))?;
            Ok(EditRecord {
                source_id: src.0.id.clone(),
                target_id: tgt.0.id.clone(),
                policy: args.policy,
                gamma: args.gamma,
                m: p.m(),
                slots: p.slots,
                output_path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&args.out.join("edits.json"), &records)
}

fn stitch(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let ola = cfg.ola_config(&ck.model)?;
    ola.validate()?;
    prepare_out(cfg, out)?;
    let data = load_manifest(manifest)?;
    std::fs::create_dir_all(out.join("stitched"))?;
    let process = model_processor(&ck.params, &ck.model);
    let mut entries = Vec::with_capacity(data.len());
    for (e, seq) in &data {
        check_width(&ck, &seq.frames, &e.id)?;
        let (y, _) = process_long(&seq.frames, &ola, &process)?;
        if !y.is_finite() {
            return Err(Error::numeric(format!("{}: non-finite stitched output", e.id)));
        }
        let rel = format!("stitched/{}.latf", e.id);
        write_features(&y, &out.join(&rel))?;
        entries.push(ManifestEntry { id: e.id.clone(), path: rel, labels: e.labels.clone() });
    }
    write_manifest(&entries, &out.join("manifest.json"))
}

fn probe(cfg: &RunConfig, manifest: &Path, factor: &str, eval: Option<&Path>, edits: &[PathBuf], out: &Path) -> Result<()> {
    prepare_out(cfg, out)?;
    let fit_data = load_manifest(manifest)?;
    let label = |e: &ManifestEntry| -> Result<String> {
        e.labels.get(factor).cloned().ok_or_else(|| Error::input(format!("{} has no {factor} label", e.id)))
    };
    let fit_labels = fit_data.iter().map(|(e, _)| label(e)).collect::<Result<Vec<_>>>()?;
    let samples: Vec<(&Matrix<f32>, &str)> = fit_data.iter().zip(&fit_labels).map(|((_, s), l)| (&s.frames, l.as_str())).collect();
    let probe = CentroidProbe::fit(factor, &samples)?;

    let eval_data = match eval {
        Some(p) => load_manifest(p)?,
        None => fit_data.clone(),
    };
    let eval_labels = eval_data.iter().map(|(e, _)| label(e)).collect::<Result<Vec<_>>>()?;
    let eval_samples: Vec<(&Matrix<f32>, &str)> =
        eval_data.iter().zip(&eval_labels).map(|((_, s), l)| (&s.frames, l.as_str())).collect();
    let confusion = probe.confusion(&eval_samples);

    let mut known: BTreeMap<&str, &str> = BTreeMap::new();
    for ((e, _), l) in fit_data.iter().zip(&fit_labels).chain(eval_data.iter().zip(&eval_labels)) {
        known.insert(&e.id, l);
    }
    let mut by_policy: BTreeMap<String, Vec<(Matrix<f32>, String)>> = BTreeMap::new();
    for path in edits {
        let records: Vec<EditRecord> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for r in records {
            let want = known
                .get(r.target_id.as_str())
                .ok_or_else(|| Error::input(format!("edit target {} is not in the probe manifests", r.target_id)))?;
            let x = read_features(&relative_to(path, &r.output_path))?;
            by_policy.entry(r.policy.to_string()).or_default().push((x, want.to_string()));
        }
    }
    let transfer_rate_by_policy = by_policy.iter().map(|(p, outs)| (p.clone(), probe.transfer_rate(outs))).collect();
    let report = ProbeReport { factor: factor.to_string(), accuracy: confusion.accuracy, confusion_matrix: confusion, transfer_rate_by_policy };
    write_json(&out.join("probe_report.json"), &report)
}
