//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotcodec::bsq::{dequantize, quantize, BsqConfig, CodeMatrix};
use slotcodec::corpus::{generate_corpus, CorpusSpec, LabeledUtterance, SnrLevel};
use slotcodec::editor::{plan, select_slots, swap_codes, Policy, SwapPlan};
use slotcodec::importance::{entropy, gini, importance_score, jaccard_topk, normalize, profile, PartitionSpec};
use slotcodec::model::{ModelConfig, ModelParams, QuantMode, Tokenizer};
use slotcodec::ola::{chunk_grid, frames_for_samples, process_long, OlaConfig};
use slotcodec::probe::CentroidProbe;
use slotcodec::trainer::gradcheck::check_gradients;
use slotcodec::trainer::{fit, TrainConfig};
use slotcodec::Matrix;

/// Largest concentration entropy reported for the trained profiles.
const REPORTED_MAX_ENTROPY: f64 = 5.49;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.detail = format!("{}; {:.2?}", o.detail, took);
    if let Some(limit) = limit {
        if took > limit {
            o.pass = false;
            o.detail = format!("{} exceeds {:?}", o.detail, limit);
        }
    }
    o
}

fn quantizer_bijection() -> Outcome {
    let bsq = BsqConfig { dim: 13, ..Default::default() };
    let vocab = bsq.vocab_size();
    let mut bad = 0u64;
    for k in 0..vocab {
        let code = dequantize::<f64>(k, 13).expect("index in range");
        let back = quantize(&code);
        if back.index != k || back.code != code {
            bad += 1;
        }
    }
    outcome(vocab == 8192 && bad == 0, format!("vocab {vocab}, {bad} failed round-trips"))
}

fn gradient_oracle() -> Outcome {
    let model = ModelConfig {
        feature_dim: 4,
        token_rate: 25.0,
        chunk_duration: 0.12,
        frame_rate: 50.0,
        max_frames: 6,
        enc_layers: 1,
        dec_layers: 1,
        enc_width: 8,
        dec_width: 8,
        heads: 2,
        mlp_ratio: 2,
    };
    let bsq = BsqConfig { dim: 3, ..Default::default() };
    let shape_ok = model.num_slots() == 3 && model.chunk_frames() == 6;
    let params = ModelParams::<f64>::init(&model, &bsq, 4).expect("valid tiny config");
    let x = Matrix::<f64>::randn(6, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
    let r = check_gradients(&params, &x, &model, &bsq, 1e-5).expect("gradient check runs");
    outcome(
        shape_ok && r.max_rel_error <= 1e-4,
        format!("{} parameters, max relative error {:.2e} at {}", r.checked, r.max_rel_error, r.worst_tensor),
    )
}

fn importance_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let j = rng.random_range(2..=8);
        let d = rng.random_range(1..=13);
        let means = Matrix::<f64>::randn(j, d, 1.0, &mut rng);
        let ours = importance_score(&means).expect("J >= 2");
        let centre = means.column_means();
        let x = DMatrix::from_fn(j, d, |r, c| means[(r, c)] - centre[c]);
        let top = (x.transpose() * &x).symmetric_eigen().eigenvalues.iter().copied().fold(f64::MIN, f64::max);
        worst = worst.max((ours - top / (j - 1) as f64).abs());
    }
    let same = importance_score(&Matrix::from_rows(&[vec![0.5, -0.5], vec![0.5, -0.5]])).unwrap();
    let two = importance_score(&Matrix::from_rows(&[vec![-1.0], vec![1.0]])).unwrap();
    let three = importance_score(&Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]])).unwrap();
    outcome(
        worst <= 1e-9 && same == 0.0 && two == 2.0 && three == 1.5,
        format!("max |Δ| {worst:.2e} over 100 instances; hand examples {same}, {two}, {three}"),
    )
}

fn diagnostics_calibration() -> Outcome {
    let uniform = vec![1.0 / 250.0; 250];
    let h = entropy(&uniform);
    let l = 7usize;
    let mut one_hot = vec![0.0; l];
    one_hot[3] = 1.0;
    let a = [9.0, 8.0, 7.0, 6.0, 5.0, 0.0, 0.0, 0.0, 0.0];
    let b = [9.0, 0.0, 0.0, 0.0, 0.0, 8.0, 7.0, 6.0, 5.0];
    let jac = jaccard_topk(&a, &b, 5).unwrap();
    let g_uniform = gini(&uniform);
    let g_hot = gini(&one_hot);
    let pass = (h - 250f64.ln()).abs() <= 1e-9
        && (h - 5.5215).abs() < 5e-5
        && h > REPORTED_MAX_ENTROPY
        && g_uniform.abs() <= 1e-12
        && (g_hot - (1.0 - 1.0 / l as f64)).abs() <= 1e-12
        && (jac - 1.0 / 9.0).abs() <= 1e-12;
    outcome(
        pass,
        format!("H(uniform,250) = {h:.6} > {REPORTED_MAX_ENTROPY}; gini uniform {g_uniform:.1e}, one-hot(L={l}) {g_hot:.12}; jaccard@5 {jac:.6}"),
    )
}

fn selection_law() -> Outcome {
    let g = [0.5, 0.3, 0.2];
    let m05 = select_slots(&g, 0.5).unwrap().m();
    let m07 = select_slots(&g, 0.7).unwrap().m();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut violations = 0;
    for _ in 0..1000 {
        let l = rng.random_range(1..=64);
        let raw: Vec<f64> = (0..l).map(|_| rng.random::<f64>().powi(3)).collect();
        let Ok(p) = normalize(&raw) else { continue };
        let (a, b): (f64, f64) = (rng.random_range(1e-6..=1.0), rng.random_range(1e-6..=1.0));
        let (lo, hi) = (a.min(b), a.max(b));
        let small = select_slots(&p, lo).unwrap();
        let large = select_slots(&p, hi).unwrap();
        if !small.slots.iter().all(|s| large.contains(*s)) {
            violations += 1;
        }
    }
    outcome(m05 == 1 && m07 == 2 && violations == 0, format!("m(0.5) = {m05}, m(0.7) = {m07}; {violations} monotonicity violations in 1000"))
}

fn ola_identity() -> Outcome {
    let k = frames_for_samples(80_000, 16_000.0);
    let cfg = OlaConfig::new(k);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut lengths: Vec<usize> = vec![1, 249, 250, 251, 450, 451, 1250];
    lengths.extend((0..100).map(|_| rng.random_range(1..=1250)));
    let mut worst = 0.0f64;
    let mut bad_len = 0;
    for &t in &lengths {
        let x = Matrix::<f64>::randn(t, 16, 1.0, &mut rng);
        let (y, env) = process_long(&x, &cfg, |c| Ok(c.clone())).unwrap();
        if y.shape() != x.shape() || !y.is_finite() {
            bad_len += 1;
            continue;
        }
        for (i, &e) in env.iter().enumerate() {
            if e > 1e-3 {
                for j in 0..16 {
                    worst = worst.max((y[(i, j)] - x[(i, j)]).abs());
                }
            }
        }
    }
    let grid_ok = k == 250 && cfg.hop() == 200 && chunk_grid(450, &cfg).unwrap().windows.len() == 2;
    outcome(
        grid_ok && bad_len == 0 && worst <= 1e-5,
        format!("K = {k}, h = {}; {} lengths, max error {worst:.2e}", cfg.hop(), lengths.len()),
    )
}

fn toy_train_config() -> TrainConfig {
    TrainConfig { epochs: 50, lr: 2e-3, batch_size: 4, seed: 3, val_fraction: 0.0, ..Default::default() }
}

fn toy_bsq() -> BsqConfig {
    BsqConfig { dim: 8, ..Default::default() }
}

fn training_sanity() -> Outcome {
    let model = ModelConfig::toy();
    let spec = CorpusSpec {
        num_utterances: 24,
        frames: model.chunk_frames(),
        feature_dim: model.feature_dim,
        num_speakers: 4,
        num_contents: 2,
        snr_grid_db: vec![SnrLevel::Clean, SnrLevel::Db(20.0), SnrLevel::Db(5.0)],
        master_seed: 11,
        ..Default::default()
    };
    let data: Vec<Matrix<f32>> = generate_corpus(&spec).unwrap().into_iter().map(|u| u.sequence.frames).collect();
    let cfg = toy_train_config();
    let a = fit(&data, &[], &model, &toy_bsq(), &cfg).unwrap();
    let b = fit(&data, &[], &model, &toy_bsq(), &cfg).unwrap();
    let first = a.trace[0].train_loss;
    let last = a.trace.last().unwrap().train_loss;
    let same = a.trace == b.trace && a.last == b.last;
    // The objective includes a signed entropy term, so reconstruction error
    // is required to halve as well.
    let mse = |p: &ModelParams<f32>| {
        data.iter().map(|x| p.loss(x, &model, &toy_bsq(), QuantMode::Hard).unwrap().mse).sum::<f64>() / data.len() as f64
    };
    let init = ModelParams::<f32>::init(&model, &toy_bsq(), cfg.seed).unwrap();
    let (mse0, mse1) = (mse(&init), mse(&a.last));
    outcome(
        data.len() >= 24 && last <= 0.5 * first && mse1 <= 0.5 * mse0 && same,
        format!("loss {first:.4} -> {last:.4}, reconstruction MSE {mse0:.4} -> {mse1:.4} over 50 epochs; repeat run identical: {same}"),
    )
}

struct Intervention {
    utts: Vec<LabeledUtterance>,
    params: ModelParams<f32>,
    model: ModelConfig,
    bsq: BsqConfig,
}

fn intervention_effectiveness() -> Outcome {
    let model = ModelConfig::toy();
    let spec = CorpusSpec {
        num_utterances: 30,
        frames: model.chunk_frames(),
        feature_dim: model.feature_dim,
        num_speakers: 6,
        num_contents: 5,
        snr_grid_db: vec![SnrLevel::Clean],
        master_seed: 1,
        ..Default::default()
    };
    let utts = generate_corpus(&spec).unwrap();
    let data: Vec<Matrix<f32>> = utts.iter().map(|u| u.sequence.frames.clone()).collect();
    let bsq = toy_bsq();
    let params = fit(&data, &[], &model, &bsq, &toy_train_config()).unwrap().best;
    evaluate_intervention(&Intervention { utts, params, model, bsq })
}

fn evaluate_intervention(run: &Intervention) -> Outcome {
    const GAMMA: f64 = 0.5;
    let tok = Tokenizer::new(&run.params, &run.model, &run.bsq);
    let frames: Vec<&Matrix<f32>> = run.utts.iter().map(|u| &u.sequence.frames).collect();
    let codes: Vec<CodeMatrix<f32>> = frames.iter().map(|x| tok.tokenize(x).unwrap().remove(0)).collect();
    let labels: Vec<BTreeMap<String, String>> = run.utts.iter().map(|u| u.labels.to_map()).collect();
    let part = PartitionSpec::from_labels("speaker", run.utts.iter().zip(&labels).map(|(u, l)| (u.sequence.utterance_id.as_str(), l))).unwrap();
    let by_id: BTreeMap<String, Vec<CodeMatrix<f64>>> =
        run.utts.iter().zip(&codes).map(|(u, c)| (u.sequence.utterance_id.clone(), vec![c.cast()])).collect();
    let gbar = normalize(&profile(&by_id, &part).unwrap().g).unwrap();

    let speakers: Vec<&str> = run.utts.iter().map(|u| u.labels.speaker_id.as_str()).collect();
    let samples: Vec<(&Matrix<f32>, &str)> = frames.iter().copied().zip(speakers.iter().copied()).collect();
    let probe = CentroidProbe::fit("speaker", &samples).unwrap();

    let pairs: Vec<(usize, usize)> = (0..codes.len())
        .flat_map(|i| (0..codes.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| speakers[i] != speakers[j])
        .collect();
    let decode = |c: CodeMatrix<f32>| tok.detokenize(&[c], run.model.chunk_frames()).unwrap();
    let rate = |make: &dyn Fn(usize, usize) -> SwapPlan| -> (f64, usize) {
        let mut m = 0;
        let outs: Vec<(Matrix<f32>, String)> = pairs
            .iter()
            .map(|&(i, j)| {
                let p = make(i, j);
                m = p.m();
                (decode(swap_codes(&codes[i], &codes[j], &p).unwrap()), speakers[j].to_string())
            })
            .collect();
        (probe.transfer_rate(&outs), m)
    };
    let mut rates = BTreeMap::new();
    let mut budget = 0;
    for policy in Policy::ALL {
        let (r, m) = rate(&|i, j| plan(policy, &gbar, GAMMA, (i * codes.len() + j) as u64).unwrap());
        rates.insert(policy, r);
        budget = m;
    }
    let all = SwapPlan { policy: Policy::Importance, gamma: Some(1.0), slots: (0..gbar.len()).collect(), seed: None };
    let (all_rate, _) = rate(&|_, _| all.clone());

    let mut self_ok = true;
    for (i, c) in codes.iter().enumerate() {
        let p = plan(Policy::Importance, &gbar, GAMMA, 0).unwrap();
        let swapped = swap_codes(c, c, &p).unwrap();
        self_ok &= swapped == *c && decode(swapped) == tok.resynthesize(frames[i]).unwrap();
    }

    let (imp, rnd, least) = (rates[&Policy::Importance], rates[&Policy::Random], rates[&Policy::Least]);
    outcome(
        pairs.len() >= 100 && imp > rnd && imp > least && all_rate == 1.0 && self_ok,
        format!(
            "{} pairs, gamma {GAMMA} -> m = {budget} of {}: importance {imp:.3}, random {rnd:.3}, least {least:.3}; all-slot {all_rate:.3}; self-swap unchanged: {self_ok}",
            pairs.len(),
            gbar.len()
        ),
    )
}

const CLI_CONFIG: &str = r#"{
  "corpus": {
    "num_utterances": 16,
    "frames": 45,
    "feature_dim": 8,
    "num_speakers": 4,
    "num_contents": 2,
    "snr_grid_db": ["clean", 10],
    "master_seed": 5
  },
  "model": {
    "feature_dim": 8,
    "token_rate": 15,
    "chunk_duration": 0.4,
    "max_frames": 20,
    "enc_layers": 1,
    "dec_layers": 1,
    "enc_width": 16,
    "dec_width": 16,
    "heads": 2,
    "mlp_ratio": 2
  },
  "bsq": { "dim": 6 },
  "train": { "epochs": 2, "lr": 0.002, "val_fraction": 0.25 },
  "ola": { "overlap_frames": 5 },
  "analysis": { "top_k": [2, 3] }
}
"#;

fn cli_pipeline(root: &Path) -> Result<(), String> {
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    std::fs::write(root.join("run.json"), CLI_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 8] = [
        &["synth", "--out", "corpus"],
        &["train", "--manifest", "corpus/manifest.json", "--out", "train"],
        &["tokenize", "--checkpoint", "train/checkpoint.latm", "--manifest", "corpus/manifest.json", "--out", "tok"],
        &["analyze", "--codes", "tok/codes.json", "--out", "analysis"],
        &[
            "edit", "--checkpoint", "train/checkpoint.latm", "--manifest", "corpus/manifest.json", "--profile",
            "analysis/profile_speaker.json", "--out", "edit_random", "--policy", "random", "--seed", "7", "--gamma", "0.5",
        ],
        &[
            "edit", "--checkpoint", "train/checkpoint.latm", "--manifest", "corpus/manifest.json", "--profile",
            "analysis/profile_speaker.json", "--out", "edit_importance", "--gamma", "0.5",
        ],
        &["stitch", "--checkpoint", "train/checkpoint.latm", "--manifest", "corpus/manifest.json", "--out", "stitch"],
        &[
            "probe", "--manifest", "corpus/manifest.json", "--factor", "speaker", "--edits", "edit_random/edits.json",
            "--edits", "edit_importance/edits.json", "--out", "probe",
        ],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_slotcodec"))
            .current_dir(root)
            .arg("--config")
            .arg("run.json")
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("`{}` failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

fn list_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for root in [&a, &b] {
        if let Err(e) = cli_pipeline(root) {
            return outcome(false, e);
        }
    }
    let (fa, fb) = (list_files(&a), list_files(&b));
    if fa != fb {
        return outcome(false, "runs produced different file sets");
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|p| std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap())
        .map(|p| p.display().to_string())
        .collect();
    let commands = ["corpus", "train", "tok", "analysis", "edit_random", "edit_importance", "stitch", "probe"];
    let covered = commands.iter().all(|d| fa.iter().any(|p| p.starts_with(d)));
    outcome(
        differing.is_empty() && covered,
        format!("{} files from 7 subcommands compared; differing: {differing:?}", fa.len()),
    )
}

type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("quantizer bijection", Some(Duration::from_secs(1)), quantizer_bijection),
        ("gradient oracle", Some(Duration::from_secs(30)), gradient_oracle),
        ("importance oracle", None, importance_oracle),
        ("diagnostics calibration", None, diagnostics_calibration),
        ("selection law", None, selection_law),
        ("OLA identity", Some(Duration::from_secs(10)), ola_identity),
        ("training sanity", Some(Duration::from_secs(600)), training_sanity),
        ("intervention effectiveness", None, intervention_effectiveness),
        ("end-to-end determinism", None, cli_determinism),
    ];
    let mut failed = 0;
    for (n, (name, limit, run)) in criteria.into_iter().enumerate() {
        let o = timed(limit, run);
        if !o.pass {
            failed += 1;
        }
        println!("{} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, n + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
