//! Synthetic factor-controlled feature corpora.
//!
//! An utterance is the sum of three independent parts:
//!
//! * a content trajectory: a leaky-integrated Gaussian walk per feature
//!   dimension, centred in time and rescaled to RMS `content_scale`;
//! * a speaker vector, constant over time;
//! * i.i.d. Gaussian noise scaled so the content-to-noise power ratio equals
//!   the nominal SNR (zero for clean utterances).
//!
//! Content and speaker components depend only on `(master_seed, index)`;
//! the noise draws from the per-utterance seed. Because the content is
//! zero-mean in time, averaging a clean utterance over time yields its
//! speaker vector exactly.

mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use io::{
    decode_features, load_manifest, read_features, read_manifest, write_features, write_manifest, ManifestEntry,
    FEATURES_MAGIC, FEATURES_VERSION,
};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Matrix;

const SPEAKER_STREAM: u64 = 0x5350_4b52;
const CONTENT_STREAM: u64 = 0x434f_4e54;

/// Noise condition of an utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrLevel {
    Clean,
    Db(f64),
}

impl fmt::Display for SnrLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrLevel::Clean => f.write_str("clean"),
            SnrLevel::Db(db) => write!(f, "{db}"),
        }
    }
}

impl Serialize for SnrLevel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SnrLevel::Clean => s.serialize_str("clean"),
            SnrLevel::Db(db) => s.serialize_f64(*db),
        }
    }
}

impl<'de> Deserialize<'de> for SnrLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Db(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Db(db) if db.is_finite() => Ok(SnrLevel::Db(db)),
            Raw::Word(w) if w == "clean" => Ok(SnrLevel::Clean),
            _ => Err(serde::de::Error::custom("SNR must be a finite number of dB or \"clean\"")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_utterances: usize,
    /// Frames per utterance (T).
    pub frames: usize,
    /// Feature width (H).
    pub feature_dim: usize,
    pub num_speakers: usize,
    pub num_contents: usize,
    pub snr_grid_db: Vec<SnrLevel>,
    pub master_seed: u64,
    /// Standard deviation of speaker-vector entries.
    pub speaker_scale: f64,
    /// RMS of the content trajectory.
    pub content_scale: f64,
    /// AR(1) coefficient of the content walk, in [0, 1).
    pub smoothing: f64,
    /// Frames per second recorded on generated sequences.
    pub frame_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_utterances: 24,
            frames: 250,
            feature_dim: 16,
            num_speakers: 4,
            num_contents: 2,
            snr_grid_db: vec![SnrLevel::Clean, SnrLevel::Db(20.0), SnrLevel::Db(5.0)],
            master_seed: 0,
            speaker_scale: 1.0,
            content_scale: 1.0,
            smoothing: 0.9,
            frame_rate: 50.0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("frames", self.frames),
            ("feature_dim", self.feature_dim),
            ("num_speakers", self.num_speakers),
            ("num_contents", self.num_contents),
        ] {
            if v == 0 {
                return Err(Error::config(format!("corpus.{name} must be positive")));
            }
        }
        if self.snr_grid_db.is_empty() {
            return Err(Error::config("corpus.snr_grid_db must not be empty"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("corpus.smoothing must lie in [0, 1)"));
        }
        for (name, v) in [("speaker_scale", self.speaker_scale), ("content_scale", self.content_scale), ("frame_rate", self.frame_rate)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("corpus.{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// Factor assignment of utterance `index`: speakers vary fastest, then
    /// contents, then SNR levels, then takes.
    pub fn factors_of(&self, index: usize) -> UtteranceFactors {
        let s = self.num_speakers;
        let c = self.num_contents;
        let g = self.snr_grid_db.len();
        UtteranceFactors {
            speaker: index % s,
            content: (index / s) % c,
            snr: self.snr_grid_db[(index / (s * c)) % g],
            take: index / (s * c * g),
        }
    }

    pub fn utterance_seed(&self, index: usize) -> u64 {
        derive_seed(self.master_seed, index as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtteranceFactors {
    pub speaker: usize,
    pub content: usize,
    pub snr: SnrLevel,
    pub take: usize,
}

/// A `T x H` feature matrix with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Matrix<f32>,
    pub utterance_id: String,
    pub sample_rate_hint: f64,
}

impl FeatureSequence {
    pub fn new(utterance_id: impl Into<String>, frames: Matrix<f32>) -> Self {
        Self { frames, utterance_id: utterance_id.into(), sample_rate_hint: 50.0 }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorLabels {
    pub speaker_id: String,
    pub noise_level_db: SnrLevel,
    pub content_id: String,
    pub extra: BTreeMap<String, String>,
}

impl FactorLabels {
    /// Flat `factor → value` map used in manifests and partitions.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = self.extra.clone();
        m.insert("speaker".into(), self.speaker_id.clone());
        m.insert("content".into(), self.content_id.clone());
        m.insert("noise".into(), self.noise_level_db.to_string());
        m
    }
}

pub fn speaker_label(speaker: usize) -> String {
    format!("spk{speaker:02}")
}

pub fn content_label(content: usize) -> String {
    format!("txt{content:02}")
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

pub fn speaker_vector(spec: &CorpusSpec, speaker: usize) -> Vec<f64> {
    let seed = derive_seed(derive_seed(spec.master_seed, SPEAKER_STREAM), speaker as u64);
    gaussian_matrix(1, spec.feature_dim, seed).into_vec().into_iter().map(|x| x * spec.speaker_scale).collect()
}

pub fn content_trajectory(spec: &CorpusSpec, content: usize) -> Matrix<f64> {
    let seed = derive_seed(derive_seed(spec.master_seed, CONTENT_STREAM), content as u64);
    let steps = gaussian_matrix(spec.frames, spec.feature_dim, seed);
    let a = spec.smoothing;
    let innovation = (1.0 - a * a).sqrt();
    let mut x = Matrix::<f64>::zeros(spec.frames, spec.feature_dim);
    for t in 0..spec.frames {
        for j in 0..spec.feature_dim {
            let prev = if t == 0 { steps[(0, j)] } else { a * x[(t - 1, j)] + innovation * steps[(t, j)] };
            x[(t, j)] = prev;
        }
    }
    let means = x.column_means();
    for t in 0..spec.frames {
        for (v, m) in x.row_mut(t).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    let rms = (x.sum_sq_f64() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.scale(spec.content_scale / rms);
    }
    x
}

pub fn unit_noise(spec: &CorpusSpec, seed: u64) -> Matrix<f64> {
    gaussian_matrix(spec.frames, spec.feature_dim, seed)
}

/// Scale applied to unit noise: `content_scale · 10^(−snr/20)`, zero when clean.
pub fn noise_gain(spec: &CorpusSpec, snr: SnrLevel) -> f64 {
    match snr {
        SnrLevel::Clean => 0.0,
        SnrLevel::Db(db) => spec.content_scale * 10f64.powf(-db / 20.0),
    }
}

pub fn synth_utterance(spec: &CorpusSpec, speaker: usize, content: usize, snr: SnrLevel, seed: u64) -> Result<Matrix<f32>> {
    spec.validate()?;
    if speaker >= spec.num_speakers {
        return Err(Error::input(format!("speaker {speaker} out of range (have {})", spec.num_speakers)));
    }
    if content >= spec.num_contents {
        return Err(Error::input(format!("content {content} out of range (have {})", spec.num_contents)));
    }
    let spk = speaker_vector(spec, speaker);
    let mut x = content_trajectory(spec, content);
    let gain = noise_gain(spec, snr);
    let noise = if gain > 0.0 { Some(unit_noise(spec, seed)) } else { None };
    for t in 0..spec.frames {
        for j in 0..spec.feature_dim {
            x[(t, j)] += spk[j];
            if let Some(n) = &noise {
                x[(t, j)] += gain * n[(t, j)];
            }
        }
    }
    Ok(x.cast())
}

/// One generated utterance with its labels.
#[derive(Clone, Debug)]
pub struct LabeledUtterance {
    pub sequence: FeatureSequence,
    pub labels: FactorLabels,
    pub factors: UtteranceFactors,
}

pub fn utterance_id(index: usize) -> String {
    format!("utt{index:05}")
}

/// Generates every utterance of the corpus in memory.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<LabeledUtterance>> {
    spec.validate()?;
    (0..spec.num_utterances)
        .into_par_iter()
        .map(|i| {
            let f = spec.factors_of(i);
            let frames = synth_utterance(spec, f.speaker, f.content, f.snr, spec.utterance_seed(i))?;
            let mut extra = BTreeMap::new();
            extra.insert("take".to_string(), f.take.to_string());
            Ok(LabeledUtterance {
                sequence: FeatureSequence { frames, utterance_id: utterance_id(i), sample_rate_hint: spec.frame_rate },
                labels: FactorLabels {
                    speaker_id: speaker_label(f.speaker),
                    noise_level_db: f.snr,
                    content_id: content_label(f.content),
                    extra,
                },
                factors: f,
            })
        })
        .collect()
}

/// Writes `features/<id>.latf` for every utterance plus `manifest.json`.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let utterances = generate_corpus(spec)?;
    std::fs::create_dir_all(out_dir.join("features"))?;
    let entries: Vec<ManifestEntry> = utterances
        .par_iter()
        .map(|u| {
            let rel = format!("features/{}.latf", u.sequence.utterance_id);
            write_features(&u.sequence.frames, &out_dir.join(&rel))?;
            Ok(ManifestEntry { id: u.sequence.utterance_id.clone(), path: rel, labels: u.labels.to_map() })
        })
        .collect::<Result<_>>()?;
    write_manifest(&entries, &out_dir.join("manifest.json"))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec { frames: 30, feature_dim: 5, ..Default::default() }
    }

    #[test]
    fn clean_and_noisy_differ_by_scaled_noise() {
        let spec = small();
        let clean = synth_utterance(&spec, 1, 0, SnrLevel::Clean, 77).unwrap();
        let noisy = synth_utterance(&spec, 1, 0, SnrLevel::Db(40.0), 77).unwrap();
        let diff = noisy.cast::<f64>().sub(&clean.cast());
        let expected = noise_gain(&spec, SnrLevel::Db(40.0)) * unit_noise(&spec, 77).frobenius_norm();
        assert!((diff.frobenius_norm() - expected).abs() < 1e-4 * expected.max(1.0));
        assert_eq!(noise_gain(&spec, SnrLevel::Clean), 0.0);
        assert!((noise_gain(&spec, SnrLevel::Db(20.0)) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn speaker_cancels_between_contents() {
        let spec = small();
        let a = synth_utterance(&spec, 2, 0, SnrLevel::Clean, 5).unwrap().cast::<f64>();
        let b = synth_utterance(&spec, 2, 1, SnrLevel::Clean, 5).unwrap().cast::<f64>();
        let content = content_trajectory(&spec, 0).sub(&content_trajectory(&spec, 1));
        assert!(a.sub(&b).max_abs_diff(&content) < 1e-5);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = small();
        let a = synth_utterance(&spec, 3, 1, SnrLevel::Db(5.0), 9).unwrap();
        let b = synth_utterance(&spec, 3, 1, SnrLevel::Db(5.0), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_factors_are_rejected() {
        let spec = small();
        assert!(matches!(synth_utterance(&spec, 4, 0, SnrLevel::Clean, 0), Err(Error::Input(_))));
        assert!(matches!(synth_utterance(&spec, 0, 2, SnrLevel::Clean, 0), Err(Error::Input(_))));
    }

    #[test]
    fn clean_time_average_recovers_speaker() {
        let spec = small();
        let x = synth_utterance(&spec, 0, 1, SnrLevel::Clean, 1).unwrap();
        let mean = x.column_means();
        let spk = speaker_vector(&spec, 0);
        for (m, s) in mean.iter().zip(&spk) {
            assert!((m - s).abs() < 1e-5);
        }
    }

    #[test]
    fn content_has_requested_power() {
        let spec = CorpusSpec { content_scale: 0.5, ..small() };
        let c = content_trajectory(&spec, 0);
        assert!((c.sum_sq_f64() / c.len() as f64 - 0.25).abs() < 1e-12);
    }

    #[test]
    fn factor_grid_counts() {
        let spec = CorpusSpec { num_speakers: 4, num_contents: 2, num_utterances: 24, ..small() };
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..24 {
            let f = spec.factors_of(i);
            assert_eq!(f.take, 0);
            seen.insert((f.speaker, f.content, f.snr.to_string()));
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn snr_level_serde() {
        let v: Vec<SnrLevel> = serde_json::from_str(r#"["clean", 20, 2.5]"#).unwrap();
        assert_eq!(v, vec![SnrLevel::Clean, SnrLevel::Db(20.0), SnrLevel::Db(2.5)]);
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"["clean",20.0,2.5]"#);
        assert!(serde_json::from_str::<SnrLevel>(r#""loud""#).is_err());
    }
}
