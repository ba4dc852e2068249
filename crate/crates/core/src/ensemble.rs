//! Deep ensembles: independent training of M Gaussian networks, the equally weighted
//! mixture they define, and its mean/variance decomposition.
//!
//! For member outputs (mu_m, var_m):
//!
//! ```text
//! mean      = (1/M) Σ mu_m
//! aleatory  = (1/M) Σ var_m
//! epistemic = (1/M) Σ (mu_m - mean)²
//! total     = aleatory + epistemic
//! ```
//!
//! `total` is exactly the second central moment of the mixture `(1/M) Σ N(mu_m, var_m)`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Normalizer, SplitDataset, FEATURE_COUNT};
use crate::neural_net::{
    predict_batch, train, GaussianPrediction, MlpConfig, ModelDocument, NetError, Parameters,
    TrainConfig, TrainHistory, MODEL_FORMAT_VERSION,
};
use crate::stats::{gaussian_density, two_sided_z};

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 15;
pub const FAST_ENSEMBLE_SIZE: usize = 5;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("member seeds must be pairwise distinct (seed {0} repeated)")]
    DuplicateSeed(u64),
    #[error("member {index}: {source}")]
    Member { index: usize, source: NetError },
    #[error("members disagree on input dimension")]
    InputDimension,
    #[error("prediction: {0}")]
    Net(#[from] NetError),
    #[error("artifact format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("corrupt ensemble artifact: {0}")]
    CorruptArtifact(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What to train for one ensemble member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    /// HPO trial that produced this configuration, if any.
    #[serde(default)]
    pub trial_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub config: MlpConfig,
    pub train: TrainConfig,
    pub params: Parameters,
    pub trial_id: Option<u64>,
    pub history: Option<TrainHistory>,
}

impl Member {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Member>,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub mean: f64,
    pub aleatory_var: f64,
    pub epistemic_var: f64,
    pub total_var: f64,
    pub member_means: Vec<f64>,
    pub member_vars: Vec<f64>,
}

impl EnsemblePrediction {
    pub fn total_std(&self) -> f64 {
        self.total_var.sqrt()
    }
}

/// Trains each member independently (in parallel); output order follows `specs`.
pub fn train_ensemble(
    splits: &SplitDataset,
    normalizer: &Normalizer,
    specs: &[MemberSpec],
) -> Result<Ensemble, EnsembleError> {
    if specs.is_empty() {
        return Err(EnsembleError::EmptyEnsemble);
    }
    let mut seen = HashSet::new();
    for s in specs {
        if !seen.insert(s.train.seed) {
            return Err(EnsembleError::DuplicateSeed(s.train.seed));
        }
    }
    let members = specs
        .par_iter()
        .enumerate()
        .map(|(index, spec)| {
            let (params, history) = train(splits, normalizer, &spec.mlp, &spec.train)
                .map_err(|source| EnsembleError::Member { index, source })?;
            Ok(Member {
                config: spec.mlp,
                train: spec.train,
                params,
                trial_id: spec.trial_id,
                history: Some(history),
            })
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    Ok(Ensemble {
        members,
        normalizer: *normalizer,
    })
}

// Summing in sorted order makes the result independent of member order.
fn sorted_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Combines member Gaussians into the mixture mean and decomposed variance.
pub fn aggregate(member_preds: &[GaussianPrediction]) -> Result<EnsemblePrediction, EnsembleError> {
    if member_preds.is_empty() {
        return Err(EnsembleError::EmptyEnsemble);
    }
    let member_means: Vec<f64> = member_preds.iter().map(|p| p.mu).collect();
    let member_vars: Vec<f64> = member_preds.iter().map(|p| p.var).collect();
    if member_means.iter().chain(&member_vars).any(|v| !v.is_finite()) {
        return Err(EnsembleError::Net(NetError::NonFiniteInput));
    }
    let mean = sorted_mean(&member_means);
    let aleatory_var = sorted_mean(&member_vars);
    let deviations: Vec<f64> = member_means.iter().map(|m| (m - mean) * (m - mean)).collect();
    let epistemic_var = sorted_mean(&deviations);
    Ok(EnsemblePrediction {
        mean,
        aleatory_var,
        epistemic_var,
        total_var: aleatory_var + epistemic_var,
        member_means,
        member_vars,
    })
}

/// Mixture density (1/M) Σ N(y; mu_m, var_m).
pub fn predictive_density(member_preds: &[GaussianPrediction], y: f64) -> Result<f64, EnsembleError> {
    if member_preds.is_empty() {
        return Err(EnsembleError::EmptyEnsemble);
    }
    let sum: f64 = member_preds
        .iter()
        .map(|p| gaussian_density(y, p.mu, p.var))
        .sum();
    Ok(sum / member_preds.len() as f64)
}

/// Gaussian approximation to the central interval: mean ± z(level)·sqrt(total_var).
pub fn interval(ep: &EnsemblePrediction, level: f64) -> (f64, f64) {
    assert!(level > 0.0 && level < 1.0, "interval level must be in (0, 1)");
    let half = two_sided_z(level) * ep.total_var.sqrt();
    (ep.mean - half, ep.mean + half)
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn check(&self) -> Result<(), EnsembleError> {
        if self.members.is_empty() {
            return Err(EnsembleError::EmptyEnsemble);
        }
        if self.members.iter().any(|m| m.config.input_dim != FEATURE_COUNT) {
            return Err(EnsembleError::InputDimension);
        }
        Ok(())
    }

    /// Per-member Gaussians for each input, in physical units: result[point][member].
    pub fn member_predictions(
        &self,
        inputs: &[[f64; FEATURE_COUNT]],
    ) -> Result<Vec<Vec<GaussianPrediction>>, EnsembleError> {
        self.check()?;
        let per_member = self
            .members
            .iter()
            .map(|m| predict_batch(&m.params, &m.config, &self.normalizer, inputs))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((0..inputs.len())
            .map(|i| per_member.iter().map(|preds| preds[i]).collect())
            .collect())
    }

    pub fn predict(
        &self,
        inputs: &[[f64; FEATURE_COUNT]],
    ) -> Result<Vec<EnsemblePrediction>, EnsembleError> {
        self.member_predictions(inputs)?
            .iter()
            .map(|preds| aggregate(preds))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), EnsembleError> {
        self.check()?;
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let file = format!("member_{i:03}.json");
            let doc = ModelDocument::new(&m.config, &self.normalizer, &m.params);
            let json = serde_json::to_string(&doc).expect("model document serializes");
            std::fs::write(dir.join(&file), json)?;
            entries.push(ManifestEntry {
                file,
                seed: m.seed(),
                trial_id: m.trial_id,
                train: m.train,
            });
        }
        let manifest = Manifest {
            format_version: ENSEMBLE_FORMAT_VERSION,
            normalizer: self.normalizer,
            members: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, EnsembleError> {
        let manifest: Manifest =
            read_versioned(&dir.join(MANIFEST_FILE), ENSEMBLE_FORMAT_VERSION)?;
        if manifest.members.is_empty() {
            return Err(EnsembleError::CorruptArtifact("manifest lists no members".into()));
        }
        let mut members = Vec::with_capacity(manifest.members.len());
        for entry in &manifest.members {
            let path = member_path(dir, &entry.file)?;
            let doc: ModelDocument = read_versioned(&path, MODEL_FORMAT_VERSION)?;
            if doc.normalizer != manifest.normalizer {
                return Err(EnsembleError::CorruptArtifact(format!(
                    "{}: normalizer differs from manifest",
                    entry.file
                )));
            }
            let params = doc
                .parameters()
                .map_err(|e| EnsembleError::CorruptArtifact(format!("{}: {e}", entry.file)))?;
            if entry.train.seed != entry.seed {
                return Err(EnsembleError::CorruptArtifact(format!(
                    "{}: seed mismatch",
                    entry.file
                )));
            }
            members.push(Member {
                config: doc.config,
                train: entry.train,
                params,
                trial_id: entry.trial_id,
                history: None,
            });
        }
        let ens = Ensemble {
            members,
            normalizer: manifest.normalizer,
        };
        ens.check()?;
        Ok(ens)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
    trial_id: Option<u64>,
    train: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    normalizer: Normalizer,
    members: Vec<ManifestEntry>,
}

fn member_path(dir: &Path, file: &str) -> Result<PathBuf, EnsembleError> {
    let p = Path::new(file);
    if p.components().count() != 1 || p.is_absolute() {
        return Err(EnsembleError::CorruptArtifact(format!(
            "member file {file:?} escapes the artifact directory"
        )));
    }
    Ok(dir.join(p))
}

/// Parses a JSON document, reporting a version mismatch before any schema error.
fn read_versioned<T: serde::de::DeserializeOwned>(
    path: &Path,
    expected: u32,
) -> Result<T, EnsembleError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        EnsembleError::CorruptArtifact(format!("{}: {e}", path.display()))
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| EnsembleError::CorruptArtifact(format!("{}: {e}", path.display())))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == expected as u64 => {}
        Some(found) => return Err(EnsembleError::VersionMismatch { found, expected }),
        None => {
            return Err(EnsembleError::CorruptArtifact(format!(
                "{}: missing format_version",
                path.display()
            )))
        }
    }
    serde_json::from_value(value)
        .map_err(|e| EnsembleError::CorruptArtifact(format!("{}: {e}", path.display())))
}
