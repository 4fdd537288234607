//! MUSHRA listening-test bookkeeping: blinded test definitions, rater
//! sessions, an append-only rating journal and score aggregation.
//!
//! Condition labels live only in the [`TestDefinition`]; every rater-facing
//! view refers to stimuli by opaque tokens.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TEST_FORMAT_VERSION: u32 = 1;
/// z value of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum MushraError {
    #[error("invalid test definition: {0}")]
    Definition(String),
    #[error("unknown test {0}")]
    UnknownTest(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("trial index {index} out of range ({trials} trials)")]
    TrialOutOfRange { index: usize, trials: usize },
    #[error("trial {0} already rated in this session")]
    AlreadyRated(usize),
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MushraError {
    /// Errors caused by the request rather than the service.
    pub fn is_client_error(&self) -> bool {
        !matches!(self, Self::Io { .. } | Self::Journal { .. } | Self::Json(_))
    }

    pub fn is_not_found(&self) -> bool {
        matches!(
            self,
            Self::UnknownTest(_) | Self::UnknownSession(_) | Self::UnknownToken(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stimulus {
    pub token: String,
    pub condition: String,
    /// WAV file, relative to the definition file unless absolute.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStimulus {
    pub token: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trial {
    pub trial_id: String,
    pub utterance: String,
    pub reference: ReferenceStimulus,
    pub stimuli: Vec<Stimulus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScreeningConfig {
    pub enabled: bool,
    /// Hidden-reference scores below this count as a miss.
    pub reference_threshold: u8,
    /// Raters missing on more than this fraction of trials are flagged.
    pub max_miss_fraction: f64,
}

impl Default for ScreeningConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            reference_threshold: 90,
            max_miss_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestDefinition {
    pub version: u32,
    pub test_id: String,
    pub hidden_reference: String,
    pub anchor: String,
    pub conditions: Vec<String>,
    pub trials: Vec<Trial>,
    #[serde(default)]
    pub screening: ScreeningConfig,
}

impl TestDefinition {
    pub fn validate(&self) -> Result<(), MushraError> {
        let bad = |m: String| Err(MushraError::Definition(m));
        if self.version != TEST_FORMAT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.test_id.is_empty() {
            return bad("empty test_id".into());
        }
        let mut labels = HashSet::new();
        for c in &self.conditions {
            if !labels.insert(c.as_str()) {
                return bad(format!("duplicate condition label {c:?}"));
            }
        }
        for (role, label) in [("hidden_reference", &self.hidden_reference), ("anchor", &self.anchor)] {
            if !labels.contains(label.as_str()) {
                return bad(format!("{role} {label:?} is not among the conditions"));
            }
        }
        if self.hidden_reference == self.anchor {
            return bad("hidden reference and anchor must differ".into());
        }
        let mut tokens = HashSet::new();
        let mut trial_ids = HashSet::new();
        for t in &self.trials {
            if !trial_ids.insert(t.trial_id.as_str()) {
                return bad(format!("duplicate trial id {}", t.trial_id));
            }
            if !tokens.insert(t.reference.token.as_str()) {
                return bad(format!("token {} used twice", t.reference.token));
            }
            let mut seen = HashSet::new();
            for s in &t.stimuli {
                if !tokens.insert(s.token.as_str()) {
                    return bad(format!("token {} used twice", s.token));
                }
                if !labels.contains(s.condition.as_str()) {
                    return bad(format!("trial {}: unknown condition {:?}", t.trial_id, s.condition));
                }
                if !seen.insert(s.condition.as_str()) {
                    return bad(format!("trial {}: condition {:?} appears twice", t.trial_id, s.condition));
                }
            }
            if seen.len() != labels.len() {
                return bad(format!("trial {}: expected {} stimuli, found {}", t.trial_id, labels.len(), seen.len()));
            }
        }
        let sc = &self.screening;
        if sc.reference_threshold > 100 || !(0.0..=1.0).contains(&sc.max_miss_fraction) {
            return bad("screening settings out of range".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MushraError> {
        let text = fs::read_to_string(path).map_err(|source| MushraError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let def: Self = serde_json::from_str(&text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn save(&self, path: &Path) -> Result<(), MushraError> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|source| MushraError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Every token with its audio path.
    pub fn token_paths(&self) -> impl Iterator<Item = (&str, &Path)> {
        self.trials.iter().flat_map(|t| {
            std::iter::once((t.reference.token.as_str(), t.reference.path.as_path()))
                .chain(t.stimuli.iter().map(|s| (s.token.as_str(), s.path.as_path())))
        })
    }

    fn condition_of(&self, trial: usize, token: &str) -> Option<&str> {
        self.trials[trial]
            .stimuli
            .iter()
            .find(|s| s.token == token)
            .map(|s| s.condition.as_str())
    }
}

/// Opaque 128-bit hex token.
pub fn random_token<R: Rng + ?Sized>(rng: &mut R) -> String {
    format!("{:032x}", rng.random::<u128>())
}

/// One utterance: the labeled reference file plus one file per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSource {
    pub utterance: String,
    pub reference: PathBuf,
    pub conditions: Vec<(String, PathBuf)>,
}

/// Builds a definition with fresh random tokens.
pub fn build_test<R: Rng + ?Sized>(
    test_id: &str,
    hidden_reference: &str,
    anchor: &str,
    sources: &[TrialSource],
    rng: &mut R,
) -> Result<TestDefinition, MushraError> {
    let conditions: Vec<String> = sources
        .first()
        .map(|s| s.conditions.iter().map(|(l, _)| l.clone()).collect())
        .unwrap_or_default();
    let mut used = HashSet::new();
    let mut token = |rng: &mut R| loop {
        let t = random_token(rng);
        if used.insert(t.clone()) {
            return t;
        }
    };
    let trials = sources
        .iter()
        .enumerate()
        .map(|(i, s)| Trial {
            trial_id: format!("trial-{i}"),
            utterance: s.utterance.clone(),
            reference: ReferenceStimulus {
                token: token(rng),
                path: s.reference.clone(),
            },
            stimuli: s
                .conditions
                .iter()
                .map(|(label, path)| Stimulus {
                    token: token(rng),
                    condition: label.clone(),
                    path: path.clone(),
                })
                .collect(),
        })
        .collect();
    let def = TestDefinition {
        version: TEST_FORMAT_VERSION,
        test_id: test_id.to_string(),
        hidden_reference: hidden_reference.to_string(),
        anchor: anchor.to_string(),
        conditions,
        trials,
        screening: ScreeningConfig::default(),
    };
    def.validate()?;
    Ok(def)
}

/// Trial and stimulus orders of one session, derived from its id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub test_id: String,
    /// `trial_order[i]` is the definition index shown at position `i`.
    pub trial_order: Vec<usize>,
    /// Per definition trial, the stimulus permutation.
    pub stimulus_order: Vec<Vec<usize>>,
}

pub fn session_seed(session_id: &str) -> u64 {
    let digest = Sha256::digest(session_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Session {
    pub fn new(session_id: &str, def: &TestDefinition) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(session_seed(session_id));
        let mut trial_order: Vec<usize> = (0..def.trials.len()).collect();
        trial_order.shuffle(&mut rng);
        let stimulus_order = def
            .trials
            .iter()
            .map(|t| {
                let mut o: Vec<usize> = (0..t.stimuli.len()).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        Self {
            session_id: session_id.to_string(),
            test_id: def.test_id.clone(),
            trial_order,
            stimulus_order,
        }
    }
}

/// What a rater sees for one trial: tokens only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialView {
    Trial {
        session_id: String,
        index: usize,
        total: usize,
        reference: String,
        stimuli: Vec<String>,
        rated: bool,
    },
    Complete {
        session_id: String,
        total: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSubmission {
    pub scores: BTreeMap<String, serde_json::Value>,
}

/// Journal entries, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalRecord {
    Session {
        session_id: String,
        test_id: String,
        timestamp_ms: u64,
    },
    Rating(TrialRating),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRating {
    pub session_id: String,
    /// Definition index of the trial (not the presentation position).
    pub trial: usize,
    pub trial_id: String,
    pub scores: BTreeMap<String, u8>,
    pub timestamp_ms: u64,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Checks a submission against a trial's blind tokens.
pub fn validate_scores(
    trial: &Trial,
    submission: &ScoreSubmission,
) -> Result<BTreeMap<String, u8>, MushraError> {
    let mut out = BTreeMap::new();
    for s in &trial.stimuli {
        let v = submission
            .scores
            .get(&s.token)
            .ok_or_else(|| MushraError::Validation(format!("missing score for token {}", s.token)))?;
        let score = v
            .as_u64()
            .filter(|&n| n <= 100)
            .ok_or_else(|| {
                MushraError::Validation(format!(
                    "score {v} for token {} must be an integer in [0, 100]",
                    s.token
                ))
            })?;
        out.insert(s.token.clone(), score as u8);
    }
    if let Some(extra) = submission.scores.keys().find(|k| !out.contains_key(*k)) {
        return Err(MushraError::Validation(format!(
            "token {extra} does not belong to this trial"
        )));
    }
    Ok(out)
}

/// Tests, sessions and ratings, optionally backed by a journal file.
#[derive(Debug, Default)]
pub struct MushraStore {
    tests: HashMap<String, TestDefinition>,
    sessions: HashMap<String, Session>,
    ratings: Vec<TrialRating>,
    rated: HashSet<(String, usize)>,
    journal: Option<(PathBuf, File)>,
}

impl MushraStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_test(&mut self, def: TestDefinition) -> Result<(), MushraError> {
        def.validate()?;
        self.tests.insert(def.test_id.clone(), def);
        Ok(())
    }

    pub fn test(&self, test_id: &str) -> Result<&TestDefinition, MushraError> {
        self.tests
            .get(test_id)
            .ok_or_else(|| MushraError::UnknownTest(test_id.to_string()))
    }

    pub fn tests(&self) -> impl Iterator<Item = &TestDefinition> {
        self.tests.values()
    }

    pub fn ratings(&self) -> &[TrialRating] {
        &self.ratings
    }

    pub fn session(&self, session_id: &str) -> Result<&Session, MushraError> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| MushraError::UnknownSession(session_id.to_string()))
    }

    /// Replays `path` (if it exists) and appends to it from now on.
    /// Call after all tests are added.
    pub fn attach_journal(&mut self, path: &Path) -> Result<(), MushraError> {
        let io_err = |source| MushraError::Io {
            path: path.to_path_buf(),
            source,
        };
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JournalRecord = serde_json::from_str(&line).map_err(|e| MushraError::Journal {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                self.apply(rec).map_err(|e| MushraError::Journal {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        self.journal = Some((path.to_path_buf(), file));
        Ok(())
    }

    fn apply(&mut self, rec: JournalRecord) -> Result<(), MushraError> {
        match rec {
            JournalRecord::Session {
                session_id, test_id, ..
            } => {
                let session = Session::new(&session_id, self.test(&test_id)?);
                self.sessions.insert(session_id, session);
            }
            JournalRecord::Rating(r) => {
                self.session(&r.session_id)?;
                if !self.rated.insert((r.session_id.clone(), r.trial)) {
                    return Err(MushraError::AlreadyRated(r.trial));
                }
                self.ratings.push(r);
            }
        }
        Ok(())
    }

    fn persist(&mut self, rec: &JournalRecord) -> Result<(), MushraError> {
        if let Some((path, file)) = self.journal.as_mut() {
            let mut line = serde_json::to_string(rec)?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.sync_data())
                .map_err(|source| MushraError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    }

    pub fn create_session<R: Rng + ?Sized>(&mut self, test_id: &str, rng: &mut R) -> Result<Session, MushraError> {
        self.create_session_with_id(test_id, &random_token(rng))
    }

    pub fn create_session_with_id(&mut self, test_id: &str, session_id: &str) -> Result<Session, MushraError> {
        self.test(test_id)?;
        if self.sessions.contains_key(session_id) {
            return Err(MushraError::Validation(format!("session {session_id} exists")));
        }
        let rec = JournalRecord::Session {
            session_id: session_id.to_string(),
            test_id: test_id.to_string(),
            timestamp_ms: now_ms(),
        };
        self.persist(&rec)?;
        self.apply(rec)?;
        self.session(session_id).cloned()
    }

    pub fn get_trial(&self, session_id: &str, index: usize) -> Result<TrialView, MushraError> {
        let session = self.session(session_id)?;
        let def = self.test(&session.test_id)?;
        let total = def.trials.len();
        if index >= total {
            return Ok(TrialView::Complete {
                session_id: session_id.to_string(),
                total,
            });
        }
        let t = session.trial_order[index];
        let trial = &def.trials[t];
        Ok(TrialView::Trial {
            session_id: session_id.to_string(),
            index,
            total,
            reference: trial.reference.token.clone(),
            stimuli: session.stimulus_order[t]
                .iter()
                .map(|&s| trial.stimuli[s].token.clone())
                .collect(),
            rated: self.rated.contains(&(session_id.to_string(), t)),
        })
    }

    /// Validates and durably records one trial's scores.
    pub fn submit_scores(
        &mut self,
        session_id: &str,
        index: usize,
        submission: &ScoreSubmission,
    ) -> Result<TrialRating, MushraError> {
        let session = self.session(session_id)?;
        let def = self.test(&session.test_id)?;
        if index >= def.trials.len() {
            return Err(MushraError::TrialOutOfRange {
                index,
                trials: def.trials.len(),
            });
        }
        let t = session.trial_order[index];
        if self.rated.contains(&(session_id.to_string(), t)) {
            return Err(MushraError::AlreadyRated(index));
        }
        let trial = &def.trials[t];
        let scores = validate_scores(trial, submission)?;
        let rating = TrialRating {
            session_id: session_id.to_string(),
            trial: t,
            trial_id: trial.trial_id.clone(),
            scores,
            timestamp_ms: now_ms(),
        };
        let rec = JournalRecord::Rating(rating.clone());
        self.persist(&rec)?;
        self.apply(rec)?;
        Ok(rating)
    }

    /// Path of the WAV behind a token, from any loaded test.
    pub fn token_path(&self, token: &str) -> Result<&Path, MushraError> {
        self.tests
            .values()
            .flat_map(|d| d.token_paths())
            .find(|(t, _)| *t == token)
            .map(|(_, p)| p)
            .ok_or_else(|| MushraError::UnknownToken(token.to_string()))
    }

    pub fn aggregate(&self, test_id: &str) -> Result<AggregateResult, MushraError> {
        let def = self.test(test_id)?;
        let ratings: Vec<&TrialRating> = self
            .ratings
            .iter()
            .filter(|r| self.sessions.get(&r.session_id).is_some_and(|s| s.test_id == test_id))
            .collect();
        Ok(aggregate(def, &ratings))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub condition: String,
    pub mean: f64,
    pub count: usize,
    /// `1.96 s / sqrt(n)`; absent for fewer than two scores.
    pub ci95_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterFlags {
    pub session_id: String,
    pub trials_rated: usize,
    pub reference_misses: usize,
    pub flagged: bool,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateResult {
    pub test_id: String,
    pub screening_enabled: bool,
    pub conditions: Vec<ConditionStats>,
    /// Same statistics over flagged raters only (empty unless screening
    /// excluded someone).
    pub excluded_conditions: Vec<ConditionStats>,
    pub raters: Vec<RaterFlags>,
}

/// Sample mean and normal-approximation 95% half-width.
pub fn mean_ci(scores: &[f64]) -> (f64, Option<f64>) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    if scores.len() < 2 {
        return (mean, None);
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(Z95 * var.sqrt() / n.sqrt()))
}

fn stats(def: &TestDefinition, ratings: &[&TrialRating]) -> Vec<ConditionStats> {
    let mut by_cond: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in ratings {
        for (token, &score) in &r.scores {
            if let Some(c) = def.condition_of(r.trial, token) {
                by_cond.entry(c).or_default().push(score as f64);
            }
        }
    }
    def.conditions
        .iter()
        .filter_map(|c| {
            let scores = by_cond.get(c.as_str())?;
            let (mean, ci) = mean_ci(scores);
            Some(ConditionStats {
                condition: c.clone(),
                mean,
                count: scores.len(),
                ci95_half_width: ci,
            })
        })
        .collect()
}

/// Per-condition statistics with hidden-reference screening.
pub fn aggregate(def: &TestDefinition, ratings: &[&TrialRating]) -> AggregateResult {
    let sc = &def.screening;
    let mut raters: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in ratings {
        let entry = raters.entry(r.session_id.as_str()).or_default();
        entry.0 += 1;
        let missed = r.scores.iter().any(|(token, &score)| {
            def.condition_of(r.trial, token) == Some(def.hidden_reference.as_str())
                && score < sc.reference_threshold
        });
        if missed {
            entry.1 += 1;
        }
    }
    let raters: Vec<RaterFlags> = raters
        .into_iter()
        .map(|(sid, (n, misses))| {
            let flagged = misses as f64 > sc.max_miss_fraction * n as f64;
            RaterFlags {
                session_id: sid.to_string(),
                trials_rated: n,
                reference_misses: misses,
                flagged,
                excluded: flagged && sc.enabled,
            }
        })
        .collect();
    let excluded: HashSet<&str> = raters
        .iter()
        .filter(|r| r.excluded)
        .map(|r| r.session_id.as_str())
        .collect();
    let (out, kept): (Vec<&TrialRating>, Vec<&TrialRating>) = ratings
        .iter()
        .copied()
        .partition(|r| excluded.contains(r.session_id.as_str()));
    AggregateResult {
        test_id: def.test_id.clone(),
        screening_enabled: sc.enabled,
        conditions: stats(def, &kept),
        excluded_conditions: stats(def, &out),
        raters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_ci_formula() {
        let (m, h) = mean_ci(&[100.0, 80.0, 60.0]);
        assert_eq!(m, 80.0);
        assert!((h.unwrap() - 1.96 * 20.0 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_ci(&[5.0]), (5.0, None));
    }

    #[test]
    fn session_seed_is_stable() {
        assert_eq!(session_seed("abc"), session_seed("abc"));
        assert_ne!(session_seed("abc"), session_seed("abd"));
    }
}
