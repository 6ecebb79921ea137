//! Challenge workers: warm-up staging, chunked evaluation and the service loop.

mod chunks;
pub mod evaluator;
mod merge;
mod run;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use chunks::{plan_chunks, Chunk};
pub use evaluator::EvalError;
pub use merge::{merge_results, MergeError, MetricResult};
pub use run::{process_next, run_loop, Outcome, Shutdown};

use crate::archive::{check_member_path, read_zip, MAX_MEMBER_BYTES};
use crate::blob::{BlobRef, BlobStore};
use crate::ids::{ChallengeId, WorkerId};
use crate::model::{ChallengeConfig, EvaluatorKind};
use crate::sandbox::{CancelToken, Isolation};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WarmupError {
    #[error("asset {0} is not available")]
    AssetUnavailable(BlobRef),
    #[error("evaluator entrypoint is invalid: {0}")]
    EntrypointInvalid(String),
    #[error("staging failed: {0}")]
    Staging(String),
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    /// Concurrent evaluator processes per split.
    pub parallelism: usize,
    pub isolation: Isolation,
    pub output_limit: usize,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            parallelism: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            isolation: Isolation::detect(),
            output_limit: evaluator::output_limit_from_env(),
        }
    }
}

/// Per-split results of one submission, keyed by split codename.
pub type SplitResults = BTreeMap<String, MetricResult>;

/// A worker bound to one challenge, holding its staged code and data.
pub struct WorkerState {
    pub worker_id: WorkerId,
    pub challenge_id: ChallengeId,
    config: Arc<ChallengeConfig>,
    settings: WorkerConfig,
    warmed: bool,
    load_counts: BTreeMap<BlobRef, u32>,
    staged_assets: BTreeMap<BlobRef, PathBuf>,
    dir: tempfile::TempDir,
}

impl WorkerState {
    pub fn new(worker_id: WorkerId, config: Arc<ChallengeConfig>, settings: WorkerConfig) -> std::io::Result<Self> {
        let dir = tempfile::Builder::new().prefix("gauntlet-worker-").tempdir()?;
        Ok(Self {
            worker_id,
            challenge_id: config.id.clone(),
            config,
            settings,
            warmed: false,
            load_counts: BTreeMap::new(),
            staged_assets: BTreeMap::new(),
            dir,
        })
    }

    pub fn config(&self) -> &Arc<ChallengeConfig> {
        &self.config
    }

    pub fn settings(&self) -> &WorkerConfig {
        &self.settings
    }

    pub fn is_warmed(&self) -> bool {
        self.warmed
    }

    /// How many times each asset has been fetched and staged.
    pub fn load_counts(&self) -> &BTreeMap<BlobRef, u32> {
        &self.load_counts
    }

    pub fn staged_assets(&self) -> &BTreeMap<BlobRef, PathBuf> {
        &self.staged_assets
    }

    pub fn code_dir(&self) -> PathBuf {
        self.dir.path().join("code")
    }

    /// Scratch space owned by this worker.
    pub fn scratch_dir(&self) -> &Path {
        self.dir.path()
    }

    /// Stages evaluator code, warm-up assets, annotations and environment
    /// assets once. Later calls return immediately.
    pub fn warmup(&mut self, blobs: &dyn BlobStore) -> Result<&Self, WarmupError> {
        if self.warmed {
            return Ok(self);
        }
        let staging = |e: std::io::Error| WarmupError::Staging(e.to_string());
        let config = Arc::clone(&self.config);
        let code_dir = self.code_dir();
        fs::create_dir_all(&code_dir).map_err(staging)?;

        let code = self.fetch(blobs, &config.evaluator.code_ref)?;
        let members = read_zip(&code, |_| MAX_MEMBER_BYTES).map_err(|e| WarmupError::Staging(e.to_string()))?;
        for (name, member) in &members {
            write_file(&code_dir.join(name), &member.data, member.executable).map_err(staging)?;
        }
        self.staged_assets.insert(config.evaluator.code_ref.clone(), code_dir.clone());

        for asset in &config.evaluator.warmup_assets {
            check_member_path(&asset.path).map_err(|e| WarmupError::Staging(e.to_string()))?;
            let data = self.fetch(blobs, &asset.blob)?;
            let path = code_dir.join(&asset.path);
            write_file(&path, &data, false).map_err(staging)?;
            self.staged_assets.insert(asset.blob.clone(), path);
        }
        for split in &config.splits {
            if let Some(annotation) = &split.annotation_ref {
                let data = self.fetch(blobs, annotation)?;
                let path = self.dir.path().join("annotations").join(&split.codename);
                write_file(&path, &data, false).map_err(staging)?;
                self.staged_assets.insert(annotation.clone(), path);
            }
            if let Some(env) = &split.environment {
                if !self.staged_assets.contains_key(&env.assets_ref) {
                    let data = self.fetch(blobs, &env.assets_ref)?;
                    let path = self.dir.path().join("environments").join(&env.env_id).join("assets");
                    write_file(&path, &data, false).map_err(staging)?;
                    self.staged_assets.insert(env.assets_ref.clone(), path);
                }
                let program = code_dir.join(&env.program);
                mark_executable(&program)
                    .map_err(|_| WarmupError::EntrypointInvalid(format!("environment program {:?} missing", env.program)))?;
            }
        }

        if config.evaluator.kind != EvaluatorKind::Hitl || members.contains_key(&config.evaluator.entrypoint) {
            let entry = code_dir.join(&config.evaluator.entrypoint);
            if !members.contains_key(&config.evaluator.entrypoint) || !entry.is_file() {
                return Err(WarmupError::EntrypointInvalid(format!(
                    "{:?} is not in the evaluator code",
                    config.evaluator.entrypoint
                )));
            }
            mark_executable(&entry).map_err(staging)?;
        }
        self.warmed = true;
        tracing::info!(worker = %self.worker_id, challenge = %self.challenge_id, assets = self.staged_assets.len(), "worker warmed");
        Ok(self)
    }

    fn fetch(&mut self, blobs: &dyn BlobStore, blob: &BlobRef) -> Result<Arc<Vec<u8>>, WarmupError> {
        let data = blobs.get(blob).map_err(|_| WarmupError::AssetUnavailable(blob.clone()))?;
        *self.load_counts.entry(blob.clone()).or_default() += 1;
        Ok(data)
    }

    /// Host path of the staged annotations for a split, if it has any.
    pub fn annotations_for(&self, split_codename: &str) -> Option<PathBuf> {
        let split = self.config.split_by_codename(split_codename)?;
        self.staged_assets.get(split.annotation_ref.as_ref()?).cloned()
    }

    /// Runs the evaluator over one chunk of a split.
    pub fn evaluate_chunk(
        &self,
        submission: &Path,
        chunk: Chunk,
        phase_codename: &str,
        split_codename: &str,
        cancel: Option<&CancelToken>,
    ) -> Result<MetricResult, EvalError> {
        if !self.warmed {
            return Err(EvalError::Launch("worker is not warmed up".into()));
        }
        let annotations = self.annotations_for(split_codename);
        let code_dir = self.code_dir();
        let inv = evaluator::Invocation {
            code_dir: &code_dir,
            entrypoint: &self.config.evaluator.entrypoint,
            annotations: annotations.as_deref(),
            submission,
            phase: phase_codename,
            split: split_codename,
            chunk,
            limits: self.config.evaluator.limits,
            isolation: self.settings.isolation,
            output_limit: self.settings.output_limit,
        };
        evaluator::run_evaluator(&inv, cancel)
    }

    /// Evaluates `item_count` items of a split, in parallel chunks when the
    /// evaluator allows it, and merges the chunk results.
    pub fn evaluate_items(
        &self,
        submission: &Path,
        item_count: u64,
        phase_codename: &str,
        split_codename: &str,
        schema: &[String],
        cancel: &CancelToken,
    ) -> Result<MetricResult, EvalError> {
        let parallelism = if self.config.evaluator.chunkable {
            self.settings.parallelism
        } else {
            1
        };
        let mut chunks = plan_chunks(item_count, parallelism);
        if chunks.is_empty() {
            chunks.push(Chunk::whole(0));
        }
        let group = cancel.child();
        let results: Vec<Result<MetricResult, EvalError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|&chunk| {
                    let group = &group;
                    scope.spawn(move || {
                        let result = self.evaluate_chunk(submission, chunk, phase_codename, split_codename, Some(group));
                        if result.is_err() {
                            group.cancel();
                        }
                        result
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("chunk thread panicked")).collect()
        });
        let mut parts = Vec::with_capacity(results.len());
        let mut first_error = None;
        for result in results {
            match result {
                Ok(part) => parts.push(part),
                // A sibling's failure cancels the rest; report the root cause.
                Err(EvalError::Cancelled) if !cancel.is_cancelled() => {}
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        if parts.len() != chunks.len() {
            return Err(EvalError::Cancelled);
        }
        merge_results(&parts, schema).map_err(|e| match e {
            MergeError::SchemaMismatch(m) => EvalError::SchemaMismatch(format!("missing metric {m:?}")),
            other => EvalError::Protocol(other.to_string()),
        })
    }

    /// Evaluates a prediction submission against every split of its phase.
    pub fn evaluate_predictions(
        &self,
        submission: &Path,
        phase_codename: &str,
        cancel: &CancelToken,
    ) -> Result<SplitResults, EvalError> {
        let config = Arc::clone(&self.config);
        let mut results = SplitResults::new();
        for (ps, split) in config.splits_for_phase(phase_codename) {
            let merged = self.evaluate_items(
                submission,
                split.item_count,
                phase_codename,
                &split.codename,
                &ps.leaderboard_schema,
                cancel,
            )?;
            results.insert(split.codename.clone(), merged);
        }
        Ok(results)
    }
}

fn write_file(path: &Path, data: &[u8], executable: bool) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, data)?;
    let mode = if executable { 0o755 } else { 0o644 };
    fs::set_permissions(path, fs::Permissions::from_mode(mode))
}

fn mark_executable(path: &Path) -> std::io::Result<()> {
    let meta = fs::metadata(path)?;
    if !meta.is_file() {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a file"));
    }
    fs::set_permissions(path, fs::Permissions::from_mode(meta.permissions().mode() | 0o755))
}
