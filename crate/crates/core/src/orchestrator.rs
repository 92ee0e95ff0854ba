//! Drive an external detector process over a patch workload via a
//! line-oriented JSON protocol, plus a seeded oracle detector for pipeline
//! testing.
//!
//! Worker protocol: the worker signals readiness with `{"ready":true}` on
//! stdout, then answers one job line with one result line, in order. Pixels
//! travel by file path, never inline.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2D;
use crate::manifest::AnnotationLabel;
use crate::patchset::PatchSpec;
use crate::seeding::derive_seed;

pub const DEFAULT_JOB_TIMEOUT: Duration = Duration::from_secs(60);

/// A scored point prediction in the patch frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDetection {
    pub patch_id: String,
    pub center: Point2D,
    pub score: f64,
    pub label: AnnotationLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerJob {
    pub patch_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDetection {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerResult {
    pub patch_id: String,
    pub detections: Vec<WireDetection>,
}

/// Serialize a job as a single NDJSON line (no trailing whitespace).
pub fn encode_job(job: &WorkerJob) -> String {
    serde_json::to_string(job).expect("job serialization cannot fail")
}

/// Parse and validate a result line against the outstanding job.
pub fn decode_result(line: &str, job: &WorkerJob) -> Result<WorkerResult> {
    let result: WorkerResult = serde_json::from_str(line).map_err(|_| Error::Protocol {
        patch_id: job.patch_id.clone(),
        message: format!("malformed result line: {line:?}"),
    })?;
    if result.patch_id != job.patch_id {
        return Err(Error::Protocol {
            patch_id: job.patch_id.clone(),
            message: format!("result for unexpected patch {}", result.patch_id),
        });
    }
    for d in &result.detections {
        if !(0.0..=1.0).contains(&d.score) || !d.score.is_finite() {
            return Err(Error::Protocol {
                patch_id: job.patch_id.clone(),
                message: format!("score {} out of [0,1]", d.score),
            });
        }
        if !(d.x >= 0.0 && d.x < job.width as f64 && d.y >= 0.0 && d.y < job.height as f64) {
            return Err(Error::Protocol {
                patch_id: job.patch_id.clone(),
                message: format!("detection ({}, {}) outside patch {}x{}", d.x, d.y, job.width, job.height),
            });
        }
    }
    Ok(result)
}

/// Sort detections so output is a pure function of content, never of
/// completion order: (slide_id, patch_id, score desc, x, y).
pub fn canonical_sort(detections: &mut [PatchDetection], slide_of_patch: &HashMap<String, String>) {
    detections.sort_by(|a, b| {
        let sa = slide_of_patch.get(&a.patch_id).map(String::as_str).unwrap_or("");
        let sb = slide_of_patch.get(&b.patch_id).map(String::as_str).unwrap_or("");
        sa.cmp(sb)
            .then_with(|| a.patch_id.cmp(&b.patch_id))
            .then_with(|| b.score.partial_cmp(&a.score).unwrap())
            .then_with(|| a.center.x.partial_cmp(&b.center.x).unwrap())
            .then_with(|| a.center.y.partial_cmp(&b.center.y).unwrap())
    });
}

// ---------------------------------------------------------------------------
// Oracle detector
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Stddev of Gaussian position jitter, pixels.
    pub jitter_sigma: f64,
    /// Probability of dropping each ground-truth point.
    pub drop_rate: f64,
    /// Expected number of false positives per patch (Poisson).
    pub fp_rate: f64,
    pub seed: u64,
}

impl OracleParams {
    pub fn noiseless(seed: u64) -> Self {
        OracleParams { jitter_sigma: 0.0, drop_rate: 0.0, fp_rate: 0.0, seed }
    }
}

/// Synthesize detections from ground truth: each mitotic figure survives with
/// probability 1 - drop_rate at a jittered position (score in [0.5, 1]);
/// Poisson(fp_rate) false positives are added at uniform positions (score in
/// [0, 0.5)). Deterministic per (seed, patch_id).
pub fn oracle_detector(patches: &[PatchSpec], params: &OracleParams) -> Result<Vec<PatchDetection>> {
    if !(0.0..=1.0).contains(&params.drop_rate) {
        return Err(Error::InvalidValue(format!("drop_rate {} out of [0,1]", params.drop_rate)));
    }
    if params.fp_rate < 0.0 || params.jitter_sigma < 0.0 {
        return Err(Error::InvalidValue("fp_rate and jitter_sigma must be >= 0".into()));
    }
    let normal = (params.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, params.jitter_sigma).expect("sigma > 0"));
    let mut out = Vec::new();
    for patch in patches {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &patch.patch_id, 0));
        let (w, h) = (patch.width as f64, patch.height as f64);
        for ann in &patch.local_annotations {
            if ann.label != AnnotationLabel::MitoticFigure {
                continue;
            }
            if params.drop_rate > 0.0 && rng.gen_bool(params.drop_rate) {
                continue;
            }
            let (dx, dy) = match &normal {
                Some(n) => (n.sample(&mut rng), n.sample(&mut rng)),
                None => (0.0, 0.0),
            };
            let center = Point2D {
                x: (ann.center.x + dx).clamp(0.0, w - 1e-6),
                y: (ann.center.y + dy).clamp(0.0, h - 1e-6),
            };
            out.push(PatchDetection {
                patch_id: patch.patch_id.clone(),
                center,
                score: rng.gen_range(0.5..=1.0),
                label: AnnotationLabel::MitoticFigure,
            });
        }
        if params.fp_rate > 0.0 {
            let n_fp = Poisson::new(params.fp_rate).expect("fp_rate > 0").sample(&mut rng) as usize;
            for _ in 0..n_fp {
                out.push(PatchDetection {
                    patch_id: patch.patch_id.clone(),
                    center: Point2D { x: rng.gen_range(0.0..w), y: rng.gen_range(0.0..h) },
                    score: rng.gen_range(0.0..0.5),
                    label: AnnotationLabel::MitoticFigure,
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PoolConfig {
    /// Shell command line for one worker process.
    pub worker_command: String,
    pub parallelism: usize,
    /// Maximum requeues per job after worker failures.
    pub retry_limit: usize,
    pub job_timeout: Duration,
}

struct QueuedJob {
    job: WorkerJob,
    requeues: usize,
}

struct PoolState {
    queue: Mutex<Vec<QueuedJob>>,
    results: Mutex<Vec<PatchDetection>>,
    failed: Mutex<Vec<String>>,
    completed: Mutex<usize>,
    total: usize,
}

struct Worker {
    child: Child,
    stdin: std::process::ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(command: &str, timeout: Duration) -> Result<Worker> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Spawn { command: command.to_string(), source: e })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut worker = Worker { child, stdin, lines: rx };
        // readiness handshake
        let line = worker.read_line(timeout).ok_or_else(|| Error::Protocol {
            patch_id: String::new(),
            message: "worker did not signal readiness".into(),
        })?;
        let ready: serde_json::Value = serde_json::from_str(&line).map_err(|_| Error::Protocol {
            patch_id: String::new(),
            message: format!("bad readiness line: {line:?}"),
        })?;
        if ready.get("ready") != Some(&serde_json::Value::Bool(true)) {
            return Err(Error::Protocol {
                patch_id: String::new(),
                message: format!("bad readiness line: {line:?}"),
            });
        }
        Ok(worker)
    }

    fn read_line(&mut self, timeout: Duration) -> Option<String> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Some(line),
            Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) | Err(RecvTimeoutError::Timeout) => None,
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn worker_loop(state: &PoolState, config: &PoolConfig) -> Result<()> {
    let mut worker: Option<Worker> = None;
    loop {
        {
            let completed = *state.completed.lock().unwrap();
            if completed >= state.total {
                break;
            }
        }
        let queued = state.queue.lock().unwrap().pop();
        let Some(mut queued) = queued else {
            // other workers may still fail and requeue
            std::thread::sleep(Duration::from_millis(5));
            continue;
        };
        if worker.is_none() {
            match Worker::spawn(&config.worker_command, config.job_timeout) {
                Ok(w) => worker = Some(w),
                Err(e) => {
                    // put the job back before reporting
                    state.queue.lock().unwrap().push(queued);
                    return Err(e);
                }
            }
        }
        let w = worker.as_mut().expect("worker spawned above");
        let outcome = (|| -> Result<WorkerResult> {
            writeln!(w.stdin, "{}", encode_job(&queued.job)).map_err(|e| Error::Protocol {
                patch_id: queued.job.patch_id.clone(),
                message: format!("failed to write job: {e}"),
            })?;
            w.stdin.flush().ok();
            let line = w.read_line(config.job_timeout).ok_or_else(|| Error::Protocol {
                patch_id: queued.job.patch_id.clone(),
                message: "worker produced no result line (crash or timeout)".into(),
            })?;
            decode_result(&line, &queued.job)
        })();
        match outcome {
            Ok(result) => {
                let mut results = state.results.lock().unwrap();
                for d in result.detections {
                    results.push(PatchDetection {
                        patch_id: result.patch_id.clone(),
                        center: Point2D { x: d.x, y: d.y },
                        score: d.score,
                        label: AnnotationLabel::MitoticFigure,
                    });
                }
                *state.completed.lock().unwrap() += 1;
            }
            Err(_) => {
                if let Some(mut w) = worker.take() {
                    w.kill();
                }
                if queued.requeues < config.retry_limit {
                    queued.requeues += 1;
                    state.queue.lock().unwrap().push(queued);
                } else {
                    state.failed.lock().unwrap().push(queued.job.patch_id.clone());
                    *state.completed.lock().unwrap() += 1;
                }
            }
        }
    }
    if let Some(mut w) = worker.take() {
        // orderly shutdown: close stdin, then reap
        drop(w.stdin);
        let _ = w.child.wait();
    }
    Ok(())
}

/// Run the worker pool over rendered patches. Every patch appears exactly
/// once in the output; worker failures requeue their job up to
/// `retry_limit` times. The returned detections are canonically sorted, so
/// the result is independent of scheduling.
pub fn run_detector_pool(
    patches: &[PatchSpec],
    patch_dir: &Path,
    config: &PoolConfig,
) -> Result<Vec<PatchDetection>> {
    if config.parallelism == 0 {
        return Err(Error::InvalidValue("parallelism must be >= 1".into()));
    }
    let jobs: Vec<QueuedJob> = patches
        .iter()
        .rev() // popped from the back: preserves input order
        .map(|p| QueuedJob {
            job: WorkerJob {
                patch_id: p.patch_id.clone(),
                image_path: patch_dir.join(format!("{}.png", p.patch_id)).display().to_string(),
                width: p.width,
                height: p.height,
            },
            requeues: 0,
        })
        .collect();
    let state = Arc::new(PoolState {
        total: jobs.len(),
        queue: Mutex::new(jobs),
        results: Mutex::new(Vec::new()),
        failed: Mutex::new(Vec::new()),
        completed: Mutex::new(0),
    });

    let handles: Vec<_> = (0..config.parallelism)
        .map(|_| {
            let state = Arc::clone(&state);
            let config = config.clone();
            std::thread::spawn(move || worker_loop(&state, &config))
        })
        .collect();
    let mut spawn_error = None;
    for h in handles {
        if let Err(e) = h.join().expect("worker thread panicked") {
            spawn_error.get_or_insert(e);
        }
    }

    let mut failed = state.failed.lock().unwrap().clone();
    if !failed.is_empty() {
        failed.sort();
        return Err(Error::UnprocessedPatches(failed));
    }
    if let Some(e) = spawn_error {
        return Err(e);
    }
    let mut detections = state.results.lock().unwrap().clone();
    let slide_of_patch: HashMap<String, String> = patches
        .iter()
        .map(|p| (p.patch_id.clone(), p.slide_id.clone()))
        .collect();
    canonical_sort(&mut detections, &slide_of_patch);
    Ok(detections)
}

// ---------------------------------------------------------------------------
// Detection persistence (NDJSON)
// ---------------------------------------------------------------------------

pub fn save_patch_detections(detections: &[PatchDetection], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for d in detections {
        serde_json::to_writer(&mut out, d).map_err(|e| Error::Parse(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_patch_detections(path: &Path) -> Result<Vec<PatchDetection>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchset::{LocalAnnotation, PatchPurpose};

    fn job() -> WorkerJob {
        WorkerJob {
            patch_id: "p1".into(),
            image_path: "/tmp/p1.png".into(),
            width: 380,
            height: 380,
        }
    }

    #[test]
    fn codec_round_trip() {
        let j = job();
        let line = encode_job(&j);
        assert!(!line.contains('\n'));
        let parsed: WorkerJob = serde_json::from_str(&line).unwrap();
        assert_eq!(parsed, j);

        let result = WorkerResult {
            patch_id: "p1".into(),
            detections: vec![WireDetection { x: 1.5, y: 2.5, score: 0.9, label: "mitotic_figure".into() }],
        };
        let line = serde_json::to_string(&result).unwrap();
        assert_eq!(decode_result(&line, &j).unwrap(), result);
    }

    #[test]
    fn decode_rejects_malformed_line() {
        let err = decode_result("not json", &job()).unwrap_err();
        assert!(matches!(err, Error::Protocol { .. }));
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let j = job();
        // y == height violates the half-open bound
        let line = r#"{"patch_id":"p1","detections":[{"x":10.0,"y":380.0,"score":0.5,"label":"mitotic_figure"}]}"#;
        assert!(decode_result(line, &j).is_err());
        // score out of range
        let line = r#"{"patch_id":"p1","detections":[{"x":10.0,"y":10.0,"score":1.5,"label":"mitotic_figure"}]}"#;
        let err = decode_result(line, &j).unwrap_err();
        match err {
            Error::Protocol { patch_id, .. } => assert_eq!(patch_id, "p1"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_unknown_patch() {
        let line = r#"{"patch_id":"other","detections":[]}"#;
        assert!(decode_result(line, &job()).is_err());
    }

    fn patch_with_annotations(id_suffix: u32, anns: &[(f64, f64)]) -> PatchSpec {
        let mut spec = PatchSpec::new(
            "slide",
            Point2D { x: (id_suffix * 400) as f64, y: 0.0 },
            380,
            380,
            PatchPurpose::Tile,
        );
        spec.local_annotations = anns
            .iter()
            .map(|&(x, y)| LocalAnnotation {
                label: AnnotationLabel::MitoticFigure,
                center: Point2D { x, y },
            })
            .collect();
        spec
    }

    #[test]
    fn noiseless_oracle_reproduces_ground_truth() {
        let patch = patch_with_annotations(0, &[(10.0, 20.0), (100.0, 200.0)]);
        let dets = oracle_detector(&[patch.clone()], &OracleParams::noiseless(1)).unwrap();
        assert_eq!(dets.len(), 2);
        for (d, a) in dets.iter().zip(&patch.local_annotations) {
            assert_eq!(d.center, a.center);
            assert!(d.score >= 0.5);
        }
    }

    #[test]
    fn full_drop_rate_yields_empty() {
        let patch = patch_with_annotations(0, &[(10.0, 20.0)]);
        let params = OracleParams { drop_rate: 1.0, ..OracleParams::noiseless(1) };
        assert!(oracle_detector(&[patch], &params).unwrap().is_empty());
    }

    #[test]
    fn drop_rate_statistics() {
        let patches: Vec<PatchSpec> = (0..10_000)
            .map(|i| patch_with_annotations(i, &[(100.0, 100.0)]))
            .collect();
        let params = OracleParams { drop_rate: 0.2, ..OracleParams::noiseless(7) };
        let dets = oracle_detector(&patches, &params).unwrap();
        let frac = dets.len() as f64 / 10_000.0;
        assert!((frac - 0.8).abs() < 0.01, "emitted fraction {frac}");
    }

    #[test]
    fn oracle_deterministic() {
        let patches = vec![patch_with_annotations(0, &[(10.0, 20.0)]), patch_with_annotations(1, &[(5.0, 5.0)])];
        let params = OracleParams { drop_rate: 0.3, jitter_sigma: 2.0, fp_rate: 1.0, seed: 9 };
        let a = oracle_detector(&patches, &params).unwrap();
        let b = oracle_detector(&patches, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn canonical_sort_is_content_only() {
        let slide_of: HashMap<String, String> =
            [("p1".to_string(), "s".to_string()), ("p2".to_string(), "s".to_string())].into();
        let d = |patch: &str, score: f64, x: f64| PatchDetection {
            patch_id: patch.into(),
            center: Point2D { x, y: 0.0 },
            score,
            label: AnnotationLabel::MitoticFigure,
        };
        let mut a = vec![d("p2", 0.5, 1.0), d("p1", 0.2, 2.0), d("p1", 0.9, 0.0)];
        let mut b = vec![d("p1", 0.9, 0.0), d("p2", 0.5, 1.0), d("p1", 0.2, 2.0)];
        canonical_sort(&mut a, &slide_of);
        canonical_sort(&mut b, &slide_of);
        assert_eq!(a, b);
        assert_eq!(a[0].score, 0.9);
    }
}
