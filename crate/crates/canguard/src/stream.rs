//! Online detection over a live frame feed: a session keeps the last `T`
//! scaled feature vectors in a ring buffer and classifies the window ending
//! at each arriving frame (stride 1, labeled by its last step). The scaler
//! comes from the checkpoint and is never refitted, so per-window
//! predictions are bit-identical to the batch path over the same records.

use std::collections::{BTreeMap, VecDeque};
use std::io::BufRead;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{parse_line, CanRecord, ClassLabel};
use crate::model::Model;
use crate::preprocess::Scaler;
use crate::tensor::Tensor;

/// Outcome of feeding one frame.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// Buffer not yet full; `remaining` more frames before classification.
    WarmingUp { remaining: usize },
    Classified {
        class: ClassLabel,
        prob: f64,
        probs: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        attention: Option<Vec<f64>>,
    },
}

/// Raised for a non-benign classification at or above the session threshold.
#[derive(Debug, Clone, Serialize)]
pub struct Alert {
    pub frame: usize,
    pub class: ClassLabel,
    pub prob: f64,
    pub probs: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<f64>>,
    /// Microseconds since the session started (monotonic clock).
    pub elapsed_micros: u128,
}

/// One detection session over a single CAN channel.
pub struct DetectorSession {
    model: Model,
    scaler: Scaler,
    threshold: f64,
    ring: VecDeque<Vec<f64>>,
    frames_seen: usize,
    started: Instant,
}

impl DetectorSession {
    pub fn new(model: Model, scaler: Scaler, threshold: f64) -> Result<Self> {
        if !(0.0 < threshold && threshold <= 1.0) {
            return Err(Error::Config(format!(
                "alert threshold {threshold} outside (0, 1]"
            )));
        }
        if scaler.mu.len() != model.config.f {
            return Err(Error::ShapeMismatch {
                op: "detector_session",
                lhs: vec![scaler.mu.len()],
                rhs: vec![model.config.f],
            });
        }
        let t = model.config.t;
        Ok(Self {
            model,
            scaler,
            threshold,
            ring: VecDeque::with_capacity(t),
            frames_seen: 0,
            started: Instant::now(),
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn window_length(&self) -> usize {
        self.model.config.t
    }

    /// Scales and buffers one record; classifies once the buffer holds a
    /// full window. Returns the verdict and, for an over-threshold
    /// non-benign classification, an alert.
    pub fn feed(&mut self, record: &CanRecord) -> Result<(Verdict, Option<Alert>)> {
        let t = self.model.config.t;
        let scaled: Vec<f64> = record
            .data
            .iter()
            .enumerate()
            .map(|(j, &b)| (b as f64 - self.scaler.mu[j]) / self.scaler.sigma[j])
            .collect();
        self.ring.push_back(scaled);
        if self.ring.len() > t {
            self.ring.pop_front();
        }
        self.frames_seen += 1;

        if self.ring.len() < t {
            return Ok((
                Verdict::WarmingUp {
                    remaining: t - self.ring.len(),
                },
                None,
            ));
        }

        let f = self.model.config.f;
        let mut data = Vec::with_capacity(t * f);
        for step in &self.ring {
            data.extend_from_slice(step);
        }
        let window = Tensor::new(vec![1, t, f], data)?;
        let pred = self.model.predict(&window)?;
        let probs = pred.probs.data().to_vec();
        let class = pred.labels()[0];
        let prob = probs[class.index()];
        let attention = pred.attention.as_ref().map(|a| a.data().to_vec());

        let alert = if class.is_attack() && prob >= self.threshold {
            Some(Alert {
                frame: self.frames_seen - 1,
                class,
                prob,
                probs: probs.clone(),
                attention: attention.clone(),
                elapsed_micros: self.started.elapsed().as_micros(),
            })
        } else {
            None
        };
        Ok((
            Verdict::Classified {
                class,
                prob,
                probs,
                attention,
            },
            alert,
        ))
    }
}

/// Replay statistics.
#[derive(Debug, Clone, Serialize)]
pub struct ReplaySummary {
    pub frames: usize,
    pub malformed: usize,
    pub warmup: usize,
    pub classified: usize,
    pub alerts_by_class: BTreeMap<ClassLabel, usize>,
    pub mean_latency_seconds: f64,
    /// Fraction of classified windows whose prediction matched the label of
    /// the window's final frame (present when the input carries labels).
    pub windowed_accuracy: Option<f64>,
}

/// Replays newline-delimited records through a session. Malformed lines are
/// counted, logged, and skipped. `rate` caps throughput in frames/second;
/// `skip_header` drops the first line. `on_alert` fires for every alert in
/// frame order.
pub fn replay<R: BufRead>(
    source: R,
    session: &mut DetectorSession,
    rate: Option<f64>,
    skip_header: bool,
    mut on_alert: impl FnMut(&Alert),
) -> Result<ReplaySummary> {
    let mut summary = ReplaySummary {
        frames: 0,
        malformed: 0,
        warmup: 0,
        classified: 0,
        alerts_by_class: BTreeMap::new(),
        mean_latency_seconds: 0.0,
        windowed_accuracy: None,
    };
    let mut correct = 0usize;
    let mut latency_total = 0.0f64;
    let started = Instant::now();
    let mut line_no = 0usize;

    for line in source.lines() {
        let line = line?;
        line_no += 1;
        if line_no == 1 && skip_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let record = match parse_line(&line, line_no) {
            Ok(r) => r,
            Err(e) => {
                summary.malformed += 1;
                log::warn!("skipping malformed record: {e}");
                continue;
            }
        };

        if let Some(r) = rate {
            let due = summary.frames as f64 / r;
            let elapsed = started.elapsed().as_secs_f64();
            if elapsed < due {
                std::thread::sleep(std::time::Duration::from_secs_f64(due - elapsed));
            }
        }

        let t0 = Instant::now();
        let (verdict, alert) = session.feed(&record)?;
        latency_total += t0.elapsed().as_secs_f64();
        summary.frames += 1;

        match verdict {
            Verdict::WarmingUp { .. } => summary.warmup += 1,
            Verdict::Classified { class, .. } => {
                summary.classified += 1;
                if class == record.label {
                    correct += 1;
                }
            }
        }
        if let Some(a) = alert {
            *summary.alerts_by_class.entry(a.class).or_insert(0) += 1;
            on_alert(&a);
        }
    }

    if summary.frames > 0 {
        summary.mean_latency_seconds = latency_total / summary.frames as f64;
    }
    if summary.classified > 0 {
        summary.windowed_accuracy = Some(correct as f64 / summary.classified as f64);
    }
    Ok(summary)
}
