//! The unlearning loop: chunk consumption, combined-loss adapter updates,
//! periodic dev probes, per-type forget/retain swapping, early stop and
//! checkpointing.

mod checkpoint;
mod objective;
mod optim;
mod pretrain;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias_eval::{stereoset_eval_at, EvalReport, PreferenceRule};
use crate::corpus::{
    apply_swap, build_partitions, BiasType, ChunkSizes, ChunkStream, PartitionState, StereoInstance,
    SwapEvent,
};
use crate::error::{Error, Result};
use crate::objectives::{LossBreakdown, LossWeights};
use crate::scoring::{export_adapter, AdapterCheckpoint, AdapterConfig, Gradients, ModelHandle};

pub use checkpoint::{resume, save_checkpoint, STATE_MANIFEST};
pub use objective::{chunk_objective, cross_entropy_objective, ChunkEval, TokenizedChunk};
pub use optim::{linear_lr, AdamW, OptimizerKind, Schedule};
pub use pretrain::{pretrain, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub weights: LossWeights,
    pub forget_batch: usize,
    pub retain_batch: usize,
    pub unrelated_batch: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub probe_every: u64,
    pub early_stop_band: f64,
    pub adversarial_fraction: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Adapted weights; empty means the architecture's default targets.
    pub lora_targets: Vec<String>,
    pub tie_credit: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            forget_batch: 4,
            retain_batch: 28,
            unrelated_batch: 4,
            learning_rate: 5e-5,
            schedule: Schedule::Linear,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            probe_every: 50,
            early_stop_band: 2.0,
            adversarial_fraction: 0.25,
            max_steps: 500,
            seed: 0,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_targets: Vec::new(),
            tie_credit: 0.5,
            checkpoint_dir: None,
        }
    }
}

impl TrainingConfig {
    pub fn chunk_sizes(&self) -> ChunkSizes {
        ChunkSizes {
            forget: self.forget_batch,
            retain: self.retain_batch,
            unrelated: self.unrelated_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.chunk_sizes().validate()?;
        if self.probe_every == 0 {
            return Err(Error::Config("probe_every must be at least 1".into()));
        }
        if !(self.early_stop_band > 0.0) {
            return Err(Error::Config("early_stop_band must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.adversarial_fraction) {
            return Err(Error::Config("adversarial_fraction must lie in [0, 0.5)".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tie_credit) {
            return Err(Error::Config("tie_credit must lie in [0, 1]".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adapter_config(&self, model: &ModelHandle) -> AdapterConfig {
        AdapterConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            targets: if self.lora_targets.is_empty() {
                model.architecture().default_targets()
            } else {
                self.lora_targets.clone()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub partition_state: PartitionState,
    pub last_probe: Option<EvalReport>,
    pub stopped: bool,
    pub stop_reason: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTypeRecord {
    pub ss: f64,
    pub lms: f64,
    pub icat: f64,
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        forget: f64,
        retention: f64,
        kl: f64,
        total: f64,
        lr: f64,
    },
    Probe {
        step: u64,
        per_type: BTreeMap<BiasType, ProbeTypeRecord>,
        swaps: Vec<SwapEvent>,
    },
    Stop {
        step: u64,
        reason: StopReason,
    },
}

impl LogRecord {
    pub fn loss(&self) -> Option<LossBreakdown> {
        match *self {
            LogRecord::Step {
                forget,
                retention,
                kl,
                total,
                ..
            } => Some(LossBreakdown {
                forget,
                retention,
                kl,
                total,
            }),
            _ => None,
        }
    }
}

pub fn log_to_jsonl(log: &[LogRecord]) -> String {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r).expect("log record serializes"));
        s.push('\n');
    }
    s
}

/// Produces the dev report that drives swapping and early stop.
pub trait DevProbe {
    fn probe(&mut self, model: &ModelHandle, step: u64) -> Result<EvalReport>;
}

/// Runs the StereoSet protocol on a fixed dev split.
pub struct StereoSetProbe {
    pub dev: Vec<StereoInstance>,
    pub rule: PreferenceRule,
}

impl DevProbe for StereoSetProbe {
    fn probe(&mut self, model: &ModelHandle, step: u64) -> Result<EvalReport> {
        stereoset_eval_at(model, &self.dev, &self.rule, step)
    }
}

impl<F> DevProbe for F
where
    F: FnMut(&ModelHandle, u64) -> Result<EvalReport>,
{
    fn probe(&mut self, model: &ModelHandle, step: u64) -> Result<EvalReport> {
        self(model, step)
    }
}

/// Toggles every bias type whose dev SS crossed 50 in the direction the
/// current polarity pushes it: below 50 when unswapped, above 50 once
/// swapped. A type sitting at exactly 50 is left alone.
pub fn maybe_swap(report: &EvalReport, state: &PartitionState, step: u64) -> Result<PartitionState> {
    let mut next = state.clone();
    for (t, s) in &report.per_type {
        let overshoot = if state.is_swapped(*t) { s.ss > 50.0 } else { s.ss < 50.0 };
        if overshoot {
            next = apply_swap(&next, *t, step)?;
        }
    }
    Ok(next)
}

/// True iff every bias type's SS is strictly within `band` of 50.
pub fn should_stop(report: &EvalReport, band: f64) -> bool {
    report.per_type.values().all(|s| (s.ss - 50.0).abs() < band)
}

pub fn swap_log_digest(log: &[SwapEvent]) -> String {
    let json = serde_json::to_vec(log).expect("swap log serializes");
    hex::encode(Sha256::digest(&json))
}

fn stream_seed(seed: u64, step: u64) -> u64 {
    // splitmix-style mixing so each rebuild gets an independent shuffle
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

pub struct Trainer {
    model: ModelHandle,
    instances: Vec<StereoInstance>,
    config: TrainingConfig,
    state: TrainState,
    optimizer: AdamW,
    stream: ChunkStream,
    /// Step at which the current chunk stream was built.
    stream_origin: u64,
    log: Vec<LogRecord>,
}

impl Trainer {
    /// Prepares a run. A model without an adapter gets a fresh one from the
    /// config; an existing adapter is trained as-is.
    pub fn new(model: ModelHandle, instances: Vec<StereoInstance>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut model = model;
        if model.adapter().is_none() {
            let cfg = config.adapter_config(&model);
            model.attach_adapter(&cfg, config.seed)?;
        }
        let state = TrainState {
            step: 0,
            partition_state: PartitionState::default(),
            last_probe: None,
            stopped: false,
            stop_reason: None,
        };
        Self::assemble(model, instances, config, state, AdamW::new(0.0), 0)
    }

    fn assemble(
        model: ModelHandle,
        instances: Vec<StereoInstance>,
        config: TrainingConfig,
        state: TrainState,
        mut optimizer: AdamW,
        stream_origin: u64,
    ) -> Result<Self> {
        if !model.is_trainable() {
            return Err(Error::Config("model is not trainable (no adapter)".into()));
        }
        optimizer.weight_decay = config.weight_decay;
        let pools = build_partitions(&instances, &state.partition_state, config.adversarial_fraction)?;
        let mut stream = ChunkStream::new(pools, config.chunk_sizes(), stream_seed(config.seed, stream_origin))?;
        stream.skip_chunks(state.step - stream_origin);
        Ok(Self {
            model,
            instances,
            config,
            state,
            optimizer,
            stream,
            stream_origin,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &ModelHandle {
        &self.model
    }

    pub fn into_model(self) -> ModelHandle {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn stream(&self) -> &ChunkStream {
        &self.stream
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    /// Adapter checkpoint stamped with the current training metadata.
    pub fn adapter_checkpoint(&self) -> Result<AdapterCheckpoint> {
        let mut ckpt = export_adapter(&self.model)?;
        ckpt.metadata.training_step = self.state.step;
        ckpt.metadata.loss_weights = Some(self.config.weights);
        ckpt.metadata.swap_log_digest = swap_log_digest(&self.state.partition_state.swap_log);
        ckpt.metadata.seed = self.config.seed;
        Ok(ckpt)
    }

    fn finish(&mut self, reason: StopReason) -> Result<()> {
        self.state.stopped = true;
        self.state.stop_reason = Some(reason);
        self.log.push(LogRecord::Stop {
            step: self.state.step,
            reason,
        });
        if let Some(dir) = self.config.checkpoint_dir.clone() {
            save_checkpoint(self, &dir)?;
        }
        Ok(())
    }

    /// One optimizer step followed, when due, by a dev probe. Returns
    /// whether training has stopped.
    pub fn step(&mut self, probe: &mut dyn DevProbe) -> Result<bool> {
        if self.state.stopped {
            return Ok(true);
        }
        if self.state.step >= self.config.max_steps {
            self.finish(StopReason::MaxSteps)?;
            return Ok(true);
        }
        let chunk = self.stream.next_chunk();
        let tokens = TokenizedChunk::new(&self.model, &chunk)?;
        let eval = chunk_objective(
            &self.model,
            &tokens,
            &self.config.weights,
            Gradients::for_adapter(&self.model),
        );
        let eval = match eval {
            Ok(e) if e.loss.total.is_finite() => e,
            Ok(e) => return Err(self.abort(format!("total loss {} at step {}", e.loss.total, self.state.step))),
            Err(Error::NonFinite(msg)) => return Err(self.abort(msg)),
            Err(e) => return Err(e),
        };
        let lr = linear_lr(self.config.learning_rate, self.state.step, self.config.max_steps);
        let grads = eval.grads.adapter.as_ref().expect("adapter gradients");
        let adapter = self.model.adapter_mut().expect("trainable model has an adapter");
        self.optimizer.step_adapter(adapter, grads, lr);
        self.state.step += 1;
        self.log.push(LogRecord::Step {
            step: self.state.step,
            forget: eval.loss.forget,
            retention: eval.loss.retention,
            kl: eval.loss.kl,
            total: eval.loss.total,
            lr,
        });

        if self.state.step.is_multiple_of(self.config.probe_every) {
            self.run_probe(probe)?;
            if self.state.stopped {
                return Ok(true);
            }
        }
        if self.state.step >= self.config.max_steps {
            self.finish(StopReason::MaxSteps)?;
        }
        Ok(self.state.stopped)
    }

    fn run_probe(&mut self, probe: &mut dyn DevProbe) -> Result<()> {
        let step = self.state.step;
        let report = probe.probe(&self.model, step)?;
        let stop = should_stop(&report, self.config.early_stop_band);
        let before = self.state.partition_state.swap_log.len();
        if !stop {
            self.state.partition_state = maybe_swap(&report, &self.state.partition_state, step)?;
        }
        let swaps = self.state.partition_state.swap_log[before..].to_vec();
        self.log.push(LogRecord::Probe {
            step,
            per_type: report
                .per_type
                .iter()
                .map(|(t, s)| {
                    (
                        *t,
                        ProbeTypeRecord {
                            ss: s.ss,
                            lms: s.lms,
                            icat: s.icat,
                        },
                    )
                })
                .collect(),
            swaps: swaps.clone(),
        });
        self.state.last_probe = Some(report);
        if !swaps.is_empty() {
            let pools = build_partitions(
                &self.instances,
                &self.state.partition_state,
                self.config.adversarial_fraction,
            )?;
            self.stream_origin = step;
            self.stream = ChunkStream::new(pools, self.config.chunk_sizes(), stream_seed(self.config.seed, step))?;
        }
        if stop {
            self.finish(StopReason::EarlyStop)?;
        }
        Ok(())
    }

    fn abort(&self, msg: String) -> Error {
        if let Some(dir) = &self.config.checkpoint_dir {
            let _ = save_checkpoint(self, &dir.join("diagnostic"));
        }
        Error::NonFinite(msg)
    }

    /// Trains until early stop or `max_steps`.
    pub fn run(&mut self, probe: &mut dyn DevProbe) -> Result<()> {
        while !self.step(probe)? {}
        Ok(())
    }

    pub fn run_steps(&mut self, n: u64, probe: &mut dyn DevProbe) -> Result<()> {
        for _ in 0..n {
            if self.step(probe)? {
                break;
            }
        }
        Ok(())
    }
}

/// Convenience wrapper: trains `model` on `instances`, probing `dev`.
pub fn train(
    model: ModelHandle,
    instances: Vec<StereoInstance>,
    dev: Vec<StereoInstance>,
    config: TrainingConfig,
) -> Result<(ModelHandle, TrainOutcome)> {
    let covered: std::collections::BTreeSet<_> = dev.iter().map(|i| i.bias_type).collect();
    if let Some(t) = instances.iter().map(|i| i.bias_type).find(|t| !covered.contains(t)) {
        return Err(Error::Config(format!("dev set has no instances of bias type {t}")));
    }
    let rule = PreferenceRule {
        tie_credit: config.tie_credit,
    };
    let mut probe = StereoSetProbe { dev, rule };
    let mut trainer = Trainer::new(model, instances, config)?;
    trainer.run(&mut probe)?;
    let outcome = TrainOutcome {
        state: trainer.state.clone(),
        log: trainer.log.clone(),
    };
    Ok((trainer.model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias_eval::{assemble_report, InstanceScores, TypeScores};

    pub(super) fn report(ss: &[(BiasType, f64)]) -> EvalReport {
        let per_type: BTreeMap<_, _> = ss
            .iter()
            .map(|(t, s)| {
                (
                    *t,
                    TypeScores {
                        ss: *s,
                        lms: 90.0,
                        icat: 90.0 * s.min(100.0 - s) / 50.0,
                        n: 50,
                    },
                )
            })
            .collect();
        EvalReport {
            overall: *per_type.values().next().unwrap(),
            per_type,
            step: 0,
        }
    }

    #[test]
    fn swap_rule() {
        let r = report(&[(BiasType::Gender, 47.0), (BiasType::Race, 53.0)]);
        let s = maybe_swap(&r, &PartitionState::default(), 50).unwrap();
        assert!(s.is_swapped(BiasType::Gender));
        assert!(!s.is_swapped(BiasType::Race));
        assert_eq!(s.swap_log.len(), 1);

        let r = report(&[(BiasType::Gender, 55.0), (BiasType::Race, 50.0)]);
        let s = maybe_swap(&r, &PartitionState::default(), 50).unwrap();
        assert_eq!(s, PartitionState::default());
    }

    #[test]
    fn swapped_type_swaps_back_on_overshoot() {
        let once = apply_swap(&PartitionState::default(), BiasType::Gender, 10).unwrap();
        let r = report(&[(BiasType::Gender, 47.0), (BiasType::Race, 53.0)]);
        assert_eq!(maybe_swap(&r, &once, 20).unwrap(), once);
        let r = report(&[(BiasType::Gender, 52.0), (BiasType::Race, 53.0)]);
        let back = maybe_swap(&r, &once, 20).unwrap();
        assert!(!back.is_swapped(BiasType::Gender));
        assert_eq!(back.swap_log.len(), 2);
        let r = report(&[(BiasType::Gender, 50.0)]);
        assert_eq!(maybe_swap(&r, &once, 20).unwrap(), once);
    }

    #[test]
    fn stop_rule() {
        use BiasType::*;
        let r = report(&[(Gender, 51.9), (Profession, 48.2), (Race, 50.0), (Religion, 49.5)]);
        assert!(should_stop(&r, 2.0));
        let r = report(&[(Gender, 52.1), (Profession, 49.0), (Race, 50.0), (Religion, 50.0)]);
        assert!(!should_stop(&r, 2.0));
        assert!(should_stop(&report(&[(Gender, 50.4)]), 0.5));
        assert!(!should_stop(&report(&[(Gender, 48.0)]), 2.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig {
            retain_batch: 6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig {
            probe_every: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig {
            early_stop_band: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn digest_is_stable_hex() {
        let d = swap_log_digest(&[]);
        assert_eq!(d.len(), 64);
        assert_eq!(d, swap_log_digest(&[]));
        let ev = SwapEvent {
            step: 1,
            bias_type: BiasType::Gender,
            swapped: true,
        };
        assert_ne!(d, swap_log_digest(&[ev]));
    }

    #[test]
    fn log_record_shape() {
        let r = LogRecord::Step {
            step: 1,
            forget: 1.0,
            retention: 2.0,
            kl: 0.5,
            total: 1.3,
            lr: 1e-3,
        };
        let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        for k in ["step", "forget", "retention", "kl", "total", "lr"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        let _ = assemble_report(
            &[InstanceScores {
                bias_type: BiasType::Gender,
                stereotype: -1.0,
                anti_stereotype: -2.0,
                unrelated: -3.0,
            }],
            &PreferenceRule::default(),
            0,
        );
    }
}
