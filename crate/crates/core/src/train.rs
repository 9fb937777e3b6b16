//! The template-based training loop and the augmentation ablation.
//!
//! Every epoch draws fresh augmented pairs (seeded from the master seed and a
//! run-wide sample counter, so no augmented image is seen twice), accumulates
//! their gradients one sample at a time and takes a single Adam step. The raw
//! template and the optional evaluation subject are only ever forwarded in
//! eval mode.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{generate, AugmentConfig, AugmentedSample};
use crate::error::{Error, Result};
use crate::io::{write_checkpoint, Checkpoint, TemplateGrid, TrainingState};
use crate::rng::splitmix64;
use crate::tensor::Real;
use crate::unet::{adam_step, AdamState, UNet, UNetConfig, UNetModel};
use crate::volume::{mse_split, ErrorSplit, LabelVolume, Volume};

const INIT_SALT: u64 = 0x1a17_5eed_0000_0001;

/// Seed of the initial weights for a given master seed.
pub fn init_seed(master_seed: u64) -> u64 {
    splitmix64(master_seed ^ INIT_SALT)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRound {
    pub learning_rate: f64,
    pub epochs: usize,
    pub samples_per_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub rounds: Vec<TrainRound>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule::new(&[(0.001, 1000, 8), (0.0005, 2000, 16), (0.00025, 2000, 32)])
    }
}

impl TrainSchedule {
    pub fn new(rounds: &[(f64, usize, usize)]) -> Self {
        TrainSchedule {
            rounds: rounds
                .iter()
                .map(|&(learning_rate, epochs, samples_per_epoch)| TrainRound {
                    learning_rate,
                    epochs,
                    samples_per_epoch,
                })
                .collect(),
        }
    }

    /// One round of single-sample epochs at a fixed rate.
    pub fn single(learning_rate: f64, epochs: usize) -> Self {
        TrainSchedule::new(&[(learning_rate, epochs, 1)])
    }

    /// Desk-scale counterpart of the default: three rounds with halving
    /// rates and growing accumulation, sized for a 32³ phantom and
    /// [`UNetConfig::desk`] on one CPU core.
    pub fn desk() -> Self {
        TrainSchedule::new(&[(0.002, 800, 1), (0.001, 300, 4), (0.0005, 150, 8)])
    }

    pub fn total_epochs(&self) -> usize {
        self.rounds.iter().map(|r| r.epochs).sum()
    }

    pub fn total_samples(&self) -> usize {
        self.rounds.iter().map(|r| r.epochs * r.samples_per_epoch).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(Error::InvalidConfig("schedule has no rounds".into()));
        }
        for (i, r) in self.rounds.iter().enumerate() {
            if !(r.learning_rate > 0.0) || !r.learning_rate.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "round {}: learning rate must be > 0",
                    i + 1
                )));
            }
            if r.epochs == 0 || r.samples_per_epoch == 0 {
                return Err(Error::InvalidConfig(format!(
                    "round {}: epochs and samples_per_epoch must be >= 1",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub round: usize,
    /// 1-based, counted across rounds.
    pub epoch: usize,
    /// Mean loss over the epoch's augmented samples.
    pub train_mse: f64,
    pub template_error: ErrorSplit,
    pub evaluation_error: Option<ErrorSplit>,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "round,epoch,train_mse,template_fg,template_bg,eval_fg,eval_bg,seconds";

fn sig9(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_default()
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let eval = self.evaluation_error.as_ref();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.epoch,
            sig9(Some(self.train_mse)),
            sig9(self.template_error.foreground_mse),
            sig9(self.template_error.background_mse),
            sig9(eval.and_then(|e| e.foreground_mse)),
            sig9(eval.and_then(|e| e.background_mse)),
            sig9(Some(self.seconds)),
        )
    }
}

/// Header plus one row per log.
pub fn logs_to_csv(logs: &[EpochLog]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for log in logs {
        let _ = writeln!(s, "{}", log.csv_row());
    }
    s
}

/// Eval-mode forward, then the foreground/background error against the label.
pub fn compute_split_error<T: Real>(model: &UNet<T>, image: &Volume, label: &LabelVolume) -> Result<ErrorSplit> {
    if image.dims() != label.dims() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs label {:?}",
            image.dims(),
            label.dims()
        )));
    }
    let out = model.forward_eval(&image.to_tensor().cast())?;
    mse_split(&out.cast(), label, label)
}

/// Hash over every parameter, gradient, running statistic and Adam moment.
pub fn state_checksum(model: &UNetModel, adam: &AdamState<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    let mut put = |xs: &[f32]| {
        for x in xs {
            h.write_u32(x.to_bits());
        }
    };
    for p in model.params() {
        put(&p.value);
        put(&p.grad);
    }
    for s in model.running_stats() {
        put(&s.mean);
        put(&s.var);
    }
    for m in adam.first.iter().chain(&adam.second) {
        put(m);
    }
    h.write_u64(adam.step);
    h.write_usize(model.accumulated());
    h.finish()
}

/// Everything one training run needs.
#[derive(Clone, Debug)]
pub struct TrainingJob<'a> {
    pub template: &'a Volume,
    pub label: &'a LabelVolume,
    pub unet: UNetConfig,
    pub augment: AugmentConfig,
    pub schedule: TrainSchedule,
    pub master_seed: u64,
    pub eval: Option<(&'a Volume, &'a LabelVolume)>,
    /// Round-boundary checkpoints go here when set.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UNetModel,
    pub adam: AdamState<f32>,
    pub logs: Vec<EpochLog>,
    /// Augmentation seeds in the order they were consumed.
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingJob<'_> {
    fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.augment.validate()?;
        self.schedule.validate()?;
        let dims = self.template.dims();
        if self.label.dims() != dims {
            return Err(Error::ShapeMismatch(format!(
                "template {dims:?} vs label {:?}",
                self.label.dims()
            )));
        }
        self.unet.check_dims(dims)?;
        self.label.validate(self.unet.out_channels)?;
        if self.template.max() != 1.0 {
            return Err(Error::InvalidConfig(
                "template must be normalized to a maximum of 1".into(),
            ));
        }
        if let Some((v, l)) = self.eval {
            if v.dims() != dims || l.dims() != dims {
                return Err(Error::ShapeMismatch(format!(
                    "evaluation pair {:?}/{:?} must match template dims {dims:?}",
                    v.dims(),
                    l.dims()
                )));
            }
            l.validate(self.unet.out_channels)?;
        }
        Ok(())
    }

    pub fn run(&self) -> Result<TrainOutcome> {
        self.run_with(&mut |_| Ok(()))
    }

    /// Runs the schedule, calling `on_epoch` after every epoch in order.
    pub fn run_with(&self, on_epoch: &mut dyn FnMut(&EpochLog) -> Result<()>) -> Result<TrainOutcome> {
        self.validate()?;
        let mut model = UNetModel::new(self.unet, init_seed(self.master_seed))?;
        let mut adam = AdamState::for_model(&model);
        let mut logs = Vec::with_capacity(self.schedule.total_epochs());
        let mut seeds = Vec::with_capacity(self.schedule.total_samples());
        let mut checkpoints = Vec::new();

        // (round index, learning rate, samples) for every epoch, flattened
        let plan: Vec<(usize, f64, usize)> = self
            .schedule
            .rounds
            .iter()
            .enumerate()
            .flat_map(|(r, round)| std::iter::repeat_n((r, round.learning_rate, round.samples_per_epoch), round.epochs))
            .collect();
        let batch = |first: usize, count: usize| {
            generate(
                self.template,
                self.label,
                &self.augment,
                self.master_seed,
                first as u64,
                count,
            )
        };

        let mut counter = 0usize;
        let mut next = batch(0, plan[0].2);
        for (e, &(round, lr, count)) in plan.iter().enumerate() {
            let samples = next?;
            let first_next = counter + count;
            let upcoming = plan.get(e + 1).map(|p| p.2);
            let start = Instant::now();
            // the next epoch's samples are produced while this one trains
            let (step, prefetched) = rayon::join(
                || train_epoch(&mut model, &mut adam, &samples, lr, round, e + 1),
                || upcoming.map(|n| batch(first_next, n)),
            );
            let train_mse = step?;
            seeds.extend(samples.iter().map(|s| s.seed));
            counter = first_next;
            next = prefetched.unwrap_or_else(|| Ok(Vec::new()));

            let template_error = compute_split_error(&model, self.template, self.label)?;
            let evaluation_error = match self.eval {
                Some((v, l)) => Some(compute_split_error(&model, v, l)?),
                None => None,
            };
            let log = EpochLog {
                round: round + 1,
                epoch: e + 1,
                train_mse,
                template_error,
                evaluation_error,
                seconds: start.elapsed().as_secs_f64(),
            };
            on_epoch(&log)?;
            logs.push(log);

            let round_ends = plan.get(e + 1).is_none_or(|p| p.0 != round);
            if round_ends {
                if let Some(dir) = &self.checkpoint_dir {
                    let path = dir.join(format!("round{}_epoch{}.ckpt", round + 1, e + 1));
                    self.write_round_checkpoint(&model, &adam, e + 1, &path)?;
                    checkpoints.push(path);
                }
            }
        }
        Ok(TrainOutcome {
            model,
            adam,
            logs,
            seeds,
            checkpoints,
        })
    }

    fn write_round_checkpoint(
        &self,
        model: &UNetModel,
        adam: &AdamState<f32>,
        epoch: usize,
        path: &Path,
    ) -> Result<()> {
        write_checkpoint(
            &Checkpoint {
                model: model.clone(),
                template_grid: Some(TemplateGrid {
                    dims: self.template.dims(),
                    spacing: self.template.spacing(),
                }),
                training: Some(TrainingState {
                    epoch: epoch as u64,
                    adam: adam.clone(),
                }),
            },
            path,
        )
    }
}

/// Accumulates one sample at a time, then steps; returns the mean loss.
fn train_epoch(
    model: &mut UNetModel,
    adam: &mut AdamState<f32>,
    samples: &[AugmentedSample],
    learning_rate: f64,
    round: usize,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let loss = model.backward(&s.image.to_tensor(), &s.label)?;
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                round: round + 1,
                epoch,
                seed: s.seed,
            });
        }
        total += loss;
    }
    adam_step(model, adam, learning_rate)?;
    Ok(total / samples.len() as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn run_training(
    template: &Volume,
    label: &LabelVolume,
    unet_config: UNetConfig,
    augment_config: &AugmentConfig,
    schedule: &TrainSchedule,
    master_seed: u64,
    eval_pair: Option<(&Volume, &LabelVolume)>,
) -> Result<TrainOutcome> {
    TrainingJob {
        template,
        label,
        unet: unet_config,
        augment: augment_config.clone(),
        schedule: schedule.clone(),
        master_seed,
        eval: eval_pair,
        checkpoint_dir: None,
    }
    .run()
}

/// True when no seed occurs twice.
pub fn seeds_unique(seeds: &[u64]) -> bool {
    let mut seen = HashSet::with_capacity(seeds.len());
    seeds.iter().all(|s| seen.insert(*s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub config: AugmentConfig,
}

impl AblationArm {
    pub fn new(name: &str, config: AugmentConfig) -> Self {
        AblationArm {
            name: name.to_string(),
            config,
        }
    }
}

/// Rigid motion alone, rigid motion plus each step, and the combinations.
pub fn default_arms() -> Vec<AblationArm> {
    let rigid = AugmentConfig::rigid_only();
    vec![
        AblationArm::new("rigid-only", rigid.clone()),
        AblationArm::new(
            "camera",
            AugmentConfig {
                enable_camera: true,
                ..rigid.clone()
            },
        ),
        AblationArm::new(
            "reduction",
            AugmentConfig {
                enable_reduction: true,
                ..rigid.clone()
            },
        ),
        AblationArm::new(
            "cropping",
            AugmentConfig {
                enable_cropping: true,
                ..rigid.clone()
            },
        ),
        AblationArm::new(
            "lighting",
            AugmentConfig {
                enable_lighting: true,
                ..rigid.clone()
            },
        ),
        AblationArm::new(
            "textures",
            AugmentConfig {
                enable_textures: true,
                ..rigid
            },
        ),
        AblationArm::new("all-minus-cropping", AugmentConfig::standard()),
        AblationArm::new("all", AugmentConfig::tumor()),
    ]
}

pub fn arm_by_name(name: &str) -> Result<AblationArm> {
    default_arms()
        .into_iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation arm {name:?}")))
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub name: String,
    pub logs: Vec<EpochLog>,
}

/// One model per arm, all from the same initial weights and seed stream.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    template: &Volume,
    label: &LabelVolume,
    eval_pair: Option<(&Volume, &LabelVolume)>,
    arms: &[AblationArm],
    unet_config: UNetConfig,
    schedule: &TrainSchedule,
    master_seed: u64,
) -> Result<Vec<ArmResult>> {
    if arms.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one arm".into()));
    }
    arms.iter()
        .map(|arm| {
            let out = run_training(
                template,
                label,
                unet_config,
                &arm.config,
                schedule,
                master_seed,
                eval_pair,
            )?;
            Ok(ArmResult {
                name: arm.name.clone(),
                logs: out.logs,
            })
        })
        .collect()
}
