//! Experiment configuration, ablation presets and per-fold model training.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Model};
use crate::data::{
    augment, resize_clip, synth_generate, MetadataRecord, Modality, PreparedDataset, Sample,
    SynthConfig,
};
use crate::encoding::{encode_metadata, normalize_clip, rate_encode, EncoderConfig, NormStats};
use crate::error::{PulmoError, Result};
use crate::eval::{timing_probe, Prediction, Predictor};
use crate::numerics::Tensor;
use crate::optim::{Adam, AdamConfig};
use crate::snn::{
    bptt_train_step, predict_cycle, EncodedSample, SnnConfig, SpikeTrain, SpikingNet, TargetRates,
};
use crate::spirometry::Label;
use crate::stcnn::{
    build_net, prepare_input, train_step, CnnSample, ExpansionConfig, FusionConfig, FusionMode,
    HeadKind, InputStats, StcnnNet, Target, TargetScaler,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ClassifySnn,
    ClassifyCnn,
    RegressPef,
    /// FEV1/FVC as a percentage of the predicted ratio.
    RegressRatio,
}

impl Task {
    pub fn is_classification(self) -> bool {
        matches!(self, Task::ClassifySnn | Task::ClassifyCnn)
    }

    pub fn uses_snn(self) -> bool {
        self == Task::ClassifySnn
    }

    /// Regression target of a cycle.
    pub fn target(self, s: &Sample) -> f64 {
        match self {
            Task::RegressRatio => s.spiro.ratio_percent,
            _ => s.pef,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::ClassifySnn => "classify_snn",
            Task::ClassifyCnn => "classify_cnn",
            Task::RegressPef => "regress_pef",
            Task::RegressRatio => "regress_ratio",
        })
    }
}

impl FromStr for Task {
    type Err = PulmoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify_snn" => Ok(Task::ClassifySnn),
            "classify_cnn" => Ok(Task::ClassifyCnn),
            "regress_pef" => Ok(Task::RegressPef),
            "regress_ratio" => Ok(Task::RegressRatio),
            other => Err(PulmoError::Config(format!(
                "unknown task `{other}` (expected classify_snn, classify_cnn, regress_pef or regress_ratio)"
            ))),
        }
    }
}

/// Rows of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rung {
    Baseline,
    Augmented,
    Multimodal,
    Mha,
    Ensemble,
}

impl Rung {
    pub const ALL: [Rung; 5] = [
        Rung::Baseline,
        Rung::Augmented,
        Rung::Multimodal,
        Rung::Mha,
        Rung::Ensemble,
    ];
}

impl FromStr for Rung {
    type Err = PulmoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Rung::Baseline),
            "augmented" => Ok(Rung::Augmented),
            "multimodal" => Ok(Rung::Multimodal),
            "mha" => Ok(Rung::Mha),
            "ensemble" => Ok(Rung::Ensemble),
            other => Err(PulmoError::Config(format!("unknown ladder rung `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnnSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// `meta_features` is filled in from the fusion mode.
    pub net: SnnConfig,
    pub targets: TargetRates,
    pub timesteps_per_frame: usize,
}

impl Default for SnnSettings {
    fn default() -> Self {
        SnnSettings {
            epochs: 30,
            batch_size: 8,
            lr: 2e-3,
            net: SnnConfig::default(),
            targets: TargetRates::default(),
            timesteps_per_frame: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub expansion: ExpansionConfig,
    /// `mode` is taken from [`ExperimentConfig::fusion`].
    pub fusion: FusionConfig,
}

impl Default for CnnSettings {
    fn default() -> Self {
        CnnSettings {
            epochs: 40,
            batch_size: 8,
            lr: 3e-3,
            expansion: ExpansionConfig::desk(),
            fusion: FusionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub modality: Modality,
    pub fusion: FusionMode,
    pub ensemble_size: usize,
    pub augment: bool,
    pub k: usize,
    pub seed: u64,
    pub snn: SnnSettings,
    pub cnn: CnnSettings,
    /// Dataset root holding `manifest.csv`.
    pub data_dir: Option<PathBuf>,
    /// Reference coefficient file; defaults to `coefficients.json` in the
    /// dataset root.
    pub coefficients: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::ClassifySnn,
            modality: Modality::Thermal,
            fusion: FusionMode::None,
            ensemble_size: 1,
            augment: false,
            k: 5,
            seed: 0,
            snn: SnnSettings::default(),
            cnn: CnnSettings::default(),
            data_dir: None,
            coefficients: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Preset for one row of the ablation ladder. Each row adds one
    /// ingredient to the row before it.
    pub fn rung(task: Task, rung: Rung) -> Self {
        let mut cfg = ExperimentConfig {
            task,
            ..Default::default()
        };
        if rung == Rung::Baseline {
            return cfg;
        }
        cfg.augment = true;
        cfg.fusion = match rung {
            Rung::Augmented => FusionMode::None,
            Rung::Multimodal => FusionMode::Dense,
            // spiking nets fuse metadata through a dense branch only
            _ if task.uses_snn() => FusionMode::Dense,
            _ => FusionMode::Mha,
        };
        if rung == Rung::Ensemble {
            cfg.ensemble_size = 4;
        }
        cfg
    }

    /// The RGB spiking classifier is an ensemble of four by default, the
    /// thermal one a single model.
    pub fn rgb_snn() -> Self {
        ExperimentConfig {
            modality: Modality::Rgb,
            ensemble_size: 4,
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| PulmoError::Config(format!("experiment config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(PulmoError::Config(format!(
                "k must be >= 2, got {}",
                self.k
            )));
        }
        if self.ensemble_size == 0 {
            return Err(PulmoError::Config("ensemble_size must be >= 1".into()));
        }
        if self.task.uses_snn() {
            if self.fusion == FusionMode::Mha {
                return Err(PulmoError::Config(
                    "classify_snn fuses metadata with fusion=dense; mha needs a CNN task".into(),
                ));
            }
            let s = &self.snn;
            if s.epochs == 0 || s.batch_size == 0 || !(s.lr > 0.0) || s.timesteps_per_frame == 0 {
                return Err(PulmoError::Config(
                    "snn epochs, batch_size, lr and timesteps must be positive".into(),
                ));
            }
            s.targets.validate()?;
            self.snn_config(0)?.validate()?;
        } else {
            let c = &self.cnn;
            if c.epochs == 0 || c.batch_size == 0 || !(c.lr > 0.0) {
                return Err(PulmoError::Config(
                    "cnn epochs, batch_size and lr must be positive".into(),
                ));
            }
            c.expansion.validate()?;
            self.fusion_config().validate()?;
        }
        Ok(())
    }

    /// Working frame side for this task.
    pub fn input_side(&self) -> usize {
        if self.task.uses_snn() {
            self.snn.net.input_side
        } else {
            self.cnn.expansion.input_side()
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            mode: self.fusion,
            meta_features: MetadataRecord::FEATURE_COUNT,
            ..self.cnn.fusion
        }
    }

    /// Network settings of ensemble member `member`. Members of a larger
    /// ensemble cycle through kernel sizes {3, 5} and filter counts {8, 16}.
    pub fn snn_config(&self, member: usize) -> Result<SnnConfig> {
        let mut net = self.snn.net.clone();
        net.in_channels = self.modality.channels();
        net.meta_features = if self.fusion == FusionMode::None {
            0
        } else {
            MetadataRecord::FEATURE_COUNT
        };
        if self.ensemble_size > 1 {
            net.kernel = [3, 5][member % 2];
            net.conv_filters = [8, 16][(member / 2) % 2];
        }
        Ok(net)
    }

    /// SHA-256 over the canonical JSON of the config without its paths.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.data_dir = None;
        c.coefficients = None;
        c.out_dir = None;
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Mix `parts` into `seed` (splitmix64 finaliser per step).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// One cycle as seen by a trained model.
#[derive(Clone, Copy, Debug)]
pub struct CycleInput<'a> {
    /// `[30, C, side, side]` raw intensities at the model's working side.
    pub frames: &'a Tensor,
    pub meta: &'a MetadataRecord,
    /// Seed of the spike encoder; ignored by CNNs.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Artefacts {
    task: Task,
    modality: Modality,
    norm: Option<NormStats>,
    input_stats: Option<InputStats>,
    scaler: Option<TargetScaler>,
    timesteps_per_frame: usize,
}

/// A network with everything needed to preprocess its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub task: Task,
    pub modality: Modality,
    pub model: Model,
    pub norm: Option<NormStats>,
    pub input_stats: Option<InputStats>,
    pub scaler: Option<TargetScaler>,
    pub timesteps_per_frame: usize,
}

impl TrainedModel {
    pub fn input_side(&self) -> usize {
        match &self.model {
            Model::Snn(n) => n.config().input_side,
            Model::Cnn(n) => n.expansion().input_side(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let extra = Artefacts {
            task: self.task,
            modality: self.modality,
            norm: self.norm.clone(),
            input_stats: self.input_stats.clone(),
            scaler: self.scaler,
            timesteps_per_frame: self.timesteps_per_frame,
        };
        Checkpoint {
            model: self.model.clone(),
            extra: serde_json::to_value(extra).expect("artefacts serialise"),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let a: Artefacts = serde_json::from_value(ckpt.extra)
            .map_err(|e| PulmoError::Format(format!("checkpoint artefacts: {e}")))?;
        let consistent = match &ckpt.model {
            Model::Snn(_) => a.task.uses_snn(),
            Model::Cnn(n) => {
                !a.task.uses_snn()
                    && a.input_stats.is_some()
                    && (n.head_kind() == HeadKind::Classification) == a.task.is_classification()
            }
        };
        if !consistent {
            return Err(PulmoError::Format(format!(
                "checkpoint model does not fit task {}",
                a.task
            )));
        }
        Ok(TrainedModel {
            task: a.task,
            modality: a.modality,
            model: ckpt.model,
            norm: a.norm,
            input_stats: a.input_stats,
            scaler: a.scaler,
            timesteps_per_frame: a.timesteps_per_frame,
        })
    }
}

fn need_norm(norm: Option<&NormStats>) -> Result<&NormStats> {
    norm.ok_or_else(|| {
        PulmoError::Protocol("model fuses metadata but has no normalisation stats".into())
    })
}

fn encode_snn(
    net: &SpikingNet,
    frames: &Tensor,
    meta: &MetadataRecord,
    norm: Option<&NormStats>,
    timesteps_per_frame: usize,
    seed: u64,
) -> Result<(SpikeTrain, Option<SpikeTrain>)> {
    let enc = |seed| EncoderConfig {
        timesteps_per_frame,
        seed,
        metadata_t: None,
    };
    let video = rate_encode(&normalize_clip(frames)?, &enc(seed))?;
    let meta = if net.is_multimodal() {
        let t = video.timesteps();
        Some(encode_metadata(
            meta,
            need_norm(norm)?,
            &enc(derive_seed(seed, &[1])),
            t,
        )?)
    } else {
        None
    };
    Ok((video, meta))
}

fn cnn_sample(
    net: &StcnnNet,
    frames: &Tensor,
    meta: &MetadataRecord,
    norm: Option<&NormStats>,
    stats: &InputStats,
    target: Target,
) -> Result<CnnSample> {
    Ok(CnnSample {
        input: prepare_input(frames, net.expansion(), stats)?,
        meta: if net.uses_metadata() {
            Some(need_norm(norm)?.normalize(meta)?)
        } else {
            None
        },
        target,
    })
}

/// Class from two logits; a tie goes to Abnormal.
fn argmax_label(logits: &[f32]) -> Label {
    if logits[Label::Abnormal.class_index()] >= logits[Label::Normal.class_index()] {
        Label::Abnormal
    } else {
        Label::Normal
    }
}

impl Predictor<CycleInput<'_>> for TrainedModel {
    fn predict(&self, input: &CycleInput<'_>) -> Result<Prediction> {
        match &self.model {
            Model::Snn(net) => {
                let (video, meta) = encode_snn(
                    net,
                    input.frames,
                    input.meta,
                    self.norm.as_ref(),
                    self.timesteps_per_frame,
                    input.seed,
                )?;
                let (label, _) = predict_cycle(net, &video, meta.as_ref())?;
                Ok(Prediction::Label(label))
            }
            Model::Cnn(net) => {
                let stats = self.input_stats.as_ref().ok_or_else(|| {
                    PulmoError::Protocol("CNN model has no input statistics".into())
                })?;
                let s = cnn_sample(
                    net,
                    input.frames,
                    input.meta,
                    self.norm.as_ref(),
                    stats,
                    Target::Value(0.0),
                )?;
                let out = net.forward(&s.input, s.meta.as_deref())?.output;
                if self.task.is_classification() {
                    Ok(Prediction::Label(argmax_label(&out)))
                } else {
                    let scaler = self.scaler.ok_or_else(|| {
                        PulmoError::Protocol("regression model has no target scaler".into())
                    })?;
                    Ok(Prediction::Value(scaler.unscale(out[0])))
                }
            }
        }
    }
}

fn clip_for_training(cfg: &ExperimentConfig, s: &Sample, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if cfg.augment {
        augment(&s.frames, cfg.modality, rng)
    } else {
        Ok(s.frames.clone())
    }
}

/// Train ensemble member `member` on the samples of `train_ids`.
pub fn train_member(
    cfg: &ExperimentConfig,
    data: &PreparedDataset,
    train_ids: &[String],
    member: usize,
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    if data.side != cfg.input_side() {
        return Err(PulmoError::dim(
            "prepared frame side",
            cfg.input_side(),
            data.side,
        ));
    }
    let train = data.samples_of(train_ids);
    if train.is_empty() {
        return Err(PulmoError::Domain(
            "no training samples in this fold".into(),
        ));
    }
    let seed = derive_seed(seed, &[member as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records: Vec<&MetadataRecord> = train_ids
        .iter()
        .filter_map(|id| data.subject_index(id).map(|i| &data.subjects[i]))
        .collect();
    let norm = Some(NormStats::fit(records)?);

    if cfg.task.uses_snn() {
        let mut net = SpikingNet::new(cfg.snn_config(member)?, seed)?;
        let tpf = cfg.snn.timesteps_per_frame;
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.snn.lr), &net);
        let mut order = train.clone();
        for epoch in 0..cfg.snn.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.snn.batch_size) {
                let batch = chunk
                    .iter()
                    .map(|&i| {
                        let s = &data.samples[i];
                        let frames = clip_for_training(cfg, s, &mut rng)?;
                        let enc_seed = derive_seed(seed, &[epoch as u64, i as u64]);
                        let meta = &data.subjects[s.subject];
                        let (video, meta) =
                            encode_snn(&net, &frames, meta, norm.as_ref(), tpf, enc_seed)?;
                        Ok(EncodedSample {
                            video,
                            meta,
                            label: s.spiro.label,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                total += bptt_train_step(&mut net, &batch, &mut opt, cfg.snn.targets)?
                    * batch.len() as f32;
            }
            log::debug!(
                "snn member {member} epoch {epoch} loss {:.4}",
                total / order.len() as f32
            );
        }
        return Ok(TrainedModel {
            task: cfg.task,
            modality: cfg.modality,
            model: Model::Snn(net),
            norm,
            input_stats: None,
            scaler: None,
            timesteps_per_frame: tpf,
        });
    }

    let classification = cfg.task.is_classification();
    let head = if classification {
        HeadKind::Classification
    } else {
        HeadKind::Regression
    };
    let exp = cfg.cnn.expansion;
    let mut net = build_net(
        exp,
        cfg.fusion_config(),
        head,
        cfg.modality.channels(),
        seed,
    )?;
    let input_stats = InputStats::fit(train.iter().map(|&i| &data.samples[i].frames))?;
    let scaler = if classification {
        None
    } else {
        let values: Vec<f64> = train
            .iter()
            .map(|&i| cfg.task.target(&data.samples[i]))
            .collect();
        Some(TargetScaler::fit(&values)?)
    };
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.cnn.lr), &net);
    let mut order = train.clone();
    for epoch in 0..cfg.cnn.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.cnn.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    let frames = clip_for_training(cfg, s, &mut rng)?;
                    let target = match scaler {
                        Some(sc) => Target::Value(sc.scale(cfg.task.target(s))),
                        None => Target::Class(s.spiro.label.class_index()),
                    };
                    cnn_sample(
                        &net,
                        &frames,
                        &data.subjects[s.subject],
                        norm.as_ref(),
                        &input_stats,
                        target,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            total += train_step(&mut net, &batch, &mut opt)? * batch.len() as f32;
        }
        log::debug!(
            "cnn member {member} epoch {epoch} loss {:.4}",
            total / order.len() as f32
        );
    }
    Ok(TrainedModel {
        task: cfg.task,
        modality: cfg.modality,
        model: Model::Cnn(net),
        norm,
        input_stats: Some(input_stats),
        scaler,
        timesteps_per_frame: 1,
    })
}

/// Train all `ensemble_size` members.
pub fn train_ensemble(
    cfg: &ExperimentConfig,
    data: &PreparedDataset,
    train_ids: &[String],
    seed: u64,
) -> Result<Vec<TrainedModel>> {
    (0..cfg.ensemble_size)
        .map(|m| train_member(cfg, data, train_ids, m, seed))
        .collect()
}

/// Median per-sample inference time of the default spiking and
/// convolutional models, preprocessing included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingComparison {
    pub snn: Duration,
    pub cnn: Duration,
}

impl TimingComparison {
    /// SNN time over CNN time.
    pub fn ratio(&self) -> f64 {
        self.snn.as_secs_f64() / self.cnn.as_secs_f64().max(1e-12)
    }
}

/// Time untrained default models on one synthetic thermal cycle: the
/// single-modal spiking classifier and the MHA-fused X3D-lite regressor.
pub fn compare_default_models(repeats: usize, seed: u64) -> Result<TimingComparison> {
    let data = synth_generate(2, 1, seed, &SynthConfig::default())?;
    let subjects = data.metadata();
    let norm = NormStats::fit(&subjects)?;
    let clip = data.render(0);

    let snn_cfg = ExperimentConfig::default();
    let snn = TrainedModel {
        task: Task::ClassifySnn,
        modality: Modality::Thermal,
        model: Model::Snn(SpikingNet::new(snn_cfg.snn_config(0)?, seed)?),
        norm: None,
        input_stats: None,
        scaler: None,
        timesteps_per_frame: snn_cfg.snn.timesteps_per_frame,
    };
    let cnn_cfg = ExperimentConfig::rung(Task::RegressPef, Rung::Mha);
    let net = build_net(
        cnn_cfg.cnn.expansion,
        cnn_cfg.fusion_config(),
        HeadKind::Regression,
        1,
        seed,
    )?;
    let cnn_frames = resize_clip(&clip, cnn_cfg.input_side())?;
    let cnn = TrainedModel {
        task: Task::RegressPef,
        modality: Modality::Thermal,
        model: Model::Cnn(net),
        norm: Some(norm),
        input_stats: Some(InputStats::fit([&cnn_frames])?),
        scaler: Some(TargetScaler {
            mean: 400.0,
            std: 100.0,
        }),
        timesteps_per_frame: 1,
    };
    let snn_frames = resize_clip(&clip, snn_cfg.input_side())?;
    let time = |model: &TrainedModel, frames: &Tensor| {
        let input = CycleInput {
            frames,
            meta: &subjects[0],
            seed,
        };
        timing_probe(repeats, || model.predict(&input).map(|_| ()))
    };
    Ok(TimingComparison {
        snn: time(&snn, &snn_frames)?,
        cnn: time(&cnn, &cnn_frames)?,
    })
}
