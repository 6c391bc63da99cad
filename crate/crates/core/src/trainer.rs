//! The alternating training loop.
//!
//! Each batch runs one generator step (student update under the mixed
//! pseudo-label, discriminator frozen, then an EMA refresh of the teacher)
//! followed by one discriminator step (student and teacher frozen). All
//! randomness flows from the single run seed, so identical configurations
//! reproduce bitwise-identical checkpoints and metric logs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apm::{
    baseline_weight, discriminate, discriminate_backward, discriminate_with_cache, mix, score,
    DiscriminatorParams, MixingStrategy,
};
use crate::backbone::{extract_features, FeatureMap};
use crate::config::{FixedStrategyKind, RunConfig};
use crate::dba_decoder::{
    decode, decode_with_cache, ema_update, teacher_pseudo_label, DecoderParams,
};
use crate::fixed_strategy::{
    background_seed_label_with, null_label, perlin_label, upsample_mask,
};
use crate::look_twice::{emit_training_patches, refine, LookTwiceConfig, RegionReport};
use crate::losses::{
    dis_loss, dis_loss_grad, orth_loss, orth_loss_grad, seg_loss, seg_loss_grad, total_loss,
    LossBundle, TrainPhase,
};
use crate::mask::{ImageTensor, SoftMask};
use crate::{Error, Result};

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One prepared training sample: frozen features plus the fixed-strategy
/// pseudo-label, both computed once up front.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: ImageTensor,
    pub features: FeatureMap,
    pub p_fs: SoftMask,
    pub degenerate: bool,
}

/// FNV-1a over the source id; gives each sample a stable per-image seed for
/// the seeded generators.
fn id_seed(base: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base
}

/// Computes features and the fixed-strategy label for one (already
/// train-sized) image.
pub fn prepare_sample(image: &ImageTensor, config: &RunConfig) -> Result<TrainSample> {
    let features = extract_features(image, &config.backbone)?;
    let (_, n, m) = features.shape();
    let (p_fs, degenerate) = match config.fixed.strategy {
        FixedStrategyKind::BackgroundSeed => {
            let label = background_seed_label_with(&features, &config.fixed.seed_rule)?;
            (label.mask, label.degenerate)
        }
        FixedStrategyKind::Null => (null_label(n, m, config.fixed.null_value)?, false),
        FixedStrategyKind::Perlin => (
            perlin_label(
                n,
                m,
                id_seed(config.seed, image.source_id()),
                config.fixed.perlin_threshold,
            )?,
            false,
        ),
    };
    Ok(TrainSample {
        image: image.clone(),
        features,
        p_fs,
        degenerate,
    })
}

/// Resizes raw images to the training resolution and prepares samples.
pub fn prepare_samples(images: &[ImageTensor], config: &RunConfig) -> Result<Vec<TrainSample>> {
    images
        .iter()
        .map(|img| {
            let sized = if img.dims() == (config.train_size, config.train_size) {
                img.clone()
            } else {
                img.resized(config.train_size, config.train_size)?
            };
            prepare_sample(&sized, config)
        })
        .collect()
}

/// Source of the two discriminator verdicts the APM score consumes.
/// Swappable so tests can pin the disagreement.
pub trait ApmProbe {
    fn probe(
        &self,
        disc: &DiscriminatorParams,
        p_fs: &SoftMask,
        y_fg: &SoftMask,
    ) -> Result<(f64, f64)>;
}

/// Default probe: run the real discriminator on both masks.
pub struct DiscriminatorProbe;

impl ApmProbe for DiscriminatorProbe {
    fn probe(
        &self,
        disc: &DiscriminatorParams,
        p_fs: &SoftMask,
        y_fg: &SoftMask,
    ) -> Result<(f64, f64)> {
        Ok((discriminate(p_fs, disc)?, discriminate(y_fg, disc)?))
    }
}

/// Probe returning fixed verdicts; holds |delta| constant across training.
pub struct ConstantProbe(pub f64, pub f64);

impl ApmProbe for ConstantProbe {
    fn probe(
        &self,
        _disc: &DiscriminatorParams,
        _p_fs: &SoftMask,
        _y_fg: &SoftMask,
    ) -> Result<(f64, f64)> {
        Ok((self.0, self.1))
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    pub l_seg: f64,
    pub l_orth: f64,
    pub l_dis: f64,
    pub l_total: f64,
    /// Batch-mean mixing weight (generator steps only).
    pub w: f64,
    /// Per-image mixing weights in batch order.
    pub w_images: Vec<f64>,
}

/// Full mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: DecoderParams,
    pub teacher: DecoderParams,
    pub disc: DiscriminatorParams,
    pub epoch: usize,
    pub step: u64,
    pub opt_student: Adam,
    pub opt_disc: Adam,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    /// Fresh state: the teacher starts as an exact copy of the student.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let student_seed: u64 = master.gen();
        let disc_seed: u64 = master.gen();
        let student = DecoderParams::init(config.backbone.channels, student_seed);
        let teacher = student.clone();
        let disc = DiscriminatorParams::init(config.disc_input_size, disc_seed)?;
        let n_student = student.to_flat().len();
        let n_disc = disc.to_flat().len();
        Ok(Self {
            student,
            teacher,
            disc,
            epoch: 0,
            step: 0,
            opt_student: Adam::new(config.student_lr, n_student),
            opt_disc: Adam::new(config.disc_lr, n_disc),
            rng: master,
            history: Vec::new(),
        })
    }
}

/// Serialized snapshot written at every epoch end.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub step: u64,
    pub student: DecoderParams,
    pub teacher: DecoderParams,
    pub disc: DiscriminatorParams,
    pub opt_student: Adam,
    pub opt_disc: Adam,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            epoch: state.epoch,
            step: state.step,
            student: state.student.clone(),
            teacher: state.teacher.clone(),
            disc: state.disc.clone(),
            opt_student: state.opt_student.clone(),
            opt_disc: state.opt_disc.clone(),
        }
    }
}

/// Write-temp-then-rename so a crash never leaves a torn checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(ckpt)
        .map_err(|e| Error::Training(format!("cannot serialize checkpoint: {e}")))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &json).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("cannot parse checkpoint {}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    Ok(ckpt)
}

fn mixing_weight(
    config: &RunConfig,
    probe: &dyn ApmProbe,
    disc: &DiscriminatorParams,
    sample: &TrainSample,
    y_fg: &SoftMask,
    epoch: usize,
) -> Result<f64> {
    match config.mixing {
        MixingStrategy::Apm => {
            let (y_p1, y_p2) = probe.probe(disc, &sample.p_fs, y_fg)?;
            score(y_p1, y_p2, epoch, config.epochs)
        }
        strategy => baseline_weight(strategy, epoch, config.epochs),
    }
}

/// One student update over a batch: per-image mixed pseudo-labels, mean
/// segmentation + orthogonality gradients, one Adam step, then the EMA
/// refresh of the teacher. Discriminator parameters are read-only here.
pub fn train_step_generator(
    state: &mut TrainState,
    batch: &[TrainSample],
    config: &RunConfig,
    probe: &dyn ApmProbe,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad_acc = DecoderParams::zeros(config.backbone.channels);
    let mut l_seg_sum = 0.0;
    let mut l_orth_sum = 0.0;
    let mut w_images = Vec::with_capacity(batch.len());

    for sample in batch {
        let teacher_out = decode(&sample.features, &state.teacher)?;
        let p_t = teacher_pseudo_label(&teacher_out);
        let (student_out, cache) = decode_with_cache(&sample.features, &state.student)?;
        let w = mixing_weight(config, probe, &state.disc, sample, &student_out.y_fg, state.epoch)?;
        w_images.push(w);
        let p = mix(&p_t, &sample.p_fs, w)?;

        let l_seg = seg_loss(&student_out.y_fg, &student_out.y_bg, &p)?;
        let l_orth = orth_loss(&student_out.q_fg, &student_out.q_bg)?;
        l_seg_sum += l_seg;
        l_orth_sum += l_orth;

        let (g_fg, g_bg) = seg_loss_grad(&student_out.y_fg, &student_out.y_bg, &p)?;
        let (g_qfg, g_qbg) = orth_loss_grad(&student_out.q_fg, &student_out.q_bg)?;
        let ws = config.loss_weights.seg;
        let wo = config.loss_weights.orth;
        let grads = crate::dba_decoder::decode_backward(
            &cache,
            &state.student,
            &g_fg.mapv(|v| v * ws),
            &g_bg.mapv(|v| v * ws),
            &g_qfg.mapv(|v| v * wo),
            &g_qbg.mapv(|v| v * wo),
        );
        grad_acc.add_scaled(&grads, scale);
    }

    let bundle = total_loss(
        TrainPhase::Generator,
        l_seg_sum * scale,
        l_orth_sum * scale,
        0.0,
        &config.loss_weights,
    );
    if !bundle.l_total.is_finite() || !grad_acc.is_finite() {
        return Err(Error::Training(format!(
            "non-finite generator loss at epoch {} step {}: {bundle:?}",
            state.epoch, state.step
        )));
    }

    let mut flat = state.student.to_flat();
    state.opt_student.step(&mut flat, &grad_acc.to_flat());
    state.student.assign_from_flat(&flat);
    ema_update(&mut state.teacher, &state.student, config.ema_momentum)?;

    state.step += 1;
    let w_mean = w_images.iter().sum::<f64>() / w_images.len() as f64;
    state.history.push(StepRecord {
        step: state.step,
        epoch: state.epoch,
        phase: "generator".into(),
        l_seg: bundle.l_seg,
        l_orth: bundle.l_orth,
        l_dis: bundle.l_dis,
        l_total: bundle.l_total,
        w: w_mean,
        w_images,
    });
    Ok(bundle)
}

/// One discriminator update over a batch: fixed-strategy labels are class
/// 1, detached student foreground predictions class 0. Student and teacher
/// parameters are read-only here.
pub fn train_step_discriminator(
    state: &mut TrainState,
    batch: &[TrainSample],
    config: &RunConfig,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let scale = 1.0 / (2 * batch.len()) as f64;
    let mut grad_acc = DiscriminatorParams::zeros(config.disc_input_size);
    let mut loss_sum = 0.0;
    for sample in batch {
        // Student forward only to produce the negative-class input.
        let student_out = decode(&sample.features, &state.student)?;
        for (mask, label) in [(&sample.p_fs, 1u8), (&student_out.y_fg, 0u8)] {
            let cache = discriminate_with_cache(mask, &state.disc)?;
            loss_sum += dis_loss(cache.prob(), label)?;
            let g = dis_loss_grad(cache.prob(), label) * config.loss_weights.dis;
            let grads = discriminate_backward(&cache, &state.disc, g);
            grad_acc.add_scaled(&grads, scale);
        }
    }
    let bundle = total_loss(
        TrainPhase::Discriminator,
        0.0,
        0.0,
        loss_sum * scale,
        &config.loss_weights,
    );
    if !bundle.l_total.is_finite() || !grad_acc.is_finite() {
        return Err(Error::Training(format!(
            "non-finite discriminator loss at epoch {} step {}",
            state.epoch, state.step
        )));
    }
    let mut flat = state.disc.to_flat();
    state.opt_disc.step(&mut flat, &grad_acc.to_flat());
    state.disc.assign_from_flat(&flat);

    state.step += 1;
    state.history.push(StepRecord {
        step: state.step,
        epoch: state.epoch,
        phase: "discriminator".into(),
        l_seg: 0.0,
        l_orth: 0.0,
        l_dis: bundle.l_dis,
        l_total: bundle.l_total,
        w: 0.0,
        w_images: Vec::new(),
    });
    Ok(bundle)
}

/// Student coarse mask for one (any-resolution) image, upsampled to the
/// requested output size.
fn coarse_mask(
    image: &ImageTensor,
    student: &DecoderParams,
    config: &RunConfig,
    out_dims: (usize, usize),
) -> Result<SoftMask> {
    let sized = if image.dims() == (config.train_size, config.train_size) {
        image.clone()
    } else {
        image.resized(config.train_size, config.train_size)?
    };
    let features = extract_features(&sized, &config.backbone)?;
    let out = decode(&features, student)?;
    upsample_mask(&out.y_fg, out_dims.0, out_dims.1)
}

/// Inference result: the final mask and, when Look-Twice ran, its region
/// log.
#[derive(Debug, Clone)]
pub struct InferOutcome {
    pub mask: SoftMask,
    pub coarse: SoftMask,
    pub regions: Option<Vec<RegionReport>>,
}

/// Test-time path: coarse student mask at image resolution, then optional
/// Look-Twice refinement.
pub fn infer(
    image: &ImageTensor,
    student: &DecoderParams,
    config: &RunConfig,
    look_twice: bool,
) -> Result<InferOutcome> {
    let (h, w) = image.dims();
    let coarse = coarse_mask(image, student, config, (h, w))?;
    if !look_twice {
        return Ok(InferOutcome {
            mask: coarse.clone(),
            coarse,
            regions: None,
        });
    }
    let lt_cfg = LookTwiceConfig {
        tau: config.tau,
        binarize_threshold: 0.5,
        model_input: config.train_size,
    };
    let mut model = |crop: &ImageTensor| {
        coarse_mask(crop, student, config, (config.train_size, config.train_size))
    };
    let outcome = refine(image, &coarse, &mut model, &lt_cfg)?;
    Ok(InferOutcome {
        mask: outcome.mask,
        coarse,
        regions: Some(outcome.regions),
    })
}

/// Run directory artifacts produced by [`fit`].
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub backbone_provenance: String,
    pub interpolation: String,
    pub timings_ms: BTreeMap<String, u128>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

struct RunWriter {
    dir: PathBuf,
    log: fs::File,
    outputs: Vec<String>,
}

impl RunWriter {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("metrics.log");
        let log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
            outputs: vec!["metrics.log".into()],
        })
    }

    fn append_record(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Training(format!("cannot serialize step record: {e}")))?;
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.dir.join("metrics.log"), e))
    }

    fn write_checkpoint(&mut self, state: &TrainState) -> Result<PathBuf> {
        let name = format!("checkpoints/epoch_{:03}.json", state.epoch);
        let path = self.dir.join(&name);
        save_checkpoint(&path, &Checkpoint::from_state(state))?;
        self.outputs.push(name);
        Ok(path)
    }
}

/// Trains for the configured number of epochs and returns the final state.
///
/// When `run_dir` is given the run directory holds `checkpoints/` (one per
/// epoch, written atomically), `metrics.log` (one JSON line per step), and
/// `manifest.json` (written once, on success).
pub fn fit(images: &[ImageTensor], config: &RunConfig, run_dir: Option<&Path>) -> Result<TrainState> {
    fit_with_probe(images, config, run_dir, &DiscriminatorProbe)
}

/// [`fit`] with a custom APM probe (tests use this to pin disagreement).
pub fn fit_with_probe(
    images: &[ImageTensor],
    config: &RunConfig,
    run_dir: Option<&Path>,
    probe: &dyn ApmProbe,
) -> Result<TrainState> {
    if images.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    config.validate()?;
    let started = Instant::now();
    let mut writer = run_dir.map(RunWriter::create).transpose()?;

    let base_samples = prepare_samples(images, config)?;
    let prepare_ms = started.elapsed().as_millis();

    let mut state = TrainState::new(config)?;
    let lt_cfg = LookTwiceConfig {
        tau: config.tau,
        binarize_threshold: 0.5,
        model_input: config.train_size,
    };

    for epoch in 0..config.epochs {
        state.epoch = epoch;

        // Look-Twice augmentation: crops of small regions in the current
        // student's predictions join this epoch's pool. Skipped at epoch 0
        // while the student is still noise.
        let mut pool = base_samples.clone();
        if config.look_twice && epoch > 0 {
            for sample in &base_samples {
                let coarse = coarse_mask(
                    &sample.image,
                    &state.student,
                    config,
                    (config.train_size, config.train_size),
                )?;
                for patch in emit_training_patches(&sample.image, &coarse, &lt_cfg)? {
                    pool.push(prepare_sample(&patch, config)?);
                }
            }
        }

        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut state.rng);

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| pool[i].clone()).collect();
            let gen = train_step_generator(&mut state, &batch, config, probe)?;
            if let Some(w) = writer.as_mut() {
                w.append_record(state.history.last().unwrap())?;
            }
            let dis = train_step_discriminator(&mut state, &batch, config)?;
            if let Some(w) = writer.as_mut() {
                w.append_record(state.history.last().unwrap())?;
            }
            debug_assert!(gen.l_total.is_finite() && dis.l_total.is_finite());
        }

        if let Some(w) = writer.as_mut() {
            w.write_checkpoint(&state)?;
        }
    }

    if let Some(w) = writer.as_mut() {
        let manifest = RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.to_key_values(),
            backbone_provenance: match &config.backbone.feature_dir {
                Some(dir) => format!("{} ({})", config.backbone.name, dir.display()),
                None => config.backbone.name.clone(),
            },
            interpolation: "bilinear-align-corners".into(),
            timings_ms: BTreeMap::from([
                ("prepare".into(), prepare_ms),
                ("total".into(), started.elapsed().as_millis()),
            ]),
            outputs: {
                let mut o = w.outputs.clone();
                o.push("manifest.json".into());
                o
            },
            warnings: Vec::new(),
        };
        let path = w.dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Training(format!("cannot serialize manifest: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(state)
}
