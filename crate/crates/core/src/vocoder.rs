//! Unit-to-waveform generator conditioned on a one-hot speaker vector.
//!
//! Each frame's input is a learned unit embedding concatenated with the
//! speaker indicator. A convolution lifts it to the first stage width, then
//! every stage upsamples with a transposed convolution and refines with
//! dilated residual convolutions. The output passes through `tanh`.
//! Training minimizes a multi-resolution STFT loss plus a small waveform L1.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unitts_nn::{
    clip_grad_norm, conv1d, conv_transpose1d, embedding, Adam, AdamConfig, Binding, Checkpoint, Float, Graph,
    ParamSet, Var,
};

use crate::corpus::Waveform;
use crate::error::{invalid, Error, Result};
use crate::optim::{accumulate, LrSchedule};
use crate::units::UnitSequence;

pub const VOCODER_CHECKPOINT_KIND: &str = "vocoder";
const LEAKY_SLOPE: f64 = 0.1;
/// Added to STFT power before the square root.
const POWER_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    /// Number of unit classes `K`.
    pub units: usize,
    /// Speaker names; the one-hot width is their count.
    pub speakers: Vec<String>,
    pub sample_rate: u32,
    pub embed_dim: usize,
    pub upsample: Vec<usize>,
    pub channels: usize,
    pub pre_kernel: usize,
    pub post_kernel: usize,
    pub res_kernel: usize,
    pub dilations: Vec<usize>,
    pub stft_windows: Vec<usize>,
    pub l1_weight: f64,
}

impl VocoderConfig {
    pub fn new(units: usize, speakers: Vec<String>) -> Self {
        Self {
            units,
            speakers,
            sample_rate: 16000,
            embed_dim: 32,
            upsample: vec![4, 4, 4],
            channels: 128,
            pre_kernel: 7,
            post_kernel: 7,
            res_kernel: 3,
            dilations: vec![1, 3, 9],
            stft_windows: vec![128, 256, 512],
            l1_weight: 0.1,
        }
    }

    /// Samples per unit frame.
    pub fn hop(&self) -> usize {
        self.upsample.iter().product()
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.channels >> (stage + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.embed_dim == 0 || self.sample_rate == 0 {
            return Err(invalid!("vocoder units, embed_dim and sample_rate must be positive"));
        }
        if self.speakers.is_empty() {
            return Err(invalid!("vocoder needs at least one speaker"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.speakers.iter().find(|s| !seen.insert(*s)) {
            return Err(invalid!("speaker `{dup}` listed twice"));
        }
        if self.upsample.is_empty() || self.upsample.contains(&0) {
            return Err(invalid!("upsampling factors must be positive"));
        }
        if self.stage_channels(self.upsample.len() - 1) == 0 {
            return Err(invalid!(
                "{} channels cannot be halved {} times",
                self.channels,
                self.upsample.len()
            ));
        }
        for (name, k) in [
            ("pre_kernel", self.pre_kernel),
            ("post_kernel", self.post_kernel),
            ("res_kernel", self.res_kernel),
        ] {
            if k % 2 == 0 {
                return Err(invalid!("vocoder {name} must be odd, got {k}"));
            }
        }
        if self.dilations.contains(&0) {
            return Err(invalid!("dilations must be positive"));
        }
        if self.stft_windows.is_empty() || self.stft_windows.iter().any(|&w| w < 4) {
            return Err(invalid!("STFT windows must be at least 4 samples"));
        }
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite()) {
            return Err(invalid!("l1_weight must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn speaker(&self, name: &str) -> Result<SpeakerOneHot> {
        match self.speakers.iter().position(|s| s == name) {
            Some(i) => SpeakerOneHot::new(i, self.speakers.len()),
            None => Err(invalid!("unknown speaker `{name}`")),
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let zeros = |n: usize| Array2::<f32>::zeros((1, n));

        p.insert_uniform("embed", (self.units, self.embed_dim), 1.0, &mut rng);
        let cin = self.embed_dim + self.speakers.len();
        let (k, c) = (self.pre_kernel, self.channels);
        p.insert_uniform("pre.w", (k * cin, c), bound(k * cin), &mut rng);
        p.insert("pre.b", zeros(c));
        let mut width = c;
        for (s, &stride) in self.upsample.iter().enumerate() {
            let out = self.stage_channels(s);
            let kernel = 2 * stride;
            p.insert_uniform(format!("up.{s}.w"), (width, kernel * out), bound(width * 2), &mut rng);
            p.insert(format!("up.{s}.b"), zeros(out));
            for (j, _) in self.dilations.iter().enumerate() {
                let k = self.res_kernel;
                p.insert_uniform(format!("res.{s}.{j}.w"), (k * out, out), bound(k * out), &mut rng);
                p.insert(format!("res.{s}.{j}.b"), zeros(out));
            }
            width = out;
        }
        let k = self.post_kernel;
        p.insert_uniform("post.w", (k * width, 1), bound(k * width), &mut rng);
        p.insert("post.b", zeros(1));
        Ok(p)
    }
}

/// Speaker `index` out of `count`, realized as an indicator row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpeakerOneHot {
    index: usize,
    count: usize,
}

impl SpeakerOneHot {
    pub fn new(index: usize, count: usize) -> Result<Self> {
        if index >= count {
            return Err(invalid!("speaker index {index} out of range for {count} speakers"));
        }
        Ok(Self { index, count })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// The indicator repeated on each of `frames` rows.
    pub fn broadcast<T: Float>(&self, frames: usize) -> Array2<T> {
        Array2::from_shape_fn((frames, self.count), |(_, j)| if j == self.index { T::one() } else { T::zero() })
    }
}

fn generator<T: Float>(g: &mut Graph<T>, p: &Binding, cfg: &VocoderConfig, units: &[usize], spk: SpeakerOneHot) -> Var {
    let leaky = T::of(LEAKY_SLOPE);
    let e = embedding(g, p.var("embed"), units);
    let onehot = g.constant(spk.broadcast(units.len()));
    let x = g.concat_cols(&[e, onehot]);
    let mut x = conv1d(g, x, p.var("pre.w"), Some(p.var("pre.b")), cfg.pre_kernel, 1);
    for (s, &stride) in cfg.upsample.iter().enumerate() {
        let a = g.leaky_relu(x, leaky);
        x = conv_transpose1d(
            g,
            a,
            p.var(&format!("up.{s}.w")),
            Some(p.var(&format!("up.{s}.b"))),
            2 * stride,
            stride,
        );
        for (j, &dil) in cfg.dilations.iter().enumerate() {
            let a = g.leaky_relu(x, leaky);
            let y = conv1d(
                g,
                a,
                p.var(&format!("res.{s}.{j}.w")),
                Some(p.var(&format!("res.{s}.{j}.b"))),
                cfg.res_kernel,
                dil,
            );
            x = g.add(x, y);
        }
    }
    let a = g.leaky_relu(x, leaky);
    let y = conv1d(g, a, p.var("post.w"), Some(p.var("post.b")), cfg.post_kernel, 1);
    g.tanh(y)
}

/// Periodic Hann window and real-DFT basis for one STFT resolution.
#[derive(Debug, Clone)]
struct Resolution {
    window: usize,
    hop: usize,
    hann: Array2<f64>,
    cos: Array2<f64>,
    sin: Array2<f64>,
}

impl Resolution {
    fn new(window: usize) -> Self {
        let bins = window / 2 + 1;
        let hann = Array2::from_shape_fn((1, window), |(_, i)| 0.5 - 0.5 * (2.0 * PI * i as f64 / window as f64).cos());
        let angle = |i: usize, k: usize| 2.0 * PI * ((i * k) % window) as f64 / window as f64;
        Self {
            window,
            hop: window / 4,
            hann,
            cos: Array2::from_shape_fn((window, bins), |(i, k)| angle(i, k).cos()),
            sin: Array2::from_shape_fn((window, bins), |(i, k)| -angle(i, k).sin()),
        }
    }

    fn frame_index(&self, len: usize) -> Option<(Vec<usize>, usize)> {
        if len < self.window {
            return None;
        }
        let frames = (len - self.window) / self.hop + 1;
        let index = (0..frames)
            .flat_map(|f| (f * self.hop)..(f * self.hop + self.window))
            .collect();
        Some((index, frames))
    }

    /// `|STFT|` of a plain signal, frames × bins.
    fn magnitude(&self, x: &[f32]) -> Option<Array2<f64>> {
        let (index, frames) = self.frame_index(x.len())?;
        let framed = Array2::from_shape_fn((frames, self.window), |(f, i)| {
            x[index[f * self.window + i]] as f64 * self.hann[[0, i]]
        });
        let re = framed.dot(&self.cos);
        let im = framed.dot(&self.sin);
        Some(ndarray::Zip::from(&re).and(&im).map_collect(|&r, &i| (r * r + i * i + POWER_FLOOR).sqrt()))
    }
}

/// Spectral convergence plus mean absolute log-magnitude error, averaged over
/// resolutions, against a fixed target signal.
#[derive(Debug, Clone)]
pub struct SpectralLoss {
    resolutions: Vec<Resolution>,
}

impl SpectralLoss {
    pub fn new(windows: &[usize]) -> Self {
        Self {
            resolutions: windows.iter().map(|&w| Resolution::new(w)).collect(),
        }
    }

    /// Shortest signal every resolution can frame.
    pub fn min_len(&self) -> usize {
        self.resolutions.iter().map(|r| r.window).max().unwrap_or(0)
    }

    /// Graph node for the loss of `pred` (`[len × 1]`) against `target`.
    pub fn build<T: Float>(&self, g: &mut Graph<T>, pred: Var, target: &[f32]) -> Result<Var> {
        let len = g.shape(pred).0;
        if len != target.len() {
            return Err(invalid!("prediction has {len} samples, target {}", target.len()));
        }
        let mut terms = Vec::new();
        for r in &self.resolutions {
            let Some((index, frames)) = r.frame_index(len) else { continue };
            let want = r.magnitude(target).expect("same length");
            let framed = g.gather(pred, index, (frames, r.window));
            let hann = g.constant(r.hann.mapv(T::of));
            let framed = g.mul_row(framed, hann);
            let cos = g.constant(r.cos.mapv(T::of));
            let sin = g.constant(r.sin.mapv(T::of));
            let re = g.matmul(framed, cos);
            let im = g.matmul(framed, sin);
            let re2 = g.square(re);
            let im2 = g.square(im);
            let power = g.add(re2, im2);
            let floor = g.constant(Array2::from_elem((frames, want.ncols()), T::of(POWER_FLOOR)));
            let power = g.add(power, floor);
            let mag = g.sqrt(power);

            let want_norm = want.mapv(|v| v * v).sum().sqrt();
            let want_var = g.constant(want.mapv(T::of));
            let diff = g.sub(want_var, mag);
            let diff2 = g.square(diff);
            let num = g.sum(diff2);
            let num = g.sqrt(num);
            let sc = g.scale(num, T::of(1.0 / want_norm));

            let log_mag = g.ln(mag);
            let log_want = g.constant(want.mapv(|v| T::of(v.ln())));
            let d = g.sub(log_want, log_mag);
            let d = g.abs(d);
            let lm = g.mean(d);
            let term = g.add(sc, lm);
            terms.push(term);
        }
        if terms.is_empty() {
            return Err(invalid!("{len} samples is shorter than every STFT window"));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t);
        }
        Ok(g.scale(total, T::of(1.0 / terms.len() as f64)))
    }
}

/// Unit sequence, speaker and the audio it came from, trimmed to `len(units) × hop`.
#[derive(Debug, Clone, PartialEq)]
pub struct VocoderExample {
    pub id: String,
    pub units: UnitSequence,
    pub speaker: SpeakerOneHot,
    pub samples: Vec<f32>,
}

impl VocoderExample {
    /// Truncate `waveform` to `len(units) × hop` samples.
    pub fn new(id: impl Into<String>, units: UnitSequence, speaker: SpeakerOneHot, waveform: &Waveform, hop: usize) -> Result<Self> {
        let id = id.into();
        let need = units.len() * hop;
        if waveform.samples.len() < need {
            return Err(invalid!(
                "{id}: {} samples cannot cover {} frames of {hop}",
                waveform.samples.len(),
                units.len()
            ));
        }
        Ok(Self {
            id,
            units,
            speaker,
            samples: waveform.samples[..need].to_vec(),
        })
    }

    pub fn check(&self, cfg: &VocoderConfig) -> Result<()> {
        self.units.check_range(cfg.units)?;
        if self.speaker.count() != cfg.speakers.len() {
            return Err(invalid!(
                "{}: one-hot of width {} for {} speakers",
                self.id,
                self.speaker.count(),
                cfg.speakers.len()
            ));
        }
        if self.samples.len() != self.units.len() * cfg.hop() {
            return Err(invalid!(
                "{}: {} samples for {} frames at hop {}",
                self.id,
                self.samples.len(),
                self.units.len(),
                cfg.hop()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocoderLoss {
    pub total: f64,
    pub spectral: f64,
    pub waveform_l1: f64,
}

/// Training graph for one (possibly cropped) example.
pub struct VocoderLossGraph<T: Float> {
    pub graph: Graph<T>,
    pub binding: Binding,
    pub total: Var,
    pub spectral: Var,
    pub waveform_l1: Var,
}

impl<T: Float> VocoderLossGraph<T> {
    fn terms(&self) -> VocoderLoss {
        VocoderLoss {
            total: self.graph.scalar(self.total).as_f64(),
            spectral: self.graph.scalar(self.spectral).as_f64(),
            waveform_l1: self.graph.scalar(self.waveform_l1).as_f64(),
        }
    }
}

pub fn vocoder_loss_graph<T: Float>(
    cfg: &VocoderConfig,
    params: &ParamSet<T>,
    stft: &SpectralLoss,
    units: &[u32],
    speaker: SpeakerOneHot,
    target: &[f32],
) -> Result<VocoderLossGraph<T>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let ids: Vec<usize> = units.iter().map(|&u| u as usize).collect();
    let y = generator(&mut g, &p, cfg, &ids, speaker);
    let spectral = stft.build(&mut g, y, target)?;
    let want = g.constant(Array2::from_shape_fn((target.len(), 1), |(i, _)| T::of(target[i] as f64)));
    let d = g.sub(y, want);
    let d = g.abs(d);
    let waveform_l1 = g.mean(d);
    let weighted = g.scale(waveform_l1, T::of(cfg.l1_weight));
    let total = g.add(spectral, weighted);
    Ok(VocoderLossGraph {
        graph: g,
        binding: p,
        total,
        spectral,
        waveform_l1,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    config: VocoderConfig,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocoderModel {
    pub config: VocoderConfig,
    pub params: ParamSet<f32>,
    pub seed: u64,
}

impl VocoderModel {
    pub fn new(config: VocoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: config.init_params(seed)?,
            config,
            seed,
        })
    }

    /// `len(units) × hop` samples in `[-1, 1]`.
    pub fn synthesize(&self, units: &UnitSequence, speaker: SpeakerOneHot) -> Result<Waveform> {
        units.check_range(self.config.units)?;
        if speaker.count() != self.config.speakers.len() {
            return Err(invalid!(
                "one-hot of width {} for a model with {} speakers",
                speaker.count(),
                self.config.speakers.len()
            ));
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let ids: Vec<usize> = units.as_slice().iter().map(|&u| u as usize).collect();
        let y = generator(&mut g, &p, &self.config, &ids, speaker);
        let samples: Vec<f32> = g.value(y).iter().copied().collect();
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("vocoder produced non-finite samples".into()));
        }
        Waveform::new(samples, self.config.sample_rate)
    }

    /// Loss of the whole example, no cropping.
    pub fn loss(&self, ex: &VocoderExample) -> Result<VocoderLoss> {
        ex.check(&self.config)?;
        let stft = SpectralLoss::new(&self.config.stft_windows);
        let lg = vocoder_loss_graph(&self.config, &self.params, &stft, ex.units.as_slice(), ex.speaker, &ex.samples)?;
        Ok(lg.terms())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_string(&CheckpointConfig {
            config: self.config.clone(),
            seed: self.seed,
        })?;
        Ok(Checkpoint {
            kind: VOCODER_CHECKPOINT_KIND.into(),
            config,
            tensors: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.kind != VOCODER_CHECKPOINT_KIND {
            return Err(invalid!(
                "checkpoint holds a `{}` model, not `{VOCODER_CHECKPOINT_KIND}`",
                ckpt.kind
            ));
        }
        let CheckpointConfig { config, seed } = serde_json::from_str(&ckpt.config)?;
        config.init_params(seed)?.check_layout(&ckpt.tensors)?;
        if !ckpt.tensors.all_finite() {
            return Err(Error::Numerical("checkpoint has non-finite parameters".into()));
        }
        Ok(Self {
            config,
            params: ckpt.tensors,
            seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_checkpoint()?.save(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Checkpoint::load(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ckpt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocoderTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Random crop length in frames; whole utterances when absent.
    pub segment_frames: Option<usize>,
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for VocoderTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr: 2e-4,
            seed: 0,
            segment_frames: None,
            clip_norm: Some(1.0),
            schedule: LrSchedule::Constant,
        }
    }
}

/// Per-epoch means over the training crops.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocoderHistory {
    pub epochs: Vec<VocoderLoss>,
}

/// Adam on the spectral + L1 loss. Examples carry no text.
pub fn train_vocoder(
    mut model: VocoderModel,
    examples: &[VocoderExample],
    opts: &VocoderTrainOptions,
) -> Result<(VocoderModel, VocoderHistory)> {
    if opts.batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(invalid!("learning rate must be positive, got {}", opts.lr));
    }
    let cfg = model.config.clone();
    let hop = cfg.hop();
    let stft = SpectralLoss::new(&cfg.stft_windows);
    for ex in examples {
        ex.check(&cfg)?;
        let frames = opts.segment_frames.unwrap_or(ex.units.len()).min(ex.units.len());
        if frames * hop < stft.min_len() {
            return Err(invalid!(
                "{}: {} training samples is shorter than the {}-sample STFT window",
                ex.id,
                frames * hop,
                stft.min_len()
            ));
        }
    }
    if opts.segment_frames == Some(0) {
        return Err(invalid!("segment_frames must be positive"));
    }
    let mut history = VocoderHistory::default();
    if opts.epochs > 0 && examples.is_empty() {
        return Err(invalid!("no training examples"));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: opts.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let total_steps = opts.epochs * examples.len().div_ceil(opts.batch_size);
    let mut step = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = VocoderLoss {
            total: 0.0,
            spectral: 0.0,
            waveform_l1: 0.0,
        };
        for (b, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut grads: Option<BTreeMap<String, Array2<f32>>> = None;
            for &i in batch {
                let ex = &examples[i];
                let frames = opts.segment_frames.unwrap_or(ex.units.len()).min(ex.units.len());
                let start = rng.random_range(0..=ex.units.len() - frames);
                let units = &ex.units.as_slice()[start..start + frames];
                let target = &ex.samples[start * hop..(start + frames) * hop];
                let lg = vocoder_loss_graph(&cfg, &model.params, &stft, units, ex.speaker, target)?;
                let terms = lg.terms();
                if !(terms.total.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite vocoder loss at epoch {epoch}, batch {b} (utterance {})",
                        ex.id
                    )));
                }
                sum.total += terms.total;
                sum.spectral += terms.spectral;
                sum.waveform_l1 += terms.waveform_l1;
                accumulate(&mut grads, lg.binding.gradients(&lg.graph.backward(lg.total), &model.params));
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for g in grads.values_mut() {
                g.mapv_inplace(|v| v * inv);
            }
            if let Some(max) = opts.clip_norm {
                if !clip_grad_norm(&mut grads, max).is_finite() {
                    return Err(Error::Numerical(format!("non-finite vocoder gradient at epoch {epoch}, batch {b}")));
                }
            }
            adam.config.lr = opts.lr * opts.schedule.factor(step, total_steps);
            adam.step(&mut model.params, &grads);
            step += 1;
        }
        let n = examples.len() as f64;
        let mean = VocoderLoss {
            total: sum.total / n,
            spectral: sum.spectral / n,
            waveform_l1: sum.waveform_l1 / n,
        };
        tracing::debug!(epoch, loss = mean.total, spectral = mean.spectral, "vocoder epoch");
        history.epochs.push(mean);
    }
    if !model.params.all_finite() {
        return Err(Error::Numerical("vocoder parameters became non-finite".into()));
    }
    Ok((model, history))
}
