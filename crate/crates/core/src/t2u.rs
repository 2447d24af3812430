//! Non-autoregressive text-to-unit model: token encoder, duration predictor,
//! length regulator and frame decoder producing logits over `K` units.
//!
//! Blocks are self-attention followed by a convolutional feed-forward layer,
//! each wrapped in a residual connection and a post layer norm.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unitts_nn::{
    clip_grad_norm, conv1d, embedding, sinusoidal_positions, Adam, AdamConfig, Binding, Checkpoint, Float, Graph,
    ParamSet, Var,
};

use crate::aligner::DurationSequence;
use crate::error::{invalid, Error, Result};
use crate::optim::{accumulate, LrSchedule};
use crate::text::TokenSequence;
use crate::units::UnitSequence;

pub const T2U_CHECKPOINT_KIND: &str = "t2u";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T2UConfig {
    pub vocab_size: usize,
    /// Number of unit classes `K`.
    pub units: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub kernel: usize,
    pub duration_kernel: usize,
    pub dropout: f64,
    /// Weight of the log-duration regression term.
    pub duration_weight: f64,
}

impl T2UConfig {
    pub fn new(vocab_size: usize, units: usize) -> Self {
        Self {
            vocab_size,
            units,
            embed_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_dim: 256,
            kernel: 3,
            duration_kernel: 3,
            dropout: 0.1,
            duration_weight: 0.1,
        }
    }

    /// The smallest useful shape: 8 channels, one layer each side.
    pub fn micro(vocab_size: usize, units: usize) -> Self {
        Self {
            embed_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 32,
            ..Self::new(vocab_size, units)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("units", self.units),
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid!("t2u {name} must be at least 1"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(invalid!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        for (name, k) in [("kernel", self.kernel), ("duration_kernel", self.duration_kernel)] {
            if k % 2 == 0 {
                return Err(invalid!("t2u {name} must be odd, got {k}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.duration_weight >= 0.0 && self.duration_weight.is_finite()) {
            return Err(invalid!("duration_weight must be finite and non-negative"));
        }
        Ok(())
    }

    fn block_names(&self) -> impl Iterator<Item = String> {
        let enc = (0..self.encoder_layers).map(|l| format!("enc.{l}"));
        let dec = (0..self.decoder_layers).map(|l| format!("dec.{l}"));
        enc.chain(dec)
    }

    /// Freshly initialized parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet<f32>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let d = self.embed_dim;
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let ones = |n: usize| Array2::<f32>::ones((1, n));
        let zeros = |n: usize| Array2::<f32>::zeros((1, n));

        p.insert_uniform("embed", (self.vocab_size, d), 1.0, &mut rng);
        for block in self.block_names() {
            for proj in ["q", "k", "v", "o"] {
                p.insert_uniform(format!("{block}.attn.w{proj}"), (d, d), glorot(d, d), &mut rng);
                p.insert(format!("{block}.attn.b{proj}"), zeros(d));
            }
            let (k, f) = (self.kernel, self.ffn_dim);
            p.insert_uniform(format!("{block}.ff1.w"), (k * d, f), glorot(k * d, f), &mut rng);
            p.insert(format!("{block}.ff1.b"), zeros(f));
            p.insert_uniform(format!("{block}.ff2.w"), (f, d), glorot(f, d), &mut rng);
            p.insert(format!("{block}.ff2.b"), zeros(d));
            for ln in ["ln1", "ln2"] {
                p.insert(format!("{block}.{ln}.g"), ones(d));
                p.insert(format!("{block}.{ln}.b"), zeros(d));
            }
        }
        let k = self.duration_kernel;
        for i in 1..=2 {
            p.insert_uniform(format!("dur.conv{i}.w"), (k * d, d), glorot(k * d, d), &mut rng);
            p.insert(format!("dur.conv{i}.b"), zeros(d));
            p.insert(format!("dur.ln{i}.g"), ones(d));
            p.insert(format!("dur.ln{i}.b"), zeros(d));
        }
        p.insert_uniform("dur.proj.w", (d, 1), glorot(d, 1), &mut rng);
        p.insert("dur.proj.b", zeros(1));
        p.insert_uniform("out.w", (d, self.units), glorot(d, self.units), &mut rng);
        p.insert("out.b", zeros(self.units));
        Ok(p)
    }
}

/// Repeat row `i` of `states` `d[i]` times, in order.
pub fn length_regulate<T: Clone>(states: &Array2<T>, d: &[u32]) -> Result<Array2<T>> {
    Ok(states.select(ndarray::Axis(0), &expansion_index(states.nrows(), d)?))
}

fn expansion_index(n: usize, d: &[u32]) -> Result<Vec<usize>> {
    if d.len() != n {
        return Err(invalid!("{} durations for {n} token states", d.len()));
    }
    if let Some(i) = d.iter().position(|&x| x < 1) {
        return Err(invalid!("duration {i} is zero"));
    }
    Ok(d.iter().enumerate().flat_map(|(i, &k)| std::iter::repeat_n(i, k as usize)).collect())
}

/// One paired training utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct T2UExample {
    pub id: String,
    pub tokens: TokenSequence,
    pub durations: DurationSequence,
    pub units: UnitSequence,
}

impl T2UExample {
    pub fn check(&self, cfg: &T2UConfig) -> Result<()> {
        check_tokens(&self.tokens, cfg)?;
        if self.durations.len() != self.tokens.len() {
            return Err(invalid!(
                "{}: {} durations for {} tokens",
                self.id,
                self.durations.len(),
                self.tokens.len()
            ));
        }
        if self.durations.total() != self.units.len() {
            return Err(invalid!(
                "{}: durations sum to {} but there are {} units",
                self.id,
                self.durations.total(),
                self.units.len()
            ));
        }
        self.units.check_range(cfg.units)
    }
}

fn check_tokens(tokens: &TokenSequence, cfg: &T2UConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(invalid!("empty token sequence"));
    }
    if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(invalid!("token id {id} outside vocabulary of {}", cfg.vocab_size));
    }
    Ok(())
}

/// Graph builder for one utterance.
struct Net<'a, T: Float> {
    g: Graph<T>,
    p: Binding,
    cfg: &'a T2UConfig,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<T: Float> Net<'_, T> {
    fn var(&self, name: &str) -> Var {
        self.p.var(name)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.cfg.dropout;
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Array2::from_shape_simple_fn(self.g.shape(x), || {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        self.g.mul_const(x, mask)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Var {
        let (w, b) = (self.var(w), self.var(b));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let (gain, bias) = (self.var(&format!("{prefix}.g")), self.var(&format!("{prefix}.b")));
        let n = self.g.layer_norm_rows(x, T::of(LN_EPS));
        let n = self.g.mul_row(n, gain);
        self.g.add_row(n, bias)
    }

    fn conv(&mut self, x: Var, prefix: &str, kernel: usize) -> Var {
        let (w, b) = (self.var(&format!("{prefix}.w")), self.var(&format!("{prefix}.b")));
        conv1d(&mut self.g, x, w, Some(b), kernel, 1)
    }

    fn attention(&mut self, x: Var, block: &str) -> Var {
        let [q, k, v] = ["q", "k", "v"].map(|n| self.linear(x, &format!("{block}.attn.w{n}"), &format!("{block}.attn.b{n}")));
        let heads = self.cfg.heads;
        let dh = self.cfg.embed_dim / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = self.g.slice_cols(q, a, b);
            let kh = self.g.slice_cols(k, a, b);
            let vh = self.g.slice_cols(v, a, b);
            let kt = self.g.transpose(kh);
            let scores = self.g.matmul(qh, kt);
            let scores = self.g.scale(scores, scale);
            let weights = self.g.softmax_rows(scores);
            outs.push(self.g.matmul(weights, vh));
        }
        let cat = if heads == 1 { outs[0] } else { self.g.concat_cols(&outs) };
        self.linear(cat, &format!("{block}.attn.wo"), &format!("{block}.attn.bo"))
    }

    fn block(&mut self, x: Var, block: &str) -> Var {
        let a = self.attention(x, block);
        let a = self.dropout(a);
        let h = self.g.add(x, a);
        let h = self.layer_norm(h, &format!("{block}.ln1"));

        let f = self.conv(h, &format!("{block}.ff1"), self.cfg.kernel);
        let f = self.g.relu(f);
        let f = self.conv(f, &format!("{block}.ff2"), 1);
        let f = self.dropout(f);
        let y = self.g.add(h, f);
        self.layer_norm(y, &format!("{block}.ln2"))
    }

    fn with_positions(&mut self, x: Var) -> Var {
        let (len, dim) = self.g.shape(x);
        let pos = self.g.constant(sinusoidal_positions(len, dim));
        self.g.add(x, pos)
    }

    fn encode(&mut self, tokens: &[usize]) -> Var {
        let table = self.var("embed");
        let x = embedding(&mut self.g, table, tokens);
        let mut x = self.with_positions(x);
        x = self.dropout(x);
        for l in 0..self.cfg.encoder_layers {
            x = self.block(x, &format!("enc.{l}"));
        }
        x
    }

    /// Predicted log-durations `[N × 1]`.
    fn durations(&mut self, h: Var) -> Var {
        let mut x = h;
        for i in 1..=2 {
            x = self.conv(x, &format!("dur.conv{i}"), self.cfg.duration_kernel);
            x = self.g.relu(x);
            x = self.layer_norm(x, &format!("dur.ln{i}"));
            if i == 1 {
                x = self.dropout(x);
            }
        }
        self.linear(x, "dur.proj.w", "dur.proj.b")
    }

    fn decode(&mut self, h: Var, index: &[usize]) -> Var {
        let x = self.g.select_rows(h, index);
        let mut x = self.with_positions(x);
        for l in 0..self.cfg.decoder_layers {
            x = self.block(x, &format!("dec.{l}"));
        }
        self.linear(x, "out.w", "out.b")
    }
}

/// A built training graph with handles to the loss and its two terms.
pub struct LossGraph<T: Float> {
    pub graph: Graph<T>,
    pub binding: Binding,
    pub total: Var,
    pub ce: Var,
    pub duration: Var,
    pub logits: Var,
    pub log_durations: Var,
}

/// Teacher-forced loss graph: `CE(frame logits, units) + λ·MSE(log d̂, log d)`.
/// `rng` enables dropout.
pub fn loss_graph<T: Float>(
    cfg: &T2UConfig,
    params: &ParamSet<T>,
    ex: &T2UExample,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossGraph<T>> {
    ex.check(cfg)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let mut net = Net { g, p, cfg, rng };
    let h = net.encode(&ex.tokens.as_usize());
    let log_durations = net.durations(h);
    let index = expansion_index(ex.tokens.len(), ex.durations.as_slice())?;
    let logits = net.decode(h, &index);

    let Net { mut g, p, .. } = net;
    let targets: Vec<usize> = ex.units.as_slice().iter().map(|&u| u as usize).collect();
    let ce = g.cross_entropy(logits, &targets);
    let log_d = Array2::from_shape_fn((ex.durations.len(), 1), |(i, _)| {
        T::of((ex.durations.as_slice()[i] as f64).ln())
    });
    let target = g.constant(log_d);
    let diff = g.sub(log_durations, target);
    let sq = g.square(diff);
    let duration = g.mean(sq);
    let weighted = g.scale(duration, T::of(cfg.duration_weight));
    let total = g.add(ce, weighted);
    Ok(LossGraph {
        graph: g,
        binding: p,
        total,
        ce,
        duration,
        logits,
        log_durations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub duration: f64,
}

impl LossTerms {
    fn of<T: Float>(lg: &LossGraph<T>) -> Self {
        Self {
            total: lg.graph.scalar(lg.total).as_f64(),
            ce: lg.graph.scalar(lg.ce).as_f64(),
            duration: lg.graph.scalar(lg.duration).as_f64(),
        }
    }

    fn is_finite(&self) -> bool {
        self.total.is_finite() && self.ce.is_finite() && self.duration.is_finite()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    config: T2UConfig,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct T2UModel {
    pub config: T2UConfig,
    pub params: ParamSet<f32>,
    pub seed: u64,
}

impl T2UModel {
    pub fn new(config: T2UConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: config.init_params(seed)?,
            config,
            seed,
        })
    }

    /// Loss terms without dropout.
    pub fn loss(&self, ex: &T2UExample) -> Result<LossTerms> {
        Ok(LossTerms::of(&loss_graph(&self.config, &self.params, ex, None)?))
    }

    /// Greedy inference: predicted durations, then per-frame argmax.
    pub fn predict_units(&self, tokens: &TokenSequence) -> Result<(UnitSequence, DurationSequence)> {
        check_tokens(tokens, &self.config)?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let mut net = Net::<f32> {
            g,
            p,
            cfg: &self.config,
            rng: None,
        };
        let h = net.encode(&tokens.as_usize());
        let log_d = net.durations(h);
        let durations: Vec<u32> = net
            .g
            .value(log_d)
            .iter()
            .map(|&v| (v as f64).exp().round().max(1.0).min(u32::MAX as f64) as u32)
            .collect();
        if net.g.value(log_d).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite duration prediction".into()));
        }
        let index = expansion_index(tokens.len(), &durations)?;
        let logits = net.decode(h, &index);
        let units = net.g.value(logits).rows().into_iter().map(argmax).collect();
        Ok((UnitSequence::new(units)?, DurationSequence::new(durations)?))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_string(&CheckpointConfig {
            config: self.config,
            seed: self.seed,
        })?;
        Ok(Checkpoint {
            kind: T2U_CHECKPOINT_KIND.into(),
            config,
            tensors: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.kind != T2U_CHECKPOINT_KIND {
            return Err(invalid!("checkpoint holds a `{}` model, not `{T2U_CHECKPOINT_KIND}`", ckpt.kind));
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

/// Index of the first maximum.
pub(crate) fn argmax<'a>(row: impl IntoIterator<Item = &'a f32>) -> u32 {
    let mut best = (0usize, f32::NEG_INFINITY);
    for (i, &v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0 as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm cap per step.
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            clip_norm: Some(1.0),
            schedule: LrSchedule::Constant,
        }
    }
}

/// Optimizer state and per-epoch mean losses.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub step: u64,
    pub optimizer: Adam<f32>,
    pub history: Vec<LossTerms>,
}

/// Adam on the combined loss. Each epoch visits the examples in a fresh
/// seeded shuffle; gradients are averaged over each batch.
pub fn train(mut model: T2UModel, examples: &[T2UExample], opts: &TrainOptions) -> Result<(T2UModel, TrainingState)> {
    if opts.batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(invalid!("learning rate must be positive, got {}", opts.lr));
    }
    for ex in examples {
        ex.check(&model.config)?;
    }
    let mut state = TrainingState {
        step: 0,
        optimizer: Adam::new(AdamConfig {
            lr: opts.lr,
            ..AdamConfig::default()
        }),
        history: Vec::new(),
    };
    if opts.epochs > 0 && examples.is_empty() {
        return Err(invalid!("no training examples"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_d0d0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let total_steps = opts.epochs * examples.len().div_ceil(opts.batch_size);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = LossTerms {
            total: 0.0,
            ce: 0.0,
            duration: 0.0,
        };
        for (b, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut grads = None;
            for &i in batch {
                let lg = loss_graph(&model.config, &model.params, &examples[i], Some(&mut dropout_rng))?;
                let terms = LossTerms::of(&lg);
                if !terms.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch}, batch {b} (utterance {})",
                        examples[i].id
                    )));
                }
                sum.total += terms.total;
                sum.ce += terms.ce;
                sum.duration += terms.duration;
                let g = lg.binding.gradients(&lg.graph.backward(lg.total), &model.params);
                accumulate(&mut grads, g);
            }
            let mut grads = grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for g in grads.values_mut() {
                g.mapv_inplace(|v| v * inv);
            }
            if let Some(max) = opts.clip_norm {
                let norm = clip_grad_norm(&mut grads, max);
                if !norm.is_finite() {
                    return Err(Error::Numerical(format!("non-finite gradient at epoch {epoch}, batch {b}")));
                }
            }
            state.optimizer.config.lr = opts.lr * opts.schedule.factor(state.step as usize, total_steps);
            state.optimizer.step(&mut model.params, &grads);
            state.step += 1;
        }
        let n = examples.len() as f64;
        let mean = LossTerms {
            total: sum.total / n,
            ce: sum.ce / n,
            duration: sum.duration / n,
        };
        tracing::debug!(epoch, loss = mean.total, ce = mean.ce, duration = mean.duration, "t2u epoch");
        state.history.push(mean);
    }
    if !model.params.all_finite() {
        return Err(Error::Numerical("t2u parameters became non-finite".into()));
    }
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn example(cfg: &T2UConfig, n: usize, seed: u64) -> T2UExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(2..cfg.vocab_size as u32)).collect();
        let d: Vec<u32> = (0..n).map(|_| rng.random_range(1..=3)).collect();
        let units: Vec<u32> = (0..d.iter().sum::<u32>()).map(|_| rng.random_range(0..cfg.units as u32)).collect();
        T2UExample {
            id: format!("ex{seed}"),
            tokens: TokenSequence {
                ids,
                language: "L1".into(),
            },
            durations: DurationSequence::new(d).unwrap(),
            units: UnitSequence::new(units).unwrap(),
        }
    }

    #[test]
    fn length_regulate_examples() {
        let s = array![[1.0, 1.5], [2.0, 2.5], [3.0, 3.5]];
        let out = length_regulate(&s, &[2, 1, 3]).unwrap();
        let rows: Vec<f64> = out.column(0).to_vec();
        assert_eq!(rows, [1.0, 1.0, 2.0, 3.0, 3.0, 3.0]);
        assert_eq!(length_regulate(&s, &[1, 1, 1]).unwrap(), s);
        assert!(length_regulate(&s.slice(ndarray::s![..2, ..]).to_owned(), &[0, 1]).is_err());
        assert!(length_regulate(&s, &[1, 1]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(T2UConfig::new(10, 16).validate().is_ok());
        assert!(T2UConfig { heads: 3, ..T2UConfig::new(10, 16) }.validate().is_err());
        assert!(T2UConfig { encoder_layers: 0, ..T2UConfig::new(10, 16) }.validate().is_err());
        assert!(T2UConfig { kernel: 2, ..T2UConfig::new(10, 16) }.validate().is_err());
        assert!(T2UConfig { dropout: 1.0, ..T2UConfig::new(10, 16) }.validate().is_err());
    }

    #[test]
    fn output_width_is_k() {
        let m = T2UModel::new(T2UConfig::micro(6, 5), 1).unwrap();
        assert_eq!(m.params.get("out.w").unwrap().ncols(), 5);
        assert_eq!(m.params.get("out.b").unwrap().ncols(), 5);
    }

    /// Uniform logits (all output weights zero) give CE = ln K.
    #[test]
    fn uniform_logits_give_log_k() {
        let cfg = T2UConfig::micro(6, 16);
        let mut m = T2UModel::new(cfg, 3).unwrap();
        m.params.get_mut("out.w").unwrap().fill(0.0);
        m.params.get_mut("out.b").unwrap().fill(0.25);
        let terms = m.loss(&example(&cfg, 4, 1)).unwrap();
        assert!((terms.ce - 16f64.ln()).abs() < 1e-6, "{}", terms.ce);
    }

    #[test]
    fn exact_duration_predictions_give_zero_duration_term() {
        let cfg = T2UConfig::micro(6, 4);
        let mut m = T2UModel::new(cfg, 3).unwrap();
        let mut ex = example(&cfg, 5, 2);
        ex.durations = DurationSequence::new(vec![2; 5]).unwrap();
        ex.units = UnitSequence::new(vec![1; 10]).unwrap();
        m.params.get_mut("dur.proj.w").unwrap().fill(0.0);
        m.params.get_mut("dur.proj.b").unwrap().fill(2f32.ln());
        assert!(m.loss(&ex).unwrap().duration < 1e-12);
    }

    #[test]
    fn ce_is_shift_invariant() {
        let cfg = T2UConfig::micro(6, 4);
        let m = T2UModel::new(cfg, 8).unwrap();
        let params = m.params.cast::<f64>();
        let ex = example(&cfg, 3, 4);
        let base = loss_graph(&cfg, &params, &ex, None).unwrap();
        let mut shifted = params.clone();
        shifted.get_mut("out.b").unwrap().mapv_inplace(|v| v + 7.25);
        let moved = loss_graph(&cfg, &shifted, &ex, None).unwrap();
        let (a, b) = (base.graph.scalar(base.ce), moved.graph.scalar(moved.ce));
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn rejects_inconsistent_examples() {
        let cfg = T2UConfig::micro(6, 4);
        let m = T2UModel::new(cfg, 0).unwrap();
        let mut ex = example(&cfg, 3, 5);
        ex.units = UnitSequence::new(vec![0; ex.durations.total() + 1]).unwrap();
        assert!(m.loss(&ex).is_err());
        let mut ex = example(&cfg, 3, 5);
        ex.tokens.ids[0] = 6;
        assert!(m.loss(&ex).is_err());
        let mut ex = example(&cfg, 3, 5);
        ex.units = UnitSequence::new(vec![4; ex.durations.total()]).unwrap();
        assert!(m.loss(&ex).is_err());
        let empty = TokenSequence {
            ids: vec![],
            language: "L1".into(),
        };
        assert!(m.predict_units(&empty).is_err());
    }

    /// Central differences in f64 over every scalar of the micro model.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = T2UConfig::micro(6, 4);
        let params = T2UModel::new(cfg, 11).unwrap().params.cast::<f64>();
        let ex = example(&cfg, 3, 9);
        let lg = loss_graph(&cfg, &params, &ex, None).unwrap();
        let analytic = lg.binding.gradients(&lg.graph.backward(lg.total), &params);
        let loss_at = |p: &ParamSet<f64>| {
            let lg = loss_graph(&cfg, p, &ex, None).unwrap();
            lg.graph.scalar(lg.total)
        };
        let h = 1e-4;
        let mut worst = (0.0f64, String::new());
        let mut checked = 0;
        for (name, tensor) in params.iter() {
            for idx in 0..tensor.len() {
                let (r, c) = (idx / tensor.ncols(), idx % tensor.ncols());
                let mut plus = params.clone();
                plus.get_mut(name).unwrap()[[r, c]] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap()[[r, c]] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                let a = analytic[name][[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                if rel > worst.0 {
                    worst = (rel, format!("{name}[{r},{c}] analytic {a} numeric {numeric}"));
                }
                checked += 1;
            }
        }
        assert_eq!(checked, params.numel());
        assert!(worst.0 < 1e-3, "max relative error {} at {}", worst.0, worst.1);
    }

    #[test]
    fn micro_model_overfits_one_utterance() {
        let cfg = T2UConfig {
            dropout: 0.0,
            ..T2UConfig::micro(6, 4)
        };
        let ex = example(&cfg, 4, 21);
        let m = T2UModel::new(cfg, 2).unwrap();
        let before = m.loss(&ex).unwrap().total;
        let opts = TrainOptions {
            epochs: 200,
            batch_size: 1,
            lr: 1e-2,
            seed: 0,
            clip_norm: None,
            schedule: LrSchedule::Constant,
        };
        let (m, state) = train(m, std::slice::from_ref(&ex), &opts).unwrap();
        assert_eq!(state.step, 200);
        assert!(m.loss(&ex).unwrap().total < before);
        let (units, durations) = m.predict_units(&ex.tokens).unwrap();
        assert_eq!(durations, ex.durations);
        assert_eq!(units, ex.units);
    }

    #[test]
    fn zero_epochs_leave_the_model_alone() {
        let cfg = T2UConfig::micro(6, 4);
        let m = T2UModel::new(cfg, 2).unwrap();
        let opts = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let (after, state) = train(m.clone(), &[example(&cfg, 3, 1)], &opts).unwrap();
        assert_eq!(after, m);
        assert!(state.history.is_empty());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = T2UConfig::micro(6, 4);
        let data: Vec<_> = (0..4).map(|s| example(&cfg, 3, s)).collect();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 2,
            lr: 1e-2,
            seed: 9,
            clip_norm: Some(1.0),
            schedule: LrSchedule::Constant,
        };
        let run = || train(T2UModel::new(cfg, 5).unwrap(), &data, &opts).unwrap();
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(sa.history, sb.history);
        assert_eq!(a, b);
        assert_eq!(sa.history.len(), 3);
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let cfg = T2UConfig::micro(6, 4);
        let mut m = T2UModel::new(cfg, 2).unwrap();
        m.params.get_mut("out.b").unwrap()[[0, 0]] = f32::NAN;
        let err = train(m, &[example(&cfg, 3, 1)], &TrainOptions::default()).unwrap_err();
        assert!(err.to_string().contains("batch 0"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = T2UModel::new(T2UConfig::micro(7, 5), 12).unwrap();
        let ckpt = m.to_checkpoint().unwrap();
        let bytes = ckpt.to_bytes();
        let back = T2UModel::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), bytes);
        let mut wrong = ckpt;
        wrong.kind = "vocoder".into();
        assert!(T2UModel::from_checkpoint(wrong).is_err());
    }

    #[test]
    fn inference_is_repeatable() {
        let cfg = T2UConfig::micro(6, 4);
        let m = T2UModel::new(cfg, 4).unwrap();
        let ex = example(&cfg, 5, 3);
        let a = m.predict_units(&ex.tokens).unwrap();
        assert_eq!(a, m.predict_units(&ex.tokens).unwrap());
        assert_eq!(a.0.len(), a.1.total());
    }

    proptest! {
        #[test]
        fn length_regulate_row_count(d in proptest::collection::vec(1u32..6, 1..12)) {
            let s = Array2::from_shape_fn((d.len(), 2), |(i, j)| (i * 2 + j) as f64);
            let out = length_regulate(&s, &d).unwrap();
            prop_assert_eq!(out.nrows(), d.iter().sum::<u32>() as usize);
            let mut row = 0;
            for (i, &k) in d.iter().enumerate() {
                for _ in 0..k {
                    prop_assert_eq!(out.row(row), s.row(i));
                    row += 1;
                }
            }
        }

        #[test]
        fn predicted_lengths_agree(ids in proptest::collection::vec(0u32..6, 1..8)) {
            let m = T2UModel::new(T2UConfig::micro(6, 4), 1).unwrap();
            let tokens = TokenSequence { ids, language: "L2".into() };
            let (u, d) = m.predict_units(&tokens).unwrap();
            prop_assert_eq!(u.len(), d.total());
            prop_assert_eq!(d.len(), tokens.len());
        }
    }
}
