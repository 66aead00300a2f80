//! The noise-prediction network: patch embedding, step and condition
//! injection, a stack of VRWKV blocks over the frame/patch token grid, and a
//! linear unembedding back to pixel space. Plus the training step and a
//! small Adam loop.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::block::{block_forward_var, BlockConfig, BlockVars, PatchGrid, VrwkvBlockParams};
use crate::dataset::{Clip, FrameSequence, N_CLASSES};
use crate::diffusion::{forward_diffuse, ConditionEmbedding, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{randn_tensor, uniform_tensor};
use crate::serialize::Checkpoint;
use crate::tensor::Tensor;

/// Structural hyperparameters of the denoiser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub d: usize,
    pub blocks: usize,
    pub patch: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub t_steps: usize,
    pub heads: usize,
    pub n_classes: usize,
    pub shift_px: usize,
    pub gamma: f64,
    pub local_init: bool,
    pub joint_tokens: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            d: 32,
            blocks: 2,
            patch: 4,
            frames: 4,
            height: 16,
            width: 16,
            channels: 1,
            t_steps: 100,
            heads: 1,
            n_classes: N_CLASSES,
            shift_px: 1,
            gamma: 0.25,
            local_init: false,
            joint_tokens: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if self.blocks == 0 || self.frames == 0 || self.channels == 0 || self.t_steps == 0 {
            return Err(Error::config("zero-sized denoiser dimension"));
        }
        if self.n_classes > self.d {
            return Err(Error::config(format!(
                "{} classes exceed embedding width {}",
                self.n_classes, self.d
            )));
        }
        self.block_config().validate(self.d)
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid().tokens()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            grid: self.grid(),
            shift_px: self.shift_px,
            gamma: self.gamma,
            joint_tokens: self.joint_tokens,
            heads: self.heads,
        }
    }

    fn to_tensor(self) -> Tensor {
        Tensor::new(
            vec![14],
            vec![
                self.d as f64,
                self.blocks as f64,
                self.patch as f64,
                self.frames as f64,
                self.height as f64,
                self.width as f64,
                self.channels as f64,
                self.t_steps as f64,
                self.heads as f64,
                self.n_classes as f64,
                self.shift_px as f64,
                self.gamma,
                if self.local_init { 1.0 } else { 0.0 },
                if self.joint_tokens { 1.0 } else { 0.0 },
            ],
        )
        .expect("config tensor")
    }

    fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.len() != 14 {
            return Err(Error::Checkpoint("bad config record".into()));
        }
        let v = t.data();
        Ok(DenoiserConfig {
            d: v[0] as usize,
            blocks: v[1] as usize,
            patch: v[2] as usize,
            frames: v[3] as usize,
            height: v[4] as usize,
            width: v[5] as usize,
            channels: v[6] as usize,
            t_steps: v[7] as usize,
            heads: v[8] as usize,
            n_classes: v[9] as usize,
            shift_px: v[10] as usize,
            gamma: v[11],
            local_init: v[12] != 0.0,
            joint_tokens: v[13] != 0.0,
        })
    }
}

/// All trainable tensors.
#[derive(Clone, Debug)]
pub struct DenoiserParams {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub step_emb: Tensor,
    pub cond_proj: Tensor,
    pub blocks: Vec<VrwkvBlockParams>,
    pub unembed_w: Tensor,
    pub unembed_b: Tensor,
}

impl DenoiserParams {
    /// Random initialization. The unembedding starts at zero so the initial
    /// predictor is exactly the zero function.
    pub fn init(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let pd = cfg.patch_dim();
        let d = cfg.d;
        let se = 1.0 / (pd as f64).sqrt();
        let sd = 1.0 / (d as f64).sqrt();
        Ok(DenoiserParams {
            embed_w: uniform_tensor(rng, vec![pd, d], -se, se),
            embed_b: Tensor::zeros(vec![d]),
            step_emb: uniform_tensor(rng, vec![cfg.t_steps + 1, d], -sd, sd),
            cond_proj: uniform_tensor(rng, vec![d, d], -sd, sd),
            blocks: (0..cfg.blocks)
                .map(|_| VrwkvBlockParams::init(d, rng, cfg.local_init))
                .collect(),
            unembed_w: Tensor::zeros(vec![d, pd]),
            unembed_b: Tensor::zeros(vec![pd]),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed_w".into(), &self.embed_w),
            ("embed_b".into(), &self.embed_b),
            ("step_emb".into(), &self.step_emb),
            ("cond_proj".into(), &self.cond_proj),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named_tensors() {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        out.push(("unembed_w".into(), &self.unembed_w));
        out.push(("unembed_b".into(), &self.unembed_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces every tensor with `f(name, tensor)`, in the stable naming
    /// order. Used by the optimizer.
    pub fn update_tensors(
        &mut self,
        mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>,
    ) -> Result<()> {
        self.embed_w = f("embed_w", &self.embed_w)?;
        self.embed_b = f("embed_b", &self.embed_b)?;
        self.step_emb = f("step_emb", &self.step_emb)?;
        self.cond_proj = f("cond_proj", &self.cond_proj)?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block{i}.");
            b.w_r = f(&format!("{p}w_r"), &b.w_r)?;
            b.w_k = f(&format!("{p}w_k"), &b.w_k)?;
            b.w_v = f(&format!("{p}w_v"), &b.w_v)?;
            b.mu_r = f(&format!("{p}mu_r"), &b.mu_r)?;
            b.mu_k = f(&format!("{p}mu_k"), &b.mu_k)?;
            b.mu_v = f(&format!("{p}mu_v"), &b.mu_v)?;
            b.wkv.w = f(&format!("{p}wkv_w"), &b.wkv.w)?;
            b.wkv.u = f(&format!("{p}wkv_u"), &b.wkv.u)?;
            b.w_rc = f(&format!("{p}w_rc"), &b.w_rc)?;
            b.w_kc = f(&format!("{p}w_kc"), &b.w_kc)?;
            b.mu_rc = f(&format!("{p}mu_rc"), &b.mu_rc)?;
            b.mu_kc = f(&format!("{p}mu_kc"), &b.mu_kc)?;
            b.w_c = f(&format!("{p}w_c"), &b.w_c)?;
        }
        self.unembed_w = f("unembed_w", &self.unembed_w)?;
        self.unembed_b = f("unembed_b", &self.unembed_b)?;
        Ok(())
    }
}

struct DenoiserVars {
    embed_w: Var,
    embed_b: Var,
    step_emb: Var,
    cond_proj: Var,
    blocks: Vec<BlockVars>,
    unembed_w: Var,
    unembed_b: Var,
}

impl DenoiserVars {
    fn named_vars(&self) -> Vec<(String, &Var)> {
        let mut out: Vec<(String, &Var)> = vec![
            ("embed_w".into(), &self.embed_w),
            ("embed_b".into(), &self.embed_b),
            ("step_emb".into(), &self.step_emb),
            ("cond_proj".into(), &self.cond_proj),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, v) in b.named_vars() {
                out.push((format!("block{i}.{n}"), v));
            }
        }
        out.push(("unembed_w".into(), &self.unembed_w));
        out.push(("unembed_b".into(), &self.unembed_b));
        out
    }
}

/// Config plus parameters; the unit that trains, samples and checkpoints.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: DenoiserParams,
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let params = DenoiserParams::init(&config, rng)?;
        Ok(Denoiser { config, params })
    }

    /// Rearranges `[f, c, h, w]` pixels into `[f * tokens, patch_dim]` rows,
    /// tokens row-major over the patch grid.
    pub fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let expect = [cfg.frames, cfg.channels, cfg.height, cfg.width];
        if x.shape() != expect {
            return Err(Error::dim(format!(
                "input shape {:?}, expected {expect:?}",
                x.shape()
            )));
        }
        let (p, gw) = (cfg.patch, cfg.grid().w);
        let n = cfg.tokens_per_frame();
        let pd = cfg.patch_dim();
        let xd = x.data();
        let (c_n, h, w) = (cfg.channels, cfg.height, cfg.width);
        let mut out = vec![0.0; cfg.frames * n * pd];
        for f in 0..cfg.frames {
            for tok in 0..n {
                let (gy, gx) = (tok / gw, tok % gw);
                let row = &mut out[(f * n + tok) * pd..(f * n + tok + 1) * pd];
                for c in 0..c_n {
                    for py in 0..p {
                        for px in 0..p {
                            let (y, xx) = (gy * p + py, gx * p + px);
                            row[(c * p + py) * p + px] = xd[((f * c_n + c) * h + y) * w + xx];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec_unchecked(vec![cfg.frames * n, pd], out))
    }

    /// Inverse of `patchify`.
    pub fn unpatchify(&self, tokens: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let n = cfg.tokens_per_frame();
        let pd = cfg.patch_dim();
        if tokens.shape() != [cfg.frames * n, pd] {
            return Err(Error::dim(format!(
                "token shape {:?}, expected [{}, {pd}]",
                tokens.shape(),
                cfg.frames * n
            )));
        }
        let (p, gw) = (cfg.patch, cfg.grid().w);
        let (c_n, h, w) = (cfg.channels, cfg.height, cfg.width);
        let td = tokens.data();
        let mut out = vec![0.0; cfg.frames * c_n * h * w];
        for f in 0..cfg.frames {
            for tok in 0..n {
                let (gy, gx) = (tok / gw, tok % gw);
                let row = &td[(f * n + tok) * pd..(f * n + tok + 1) * pd];
                for c in 0..c_n {
                    for py in 0..p {
                        for px in 0..p {
                            let (y, xx) = (gy * p + py, gx * p + px);
                            out[((f * c_n + c) * h + y) * w + xx] = row[(c * p + py) * p + px];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec_unchecked(
            vec![cfg.frames, c_n, h, w],
            out,
        ))
    }

    fn vars(&self, tape: &Tape) -> DenoiserVars {
        DenoiserVars {
            embed_w: tape.leaf(self.params.embed_w.clone()),
            embed_b: tape.leaf(self.params.embed_b.clone()),
            step_emb: tape.leaf(self.params.step_emb.clone()),
            cond_proj: tape.leaf(self.params.cond_proj.clone()),
            blocks: self.params.blocks.iter().map(|b| b.vars(tape)).collect(),
            unembed_w: tape.leaf(self.params.unembed_w.clone()),
            unembed_b: tape.leaf(self.params.unembed_b.clone()),
        }
    }

    /// Forward pass on a tape: token embedding, step and condition rows,
    /// block stack, unembedding. Input and output are token grids.
    fn forward_tokens_var(
        &self,
        tape: &Tape,
        vars: &DenoiserVars,
        x_tokens: Tensor,
        t: usize,
        cond: &ConditionEmbedding,
    ) -> Result<Var> {
        let cfg = &self.config;
        if t == 0 || t > cfg.t_steps {
            return Err(Error::contract(format!(
                "step {t} outside 1..={}",
                cfg.t_steps
            )));
        }
        if cond.dim() != cfg.d {
            return Err(Error::dim(format!(
                "condition width {} != model width {}",
                cond.dim(),
                cfg.d
            )));
        }
        let x = tape.leaf(x_tokens);
        let mut h = x.matmul(&vars.embed_w)?.add_row(&vars.embed_b)?;
        let step_row = vars.step_emb.slice_rows(t, 1)?.reshape(vec![cfg.d])?;
        h = h.add_row(&step_row)?;
        let cond_leaf = tape.leaf(cond.embedding.reshape(vec![1, cfg.d])?);
        let cond_row = cond_leaf.matmul(&vars.cond_proj)?.reshape(vec![cfg.d])?;
        h = h.add_row(&cond_row)?;
        let bcfg = cfg.block_config();
        for bv in &vars.blocks {
            h = block_forward_var(&h, cfg.frames, bv, &bcfg)?;
        }
        h.matmul(&vars.unembed_w)?.add_row(&vars.unembed_b)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("config", self.config.to_tensor())?;
        for (name, t) in self.params.named_tensors() {
            ckpt.insert(&name, t.clone())?;
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = DenoiserConfig::from_tensor(ckpt.require("config")?)?;
        config.validate()?;
        let mut rng = crate::rng::stream(0, 0);
        let mut model = Denoiser::init(config, &mut rng)?;
        model
            .params
            .update_tensors(|name, current| {
                let loaded = ckpt.require(name)?;
                if loaded.shape() != current.shape() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        current.shape()
                    )));
                }
                Ok(loaded.clone())
            })?;
        Ok(model)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Tensor> {
        let tokens = self.patchify(x_t)?;
        let tape = Tape::new();
        let vars = self.vars(&tape);
        let out = self.forward_tokens_var(&tape, &vars, tokens, t, cond)?;
        self.unpatchify(&out.value())
    }

    fn condition_dim(&self) -> usize {
        self.config.d
    }
}

/// Loss value and named parameter gradients from one batched step.
pub struct TrainingStepOutput {
    pub loss: f64,
    pub grads: Vec<(String, Tensor)>,
}

/// Samples a timestep and noise per clip, forms the noise-prediction squared
/// error averaged over the batch, and returns gradients for every parameter.
/// With probability `p_uncond` a clip's condition is replaced by the null
/// embedding so guidance has an unconditional branch to lean on.
pub fn training_step(
    model: &Denoiser,
    batch: &[(&FrameSequence, ConditionEmbedding)],
    schedule: &NoiseSchedule,
    p_uncond: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingStepOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    if schedule.steps() != model.config.t_steps {
        return Err(Error::config(format!(
            "schedule has {} steps, model expects {}",
            schedule.steps(),
            model.config.t_steps
        )));
    }
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let mut total: Option<Var> = None;
    for (fs, cond) in batch {
        let t = rng.random_range(1..=schedule.steps());
        let eps = randn_tensor(rng, fs.tensor().shape().to_vec());
        let use_null = rng.random::<f64>() < p_uncond;
        let x_t = forward_diffuse(fs.tensor(), t, &eps, schedule)?;
        let cond_used = if use_null {
            ConditionEmbedding::null(model.config.d)
        } else {
            cond.clone()
        };
        let pred = model.forward_tokens_var(&tape, &vars, model.patchify(&x_t)?, t, &cond_used)?;
        let target = tape.leaf(model.patchify(&eps)?);
        let diff = pred.sub(&target)?;
        let clip_loss = diff.mul(&diff)?.mean();
        total = Some(match total {
            None => clip_loss,
            Some(acc) => acc.add(&clip_loss)?,
        });
    }
    let loss_var = total.unwrap().scale(1.0 / batch.len() as f64);
    let loss = loss_var.value().data()[0];
    let grads: Gradients = loss_var.backward()?;
    let out = vars
        .named_vars()
        .into_iter()
        .map(|(name, v)| (name, grads.get(v)))
        .collect();
    Ok(TrainingStepOutput { loss, grads: out })
}

/// Training hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            batch: 8,
            lr: 2e-3,
            p_uncond: 0.1,
            seed: 42,
        }
    }
}

/// One training-log row; wall time is the only non-deterministic column.
#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam loop over the synthetic dataset. Interpolation factors are clamped
/// back into [0, 1] after each update since the mixing blend requires it.
pub fn run_training(
    model: &mut Denoiser,
    dataset: &[Clip],
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
) -> Result<Vec<TrainLogRow>> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if opts.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = crate::rng::stream(opts.seed, crate::rng::stream_ids::TRAIN);
    let mut m_state: HashMap<String, Vec<f64>> = HashMap::new();
    let mut v_state: HashMap<String, Vec<f64>> = HashMap::new();
    let mut log = Vec::with_capacity(opts.steps);

    for step in 1..=opts.steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            let idx = rng.random_range(0..dataset.len());
            let clip = &dataset[idx];
            let cond =
                ConditionEmbedding::for_class(clip.class_id, model.config.n_classes, model.config.d)?;
            batch.push((&clip.frames, cond));
        }
        let outcome = training_step(model, &batch, schedule, opts.p_uncond, &mut rng)?;
        let grad_map: HashMap<&str, &Tensor> = outcome
            .grads
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();

        let bias1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(step as i32);
        model.params.update_tensors(|name, tensor| {
            let grad = grad_map
                .get(name)
                .ok_or_else(|| Error::contract(format!("missing gradient for {name}")))?;
            let m = m_state
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; tensor.len()]);
            let v = v_state
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; tensor.len()]);
            let clamp_unit = name.contains("mu_");
            let mut data = tensor.data().to_vec();
            for i in 0..data.len() {
                let g = grad.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= opts.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                if clamp_unit {
                    data[i] = data[i].clamp(0.0, 1.0);
                }
            }
            Tensor::new(tensor.shape().to_vec(), data)
        })?;

        log.push(TrainLogRow {
            step,
            loss: outcome.loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(log)
}

/// Mean loss over the first or last `window` log rows.
pub fn window_mean_loss(log: &[TrainLogRow], window: usize, from_end: bool) -> f64 {
    let w = window.min(log.len()).max(1);
    let slice = if from_end {
        &log[log.len() - w..]
    } else {
        &log[..w]
    };
    slice.iter().map(|r| r.loss).sum::<f64>() / w as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn micro_config() -> DenoiserConfig {
        DenoiserConfig {
            d: 8,
            blocks: 1,
            patch: 4,
            frames: 2,
            height: 8,
            width: 8,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn patchify_roundtrips() {
        let cfg = micro_config();
        let model = Denoiser::init(cfg, &mut rng::stream(1, 2)).unwrap();
        let x = rng::uniform_tensor(&mut rng::stream(2, 3), vec![2, 1, 8, 8], -1.0, 1.0);
        let tokens = model.patchify(&x).unwrap();
        assert_eq!(tokens.shape(), &[2 * 4, 16]);
        let back = model.unpatchify(&tokens).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn initial_predictor_is_zero() {
        // Zero-initialized unembedding makes the initial model the zero
        // predictor exactly.
        let model = Denoiser::init(micro_config(), &mut rng::stream(3, 2)).unwrap();
        let x = rng::uniform_tensor(&mut rng::stream(4, 3), vec![2, 1, 8, 8], -1.0, 1.0);
        let cond = ConditionEmbedding::null(8);
        let out = model.predict_noise(&x, 5, &cond).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_loss_is_noise_variance() {
        // With a zero predictor the loss is mean(eps^2), close to 1.
        let model = Denoiser::init(micro_config(), &mut rng::stream(5, 2)).unwrap();
        let schedule = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let clips =
            crate::dataset::make_synthetic_dataset(3, 2, 8, 8, &mut rng::stream(6, 1)).unwrap();
        let batch: Vec<(&FrameSequence, ConditionEmbedding)> = clips
            .iter()
            .map(|c| {
                (
                    &c.frames,
                    ConditionEmbedding::for_class(c.class_id, 3, 8).unwrap(),
                )
            })
            .collect();
        let mut r = rng::stream(7, 4);
        let mut losses = Vec::new();
        for _ in 0..20 {
            let out = training_step(&model, &batch, &schedule, 0.1, &mut r).unwrap();
            losses.push(out.loss);
        }
        let mean: f64 = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((mean - 1.0).abs() < 0.15, "mean initial loss {mean}");
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        // The loss definition: mean squared difference to the drawn noise.
        let eps = rng::randn_tensor(&mut rng::stream(8, 5), vec![2, 1, 8, 8]);
        let zero = Tensor::zeros(vec![2, 1, 8, 8]);
        let mse = |a: &Tensor, b: &Tensor| {
            let d = a.sub(b).unwrap();
            d.mul(&d).unwrap().mean()
        };
        assert_eq!(mse(&eps, &eps), 0.0);
        let zero_loss = mse(&zero, &eps);
        assert!((zero_loss - 1.0).abs() < 0.2);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_model() {
        let model = Denoiser::init(micro_config(), &mut rng::stream(9, 2)).unwrap();
        let ckpt = model.to_checkpoint().unwrap();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Denoiser::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        for ((n1, t1), (_, t2)) in model
            .params
            .named_tensors()
            .iter()
            .zip(back.params.named_tensors())
        {
            assert_eq!(*t1, t2, "tensor {n1} differs");
        }
    }

    #[test]
    fn training_reduces_loss_on_micro_model() {
        let mut model = Denoiser::init(micro_config(), &mut rng::stream(10, 2)).unwrap();
        let schedule = NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap();
        let clips =
            crate::dataset::make_synthetic_dataset(6, 2, 8, 8, &mut rng::stream(11, 1)).unwrap();
        let opts = TrainOptions {
            steps: 60,
            batch: 4,
            lr: 3e-3,
            p_uncond: 0.1,
            seed: 12,
        };
        let log = run_training(&mut model, &clips, &schedule, &opts).unwrap();
        let head = window_mean_loss(&log, 10, false);
        let tail = window_mean_loss(&log, 10, true);
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }
}
