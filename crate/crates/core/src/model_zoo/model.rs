use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FusionKind, ModelConfig, ModelError};
use crate::diff_engine::{
    grad_check, DiffError, GradCheckOptions, GradCheckReport, Graph, Mode, Tensor, Var, LAYER_NORM_EPS,
};
use crate::feature_store::ClipRecord;
use crate::seed::mix_seed;

/// Input stream. Audio plays the role of `A` in the cross-attention
/// equations and video the role of `B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    fn prefix(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

/// One direction of a cascade stage: queries from one modality, keys and
/// values from the other.
#[derive(Clone, Debug)]
struct CrossBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Option<Linear>,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

#[derive(Clone, Debug)]
struct Cascade {
    audio_query: CrossBlock,
    video_query: CrossBlock,
}

#[derive(Clone, Debug)]
struct Branch {
    input: Linear,
    encoder: Vec<EncoderLayer>,
    late: Option<Linear>,
}

#[derive(Clone, Debug)]
struct Layout {
    audio: Option<Branch>,
    video: Option<Branch>,
    cascades: Vec<Cascade>,
    hidden: Linear,
    output: Linear,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-limit..limit)).collect();
        let w = self.push(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], data).expect("shape"));
        let b = bias.then(|| self.push(format!("{prefix}.b"), Tensor::zeros(&[fan_out])));
        Linear { w, b }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        let gamma = self.push(format!("{prefix}.gamma"), Tensor::filled(&[d], 1.0));
        let beta = self.push(format!("{prefix}.beta"), Tensor::zeros(&[d]));
        Norm { gamma, beta }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> Ffn {
        let up = self.linear(&format!("{prefix}.up"), d, d_ff, true);
        let down = self.linear(&format!("{prefix}.down"), d_ff, d, true);
        Ffn { up, down }
    }

    fn encoder_layer(&mut self, prefix: &str, c: &ModelConfig) -> EncoderLayer {
        let d = c.d_model;
        EncoderLayer {
            q: self.linear(&format!("{prefix}.attn.q"), d, d, c.proj_bias),
            k: self.linear(&format!("{prefix}.attn.k"), d, d, c.proj_bias),
            v: self.linear(&format!("{prefix}.attn.v"), d, d, c.proj_bias),
            o: self.linear(&format!("{prefix}.attn.o"), d, d, c.proj_bias),
            norm1: self.norm(&format!("{prefix}.norm1"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d, c.d_ff),
            norm2: self.norm(&format!("{prefix}.norm2"), d),
        }
    }

    fn cross_block(&mut self, prefix: &str, c: &ModelConfig) -> CrossBlock {
        let d = c.d_model;
        CrossBlock {
            q: self.linear(&format!("{prefix}.q"), d, d, c.proj_bias),
            k: self.linear(&format!("{prefix}.k"), d, d, c.proj_bias),
            v: self.linear(&format!("{prefix}.v"), d, d, c.proj_bias),
            o: (c.n_heads > 1).then(|| self.linear(&format!("{prefix}.o"), d, d, c.proj_bias)),
            norm1: self.norm(&format!("{prefix}.norm1"), d),
            ffn: self.ffn(&format!("{prefix}.ffn"), d, c.d_ff),
            norm2: self.norm(&format!("{prefix}.norm2"), d),
        }
    }

    fn branch(&mut self, m: Modality, c: &ModelConfig) -> Branch {
        let p = m.prefix();
        let input = self.linear(&format!("{p}.input"), c.input_dim, c.d_model, true);
        let encoder = (0..c.n_encoder_layers)
            .map(|l| self.encoder_layer(&format!("{p}.encoder.{l}"), c))
            .collect();
        let late = (c.fusion == FusionKind::LC).then(|| self.linear(&format!("{p}.late"), c.d_model, c.lc_dense, true));
        Branch { input, encoder, late }
    }
}

/// Trainable model: configuration, a flat parameter registry and the
/// structural layout that indexes into it.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
    layout: Layout,
}

/// Dense model inputs for a batch of clips with a shared token layout.
#[derive(Clone, Debug)]
pub struct Batch {
    pub audio: Tensor,
    pub video: Tensor,
    pub audio_tokens: usize,
    pub video_tokens: usize,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<u64>,
}

impl Batch {
    pub fn from_records<'r>(records: impl IntoIterator<Item = &'r ClipRecord>) -> Result<Self, ModelError> {
        let records: Vec<&ClipRecord> = records.into_iter().collect();
        let first = records.first().ok_or_else(|| ModelError::Input("empty batch".into()))?;
        let (ta, tv) = (first.audio_tokens(), first.video_tokens());
        let dim = first.audio.len() / ta.max(1);
        if ta == 0 || tv == 0 {
            return Err(ModelError::Input("clips need at least one token per modality".into()));
        }
        let mut audio = Vec::with_capacity(records.len() * first.audio.len());
        let mut video = Vec::with_capacity(records.len() * first.video.len());
        for r in &records {
            if r.audio.len() != first.audio.len() || r.video.len() != first.video.len() {
                return Err(ModelError::Input(format!("clip {} has a different token layout", r.clip_id)));
            }
            audio.extend(r.audio.iter().map(|&v| v as f64));
            video.extend(r.video.iter().map(|&v| v as f64));
        }
        let n = records.len();
        Ok(Self {
            audio: Tensor::new(vec![n * ta, dim], audio).map_err(ModelError::Diff)?,
            video: Tensor::new(vec![n * tv, first.video.len() / tv], video).map_err(ModelError::Diff)?,
            audio_tokens: ta,
            video_tokens: tv,
            labels: records.iter().map(|r| r.label.index()).collect(),
            clip_ids: records.iter().map(|r| r.clip_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Input variables already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Inputs {
    pub audio: Var,
    pub video: Var,
    pub audio_tokens: usize,
    pub video_tokens: usize,
    pub batch_size: usize,
}

impl Inputs {
    pub fn borrowed<'g>(g: &mut Graph<'g>, batch: &'g Batch) -> Self {
        Self {
            audio: g.constant(&batch.audio),
            video: g.constant(&batch.video),
            audio_tokens: batch.audio_tokens,
            video_tokens: batch.video_tokens,
            batch_size: batch.len(),
        }
    }

    pub fn owned(g: &mut Graph<'_>, batch: &Batch) -> Self {
        Self {
            audio: g.constant_owned(batch.audio.clone()),
            video: g.constant_owned(batch.video.clone()),
            audio_tokens: batch.audio_tokens,
            video_tokens: batch.video_tokens,
            batch_size: batch.len(),
        }
    }
}

/// Dropout bookkeeping for one forward pass: every dropout site draws its
/// mask from a distinct seed derived from the pass seed.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    seed: u64,
    site: u64,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self { mode, seed, site: 0 }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    fn dropout(&mut self, g: &mut Graph<'_>, x: Var, p: f64) -> Result<Var, ModelError> {
        self.site += 1;
        Ok(g.dropout(x, p, self.mode, mix_seed(self.seed, self.site))?)
    }
}

/// Graph nodes produced by [`Model::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct GraphOutput {
    pub logits: Var,
    pub penultimate: Var,
    pub fused: Option<Var>,
}

/// Materialised forward results.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B × n_classes]`, before softmax.
    pub logits: Tensor,
    /// `[B × hidden_classifier]` activation feeding the output layer.
    pub penultimate: Tensor,
    /// Classifier input for the fusion variants.
    pub fused: Option<Tensor>,
}

fn lin(g: &mut Graph<'_>, p: &[Var], x: Var, l: Linear) -> Result<Var, ModelError> {
    Ok(g.linear(x, p[l.w], l.b.map(|b| p[b]))?)
}

fn norm(g: &mut Graph<'_>, p: &[Var], x: Var, n: Norm) -> Result<Var, ModelError> {
    Ok(g.layer_norm(x, p[n.gamma], p[n.beta], LAYER_NORM_EPS)?)
}

fn ffn(g: &mut Graph<'_>, p: &[Var], x: Var, f: Ffn) -> Result<Var, ModelError> {
    let up = f.up.b.expect("ffn has biases");
    let down = f.down.b.expect("ffn has biases");
    Ok(g.ffn(x, p[f.up.w], p[up], p[f.down.w], p[down])?)
}

impl Model {
    /// Allocates and initialises every parameter: Glorot-uniform weights,
    /// zero biases, unit/zero layer-norm affine terms. Deterministic in
    /// `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder { names: Vec::new(), params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(config.seed) };
        let audio = config.fusion.uses_audio().then(|| b.branch(Modality::Audio, &config));
        let video = config.fusion.uses_video().then(|| b.branch(Modality::Video, &config));
        let cascades = (1..=config.fusion.cascade_stages())
            .map(|s| Cascade {
                audio_query: b.cross_block(&format!("cascade.{s}.audio_query"), &config),
                video_query: b.cross_block(&format!("cascade.{s}.video_query"), &config),
            })
            .collect();
        let hidden = b.linear("classifier.hidden", config.head_input_dim(), config.hidden_classifier, true);
        let output = b.linear("classifier.output", config.hidden_classifier, config.n_classes, true);
        let index = b.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names: b.names,
            params: b.params,
            index,
            layout: Layout { audio, video, cascades, hidden, output },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Replaces every parameter; shapes must match the registry.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), ModelError> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Config("parameter set does not match the registry".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Total trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `g` as a trainable leaf, in registry order.
    pub fn bind<'g>(&'g self, g: &mut Graph<'g>) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t)).collect()
    }

    fn branch(&self, m: Modality) -> Result<&Branch, ModelError> {
        let b = match m {
            Modality::Audio => &self.layout.audio,
            Modality::Video => &self.layout.video,
        };
        b.as_ref()
            .ok_or_else(|| ModelError::Input(format!("{} model has no {m:?} branch", self.config.fusion)))
    }

    /// Input projection `input_dim → d_model`.
    pub fn project(&self, g: &mut Graph<'_>, p: &[Var], x: Var, m: Modality) -> Result<Var, ModelError> {
        let cols = g.shape(x).last().copied().unwrap_or(0);
        if cols != self.config.input_dim {
            return Err(ModelError::Input(format!(
                "{m:?} features are {cols}-d, model expects {}",
                self.config.input_dim
            )));
        }
        lin(g, p, x, self.branch(m)?.input)
    }

    /// Intra-modality transformer encoder over `blocks` clips of equal token
    /// count: `LN(Z + SelfAttn(Z))` then `LN(· + FFN(·))` per layer.
    pub fn encode_intra(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        z: Var,
        m: Modality,
        blocks: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        let drop = self.config.dropout_p;
        let mut z = z;
        for layer in &self.branch(m)?.encoder {
            let q = lin(g, p, z, layer.q)?;
            let k = lin(g, p, z, layer.k)?;
            let v = lin(g, p, z, layer.v)?;
            let a = g.attention_blocked(q, k, v, blocks, self.config.n_heads)?;
            let a = lin(g, p, a, layer.o)?;
            let a = ctx.dropout(g, a, drop)?;
            let r = g.add(z, a)?;
            let z1 = norm(g, p, r, layer.norm1)?;
            let f = ffn(g, p, z1, layer.ffn)?;
            let f = ctx.dropout(g, f, drop)?;
            let r = g.add(z1, f)?;
            z = norm(g, p, r, layer.norm2)?;
        }
        Ok(z)
    }

    fn cross(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        block: &CrossBlock,
        zq: Var,
        zkv: Var,
        blocks: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        let drop = self.config.dropout_p;
        let q = lin(g, p, zq, block.q)?;
        let k = lin(g, p, zkv, block.k)?;
        let v = lin(g, p, zkv, block.v)?;
        let mut a = g.attention_blocked(q, k, v, blocks, self.config.n_heads)?;
        if let Some(o) = block.o {
            a = lin(g, p, a, o)?;
        }
        let a = ctx.dropout(g, a, drop)?;
        let r = g.add(zq, a)?;
        let z1 = norm(g, p, r, block.norm1)?;
        let f = ffn(g, p, z1, block.ffn)?;
        let f = ctx.dropout(g, f, drop)?;
        let r = g.add(z1, f)?;
        norm(g, p, r, block.norm2)
    }

    /// One bidirectional cross-attention stage (`stage` is 1-based). Both
    /// directions read the same stage inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn cascade_step(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        z_audio: Var,
        z_video: Var,
        stage: usize,
        blocks: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var), ModelError> {
        let cascade = stage
            .checked_sub(1)
            .and_then(|i| self.layout.cascades.get(i))
            .ok_or_else(|| ModelError::Input(format!("{} model has no cascade stage {stage}", self.config.fusion)))?;
        if self.config.cascade_identity {
            return Ok((z_audio, z_video));
        }
        let a = self.cross(g, p, &cascade.audio_query, z_audio, z_video, blocks, ctx)?;
        let v = self.cross(g, p, &cascade.video_query, z_video, z_audio, blocks, ctx)?;
        Ok((a, v))
    }

    /// Combines pooled per-modality vectors into the classifier input.
    /// Unimodal kinds take the single available vector.
    pub fn fuse(&self, g: &mut Graph<'_>, p: &[Var], audio: Option<Var>, video: Option<Var>) -> Result<Var, ModelError> {
        let both = || audio.zip(video).ok_or_else(|| ModelError::Input("fusion needs both modalities".into()));
        Ok(match self.config.fusion {
            FusionKind::V => video.ok_or_else(|| ModelError::Input("missing video".into()))?,
            FusionKind::A => audio.ok_or_else(|| ModelError::Input("missing audio".into()))?,
            FusionKind::EC | FusionKind::CT | FusionKind::SNIFR => {
                let (a, v) = both()?;
                g.concat_cols(a, v)?
            }
            FusionKind::LC => {
                let (a, v) = both()?;
                let la = self.branch(Modality::Audio)?.late.expect("LC has late layers");
                let lv = self.branch(Modality::Video)?.late.expect("LC has late layers");
                let a = lin(g, p, a, la)?;
                let a = g.relu(a);
                let v = lin(g, p, v, lv)?;
                let v = g.relu(v);
                g.concat_cols(a, v)?
            }
            FusionKind::EA => {
                let (a, v) = both()?;
                let s = g.add(a, v)?;
                g.scale(s, 0.5)
            }
            FusionKind::EP => {
                let (a, v) = both()?;
                g.mul(a, v)?
            }
        })
    }

    /// `penultimate = relu(fused·W_h + b_h)`, `logits = penultimate·W_o + b_o`.
    pub fn classify_head(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        fused: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var), ModelError> {
        let width = g.shape(fused).last().copied().unwrap_or(0);
        if width != self.config.head_input_dim() {
            return Err(ModelError::Input(format!(
                "classifier expects {} features, got {width}",
                self.config.head_input_dim()
            )));
        }
        let h = lin(g, p, fused, self.layout.hidden)?;
        let pen = g.relu(h);
        let dropped = ctx.dropout(g, pen, self.config.dropout_p)?;
        let logits = lin(g, p, dropped, self.layout.output)?;
        Ok((logits, pen))
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        p: &[Var],
        inputs: &Inputs,
        ctx: &mut ForwardCtx,
    ) -> Result<GraphOutput, ModelError> {
        if p.len() != self.params.len() {
            return Err(ModelError::Input(format!("{} parameter vars for {} parameters", p.len(), self.params.len())));
        }
        let n = inputs.batch_size;
        if n == 0 {
            return Err(ModelError::Input("empty batch".into()));
        }
        let kind = self.config.fusion;
        let mut za = None;
        let mut zv = None;
        if kind.uses_audio() {
            let z = self.project(g, p, inputs.audio, Modality::Audio)?;
            za = Some(self.encode_intra(g, p, z, Modality::Audio, n, ctx)?);
        }
        if kind.uses_video() {
            let z = self.project(g, p, inputs.video, Modality::Video)?;
            zv = Some(self.encode_intra(g, p, z, Modality::Video, n, ctx)?);
        }
        for stage in 1..=kind.cascade_stages() {
            let (a, v) = self.cascade_step(g, p, za.expect("audio"), zv.expect("video"), stage, n, ctx)?;
            za = Some(a);
            zv = Some(v);
        }
        let pa = za.map(|z| g.mean_pool(z, inputs.audio_tokens)).transpose()?;
        let pv = zv.map(|z| g.mean_pool(z, inputs.video_tokens)).transpose()?;
        let fused = self.fuse(g, p, pa, pv)?;
        let (logits, penultimate) = self.classify_head(g, p, fused, ctx)?;
        let fused = (!matches!(kind, FusionKind::V | FusionKind::A)).then_some(fused);
        Ok(GraphOutput { logits, penultimate, fused })
    }

    pub fn forward(&self, batch: &Batch, mode: Mode, seed: u64) -> Result<ForwardOutput, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let inputs = Inputs::borrowed(&mut g, batch);
        let out = self.forward_graph(&mut g, &p, &inputs, &mut ForwardCtx::new(mode, seed))?;
        Ok(ForwardOutput {
            logits: g.tensor(out.logits),
            penultimate: g.tensor(out.penultimate),
            fused: out.fused.map(|f| g.tensor(f)),
        })
    }

    pub fn forward_records(&self, records: &[&ClipRecord], mode: Mode, seed: u64) -> Result<ForwardOutput, ModelError> {
        self.forward(&Batch::from_records(records.iter().copied())?, mode, seed)
    }

    /// Eval-mode forward over any number of records, `chunk` clips at a
    /// time, with the per-chunk outputs stacked in record order.
    pub fn predict(&self, records: &[&ClipRecord], chunk: usize) -> Result<ForwardOutput, ModelError> {
        if records.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut logits = Vec::new();
        let mut pen = Vec::new();
        let mut fused: Option<Vec<f64>> = None;
        let mut widths = (0, 0, 0);
        for part in records.chunks(chunk.max(1)) {
            let out = self.forward_records(part, Mode::Eval, 0)?;
            widths = (out.logits.cols(), out.penultimate.cols(), out.fused.as_ref().map_or(0, Tensor::cols));
            logits.extend(out.logits.into_data());
            pen.extend(out.penultimate.into_data());
            if let Some(f) = out.fused {
                fused.get_or_insert_with(Vec::new).extend(f.into_data());
            }
        }
        let n = records.len();
        Ok(ForwardOutput {
            logits: Tensor::new(vec![n, widths.0], logits)?,
            penultimate: Tensor::new(vec![n, widths.1], pen)?,
            fused: fused.map(|f| Tensor::new(vec![n, widths.2], f)).transpose()?,
        })
    }

    /// Cross-entropy on `batch` and its gradient for every parameter, in
    /// registry order.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        mode: Mode,
        seed: u64,
        class_weights: Option<&[f64]>,
    ) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let inputs = Inputs::borrowed(&mut g, batch);
        let out = self.forward_graph(&mut g, &p, &inputs, &mut ForwardCtx::new(mode, seed))?;
        let loss = g.cross_entropy(out.logits, &batch.labels, class_weights)?;
        let value = g.value(loss)[0];
        g.backward(loss)?;
        let grads = p
            .iter()
            .zip(&self.params)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    }

    /// Finite-difference check of the batch loss against every registry
    /// parameter. Dropout masks are fixed by `seed`, so train mode is
    /// checkable too.
    pub fn grad_check(
        &self,
        batch: &Batch,
        mode: Mode,
        seed: u64,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport, ModelError> {
        let report = grad_check(
            |g, p| {
                let inputs = Inputs::owned(g, batch);
                let out = self
                    .forward_graph(g, p, &inputs, &mut ForwardCtx::new(mode, seed))
                    .map_err(|e| match e {
                        ModelError::Diff(d) => d,
                        other => DiffError::InvalidArgument(other.to_string()),
                    })?;
                g.cross_entropy(out.logits, &batch.labels, None)
            },
            &self.params,
            opts,
        )?;
        Ok(report)
    }
}
