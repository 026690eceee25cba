//! The end-to-end forecaster: per-window normalization, patch embedding,
//! a stack of grid attention layers, a shared flatten head and
//! denormalization.

mod checkpoint;
mod export;

pub use checkpoint::{Checkpoint, RunInfo, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use export::{attention_file_name, write_attention_csvs};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    apply_horizontal, apply_vertical, head_average, AttentionMap, AttentionParams, Direction, LayerCtx, LayerVars, NormKind,
};
use crate::embed::{embed_patches, prepare_batch, PatchConfig};
use crate::error::{Error, Result};
use crate::tensor::{BnState, Graph, Tensor, Var};

/// Order in which horizontal and vertical layers are stacked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequencingMode {
    /// Vertical layers first, then horizontal.
    ChannelFirst,
    /// Horizontal layers first, then vertical.
    TimeFirst,
    /// Horizontal at even indices, vertical at odd indices.
    #[default]
    Alternate,
}

impl SequencingMode {
    pub const ALL: [SequencingMode; 3] = [Self::ChannelFirst, Self::TimeFirst, Self::Alternate];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ChannelFirst => "channel_first",
            Self::TimeFirst => "time_first",
            Self::Alternate => "alternate",
        }
    }
}

impl std::fmt::Display for SequencingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SequencingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("model.mode", format!("unknown sequencing mode `{s}` (channel_first, time_first, alternate)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub mode: SequencingMode,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 336,
            horizon: 96,
            variates: 7,
            patch_len: 16,
            stride: 8,
            d_model: 64,
            heads: 8,
            layers: 3,
            d_ff: 128,
            dropout: 0.2,
            mode: SequencingMode::Alternate,
            norm: NormKind::Batch,
            seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.lookback", self.lookback),
            ("model.horizon", self.horizon),
            ("model.variates", self.variates),
            ("model.d_model", self.d_model),
            ("model.heads", self.heads),
            ("model.layers", self.layers),
            ("model.d_ff", self.d_ff),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        PatchConfig::new(self.patch_len, self.stride)?;
        if self.lookback < self.patch_len {
            return Err(Error::config(
                "model.lookback",
                format!("lookback {} is shorter than patch_len {}", self.lookback, self.patch_len),
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide d_model {}", self.heads, self.d_model),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            patch_len: self.patch_len,
            stride: self.stride,
        }
    }

    /// Patch count `M` for this lookback.
    pub fn patches(&self) -> Result<usize> {
        self.patch().patch_count(self.lookback)
    }
}

/// Layer directions in application order. Odd depths give the first block
/// of channel-first and time-first stacks the extra layer.
pub fn sequence_layers(mode: SequencingMode, layers: usize) -> Vec<Direction> {
    let first = layers.div_ceil(2);
    (0..layers)
        .map(|i| match mode {
            SequencingMode::Alternate if i % 2 == 0 => Direction::Horizontal,
            SequencingMode::Alternate => Direction::Vertical,
            SequencingMode::ChannelFirst if i < first => Direction::Vertical,
            SequencingMode::ChannelFirst => Direction::Horizontal,
            SequencingMode::TimeFirst if i < first => Direction::Horizontal,
            SequencingMode::TimeFirst => Direction::Vertical,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub direction: Direction,
    pub params: AttentionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTst {
    config: ModelConfig,
    /// `[P × D]`, no bias
    pub w_p: Tensor,
    /// `[M × D]`
    pub w_pos: Tensor,
    pub blocks: Vec<EncoderBlock>,
    /// `[M·D × F]`, shared by every variate
    pub head_w: Tensor,
    /// `[F]`
    pub head_b: Tensor,
}

/// Graph handles for all trainable tensors, in [`GridTst::tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub w_p: Var,
    pub w_pos: Var,
    pub blocks: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.w_p, self.w_pos];
        for b in &self.blocks {
            out.extend(b.all());
        }
        out.extend([self.head_w, self.head_b]);
        out
    }

    /// Rebuilds the handle set from a flat list in [`GridTst::tensors`] order.
    pub fn from_flat(vars: &[Var], layers: usize) -> Result<Self> {
        if vars.len() != 4 + 16 * layers {
            return Err(Error::invalid(
                "ParamVars::from_flat",
                format!("{} handles for {layers} layers", vars.len()),
            ));
        }
        let blocks = (0..layers)
            .map(|l| {
                let v = &vars[2 + 16 * l..2 + 16 * (l + 1)];
                LayerVars {
                    w_q: v[0],
                    b_q: v[1],
                    w_k: v[2],
                    b_k: v[3],
                    w_v: v[4],
                    b_v: v[5],
                    w_o: v[6],
                    b_o: v[7],
                    ff_w1: v[8],
                    ff_b1: v[9],
                    ff_w2: v[10],
                    ff_b2: v[11],
                    norm1_gamma: v[12],
                    norm1_beta: v[13],
                    norm2_gamma: v[14],
                    norm2_beta: v[15],
                }
            })
            .collect();
        Ok(Self {
            w_p: vars[0],
            w_pos: vars[1],
            blocks,
            head_w: vars[vars.len() - 2],
            head_b: vars[vars.len() - 1],
        })
    }
}

/// Attention weights recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct CapturedAttention {
    pub layer: usize,
    pub direction: Direction,
    /// `[S × H × L × L]`
    pub weights: Var,
    /// Sequences per window: `N` for horizontal layers, `M` for vertical.
    pub per_window: usize,
}

/// Score-matrix size of one layer in one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: usize,
    pub direction: Direction,
    /// Head-averaged score entries for the whole batch, `S·L²`.
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B × F × N]` in the input's scale.
    pub prediction: Var,
    pub scores: Vec<LayerScores>,
    /// Filled only when capture was requested in inference mode.
    pub attention: Vec<CapturedAttention>,
}

impl ForwardOutput {
    /// Total vertical score entries for the batch.
    pub fn vertical_entries(&self) -> usize {
        self.scores
            .iter()
            .filter(|s| s.direction == Direction::Vertical)
            .map(|s| s.entries)
            .sum()
    }
}

impl GridTst {
    /// Builds a model with weights drawn from a generator seeded by
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = config.patches()?;
        let (p, d, f) = (config.patch_len, config.d_model, config.horizon);
        let w_p = Tensor::xavier_uniform(&[p, d], p, d, rng);
        let w_pos = Tensor::xavier_uniform(&[m, d], m, d, rng);
        let blocks = sequence_layers(config.mode, config.layers)
            .into_iter()
            .map(|direction| {
                Ok(EncoderBlock {
                    direction,
                    params: AttentionParams::init(d, config.heads, config.d_ff, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head_w = Tensor::xavier_uniform(&[m * d, f], m * d, f, rng);
        let head_b = Tensor::zeros(&[f]);
        Ok(Self {
            config,
            w_p,
            w_pos,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Patch count `M`.
    pub fn patches(&self) -> usize {
        self.w_pos.shape()[0]
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.blocks.iter().map(|b| b.direction).collect()
    }

    /// Trainable tensors with stable dotted names.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed.w_p".to_string(), &self.w_p), ("embed.w_pos".to_string(), &self.w_pos)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.params.tensors().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("embed.w_p".to_string(), &mut self.w_p),
            ("embed.w_pos".to_string(), &mut self.w_pos),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.params.tensors_mut().into_iter().map(|(n, t)| (format!("layers.{l}.{n}"), t)));
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let w_p = g.leaf(self.w_p.clone(), trainable);
        let w_pos = g.leaf(self.w_pos.clone(), trainable);
        let blocks = self.blocks.iter().map(|b| b.params.register(g, trainable)).collect();
        let head_w = g.leaf(self.head_w.clone(), trainable);
        let head_b = g.leaf(self.head_b.clone(), trainable);
        ParamVars {
            w_p,
            w_pos,
            blocks,
            head_w,
            head_b,
        }
    }

    fn bn_states(&self) -> Vec<(BnState, BnState)> {
        self.blocks
            .iter()
            .map(|b| (b.params.bn1.clone(), b.params.bn2.clone()))
            .collect()
    }

    /// Records a forward pass of `x: [B × T × N]` on `g`. Training mode
    /// updates BatchNorm running statistics and applies dropout.
    pub fn forward_on<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        vars: &ParamVars,
        x: &Tensor,
        ctx: &mut LayerCtx<'_, R>,
        capture: bool,
    ) -> Result<ForwardOutput> {
        let mut bn = self.bn_states();
        let out = self.run(g, vars, x, &mut bn, ctx, capture)?;
        if ctx.training {
            for (b, (s1, s2)) in self.blocks.iter_mut().zip(bn) {
                b.params.bn1 = s1;
                b.params.bn2 = s2;
            }
        }
        Ok(out)
    }

    /// Inference-mode forward pass that leaves the model untouched.
    pub fn forward_frozen(&self, g: &mut Graph, vars: &ParamVars, x: &Tensor, capture: bool) -> Result<ForwardOutput> {
        let mut bn = self.bn_states();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut ctx = LayerCtx {
            training: false,
            dropout: 0.0,
            norm: self.config.norm,
            rng: &mut rng,
        };
        self.run(g, vars, x, &mut bn, &mut ctx, capture)
    }

    /// Inference-mode prediction `[B × F × N]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = self.forward_frozen(&mut g, &vars, x, false)?;
        Ok(g.value(out.prediction).clone())
    }

    /// Inference-mode prediction together with head-averaged attention maps.
    pub fn predict_with_attention(&self, x: &Tensor) -> Result<(Tensor, Vec<AttentionMap>)> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = self.forward_frozen(&mut g, &vars, x, true)?;
        let mut maps = Vec::new();
        for c in &out.attention {
            maps.extend(head_average(g.value(c.weights), c.layer, c.direction, c.per_window)?);
        }
        Ok((g.value(out.prediction).clone(), maps))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        x: &Tensor,
        bn: &mut [(BnState, BnState)],
        ctx: &mut LayerCtx<'_, R>,
        capture: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if x.rank() != 3 || x.shape()[1] != cfg.lookback {
            return Err(Error::shape("forward", x.shape(), &[0, cfg.lookback, 0]));
        }
        if !x.all_finite() {
            return Err(Error::Numeric {
                op: "forward",
                msg: "input window contains NaN or infinity".into(),
            });
        }
        if capture && ctx.training {
            return Err(Error::invalid("forward", "attention capture is only available in inference mode"));
        }
        let (b, n) = (x.shape()[0], x.shape()[2]);
        let (m, d, f) = (self.patches(), cfg.d_model, cfg.horizon);

        let batch = prepare_batch(x, cfg.patch())?;
        let patches = g.constant(batch.patches);
        let tokens = embed_patches(g, patches, vars.w_p, vars.w_pos)?;
        let mut grid = g.permute(tokens, &[0, 2, 1, 3])?;

        let mut scores = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::new();
        for (l, ((block, lv), (s1, s2))) in self.blocks.iter().zip(&vars.blocks).zip(bn.iter_mut()).enumerate() {
            let heads = block.params.heads;
            let (next, weights) = match block.direction {
                Direction::Horizontal => apply_horizontal(g, grid, lv, heads, (s1, s2), ctx)?,
                Direction::Vertical => apply_vertical(g, grid, lv, heads, (s1, s2), ctx)?,
            };
            grid = next;
            let ws = g.shape(weights);
            scores.push(LayerScores {
                layer: l,
                direction: block.direction,
                entries: ws[0] * ws[2] * ws[3],
            });
            if capture {
                attention.push(CapturedAttention {
                    layer: l,
                    direction: block.direction,
                    weights,
                    per_window: match block.direction {
                        Direction::Horizontal => n,
                        Direction::Vertical => m,
                    },
                });
            }
        }

        let seqs = g.permute(grid, &[0, 2, 1, 3])?;
        let flat = g.reshape(seqs, &[b, n, m * d])?;
        let proj = g.matmul(flat, vars.head_w)?;
        let proj = g.add(proj, vars.head_b)?;
        let normed = g.permute(proj, &[0, 2, 1])?;

        let mut scale = Vec::with_capacity(b * f * n);
        let mut shift = Vec::with_capacity(b * f * n);
        for st in &batch.stats {
            for _ in 0..f {
                scale.extend_from_slice(&st.std);
                shift.extend_from_slice(&st.mean);
            }
        }
        let scale = g.constant(Tensor::new(vec![b, f, n], scale)?);
        let shift = g.constant(Tensor::new(vec![b, f, n], shift)?);
        let scaled = g.mul(normed, scale)?;
        let prediction = g.add(scaled, shift)?;
        Ok(ForwardOutput {
            prediction,
            scores,
            attention,
        })
    }
}
