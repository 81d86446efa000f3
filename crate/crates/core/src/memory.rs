//! Memory-bank transformer: a stack of bi-directional attention blocks that
//! couples learned prototypes with the difference-token map.
//!
//! Each block runs pool → augment → P2M → FFN → M2P → FFN and emits a
//! patch-grid semantic map from the max-pooled tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::config::{AblationFlags, ModelConfig};
use crate::encoder::TokenMap;
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Initial prototypes `M_0 ~ N(0, std²)`, deterministic in `seed`.
pub fn init_memory<T: Scalar>(memory_len: usize, channels: usize, std: f64, seed: u64) -> Result<Tensor<T>> {
    if memory_len < 1 || channels < 1 {
        return Err(Error::InvalidValue(format!("memory bank {memory_len}x{channels} must be non-empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Tensor::from_fn(&[memory_len, channels], |_| {
        T::from_f64(rng.sample::<f64, _>(StandardNormal) * std)
    }))
}

/// Per-patch, per-channel max over the token grid: `[B, gh·gw, C]`.
pub fn pool_representative<T: Scalar>(
    g: &mut Graph<T>,
    p: &TokenMap,
    grid_h: usize,
    grid_w: usize,
) -> Result<Var> {
    if grid_h == 0 || grid_w == 0 || p.grid_h % grid_h != 0 || p.grid_w % grid_w != 0 {
        return Err(Error::Divisibility(format!(
            "token grid {}x{} does not divide into a {grid_h}x{grid_w} patch grid",
            p.grid_h, p.grid_w
        )));
    }
    let (kh, kw) = (p.grid_h / grid_h, p.grid_w / grid_w);
    let x = p.to_spatial(g)?;
    let pooled = g.max_pool2d_rect(x, (kh, kw), (kh, kw), 0)?;
    g.to_tokens(pooled)
}

/// Output side for pooling ratio `r`: `ceil(side / r)`.
pub fn pyramid_size(side: usize, ratio: usize) -> usize {
    side.div_ceil(ratio)
}

/// Adaptive average pooling of the token grid to `ceil(gh/r) × ceil(gw/r)` per
/// ratio. Output cell `i` averages input rows `floor(i·n/m) .. ceil((i+1)·n/m)`.
pub fn pool_pyramid<T: Scalar>(g: &mut Graph<T>, p: &TokenMap, ratios: &[usize]) -> Result<Vec<Var>> {
    let x = p.to_spatial(g)?;
    ratios
        .iter()
        .map(|&r| {
            if r == 0 {
                return Err(Error::InvalidValue("pooling ratio must be positive".into()));
            }
            let pooled = g.adaptive_avg_pool2d(x, pyramid_size(p.grid_h, r), pyramid_size(p.grid_w, r))?;
            g.to_tokens(pooled)
        })
        .collect()
}

/// Number of rows in the augmented memory.
pub fn augmented_len(memory_len: usize, grid: (usize, usize), token_grid: (usize, usize), ratios: &[usize], flags: &AblationFlags) -> usize {
    let mut n = memory_len;
    if !flags.no_mp {
        n += grid.0 * grid.1;
    }
    if !flags.no_ap {
        n += ratios.iter().map(|&r| pyramid_size(token_grid.0, r) * pyramid_size(token_grid.1, r)).sum::<usize>();
    }
    n
}

/// Scaled dot-product attention with a residual output projection:
/// `x + softmax(Q Kᵀ / √d) V W_o`, `Q = x W_q`, `K = c W_k`, `V = c W_v`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub norm_q: Option<LayerNorm>,
    pub norm_kv: Option<LayerNorm>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// `[B·heads, N_q, N_k]`, rows on the probability simplex.
    pub weights: Var,
}

impl Attention {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize, heads: usize, pre_norm: bool) -> Self {
        Self {
            norm_q: pre_norm.then(|| LayerNorm::new(&mut b.sub("norm_q"), channels)),
            norm_kv: pre_norm.then(|| LayerNorm::new(&mut b.sub("norm_kv"), channels)),
            wq: Linear::new(&mut b.sub("wq"), channels, channels, false),
            wk: Linear::new(&mut b.sub("wk"), channels, channels, false),
            wv: Linear::new(&mut b.sub("wv"), channels, channels, false),
            wo: Linear::new(&mut b.sub("wo"), channels, channels, false),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        context: Var,
    ) -> Result<AttentionOutput> {
        let (xs, cs) = (g.shape(x).to_vec(), g.shape(context).to_vec());
        if xs.len() != 3 || cs.len() != 3 || xs[0] != cs[0] || xs[2] != cs[2] {
            return Err(Error::Shape(format!("attention queries {xs:?} vs context {cs:?}")));
        }
        let q_in = match &self.norm_q {
            Some(n) => n.forward(g, s, x)?,
            None => x,
        };
        let kv_in = match &self.norm_kv {
            Some(n) => n.forward(g, s, context)?,
            None => context,
        };
        let q = self.wq.forward(g, s, q_in)?;
        let k = self.wk.forward(g, s, kv_in)?;
        let v = self.wv.forward(g, s, kv_in)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let head_dim = xs[2] / self.heads;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::from_f64(1.0 / (head_dim as f64).sqrt()));
        let weights = g.softmax(scores)?;
        let o = g.bmm(weights, v, false)?;
        let o = g.merge_heads(o, self.heads)?;
        let o = self.wo.forward(g, s, o)?;
        let out = g.add(x, o)?;
        Ok(AttentionOutput { out, weights })
    }

    pub fn output_projection(&self) -> ParamId {
        self.wo.weight
    }
}

/// `x + W_2 φ(W_1 LN(x) + b_1) + b_2` with a tanh-GELU `φ`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: Option<LayerNorm>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize, expansion: usize, pre_norm: bool) -> Self {
        Self {
            norm: pre_norm.then(|| LayerNorm::new(&mut b.sub("norm"), channels)),
            fc1: Linear::new(&mut b.sub("fc1"), channels, expansion * channels, true),
            fc2: Linear::new(&mut b.sub("fc2"), expansion * channels, channels, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = match &self.norm {
            Some(n) => n.forward(g, s, x)?,
            None => x,
        };
        let h = self.fc1.forward(g, s, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, s, h)?;
        g.add(x, h)
    }

    /// Second-layer weight and bias.
    pub fn output_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.fc2.weight];
        ids.extend(self.fc2.bias);
        ids
    }
}

/// One bi-directional attention block.
#[derive(Clone, Debug)]
pub struct Bab {
    pub proj_max: Linear,
    pub proj_pyramid: Vec<Linear>,
    pub p2m: Attention,
    pub ffn_m: FeedForward,
    pub m2p: Attention,
    pub ffn_p: FeedForward,
    pub aux_head: Linear,
    ratios: Vec<usize>,
    flags: AblationFlags,
}

pub struct BabOutput {
    pub tokens: TokenMap,
    pub memory: Var,
    /// `Q_s` as `[B, 1, gh, gw]` probabilities.
    pub aux: Var,
    pub p2m_weights: Var,
    pub m2p_weights: Var,
}

impl Bab {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig, flags: &AblationFlags) -> Self {
        let c = cfg.channels;
        Self {
            proj_max: Linear::new(&mut b.sub("proj_max"), c, c, true),
            proj_pyramid: (0..cfg.pooling_ratios.len())
                .map(|j| Linear::new(&mut b.sub(&format!("proj_pyramid{j}")), c, c, true))
                .collect(),
            p2m: Attention::new(&mut b.sub("p2m"), c, cfg.heads, cfg.pre_norm),
            ffn_m: FeedForward::new(&mut b.sub("ffn_m"), c, cfg.ffn_expansion, cfg.pre_norm),
            m2p: Attention::new(&mut b.sub("m2p"), c, cfg.heads, cfg.pre_norm),
            ffn_p: FeedForward::new(&mut b.sub("ffn_p"), c, cfg.ffn_expansion, cfg.pre_norm),
            aux_head: Linear::new(&mut b.sub("aux_head"), c, 1, true),
            ratios: cfg.pooling_ratios.clone(),
            flags: *flags,
        }
    }

    /// `[M_s; proj(P^m); proj(P^a_1); …]`, skipping the sets disabled by the ablation flags.
    pub fn augment_memory<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        memory: Var,
        pooled_max: Var,
        pooled_pyramid: &[Var],
    ) -> Result<Var> {
        let channels = g.shape(memory)[2];
        for &v in std::iter::once(&pooled_max).chain(pooled_pyramid) {
            if g.shape(v).len() != 3 || g.shape(v)[2] != channels {
                return Err(Error::Shape(format!("pooled tokens {:?} vs {channels} memory channels", g.shape(v))));
            }
        }
        if pooled_pyramid.len() != self.proj_pyramid.len() {
            return Err(Error::Shape(format!(
                "{} pyramid sets for {} projections",
                pooled_pyramid.len(),
                self.proj_pyramid.len()
            )));
        }
        let mut rows = vec![memory];
        if !self.flags.no_mp {
            rows.push(self.proj_max.forward(g, s, pooled_max)?);
        }
        if !self.flags.no_ap {
            for (proj, &p) in self.proj_pyramid.iter().zip(pooled_pyramid) {
                rows.push(proj.forward(g, s, p)?);
            }
        }
        g.concat(&rows, 1)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        p: &TokenMap,
        memory: Var,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<BabOutput> {
        let pooled_max = pool_representative(g, p, grid_h, grid_w)?;
        let pooled_pyr = pool_pyramid(g, p, &self.ratios)?;
        let context = if self.flags.no_p2m {
            memory
        } else {
            self.augment_memory(g, s, memory, pooled_max, &pooled_pyr)?
        };
        let p2m = self.p2m.forward(g, s, memory, context)?;
        let memory_next = self.ffn_m.forward(g, s, p2m.out)?;
        let m2p = self.m2p.forward(g, s, p.tokens, memory_next)?;
        let tokens = self.ffn_p.forward(g, s, m2p.out)?;
        let logits = self.aux_head.forward(g, s, pooled_max)?;
        let q = g.sigmoid(logits);
        let aux = g.reshape(q, &[p.batch(g), 1, grid_h, grid_w])?;
        Ok(BabOutput {
            tokens: TokenMap::new(g, tokens, p.grid_h, p.grid_w)?,
            memory: memory_next,
            aux,
            p2m_weights: p2m.weights,
            m2p_weights: m2p.weights,
        })
    }

    /// Output projections and second FFN layers; zeroing them makes the block an identity.
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.p2m.output_projection(), self.m2p.output_projection()];
        ids.extend(self.ffn_m.output_params());
        ids.extend(self.ffn_p.output_params());
        ids
    }
}

/// Learned initial memory plus `S` blocks.
#[derive(Clone, Debug)]
pub struct MemoryTransformer {
    pub memory: ParamId,
    pub blocks: Vec<Bab>,
    flags: AblationFlags,
}

pub struct MsFormerOutput {
    pub tokens: TokenMap,
    pub memory: Option<Var>,
    pub aux: Vec<Var>,
    pub attention: Vec<(Var, Var)>,
}

impl MemoryTransformer {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cfg: &ModelConfig,
        flags: &AblationFlags,
        memory_seed: u64,
    ) -> Result<Self> {
        if cfg.blocks < 1 {
            return Err(Error::InvalidValue("at least one attention block is required".into()));
        }
        let init = init_memory(cfg.memory_len, cfg.channels, cfg.memory_init_std, memory_seed)?;
        let memory = b.tensor("memory", init);
        let blocks = (0..cfg.blocks).map(|i| Bab::new(&mut b.sub(&format!("block{i}")), cfg, flags)).collect();
        Ok(Self { memory, blocks, flags: *flags })
    }

    /// Threads tokens and memory through every block. With `no_bab` the tokens
    /// pass through untouched and no semantic maps are produced.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        p0: &TokenMap,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<MsFormerOutput> {
        if self.flags.no_bab {
            return Ok(MsFormerOutput { tokens: *p0, memory: None, aux: Vec::new(), attention: Vec::new() });
        }
        let m0 = g.param(s, self.memory);
        let mut memory = g.broadcast_batch(m0, p0.batch(g))?;
        let mut tokens = *p0;
        let mut aux = Vec::with_capacity(self.blocks.len());
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block.forward(g, s, &tokens, memory, grid_h, grid_w)?;
            for (what, v) in [("tokens", out.tokens.tokens), ("memory", out.memory)] {
                if !g.value(v).is_finite() {
                    return Err(Error::NonFinite(format!("attention block {i} {what}")));
                }
            }
            tokens = out.tokens;
            memory = out.memory;
            aux.push(out.aux);
            attention.push((out.p2m_weights, out.m2p_weights));
        }
        Ok(MsFormerOutput { tokens, memory: Some(memory), aux, attention })
    }
}
