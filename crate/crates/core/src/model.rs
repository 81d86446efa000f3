//! Full network: shared encoder, memory transformer and change-map head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{AblationFlags, ModelConfig};
use crate::data::{BiTemporalSample, PatchGeometry};
use crate::encoder::{check_divisible, Encoder, TokenMap};
use crate::error::{Error, Result};
use crate::memory::MemoryTransformer;
use crate::nn::{Builder, ParamStore};
use crate::supervision::ChangeHead;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct MsFormer {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub encoder: Encoder,
    pub transformer: MemoryTransformer,
    pub head: ChangeHead,
}

pub struct ForwardOutput {
    /// `[B, 1, H, W]` change probabilities.
    pub change_map: Var,
    /// One `[B, 1, gh, gw]` semantic map per attention block.
    pub aux: Vec<Var>,
    pub tokens: TokenMap,
    pub memory: Option<Var>,
    /// `(P2M, M2P)` attention weights per block.
    pub attention: Vec<(Var, Var)>,
}

impl MsFormer {
    /// Builds the model and registers its parameters in a fresh store. All
    /// initial values derive from `seed`.
    pub fn new<T: Scalar>(config: &ModelConfig, flags: &AblationFlags, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut b.sub("encoder"), config.backbone_width, config.channels);
        let transformer = MemoryTransformer::new(&mut b.sub("transformer"), config, flags, seed ^ 0x6d65_6d6f)?;
        let head = ChangeHead::new(&mut b.sub("head"), config.channels);
        let model = Self { config: config.clone(), flags: *flags, encoder, transformer, head };
        Ok((model, store))
    }

    /// `t1`, `t2`: `[B, 3, H, W]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t1: Var,
        t2: Var,
        patch_h: usize,
        patch_w: usize,
        training: bool,
    ) -> Result<ForwardOutput> {
        let shape = g.shape(t1).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("expected [B, 3, H, W], got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        check_divisible(h, w)?;
        let geom = PatchGeometry::new(h, w, patch_h, patch_w)?;
        let p0 = self.encoder.forward(g, s, t1, t2, training)?;
        let out = self.transformer.forward(g, s, &p0, geom.grid_h(), geom.grid_w())?;
        let change_map = self.head.predict_change_map(g, s, &out.tokens, h, w)?;
        Ok(ForwardOutput {
            change_map,
            aux: out.aux,
            tokens: out.tokens,
            memory: out.memory,
            attention: out.attention,
        })
    }
}

/// Stacks the two dates of a batch into `[B, 3, H, W]` tensors, normalized per channel.
pub fn batch_images<T: Scalar>(
    samples: &[&BiTemporalSample],
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut a = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut b = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Shape(format!("sample {} is {}x{}, batch is {h}x{w}", s.id, s.height(), s.width())));
        }
        a.extend(s.image_t1.to_planar(mean, std).into_iter().map(|v| T::from_f64(f64::from(v))));
        b.extend(s.image_t2.to_planar(mean, std).into_iter().map(|v| T::from_f64(f64::from(v))));
    }
    let shape = [samples.len(), 3, h, w];
    Ok((Tensor::new(&shape, a)?, Tensor::new(&shape, b)?))
}
