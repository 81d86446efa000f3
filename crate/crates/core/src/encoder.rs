//! Siamese residual backbone, temporal differencing and the pyramid decoder.
//!
//! Level `i ∈ {2, 3, 4, 5}` sits at stride `2^(i+1)`, i.e. 8/16/32/64. To reach
//! stride 8 at the first level, the stem (stride 4) is followed by a strided
//! first stage; the remaining stages follow the usual 18-layer layout of two
//! basic blocks each. The stride-4 stem output is kept as a fine skip for the
//! decoder.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Builder, Conv2d, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Deepest backbone stride; input sides must be multiples of it.
pub const MAX_STRIDE: usize = 64;
/// Stride of the decoded token map.
pub const TOKEN_STRIDE: usize = 4;
pub const LEVEL_STRIDES: [usize; 4] = [8, 16, 32, 64];

/// Per-level features of one batch of images, each `[B, c_i, H/s_i, W/s_i]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiLevelFeatures {
    pub levels: [Var; 4],
}

/// Signed level-wise differences `F¹ − F²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DifferenceFeatures {
    pub levels: [Var; 4],
}

/// Tokens `[B, grid_h · grid_w, C]` in row-major spatial order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMap {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenMap {
    pub fn new<T: Scalar>(g: &Graph<T>, tokens: Var, grid_h: usize, grid_w: usize) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[1] != grid_h * grid_w {
            return Err(Error::Shape(format!("token map {grid_h}x{grid_w} with tokens {s:?}")));
        }
        Ok(Self { tokens, grid_h, grid_w })
    }

    pub fn channels<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.tokens)[2]
    }

    pub fn batch<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.tokens)[0]
    }

    /// Back to `[B, C, grid_h, grid_w]`.
    pub fn to_spatial<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.from_tokens(self.tokens, self.grid_h, self.grid_w)
    }
}

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut b.sub("conv"), in_c, out_c, k, stride, k / 2, false),
            bn: BatchNorm2d::new(&mut b.sub("bn"), out_c),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, training: bool) -> Result<Var> {
        let y = self.conv.forward(g, s, x)?;
        let y = self.bn.forward(g, s, y, training)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, in_c: usize, out_c: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || in_c != out_c).then(|| {
            let mut d = b.sub("downsample");
            (Conv2d::new(&mut d.sub("conv"), in_c, out_c, 1, stride, 0, false), BatchNorm2d::new(&mut d.sub("bn"), out_c))
        });
        Self {
            conv1: Conv2d::new(&mut b.sub("conv1"), in_c, out_c, 3, stride, 1, false),
            bn1: BatchNorm2d::new(&mut b.sub("bn1"), out_c),
            conv2: Conv2d::new(&mut b.sub("conv2"), out_c, out_c, 3, 1, 1, false),
            bn2: BatchNorm2d::new(&mut b.sub("bn2"), out_c),
            downsample,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, training: bool) -> Result<Var> {
        let y = self.conv1.forward(g, s, x)?;
        let y = self.bn1.forward(g, s, y, training)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, s, y)?;
        let y = self.bn2.forward(g, s, y, training)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => {
                let d = conv.forward(g, s, x)?;
                bn.forward(g, s, d, training)?
            }
            None => x,
        };
        let y = g.add(y, shortcut)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    widths: [usize; 4],
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, width: usize) -> Self {
        let widths = [width, 2 * width, 4 * width, 8 * width];
        let stem = Conv2d::new(&mut b.sub("stem.conv"), 3, width, 7, 2, 3, false);
        let stem_bn = BatchNorm2d::new(&mut b.sub("stem.bn"), width);
        let mut in_c = width;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut sb = b.sub(&format!("layer{}", i + 1));
                let blocks = vec![
                    BasicBlock::new(&mut sb.sub("0"), in_c, c, 2),
                    BasicBlock::new(&mut sb.sub("1"), c, c, 1),
                ];
                in_c = c;
                blocks
            })
            .collect();
        Self { stem, stem_bn, stages, widths }
    }

    /// Channel counts `c_2..c_5`.
    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    /// Runs the backbone on `[B, 3, H, W]`.
    pub fn extract_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        images: Var,
        training: bool,
    ) -> Result<MultiLevelFeatures> {
        Ok(self.extract_with_stem(g, s, images, training)?.1)
    }

    /// As [`Self::extract_features`], also returning the stride-4 stem output `[B, c_2, H/4, W/4]`.
    pub fn extract_with_stem<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        images: Var,
        training: bool,
    ) -> Result<(Var, MultiLevelFeatures)> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Shape(format!("backbone expects [B, 3, H, W], got {shape:?}")));
        }
        check_divisible(shape[2], shape[3])?;
        let x = self.stem.forward(g, s, images)?;
        let x = self.stem_bn.forward(g, s, x, training)?;
        let x = g.relu(x);
        let stem = g.max_pool2d(x, 3, 2, 1)?;
        let mut x = stem;
        let mut levels = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(g, s, x, training)?;
            }
            levels[i] = x;
        }
        Ok((stem, MultiLevelFeatures { levels }))
    }

    /// Every parameter id owned by the backbone.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem.weight, self.stem_bn.gamma, self.stem_bn.beta];
        for block in self.stages.iter().flatten() {
            ids.extend([block.conv1.weight, block.bn1.gamma, block.bn1.beta]);
            ids.extend([block.conv2.weight, block.bn2.gamma, block.bn2.beta]);
            if let Some((c, bn)) = &block.downsample {
                ids.extend([c.weight, bn.gamma, bn.beta]);
            }
        }
        ids
    }
}

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
        return Err(Error::Divisibility(format!(
            "image sides must be positive multiples of {MAX_STRIDE}: height {h} mod {MAX_STRIDE} = {}, width {w} mod {MAX_STRIDE} = {}",
            h % MAX_STRIDE,
            w % MAX_STRIDE
        )));
    }
    Ok(())
}

/// `D_i = F_i¹ − F_i²` at every level.
pub fn temporal_difference<T: Scalar>(
    g: &mut Graph<T>,
    f1: &MultiLevelFeatures,
    f2: &MultiLevelFeatures,
) -> Result<DifferenceFeatures> {
    let mut levels = f1.levels;
    for (i, level) in levels.iter_mut().enumerate() {
        *level = g.sub(f1.levels[i], f2.levels[i])?;
    }
    Ok(DifferenceFeatures { levels })
}

/// Feature-pyramid decoder: lateral projections, a top-down pathway, per-level
/// smoothing and a sum of all levels at stride 8, then a ×2 upsampling merged
/// with the projected stem difference and refined at stride 4.
#[derive(Clone, Debug)]
pub struct Decoder {
    lateral: Vec<ConvBnRelu>,
    lateral_stem: ConvBnRelu,
    smooth: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
    channels: usize,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, widths: [usize; 4], channels: usize) -> Self {
        let lateral = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvBnRelu::new(&mut b.sub(&format!("lateral{i}")), c, channels, 1, 1))
            .collect();
        let smooth = (0..4)
            .map(|i| ConvBnRelu::new(&mut b.sub(&format!("smooth{i}")), channels, channels, 3, 1))
            .collect();
        let lateral_stem = ConvBnRelu::new(&mut b.sub("lateral_stem"), widths[0], channels, 1, 1);
        let fuse = ConvBnRelu::new(&mut b.sub("fuse"), channels, channels, 3, 1);
        Self { lateral, lateral_stem, smooth, fuse, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn decode_aggregate<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        d: &DifferenceFeatures,
        stem_diff: Var,
        training: bool,
    ) -> Result<TokenMap> {
        let mut lat = Vec::with_capacity(4);
        for (layer, &x) in self.lateral.iter().zip(&d.levels) {
            lat.push(layer.forward(g, s, x, training)?);
        }
        let mut top_down = lat.clone();
        for i in (0..3).rev() {
            let (h, w) = spatial(g, lat[i]);
            let up = g.upsample_bilinear(top_down[i + 1], h, w)?;
            top_down[i] = g.add(lat[i], up)?;
        }
        let (h8, w8) = spatial(g, lat[0]);
        let mut merged = Vec::with_capacity(4);
        for (layer, &x) in self.smooth.iter().zip(&top_down) {
            let y = layer.forward(g, s, x, training)?;
            merged.push(g.upsample_bilinear(y, h8, w8)?);
        }
        let sum = g.add_n(&merged)?;
        let up = g.upsample_bilinear(sum, 2 * h8, 2 * w8)?;
        let fine = self.lateral_stem.forward(g, s, stem_diff, training)?;
        if spatial(g, fine) != (2 * h8, 2 * w8) {
            return Err(Error::Shape(format!("stem difference {:?} is not at stride 4", g.shape(stem_diff))));
        }
        let up = g.add(up, fine)?;
        let out = self.fuse.forward(g, s, up, training)?;
        let tokens = g.to_tokens(out)?;
        TokenMap::new(g, tokens, 2 * h8, 2 * w8)
    }
}

fn spatial<T: Scalar>(g: &Graph<T>, x: Var) -> (usize, usize) {
    let s = g.shape(x);
    (s[2], s[3])
}

/// Shared backbone plus decoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub backbone: Backbone,
    pub decoder: Decoder,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, backbone_width: usize, channels: usize) -> Self {
        let backbone = Backbone::new(&mut b.sub("backbone"), backbone_width);
        let decoder = Decoder::new(&mut b.sub("decoder"), backbone.widths(), channels);
        Self { backbone, decoder }
    }

    /// Both images go through the one backbone as a single stacked batch
    /// `[t1; t2]`, so batch-norm statistics are shared across the two dates.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        t1: Var,
        t2: Var,
        training: bool,
    ) -> Result<TokenMap> {
        if g.shape(t1) != g.shape(t2) {
            return Err(Error::Shape(format!("image pair {:?} vs {:?}", g.shape(t1), g.shape(t2))));
        }
        let b = g.shape(t1)[0];
        let both = g.concat(&[t1, t2], 0)?;
        let (stem, f) = self.backbone.extract_with_stem(g, s, both, training)?;
        let stem1 = g.narrow(stem, 0, b)?;
        let stem2 = g.narrow(stem, b, b)?;
        let stem_diff = g.sub(stem1, stem2)?;
        let mut f1 = f;
        let mut f2 = f;
        for i in 0..4 {
            f1.levels[i] = g.narrow(f.levels[i], 0, b)?;
            f2.levels[i] = g.narrow(f.levels[i], b, b)?;
        }
        let d = temporal_difference(g, &f1, &f2)?;
        self.decoder.decode_aggregate(g, s, &d, stem_diff, training)
    }
}
