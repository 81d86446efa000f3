use crate::data::grid::{BinaryMask, RgbImage};
use crate::data::patch::{check_binary, PatchLabelGrid};
use crate::error::{Error, Result};

/// One co-registered image pair, optionally with its pixel-level change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    pub id: String,
    pub image_t1: RgbImage,
    pub image_t2: RgbImage,
    pub pixel_mask: Option<BinaryMask>,
}

impl BiTemporalSample {
    pub fn new(
        id: impl Into<String>,
        image_t1: RgbImage,
        image_t2: RgbImage,
        pixel_mask: Option<BinaryMask>,
    ) -> Result<Self> {
        let id = id.into();
        let dims = (image_t1.height(), image_t1.width());
        if dims != (image_t2.height(), image_t2.width()) {
            return Err(Error::Shape(format!(
                "sample {id}: t1 is {}x{}, t2 is {}x{}",
                dims.0,
                dims.1,
                image_t2.height(),
                image_t2.width()
            )));
        }
        if let Some(mask) = &pixel_mask {
            if mask.dims() != dims {
                return Err(Error::Shape(format!(
                    "sample {id}: mask is {}x{}, images are {}x{}",
                    mask.height(),
                    mask.width(),
                    dims.0,
                    dims.1
                )));
            }
            check_binary(mask)?;
        }
        Ok(Self { id, image_t1, image_t2, pixel_mask })
    }

    pub fn height(&self) -> usize {
        self.image_t1.height()
    }

    pub fn width(&self) -> usize {
        self.image_t1.width()
    }
}

/// Per-item augmentation switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub vflip: bool,
    pub temporal_exchange: bool,
}

impl AugmentFlags {
    /// Independent fair coin per flag.
    pub fn sample<R: rand::Rng>(rng: &mut R) -> Self {
        Self { hflip: rng.gen_bool(0.5), vflip: rng.gen_bool(0.5), temporal_exchange: rng.gen_bool(0.5) }
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..8u8).map(|b| Self { hflip: b & 1 != 0, vflip: b & 2 != 0, temporal_exchange: b & 4 != 0 })
    }
}

/// Applies flips to images, mask and labels alike; temporal exchange swaps only the images.
pub fn augment(
    sample: &BiTemporalSample,
    labels: &PatchLabelGrid,
    flags: AugmentFlags,
) -> (BiTemporalSample, PatchLabelGrid) {
    let mut s = sample.clone();
    let mut l = labels.clone();
    if flags.hflip {
        s.image_t1 = s.image_t1.flip_horizontal();
        s.image_t2 = s.image_t2.flip_horizontal();
        s.pixel_mask = s.pixel_mask.map(|m| m.flip_horizontal());
        l = l.flip_horizontal();
    }
    if flags.vflip {
        s.image_t1 = s.image_t1.flip_vertical();
        s.image_t2 = s.image_t2.flip_vertical();
        s.pixel_mask = s.pixel_mask.map(|m| m.flip_vertical());
        l = l.flip_vertical();
    }
    if flags.temporal_exchange {
        std::mem::swap(&mut s.image_t1, &mut s.image_t2);
    }
    (s, l)
}
