//! The two per-modality U-Net branches (channel widths divided by 4).
//!
//! Each branch is an encoder of five double-conv blocks with 2x2 max pooling
//! between them, followed by an auxiliary decoder of four up-sampling blocks.
//! The branch exposes a five-level feature pyramid: level 1 is the encoder
//! bottleneck, levels 2..5 are the auxiliary decoder block outputs.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{ConvBnRelu, Deconv2x2, Pass};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Pyramid level, 1 (coarsest) to 5 (input resolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Level(u8);

impl Level {
    pub const COUNT: usize = 5;
    pub const ALL: [Level; 5] = [Level(1), Level(2), Level(3), Level(4), Level(5)];
    pub const FINEST: Level = Level(5);

    pub fn new(level: usize) -> Result<Self> {
        if (1..=5).contains(&level) {
            Ok(Level(level as u8))
        } else {
            Err(Error::Invalid(format!("pyramid level {level} outside 1..=5")))
        }
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    /// Zero-based position in per-level arrays.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    /// Spatial down-sampling factor relative to the input.
    pub fn stride(self) -> usize {
        1 << (5 - self.0)
    }

    pub fn coarser(self) -> Option<Level> {
        (self.0 > 1).then(|| Level(self.0 - 1))
    }

    /// Block number used by the layer names (`conv1-*` is the finest).
    fn block(self) -> usize {
        6 - self.get()
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Channel widths of the network. `base` is the width at level 5; each
/// coarser level doubles it. The reduced U-Net uses `base = 16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub base: usize,
}

impl Widths {
    /// Original U-Net widths divided by 4: 16, 32, 64, 128, 256.
    pub const REDUCED: Widths = Widths { base: 16 };
    /// A further quarter of the reduced widths: 4 .. 64.
    pub const QUARTER: Widths = Widths { base: 4 };

    pub fn channels(self, level: Level) -> usize {
        self.base << (5 - level.get())
    }
}

impl Default for Widths {
    fn default() -> Self {
        Widths::REDUCED
    }
}

/// Expected shape of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub level: Level,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LevelSpec {
    pub fn for_input(height: usize, width: usize, level: Level, widths: Widths) -> Self {
        LevelSpec {
            level,
            height: height / level.stride(),
            width: width / level.stride(),
            channels: widths.channels(level),
        }
    }

    pub fn check(&self, shape: crate::tensor::Shape, op: &'static str) -> Result<()> {
        if shape.c != self.channels || shape.h != self.height || shape.w != self.width {
            return Err(Error::shape(
                op,
                format!("level {} [{}x{}x{}]", self.level, self.channels, self.height, self.width),
                shape,
            ));
        }
        Ok(())
    }
}

/// Input spatial dimensions must survive four 2x poolings.
pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Invalid(format!("input {h}x{w} must be non-empty and divisible by 16")));
    }
    Ok(())
}

/// Encoder outputs captured before each pooling, plus the bottleneck.
#[derive(Debug, Clone, Copy)]
pub struct EncoderFeatures {
    /// conv1-2, conv2-2, conv3-2, conv4-2 (finest first).
    pub skips: [Var; 4],
    /// conv5-2.
    pub bottleneck: Var,
}

/// `F^(1..5)` of one branch.
#[derive(Debug, Clone, Copy)]
pub struct AuxDecoderFeatures {
    pub levels: [Var; 5],
}

impl AuxDecoderFeatures {
    pub fn at(&self, level: Level) -> Var {
        self.levels[level.index()]
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    deconv: Deconv2x2,
    convs: [ConvBnRelu; 2],
}

/// One modality branch: encoder plus auxiliary decoder.
#[derive(Debug, Clone)]
pub struct Branch {
    pub name: String,
    pub in_channels: usize,
    pub widths: Widths,
    encoder: Vec<[ConvBnRelu; 2]>,
    /// Ordered from level 2 to level 5.
    decoder: Vec<UpBlock>,
}

impl Branch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_channels: usize, widths: Widths) -> Self {
        let mut encoder = Vec::with_capacity(5);
        let mut cin = in_channels;
        for level in Level::ALL.iter().rev() {
            let b = level.block();
            let c = widths.channels(*level);
            encoder.push([
                ConvBnRelu::new(store, rng, &format!("{name}.conv{b}-1"), cin, c),
                ConvBnRelu::new(store, rng, &format!("{name}.conv{b}-2"), c, c),
            ]);
            cin = c;
        }
        let mut decoder = Vec::with_capacity(4);
        for level in &Level::ALL[1..] {
            let b = level.block();
            let c = widths.channels(*level);
            let prev = widths.channels(level.coarser().expect("level > 1"));
            decoder.push(UpBlock {
                deconv: Deconv2x2::new(store, rng, &format!("{name}.deconv{b}-1"), prev, c),
                convs: [
                    ConvBnRelu::new(store, rng, &format!("{name}.conv{b}-3"), 2 * c, c),
                    ConvBnRelu::new(store, rng, &format!("{name}.conv{b}-4"), c, c),
                ],
            });
        }
        Branch {
            name: name.to_owned(),
            in_channels,
            widths,
            encoder,
            decoder,
        }
    }

    pub fn encode<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<EncoderFeatures> {
        let xs = p.g.shape(x);
        if xs.c != self.in_channels {
            return Err(Error::shape("encode", format!("{} input channels", self.in_channels), xs));
        }
        check_input_dims(xs.h, xs.w)?;
        let mut skips = Vec::with_capacity(4);
        let mut h = x;
        for (i, block) in self.encoder.iter().enumerate() {
            h = block[0].forward(p, h)?;
            h = block[1].forward(p, h)?;
            if i < 4 {
                skips.push(h);
                h = p.g.max_pool2(h)?;
            }
        }
        Ok(EncoderFeatures {
            skips: [skips[0], skips[1], skips[2], skips[3]],
            bottleneck: h,
        })
    }

    pub fn aux_decode<T: Scalar>(&self, p: &mut Pass<'_, T>, enc: &EncoderFeatures) -> Result<AuxDecoderFeatures> {
        let mut levels = [enc.bottleneck; 5];
        let mut h = enc.bottleneck;
        for (i, block) in self.decoder.iter().enumerate() {
            let up = block.deconv.forward(p, h)?;
            // level i + 2 pairs with skip 3 - i (conv4-2 first).
            let cat = p.g.concat(up, enc.skips[3 - i])?;
            h = block.convs[0].forward(p, cat)?;
            h = block.convs[1].forward(p, h)?;
            levels[i + 1] = h;
        }
        Ok(AuxDecoderFeatures { levels })
    }

    pub fn forward<T: Scalar>(&self, p: &mut Pass<'_, T>, x: Var) -> Result<(EncoderFeatures, AuxDecoderFeatures)> {
        let enc = self.encode(p, x)?;
        let dec = self.aux_decode(p, &enc)?;
        Ok((enc, dec))
    }
}
