//! Decoders: gated multi-scale aggregation (MAA) and the all-MLP baseline.
//!
//! MAA fuses the four enhanced stage maps into one stride-8 map: sigmoid
//! gates computed from stages 1-3 multiplicatively filter the summed
//! low-level content (Fusion_1), a stage-4 gate filters stage-3 content
//! (Fusion_2), and the stage-4 content joins additively. A dropout + 1x1
//! projection head emits class logits, upsampled to full resolution.
//!
//! The all-MLP baseline projects every stage to a common width, upsamples to
//! stride 4, concatenates, and applies two linears.

use crate::encoder::{to_map, to_tokens, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBn, Linear, Vars};
use crate::tensor::{concat, rng::SplitMix64, Tensor};

#[derive(Debug, Clone)]
pub struct MaaConfig {
    /// Common channel width after the per-stage channel change.
    pub embed: usize,
    pub n_cls: usize,
    pub dropout_p: f32,
}

impl Default for MaaConfig {
    fn default() -> Self {
        MaaConfig { embed: 128, n_cls: 2, dropout_p: 0.1 }
    }
}

impl MaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 {
            return Err(Error::Config("decoder embed width must be >= 1".into()));
        }
        if self.n_cls < 2 {
            return Err(Error::Config(format!("n_cls must be >= 2, got {}", self.n_cls)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must be in [0,1), got {}", self.dropout_p)));
        }
        Ok(())
    }
}

/// Class scores at the decoder's native stride plus the full-resolution
/// upsample used by the loss and metrics.
#[derive(Debug)]
pub struct MaskLogits {
    pub full: Tensor,
    pub native: Tensor,
    pub native_stride: usize,
}

/// Intermediate fusion maps, exposed for inspection and tests.
#[derive(Debug)]
pub struct FusionMaps {
    pub fusion1: Tensor,
    pub fusion2: Tensor,
    pub fusion: Tensor,
}

// ---------------------------------------------------------------------------
// MAA
// ---------------------------------------------------------------------------

pub struct MaaDecoder {
    pub cfg: MaaConfig,
    gates: [Conv2d; 4],
    content: [ConvBn; 4],
    head: Conv2d,
}

impl MaaDecoder {
    pub fn new(vars: &mut Vars, prefix: &str, channels: &[usize; 4], cfg: &MaaConfig) -> Result<MaaDecoder> {
        cfg.validate()?;
        let gates = std::array::from_fn(|i| {
            Conv2d::new(vars, &format!("{prefix}.gate{i}"), channels[i], cfg.embed, 1, 1, 0, 1, true)
        });
        let content = std::array::from_fn(|i| ConvBn::new(vars, &format!("{prefix}.content{i}"), channels[i], cfg.embed));
        let head = Conv2d::new(vars, &format!("{prefix}.head"), cfg.embed, cfg.n_cls, 1, 1, 0, 1, true);
        Ok(MaaDecoder { cfg: cfg.clone(), gates, content, head })
    }

    /// Sigmoid of a 1x1 conv: values strictly inside (0, 1).
    pub fn sc_gate(&self, stage: usize, f: &Tensor) -> Result<Tensor> {
        Ok(self.gates[stage].forward(f)?.sigmoid())
    }

    fn resize_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        x.bilinear_resize(h, w)
    }

    /// Gated low-level fusion at stride 8.
    pub fn fusion1(&self, pyr: &FeaturePyramid, train: bool) -> Result<Tensor> {
        let s2 = pyr.maps[1].shape();
        let (h, w) = (s2[2], s2[3]);
        let g3 = Self::resize_to(&self.sc_gate(2, &pyr.maps[2])?, h, w)?;
        let g2 = self.sc_gate(1, &pyr.maps[1])?;
        let g1 = Self::resize_to(&self.sc_gate(0, &pyr.maps[0])?, h, w)?;
        let c2 = self.content[1].forward(&pyr.maps[1], train)?;
        let c1 = Self::resize_to(&self.content[0].forward(&pyr.maps[0], train)?, h, w)?;
        g3.mul(&g2)?.mul(&g1)?.mul(&c2.add(&c1)?)
    }

    /// High-level semantic filtering at stride 8.
    pub fn fusion2(&self, pyr: &FeaturePyramid, train: bool) -> Result<Tensor> {
        let s2 = pyr.maps[1].shape();
        let (h, w) = (s2[2], s2[3]);
        let g4 = Self::resize_to(&self.sc_gate(3, &pyr.maps[3])?, h, w)?;
        let c3 = Self::resize_to(&self.content[2].forward(&pyr.maps[2], train)?, h, w)?;
        g4.mul(&c3)
    }

    /// Fusion_1 + Fusion_2 + Up(content(F4)), all at stride 8.
    pub fn fuse(&self, pyr: &FeaturePyramid, train: bool) -> Result<FusionMaps> {
        let s2 = pyr.maps[1].shape();
        let (h, w) = (s2[2], s2[3]);
        let fusion1 = self.fusion1(pyr, train)?;
        let fusion2 = self.fusion2(pyr, train)?;
        let c4 = Self::resize_to(&self.content[3].forward(&pyr.maps[3], train)?, h, w)?;
        let fusion = fusion1.add(&fusion2)?.add(&c4)?;
        Ok(FusionMaps { fusion1, fusion2, fusion })
    }

    /// Dropout, 1x1 class projection, bilinear upsample to full resolution.
    pub fn seg_head(&self, fusion: &Tensor, full_h: usize, full_w: usize, train: bool, rng: &mut SplitMix64) -> Result<MaskLogits> {
        let dropped = fusion.dropout(self.cfg.dropout_p, train, rng);
        let native = self.head.forward(&dropped)?;
        let full = native.bilinear_resize(full_h, full_w)?;
        Ok(MaskLogits { full, native, native_stride: 8 })
    }

    pub fn forward(&self, pyr: &FeaturePyramid, full_h: usize, full_w: usize, train: bool, rng: &mut SplitMix64) -> Result<MaskLogits> {
        let maps = self.fuse(pyr, train)?;
        self.seg_head(&maps.fusion, full_h, full_w, train, rng)
    }
}

// ---------------------------------------------------------------------------
// ALL-MLP baseline
// ---------------------------------------------------------------------------

pub struct AllMlpDecoder {
    pub embed: usize,
    pub n_cls: usize,
    proj: [Linear; 4],
    fuse: Linear,
    cls: Linear,
}

impl AllMlpDecoder {
    pub fn new(vars: &mut Vars, prefix: &str, channels: &[usize; 4], embed: usize, n_cls: usize) -> Result<AllMlpDecoder> {
        if embed == 0 || n_cls < 2 {
            return Err(Error::Config(format!(
                "all-mlp decoder needs embed >= 1 and n_cls >= 2, got {embed}/{n_cls}"
            )));
        }
        let proj = std::array::from_fn(|i| {
            Linear::new(vars, &format!("{prefix}.proj{i}"), channels[i], embed, true)
        });
        let fuse = Linear::new(vars, &format!("{prefix}.fuse"), 4 * embed, embed, true);
        let cls = Linear::new(vars, &format!("{prefix}.cls"), embed, n_cls, true);
        Ok(AllMlpDecoder { embed, n_cls, proj, fuse, cls })
    }

    /// Per-stage linear, upsample to stride 4, concat in stage order, fuse,
    /// classify. Native resolution is H/4 x W/4.
    pub fn forward(&self, pyr: &FeaturePyramid, full_h: usize, full_w: usize) -> Result<MaskLogits> {
        let s1 = pyr.maps[0].shape();
        let (h, w) = (s1[2], s1[3]);
        let mut upsampled = Vec::with_capacity(4);
        for i in 0..4 {
            let t = to_tokens(&pyr.maps[i])?;
            let p = self.proj[i].forward(&t)?;
            let si = pyr.maps[i].shape();
            let map = to_map(&p, si[2], si[3])?;
            upsampled.push(map.bilinear_resize(h, w)?);
        }
        let cat = concat(&upsampled, 1)?;
        let tokens = to_tokens(&cat)?;
        let fused = self.fuse.forward(&tokens)?;
        let logits = self.cls.forward(&fused)?;
        let native = to_map(&logits, h, w)?;
        let full = native.bilinear_resize(full_h, full_w)?;
        Ok(MaskLogits { full, native, native_stride: 4 })
    }
}
