//! Full segmentation model: encoder -> optional enhancement -> decoder.

use crate::decoder::{AllMlpDecoder, MaaConfig, MaaDecoder, MaskLogits};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid, Probe};
use crate::error::{Error, Result};
use crate::nn::{Param, Vars};
use crate::tensor::{flops, no_grad, rng::SplitMix64, Tensor};
use crate::uiqa::{Uiqa, UiqaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Maa,
    AllMlp,
}

impl DecoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecoderKind::Maa => "maa",
            DecoderKind::AllMlp => "allmlp",
        }
    }

    pub fn parse(s: &str) -> Result<DecoderKind> {
        match s {
            "maa" => Ok(DecoderKind::Maa),
            "allmlp" => Ok(DecoderKind::AllMlp),
            other => Err(Error::Config(format!(
                "unknown decoder '{other}' (expected 'maa' or 'allmlp')"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// None disables the enhancement stage (ablation baseline).
    pub uiqa: Option<UiqaConfig>,
    pub decoder: DecoderKind,
    /// Decoder channel width C.
    pub embed: usize,
    pub n_cls: usize,
    pub dropout_p: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            uiqa: Some(UiqaConfig::default()),
            decoder: DecoderKind::Maa,
            embed: 128,
            n_cls: 2,
            dropout_p: 0.1,
        }
    }
}

impl ModelConfig {
    /// Both spatial dimensions of any input must be divisible by this.
    pub fn input_multiple(&self) -> usize {
        match &self.uiqa {
            Some(u) => (2 * u.patch).max(32),
            None => 32,
        }
    }

    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.input_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must have both sides divisible by {m}"
            )));
        }
        Ok(())
    }
}

enum Decoder {
    Maa(MaaDecoder),
    AllMlp(AllMlpDecoder),
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub uiqa: Option<Uiqa>,
    decoder: Decoder,
    params: Vec<Param>,
    buffers: Vec<Param>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        crate::tune_allocator();
        let mut vars = Vars::new(seed);
        let encoder = Encoder::new(&mut vars, "encoder", &cfg.encoder)?;
        let uiqa = match &cfg.uiqa {
            Some(ucfg) => Some(Uiqa::new(&mut vars, "uiqa", &cfg.encoder.channels, ucfg)?),
            None => None,
        };
        let decoder = match cfg.decoder {
            DecoderKind::Maa => Decoder::Maa(MaaDecoder::new(
                &mut vars,
                "decoder",
                &cfg.encoder.channels,
                &MaaConfig { embed: cfg.embed, n_cls: cfg.n_cls, dropout_p: cfg.dropout_p },
            )?),
            DecoderKind::AllMlp => Decoder::AllMlp(AllMlpDecoder::new(
                &mut vars,
                "decoder",
                &cfg.encoder.channels,
                cfg.embed,
                cfg.n_cls,
            )?),
        };
        let (params, buffers) = vars.into_parts();
        Ok(Model { cfg: cfg.clone(), encoder, uiqa, decoder, params, buffers })
    }

    /// Encoder + enhancement pyramid (before decoding).
    pub fn features(&self, image: &Tensor, train: bool, mut probe: Option<&mut Probe>) -> Result<FeaturePyramid> {
        let s = image.shape();
        if s.len() == 4 {
            self.cfg.validate_input(s[2], s[3])?;
        }
        let pyr = flops::scope("encoder", || self.encoder.forward(image, probe.as_deref_mut()))?;
        match &self.uiqa {
            Some(u) => flops::scope("uiqa", || u.forward(&pyr, train, probe)),
            None => Ok(pyr),
        }
    }

    pub fn forward(
        &self,
        image: &Tensor,
        train: bool,
        rng: &mut SplitMix64,
        probe: Option<&mut Probe>,
    ) -> Result<MaskLogits> {
        let s = image.shape();
        let (h, w) = (s[2], s[3]);
        let pyr = self.features(image, train, probe)?;
        flops::scope("decoder", || match &self.decoder {
            Decoder::Maa(d) => d.forward(&pyr, h, w, train, rng),
            Decoder::AllMlp(d) => d.forward(&pyr, h, w),
        })
    }

    /// Inference forward: eval mode, no graph recording.
    pub fn forward_eval(&self, image: &Tensor) -> Result<MaskLogits> {
        let mut rng = SplitMix64::new(0);
        no_grad(|| self.forward(image, false, &mut rng, None))
    }

    pub fn maa(&self) -> Option<&MaaDecoder> {
        match &self.decoder {
            Decoder::Maa(d) => Some(d),
            Decoder::AllMlp(_) => None,
        }
    }

    pub fn named_params(&self) -> &[Param] {
        &self.params
    }

    pub fn named_buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.tensor.numel() as u64).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }
}
