//! Underwater image quality attention.
//!
//! The pyramid is re-encoded into per-stage channel tokens by strided
//! projections that align all four stages onto one token grid, then stacked
//! multi-head channel self-attention layers re-weight the shared channel
//! descriptors, and a reconstruction block resamples each stage back to its
//! native resolution with a residual onto the input features.
//!
//! Attention here runs along the channel axis: each query channel of a stage
//! distributes unit attention over the shared channel descriptors built from
//! the concatenation of all stages.

use crate::encoder::{to_tokens, FeaturePyramid, Probe, STAGES};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, LayerNorm, Linear, Vars};
use crate::tensor::{concat, NormMode, Tensor};

#[derive(Debug, Clone)]
pub struct UiqaConfig {
    /// Patch granularity P; all stages land on an (H/2P)x(W/2P) token grid.
    /// Must be a multiple of 16 so every stage kernel P/2^i stays integral.
    pub patch: usize,
    /// Number of stacked attention layers (N_M).
    pub n_layers: usize,
    /// Number of attention heads per layer (N_C).
    pub n_heads: usize,
    /// Width of the shared key/value projections; defaults to the summed
    /// stage channels C_S.
    pub embed: Option<usize>,
}

impl Default for UiqaConfig {
    fn default() -> Self {
        UiqaConfig { patch: 32, n_layers: 4, n_heads: 4, embed: None }
    }
}

impl UiqaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch < 16 || self.patch % 16 != 0 {
            return Err(Error::Config(format!(
                "patch granularity {} must be a positive multiple of 16",
                self.patch
            )));
        }
        if self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("n_layers and n_heads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn embed_width(&self, channels: &[usize; STAGES]) -> usize {
        self.embed.unwrap_or_else(|| channels.iter().sum())
    }
}

/// Per-stage token matrices plus their channel concatenation.
#[derive(Debug)]
pub struct TokenBundle {
    /// Stage tokens, each [B, d, C_i].
    pub stages: [Tensor; STAGES],
    /// Token grid (rows, cols); d = rows * cols, identical across stages.
    pub grid: (usize, usize),
}

impl TokenBundle {
    /// Channel concatenation [B, d, C_S] in stage order 1..4.
    pub fn concat(&self) -> Result<Tensor> {
        concat(&self.stages, 2)
    }
}

/// Shared-channel attention for one stage and one head:
/// softmax(IN(Q^T K / sqrt(c_s))) V^T.
///
/// `q` is [B, d, C_i], `k`/`v` are [B, d, C]; the result is [B, C_i, d].
/// Instance normalization treats each sample's [C_i, C] logit matrix as one
/// unit; softmax runs along the shared channel axis, so every query channel's
/// attention row sums to one.
pub fn channel_self_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    c_s: usize,
    mut probe: Option<(&mut Probe, &str)>,
) -> Result<Tensor> {
    let scale = 1.0 / (c_s as f32).sqrt();
    let logits = q.transpose_last2()?.bmm(k)?.mul_scalar(scale);
    let normed = logits.normalize(NormMode::Instance, 1e-5)?;
    let probs = normed.softmax(2)?;
    if let Some((p, label)) = probe.as_mut() {
        p.push(label.to_string(), probs.clone());
    }
    probs.bmm(&v.transpose_last2()?)
}

struct Head {
    w_k: Linear,
    w_v: Linear,
    w_q: [Linear; STAGES],
}

struct StageFfn {
    norm_in: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm_out: LayerNorm,
}

impl StageFfn {
    fn forward(&self, m: &Tensor) -> Result<Tensor> {
        let h = self.fc2.forward(&self.fc1.forward(&self.norm_in.forward(m)?)?.gelu())?;
        self.norm_out.forward(&m.add(&h)?)
    }
}

struct McsaLayer {
    heads: Vec<Head>,
    ffn: [StageFfn; STAGES],
}

impl McsaLayer {
    fn new(vars: &mut Vars, prefix: &str, channels: &[usize; STAGES], embed: usize, n_heads: usize) -> Self {
        let c_s: usize = channels.iter().sum();
        let heads = (0..n_heads)
            .map(|h| {
                let hp = format!("{prefix}.head{h}");
                Head {
                    w_k: Linear::new(vars, &format!("{hp}.w_k"), c_s, embed, false),
                    w_v: Linear::new(vars, &format!("{hp}.w_v"), c_s, embed, false),
                    w_q: std::array::from_fn(|i| {
                        Linear::new(vars, &format!("{hp}.w_q{i}"), channels[i], channels[i], false)
                    }),
                }
            })
            .collect();
        let ffn = std::array::from_fn(|i| {
            let fp = format!("{prefix}.ffn{i}");
            StageFfn {
                norm_in: LayerNorm::new(vars, &format!("{fp}.norm_in"), channels[i]),
                fc1: Linear::new(vars, &format!("{fp}.fc1"), channels[i], channels[i] * 4, true),
                fc2: Linear::new(vars, &format!("{fp}.fc2"), channels[i] * 4, channels[i], true),
                norm_out: LayerNorm::new(vars, &format!("{fp}.norm_out"), channels[i]),
            }
        });
        McsaLayer { heads, ffn }
    }

    /// One attention layer over the bundle; per stage, the head-averaged
    /// channel attention (transposed back to [B, d, C_i]) plus the
    /// head-averaged query residual feeds the stage FFN.
    fn forward(
        &self,
        tokens: &TokenBundle,
        c_s: usize,
        mut probe: Option<(&mut Probe, &str)>,
    ) -> Result<TokenBundle> {
        let s = tokens.concat()?;
        let n_heads = self.heads.len();
        let inv = 1.0 / n_heads as f32;

        // K and V are shared by all four stage queries
        let mut shared_kv = Vec::with_capacity(n_heads);
        for head in &self.heads {
            shared_kv.push((head.w_k.forward(&s)?, head.w_v.forward(&s)?));
        }

        let mut out_stages: Vec<Tensor> = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let mut csa_sum: Option<Tensor> = None;
            let mut q_sum: Option<Tensor> = None;
            for (h, head) in self.heads.iter().enumerate() {
                let (k, v) = (&shared_kv[h].0, &shared_kv[h].1);
                let q = head.w_q[i].forward(&tokens.stages[i])?;
                let label = probe
                    .as_ref()
                    .map(|(_, l)| format!("{l}.stage{i}.head{h}"))
                    .unwrap_or_default();
                let csa = channel_self_attention(
                    &q,
                    k,
                    v,
                    c_s,
                    probe.as_mut().map(|(p, _)| (&mut **p, label.as_str())),
                )?;
                csa_sum = Some(match csa_sum {
                    Some(acc) => acc.add(&csa)?,
                    None => csa,
                });
                q_sum = Some(match q_sum {
                    Some(acc) => acc.add(&q)?,
                    None => q,
                });
            }
            let m = csa_sum
                .unwrap()
                .mul_scalar(inv)
                .transpose_last2()?
                .add(&q_sum.unwrap().mul_scalar(inv))?;
            out_stages.push(self.ffn[i].forward(&m)?);
        }
        Ok(TokenBundle {
            stages: out_stages.try_into().map_err(|_| Error::Shape("stage count".into()))?,
            grid: tokens.grid,
        })
    }
}

struct Reconstruct {
    conv: Conv2d,
    bn: BatchNorm,
}

pub struct Uiqa {
    pub cfg: UiqaConfig,
    channels: [usize; STAGES],
    encode: [Conv2d; STAGES],
    layers: Vec<McsaLayer>,
    recon: [Reconstruct; STAGES],
}

impl Uiqa {
    pub fn new(vars: &mut Vars, prefix: &str, channels: &[usize; STAGES], cfg: &UiqaConfig) -> Result<Uiqa> {
        cfg.validate()?;
        let embed = cfg.embed_width(channels);
        let encode = std::array::from_fn(|i| {
            let k = cfg.patch / (1 << (i + 1));
            Conv2d::new(vars, &format!("{prefix}.encode{i}"), channels[i], channels[i], k, k, 0, 1, true)
        });
        let layers = (0..cfg.n_layers)
            .map(|j| McsaLayer::new(vars, &format!("{prefix}.layer{j}"), channels, embed, cfg.n_heads))
            .collect();
        let recon = std::array::from_fn(|i| Reconstruct {
            conv: Conv2d::new(vars, &format!("{prefix}.recon{i}.conv"), channels[i], channels[i], 3, 1, 1, 1, true),
            bn: BatchNorm::new(vars, &format!("{prefix}.recon{i}.bn"), channels[i]),
        });
        Ok(Uiqa { cfg: cfg.clone(), channels: *channels, encode, layers, recon })
    }

    /// Project every stage onto the shared (H/2P)x(W/2P) token grid.
    pub fn feature_encode(&self, pyr: &FeaturePyramid) -> Result<TokenBundle> {
        let mut grid = None;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let s = pyr.maps[i].shape();
            let k = self.cfg.patch / (1 << (i + 1));
            if s[2] % k != 0 || s[3] % k != 0 {
                return Err(Error::Config(format!(
                    "stage {i} map {}x{} is not divisible by its token kernel {k}; \
                     input H and W must be multiples of {}",
                    s[2],
                    s[3],
                    2 * self.cfg.patch
                )));
            }
            let g = (s[2] / k, s[3] / k);
            if let Some(prev) = grid {
                debug_assert_eq!(prev, g, "token grids must align across stages");
            }
            grid = Some(g);
            let projected = self.encode[i].forward(&pyr.maps[i])?;
            stages.push(to_tokens(&projected)?);
        }
        let grid = grid.unwrap();
        if grid == (1, 1) {
            log::warn!("degenerate single-token grid (input equals 2*patch); attention is trivial");
        }
        Ok(TokenBundle {
            stages: stages.try_into().map_err(|_| Error::Shape("stage count".into()))?,
            grid,
        })
    }

    /// Run a single attention layer over a token bundle (ablation and
    /// gradient-check hook).
    pub fn layer_forward(&self, index: usize, tokens: &TokenBundle) -> Result<TokenBundle> {
        let c_s: usize = self.channels.iter().sum();
        self.layers[index].forward(tokens, c_s, None)
    }

    /// Upsample stage tokens back to the stage resolution and apply
    /// conv -> batch norm -> relu with a residual onto the input map.
    pub fn reconstruct(&self, stage: usize, tokens: &Tensor, input_map: &Tensor, grid: (usize, usize), train: bool) -> Result<Tensor> {
        let s = input_map.shape();
        let t = tokens.transpose_last2()?;
        let small = t.reshape(&[s[0], self.channels[stage], grid.0, grid.1])?;
        let up = small.bilinear_resize(s[2], s[3])?;
        let conv = self.recon[stage].conv.forward(&up)?;
        let normed = self.recon[stage].bn.forward(&conv, train)?;
        normed.relu().add(input_map)
    }

    /// Full enhancement pass: encode, N_M attention layers (layer j consumes
    /// layer j-1 stage tokens), reconstruct every stage. Output shapes equal
    /// input shapes exactly.
    pub fn forward(&self, pyr: &FeaturePyramid, train: bool, mut probe: Option<&mut Probe>) -> Result<FeaturePyramid> {
        let c_s: usize = self.channels.iter().sum();
        let mut tokens = self.feature_encode(pyr)?;
        for (j, layer) in self.layers.iter().enumerate() {
            let label = format!("uiqa.layer{j}");
            tokens = layer.forward(
                &tokens,
                c_s,
                probe.as_deref_mut().map(|p| (p, label.as_str())),
            )?;
        }
        let mut maps = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            maps.push(self.reconstruct(i, &tokens.stages[i], &pyr.maps[i], tokens.grid, train)?);
        }
        Ok(FeaturePyramid {
            maps: maps.try_into().map_err(|_| Error::Shape("stage count".into()))?,
        })
    }
}
