//! Four-stage hierarchical transformer encoder.
//!
//! Each stage shrinks the grid with an overlapped patch-merging convolution,
//! then runs pre-norm blocks of spatially-reduced self-attention and a
//! mix feed-forward (depthwise 3x3 between two linears), and closes with a
//! layer norm. The stages emit a feature pyramid at strides 4/8/16/32.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, Vars};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;

/// Records attention distributions during a forward pass (test hook).
#[derive(Default)]
pub struct Probe {
    pub attention: Vec<(String, Tensor)>,
}

impl Probe {
    pub fn push(&mut self, name: String, probs: Tensor) {
        self.attention.push((name, probs));
    }
}

/// Encoder hyperparameters. The defaults are the widely used small
/// hierarchical-backbone recipe (depths 2/2/2/2, reduction 8/4/2/1, heads
/// 1/2/5/8, expansion 4); every field is configurable.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Stage widths C1..C4; strictly increasing, divisible by head counts.
    pub channels: [usize; STAGES],
    /// Blocks per stage.
    pub depths: [usize; STAGES],
    /// Key/value spatial reduction per stage.
    pub sr_ratios: [usize; STAGES],
    /// Attention heads per stage.
    pub heads: [usize; STAGES],
    /// Hidden expansion of the mix feed-forward.
    pub ffn_expansion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [32, 64, 160, 256],
            depths: [2, 2, 2, 2],
            sr_ratios: [8, 4, 2, 1],
            heads: [1, 2, 5, 8],
            ffn_expansion: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 1..STAGES {
            if self.channels[i] <= self.channels[i - 1] {
                return Err(Error::Config(format!(
                    "encoder channels must be strictly increasing, got {:?}",
                    self.channels
                )));
            }
        }
        for i in 0..STAGES {
            if self.channels[i] % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: channels {} not divisible by heads {}",
                    self.channels[i], self.heads[i]
                )));
            }
            if self.depths[i] == 0 || self.sr_ratios[i] == 0 || self.heads[i] == 0 {
                return Err(Error::Config(format!("stage {i}: zero depth/sr/heads")));
            }
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn_expansion must be >= 1".into()));
        }
        Ok(())
    }
}

/// The four stage maps at strides 4/8/16/32.
#[derive(Debug)]
pub struct FeaturePyramid {
    pub maps: [Tensor; STAGES],
}

impl FeaturePyramid {
    pub fn shapes(&self) -> [Vec<usize>; STAGES] {
        [
            self.maps[0].shape(),
            self.maps[1].shape(),
            self.maps[2].shape(),
            self.maps[3].shape(),
        ]
    }
}

/// [B,C,h,w] -> [B, h*w, C]
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.transpose_last2()
}

/// [B, h*w, C] -> [B,C,h,w]
pub fn to_map(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = t.shape();
    t.transpose_last2()?.reshape(&[s[0], s[2], h, w])
}

// ---------------------------------------------------------------------------
// Overlapped patch merging
// ---------------------------------------------------------------------------

pub struct OverlapPatchMerge {
    pub(crate) proj: Conv2d,
    norm: LayerNorm,
}

impl OverlapPatchMerge {
    fn new(vars: &mut Vars, prefix: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        OverlapPatchMerge {
            proj: Conv2d::new(vars, &format!("{prefix}.proj"), in_ch, out_ch, k, stride, padding, 1, true),
            norm: LayerNorm::new(vars, &format!("{prefix}.norm"), out_ch),
        }
    }

    /// Strided conv + channel layer norm; returns the merged map and grid.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, usize, usize)> {
        let y = self.proj.forward(x)?;
        let s = y.shape();
        let (h, w) = (s[2], s[3]);
        let t = self.norm.forward(&to_tokens(&y)?)?;
        Ok((to_map(&t, h, w)?, h, w))
    }
}

// ---------------------------------------------------------------------------
// Efficient self-attention
// ---------------------------------------------------------------------------

pub struct EfficientAttn {
    q: Linear,
    k: Linear,
    v: Linear,
    pub(crate) proj: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
    heads: usize,
    sr_ratio: usize,
    dim: usize,
}

impl EfficientAttn {
    fn new(vars: &mut Vars, prefix: &str, dim: usize, heads: usize, sr_ratio: usize) -> Self {
        let sr = (sr_ratio > 1).then(|| {
            (
                Conv2d::new(vars, &format!("{prefix}.sr"), dim, dim, sr_ratio, sr_ratio, 0, 1, true),
                LayerNorm::new(vars, &format!("{prefix}.sr_norm"), dim),
            )
        });
        EfficientAttn {
            q: Linear::new(vars, &format!("{prefix}.q"), dim, dim, true),
            k: Linear::new(vars, &format!("{prefix}.k"), dim, dim, true),
            v: Linear::new(vars, &format!("{prefix}.v"), dim, dim, true),
            proj: Linear::new(vars, &format!("{prefix}.proj"), dim, dim, true),
            sr,
            heads,
            sr_ratio,
            dim,
        }
    }

    pub fn forward(&self, t: &Tensor, h: usize, w: usize, probe: Option<(&mut Probe, &str)>) -> Result<Tensor> {
        if self.sr_ratio > 1 && (h % self.sr_ratio != 0 || w % self.sr_ratio != 0) {
            return Err(Error::Shape(format!(
                "sr_ratio {} does not divide grid {h}x{w}",
                self.sr_ratio
            )));
        }
        let q = self.q.forward(t)?;
        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                let reduced = conv.forward(&to_map(t, h, w)?)?;
                norm.forward(&to_tokens(&reduced)?)?
            }
            None => t.clone(),
        };
        let k = self.k.forward(&kv_src)?;
        let v = self.v.forward(&kv_src)?;

        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut probe = probe;
        for hd in 0..self.heads {
            let qh = q.narrow(2, hd * dh, dh)?;
            let kh = k.narrow(2, hd * dh, dh)?;
            let vh = v.narrow(2, hd * dh, dh)?;
            let logits = qh.bmm(&kh.transpose_last2()?)?.mul_scalar(scale);
            let probs = logits.softmax(2)?;
            if let Some((p, label)) = probe.as_mut() {
                p.push(format!("{label}.head{hd}"), probs.clone());
            }
            head_outs.push(probs.bmm(&vh)?);
        }
        let merged = crate::tensor::concat(&head_outs, 2)?;
        self.proj.forward(&merged)
    }
}

// ---------------------------------------------------------------------------
// Mix feed-forward
// ---------------------------------------------------------------------------

pub struct MixFfn {
    fc1: Linear,
    dw: Conv2d,
    fc2: Linear,
    hidden: usize,
}

impl MixFfn {
    fn new(vars: &mut Vars, prefix: &str, dim: usize, expansion: usize) -> Self {
        let hidden = dim * expansion;
        MixFfn {
            fc1: Linear::new(vars, &format!("{prefix}.fc1"), dim, hidden, true),
            dw: Conv2d::new(vars, &format!("{prefix}.dw"), hidden, hidden, 3, 1, 1, hidden, true),
            fc2: Linear::new(vars, &format!("{prefix}.fc2"), hidden, dim, true),
            hidden,
        }
    }

    pub fn forward(&self, t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let s = t.shape();
        if s[1] != h * w {
            return Err(Error::Shape(format!(
                "mix_ffn token count {} != grid {h}x{w}",
                s[1]
            )));
        }
        let x = self.fc1.forward(t)?;
        let map = x.transpose_last2()?.reshape(&[s[0], self.hidden, h, w])?;
        let conv = self.dw.forward(&map)?.gelu();
        let tokens = to_tokens(&conv)?;
        self.fc2.forward(&tokens)
    }
}

// ---------------------------------------------------------------------------
// Blocks and stages
// ---------------------------------------------------------------------------

struct Block {
    norm1: LayerNorm,
    attn: EfficientAttn,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn forward(&self, t: &Tensor, h: usize, w: usize, probe: Option<(&mut Probe, &str)>) -> Result<Tensor> {
        let a = self.attn.forward(&self.norm1.forward(t)?, h, w, probe)?;
        let t = t.add(&a)?;
        let f = self.ffn.forward(&self.norm2.forward(&t)?, h, w)?;
        t.add(&f)
    }
}

struct Stage {
    opm: OverlapPatchMerge,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

pub struct Encoder {
    stages: Vec<Stage>,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(vars: &mut Vars, prefix: &str, cfg: &EncoderConfig) -> Result<Encoder> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let in_ch = if i == 0 { 3 } else { cfg.channels[i - 1] };
            let (k, s, p) = if i == 0 { (7, 4, 3) } else { (3, 2, 1) };
            let sp = format!("{prefix}.stage{i}");
            let opm = OverlapPatchMerge::new(vars, &format!("{sp}.opm"), in_ch, cfg.channels[i], k, s, p);
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    let bp = format!("{sp}.block{j}");
                    Block {
                        norm1: LayerNorm::new(vars, &format!("{bp}.norm1"), cfg.channels[i]),
                        attn: EfficientAttn::new(vars, &format!("{bp}.attn"), cfg.channels[i], cfg.heads[i], cfg.sr_ratios[i]),
                        norm2: LayerNorm::new(vars, &format!("{bp}.norm2"), cfg.channels[i]),
                        ffn: MixFfn::new(vars, &format!("{bp}.ffn"), cfg.channels[i], cfg.ffn_expansion),
                    }
                })
                .collect();
            let norm = LayerNorm::new(vars, &format!("{sp}.norm"), cfg.channels[i]);
            stages.push(Stage { opm, blocks, norm });
        }
        Ok(Encoder { stages, cfg: cfg.clone() })
    }

    /// Produce the stride-4/8/16/32 pyramid for an image batch.
    pub fn forward(&self, image: &Tensor, mut probe: Option<&mut Probe>) -> Result<FeaturePyramid> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("encoder expects [B,3,H,W], got {s:?}")));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::Shape(format!(
                "encoder input {}x{} must be divisible by 32 (stage strides)",
                s[2], s[3]
            )));
        }
        let mut map = image.clone();
        let mut maps = Vec::with_capacity(STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            let (merged, h, w) = stage.opm.forward(&map)?;
            let mut t = to_tokens(&merged)?;
            for (j, block) in stage.blocks.iter().enumerate() {
                let label = format!("encoder.stage{i}.block{j}");
                t = block.forward(&t, h, w, probe.as_deref_mut().map(|p| (p, label.as_str())))?;
            }
            t = stage.norm.forward(&t)?;
            map = to_map(&t, h, w)?;
            maps.push(map.clone());
        }
        Ok(FeaturePyramid {
            maps: maps.try_into().map_err(|_| Error::Shape("stage count".into()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, rng::SplitMix64};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: [4, 8, 12, 16],
            depths: [1, 1, 1, 1],
            sr_ratios: [4, 2, 1, 1],
            heads: [1, 2, 2, 4],
            ffn_expansion: 2,
        }
    }

    #[test]
    fn pyramid_shapes_default_config() {
        let mut vars = Vars::new(0);
        let enc = Encoder::new(&mut vars, "encoder", &EncoderConfig::default()).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let pyr = enc.forward(&x, None).unwrap();
        assert_eq!(pyr.maps[0].shape(), vec![1, 32, 16, 16]);
        assert_eq!(pyr.maps[1].shape(), vec![1, 64, 8, 8]);
        assert_eq!(pyr.maps[2].shape(), vec![1, 160, 4, 4]);
        assert_eq!(pyr.maps[3].shape(), vec![1, 256, 2, 2]);
    }

    #[test]
    fn pyramid_shape_contract_up_to_256() {
        let mut vars = Vars::new(0);
        let enc = Encoder::new(&mut vars, "encoder", &tiny_cfg()).unwrap();
        let cfg = tiny_cfg();
        for h in [64usize, 128, 192, 256] {
            for w in [64usize, 256] {
                let pyr = enc.forward(&Tensor::zeros(&[1, 3, h, w]), None).unwrap();
                for i in 0..STAGES {
                    let s = pyr.maps[i].shape();
                    assert_eq!(
                        s,
                        vec![1, cfg.channels[i], h >> (i + 2), w >> (i + 2)],
                        "{h}x{w} stage {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn doubling_width_doubles_tokens() {
        let mut vars = Vars::new(0);
        let enc = Encoder::new(&mut vars, "encoder", &tiny_cfg()).unwrap();
        let a = enc.forward(&Tensor::zeros(&[1, 3, 64, 64]), None).unwrap();
        let b = enc.forward(&Tensor::zeros(&[1, 3, 64, 128]), None).unwrap();
        for i in 0..STAGES {
            let (sa, sb) = (a.maps[i].shape(), b.maps[i].shape());
            assert_eq!(sa[2] * sa[3] * 2, sb[2] * sb[3], "stage {i}");
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut vars = Vars::new(0);
        let enc = Encoder::new(&mut vars, "encoder", &tiny_cfg()).unwrap();
        let err = enc.forward(&Tensor::zeros(&[1, 3, 60, 64]), None).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }

    #[test]
    fn batch_independence_and_permutation_equivariance() {
        let mut vars = Vars::new(7);
        let enc = Encoder::new(&mut vars, "encoder", &tiny_cfg()).unwrap();
        let mut rng = SplitMix64::new(1);
        let img1 = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let img2 = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let cat = |a: &Tensor, b: &Tensor| crate::tensor::concat(&[a.clone(), b.clone()], 0).unwrap();

        let fwd = |x: &Tensor| enc.forward(x, None).unwrap();
        let p12 = fwd(&cat(&img1, &img2));
        let p21 = fwd(&cat(&img2, &img1));
        let single = fwd(&img1);
        for i in 0..STAGES {
            let v12 = p12.maps[i].to_vec();
            let v21 = p21.maps[i].to_vec();
            let half = v12.len() / 2;
            // permutation equivariance: swapping inputs swaps outputs bit-exactly
            assert_eq!(&v12[..half], &v21[half..], "stage {i}");
            assert_eq!(&v12[half..], &v21[..half], "stage {i}");
            // per-sample independence: batched output equals single-sample output
            assert_eq!(&v12[..half], single.maps[i].to_vec().as_slice(), "stage {i}");
        }

        // identical images in a batch -> identical per-sample outputs
        let pii = fwd(&cat(&img1, &img1));
        for i in 0..STAGES {
            let v = pii.maps[i].to_vec();
            let half = v.len() / 2;
            assert_eq!(&v[..half], &v[half..], "stage {i}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut vars = Vars::new(3);
        let enc = Encoder::new(&mut vars, "encoder", &tiny_cfg()).unwrap();
        let mut rng = SplitMix64::new(9);
        let x = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let mut probe = Probe::default();
        enc.forward(&x, Some(&mut probe)).unwrap();
        assert!(!probe.attention.is_empty());
        for (name, probs) in &probe.attention {
            let s = probs.shape();
            let m = s[2];
            let v = probs.to_vec();
            for row in v.chunks(m) {
                let sum: f64 = row.iter().map(|v| *v as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6, "{name}: row sum {sum}");
            }
        }
    }

    #[test]
    fn esa_single_token_is_value_projection() {
        // sr=1, heads=1, single token: softmax of a 1x1 logit matrix is 1,
        // so pre-projection attention output equals the value projection.
        let mut vars = Vars::new(11);
        let attn = EfficientAttn::new(&mut vars, "a", 6, 1, 1);
        // make the output projection the identity
        let mut eye = vec![0.0f32; 36];
        for i in 0..6 {
            eye[i * 6 + i] = 1.0;
        }
        attn.proj.weight.copy_from(&eye);
        let mut rng = SplitMix64::new(12);
        let t = Tensor::rand_uniform(&[1, 1, 6], -1.0, 1.0, &mut rng);
        let out = attn.forward(&t, 1, 1, None).unwrap();
        let v = attn.v.forward(&t).unwrap();
        for (a, b) in out.to_vec().iter().zip(v.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn esa_matches_per_head_oracle() {
        // brute-force f64 recomputation of the attention block from its weights
        let mut vars = Vars::new(21);
        let (dim, heads, n) = (6usize, 2usize, 4usize);
        let attn = EfficientAttn::new(&mut vars, "a", dim, heads, 1);
        let mut rng = SplitMix64::new(22);
        let t = Tensor::rand_uniform(&[1, n, dim], -1.0, 1.0, &mut rng);
        let out = attn.forward(&t, 2, 2, None).unwrap().to_vec();

        let lin = |x: &[f64], w: &Tensor, b: &Tensor, rows: usize| -> Vec<f64> {
            let wv = w.to_vec();
            let bv = b.to_vec();
            let cols = bv.len();
            let inner = wv.len() / cols;
            let mut y = vec![0.0f64; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let mut s = bv[c] as f64;
                    for i in 0..inner {
                        s += x[r * inner + i] * wv[i * cols + c] as f64;
                    }
                    y[r * cols + c] = s;
                }
            }
            y
        };
        let tv: Vec<f64> = t.to_vec().iter().map(|v| *v as f64).collect();
        let q = lin(&tv, &attn.q.weight, attn.q.bias.as_ref().unwrap(), n);
        let k = lin(&tv, &attn.k.weight, attn.k.bias.as_ref().unwrap(), n);
        let v = lin(&tv, &attn.v.weight, attn.v.bias.as_ref().unwrap(), n);
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged = vec![0.0f64; n * dim];
        for hd in 0..heads {
            for i in 0..n {
                let mut logits = vec![0.0f64; n];
                for j in 0..n {
                    let mut s = 0.0;
                    for d in 0..dh {
                        s += q[i * dim + hd * dh + d] * k[j * dim + hd * dh + d];
                    }
                    logits[j] = (s * scale as f64 * 1e7).round() / 1e7; // f32 scale rounding noise is below tolerance
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for d in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += (logits[j] - m).exp() / z * v[j * dim + hd * dh + d];
                    }
                    merged[i * dim + hd * dh + d] = acc;
                }
            }
        }
        let expect = lin(&merged, &attn.proj.weight, attn.proj.bias.as_ref().unwrap(), n);
        for (a, b) in out.iter().zip(&expect) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn mix_ffn_zero_input_zero_biases_gives_zero() {
        let mut vars = Vars::new(31);
        let ffn = MixFfn::new(&mut vars, "f", 4, 2);
        // biases init to zero already; zero input stays zero through linears and dwconv
        let t = Tensor::zeros(&[1, 4, 4]);
        let y = ffn.forward(&t, 2, 2).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mix_ffn_constant_field_constant_at_interior() {
        let mut vars = Vars::new(32);
        let ffn = MixFfn::new(&mut vars, "f", 3, 2);
        let t = Tensor::full(&[1, 16, 3], 0.5);
        let y = ffn.forward(&t, 4, 4).unwrap().to_vec();
        // interior tokens of a 4x4 grid: (1,1),(1,2),(2,1),(2,2)
        let interior = [5usize, 6, 9, 10];
        let reference = &y[interior[0] * 3..interior[0] * 3 + 3];
        for &tok in &interior[1..] {
            for c in 0..3 {
                assert!((y[tok * 3 + c] - reference[c]).abs() < 1e-5);
            }
        }
        // the zero-padded border differs from the interior
        let border = &y[0..3];
        assert!(border.iter().zip(reference).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn mix_ffn_gradients() {
        let mut vars = Vars::new(33);
        let ffn = MixFfn::new(&mut vars, "f", 3, 2);
        let mut rng = SplitMix64::new(34);
        let t = Tensor::rand_uniform(&[1, 4, 3], -1.0, 1.0, &mut rng);
        let err = grad_check(|t| Ok(ffn.forward(t, 2, 2)?.mean_all()), &t, 1e-3).unwrap();
        assert!(err < 1e-2, "err {err}");
    }

    #[test]
    fn opm_constant_input_conv_response() {
        // pre-norm conv response on a constant map is kernel_sum * value + bias
        // at interior pixels
        let mut vars = Vars::new(41);
        let opm = OverlapPatchMerge::new(&mut vars, "o", 3, 4, 7, 4, 3);
        let x = Tensor::full(&[1, 3, 32, 32], 0.25);
        let y = opm.proj.forward(&x).unwrap();
        let w = opm.proj.weight.to_vec();
        let b = opm.proj.bias.as_ref().unwrap().to_vec();
        let yv = y.to_vec();
        let s = y.shape();
        let (ho, wo) = (s[2], s[3]);
        for oc in 0..4 {
            let ksum: f64 = w[oc * 3 * 49..(oc + 1) * 3 * 49].iter().map(|v| *v as f64).sum();
            let expect = ksum * 0.25 + b[oc] as f64;
            // interior output pixels see the full kernel support
            for oy in 1..ho - 1 {
                for ox in 1..wo - 1 {
                    let got = yv[(oc * ho + oy) * wo + ox] as f64;
                    assert!((got - expect).abs() < 1e-4, "{got} vs {expect}");
                }
            }
        }
    }

    /// Closed-form parameter count for this encoder structure.
    fn analytic_param_count(cfg: &EncoderConfig) -> usize {
        let mut total = 0usize;
        for i in 0..STAGES {
            let c = cfg.channels[i];
            let (in_ch, k) = if i == 0 { (3, 7) } else { (cfg.channels[i - 1], 3) };
            total += in_ch * c * k * k + c; // patch-merge conv
            total += 2 * c; // patch-merge norm
            for _ in 0..cfg.depths[i] {
                total += 2 * c; // norm1
                total += 4 * (c * c + c); // q, k, v, proj
                if cfg.sr_ratios[i] > 1 {
                    total += c * c * cfg.sr_ratios[i] * cfg.sr_ratios[i] + c; // sr conv
                    total += 2 * c; // sr norm
                }
                total += 2 * c; // norm2
                let e = c * cfg.ffn_expansion;
                total += c * e + e; // fc1
                total += e * 9 + e; // depthwise 3x3
                total += e * c + c; // fc2
            }
            total += 2 * c; // stage norm
        }
        total
    }

    #[test]
    fn param_count_matches_analytic_oracle() {
        for cfg in [EncoderConfig::default(), tiny_cfg()] {
            let mut vars = Vars::new(0);
            let _ = Encoder::new(&mut vars, "encoder", &cfg).unwrap();
            let total: usize = vars.params().iter().map(|p| p.tensor.numel()).sum();
            assert_eq!(total, analytic_param_count(&cfg), "{cfg:?}");
        }
        // reconstructed B0 hyperparameters land close to the published scale
        let mut vars = Vars::new(0);
        let _ = Encoder::new(&mut vars, "encoder", &EncoderConfig::default()).unwrap();
        let total: usize = vars.params().iter().map(|p| p.tensor.numel()).sum();
        assert!((3_000_000..4_000_000).contains(&total), "encoder params {total}");
    }

    #[test]
    fn sr_ratio_must_divide_grid() {
        let mut vars = Vars::new(1);
        let attn = EfficientAttn::new(&mut vars, "a", 4, 1, 3);
        let t = Tensor::zeros(&[1, 16, 4]);
        assert!(attn.forward(&t, 4, 4, None).is_err());
    }
}
