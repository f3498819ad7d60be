//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test -p uwseg --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::time::Instant;
use uwseg::data::{Dataset, Sample};
use uwseg::decoder::{MaaConfig, MaaDecoder};
use uwseg::encoder::{EncoderConfig, FeaturePyramid, Probe};
use uwseg::eval::{argmax_labels, boundary_band, count_flops, evaluate, miou, ConfusionMatrix};
use uwseg::loss::{bce, one_hot, scharr_edges, total_loss, LossWeights, BCE_EPS, IGNORE_LABEL, SCHARR_KX, SCHARR_KY};
#[allow(unused_imports)]
use uwseg::eval::count_flops as _count_flops_reexport_check;
use uwseg::model::{DecoderKind, Model, ModelConfig};
use uwseg::nn::Vars;
use uwseg::tensor::{grad_check, rng::SplitMix64, Tensor};
use uwseg::train::{apply_checkpoint, load_checkpoint, save_checkpoint, train_loop, TrainConfig};
use uwseg::uiqa::{TokenBundle, Uiqa, UiqaConfig};

const TINY_CH: [usize; 4] = [2, 3, 4, 5];

fn tiny_pyramid(seed: u64, channels: &[usize; 4], h: usize, w: usize) -> FeaturePyramid {
    let mut rng = SplitMix64::new(seed);
    let maps = std::array::from_fn(|i| {
        Tensor::rand_uniform(&[1, channels[i], h >> (i + 2), w >> (i + 2)], -1.0, 1.0, &mut rng)
    });
    FeaturePyramid { maps }
}

fn tiny_model_config(n_cls: usize, decoder: DecoderKind) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            channels: [4, 8, 12, 16],
            depths: [1, 1, 1, 1],
            sr_ratios: [4, 2, 1, 1],
            heads: [1, 2, 2, 4],
            ffn_expansion: 2,
        },
        uiqa: Some(UiqaConfig { patch: 16, n_layers: 1, n_heads: 2, embed: None }),
        decoder,
        embed: 8,
        n_cls,
        dropout_p: 0.1,
    }
}

/// Criterion 1: gradient integrity of the attention layer, reconstruction,
/// fusion, and the end-to-end loss, against central finite differences.
#[test]
fn criterion_01_gradient_integrity() {
    let t0 = Instant::now();
    let tol = 1e-2f32;

    // (a) one channel-attention layer, differentiated through stage tokens
    let mut vars = Vars::new(1);
    let uiqa = Uiqa::new(
        &mut vars,
        "uiqa",
        &TINY_CH,
        &UiqaConfig { patch: 16, n_layers: 1, n_heads: 2, embed: None },
    )
    .unwrap();
    let pyr = tiny_pyramid(2, &TINY_CH, 64, 64);
    let bundle = uiqa.feature_encode(&pyr).unwrap();
    let x = Tensor::from_vec(bundle.stages[0].to_vec(), &bundle.stages[0].shape()).unwrap();
    let err_a = grad_check(
        |x| {
            let stages = [
                x.clone(),
                bundle.stages[1].clone(),
                bundle.stages[2].clone(),
                bundle.stages[3].clone(),
            ];
            let out = uiqa.layer_forward(0, &TokenBundle { stages, grid: bundle.grid })?;
            let mut acc = out.stages[0].sum_all();
            for i in 1..4 {
                acc = acc.add(&out.stages[i].mul(&out.stages[i])?.sum_all())?;
            }
            Ok(acc)
        },
        &x,
        1e-2,
    )
    .unwrap();
    assert!(err_a < tol, "(a) mcsa layer: {err_a}");

    // (b) reconstruction, through the stage tokens
    let tok = Tensor::from_vec(bundle.stages[1].to_vec(), &bundle.stages[1].shape()).unwrap();
    let err_b = grad_check(
        |t| Ok(uiqa.reconstruct(1, t, &pyr.maps[1], bundle.grid, true)?.mean_all()),
        &tok,
        1e-2,
    )
    .unwrap();
    assert!(err_b < tol, "(b) reconstruct: {err_b}");

    // (c) fusion1 + fusion2 + fuse, through a low-level and a high-level map
    let mut vars = Vars::new(3);
    let maa = MaaDecoder::new(
        &mut vars,
        "decoder",
        &TINY_CH,
        &MaaConfig { embed: 6, n_cls: 2, dropout_p: 0.0 },
    )
    .unwrap();
    let fpyr = tiny_pyramid(4, &TINY_CH, 32, 32);
    for probe_stage in [0usize, 3] {
        let x = Tensor::from_vec(fpyr.maps[probe_stage].to_vec(), &fpyr.maps[probe_stage].shape()).unwrap();
        let err_c = grad_check(
            |x| {
                let mut maps = [
                    fpyr.maps[0].clone(),
                    fpyr.maps[1].clone(),
                    fpyr.maps[2].clone(),
                    fpyr.maps[3].clone(),
                ];
                maps[probe_stage] = x.clone();
                let f = maa.fuse(&FeaturePyramid { maps }, true)?;
                f.fusion1
                    .sum_all()
                    .add(&f.fusion2.sum_all())?
                    .add(&f.fusion.mul(&f.fusion)?.sum_all())
            },
            &x,
            1e-2,
        )
        .unwrap();
        assert!(err_c < tol, "(c) fusion via stage {probe_stage}: {err_c}");
    }

    // (d) total loss end-to-end on a 2-class 32x32 input
    let mut rng = SplitMix64::new(5);
    let logits = Tensor::rand_uniform(&[1, 2, 32, 32], -1.5, 1.5, &mut rng);
    let mut labels = vec![0u8; 32 * 32];
    for y in 8..24 {
        for x in 8..24 {
            labels[y * 32 + x] = 1;
        }
    }
    let target = one_hot(&labels, 1, 32, 32, 2).unwrap();
    let err_d = grad_check(
        |l| Ok(total_loss(l, &target, &LossWeights::default(), 1)?.total),
        &logits,
        1e-2,
    )
    .unwrap();
    assert!(err_d < tol, "(d) total loss: {err_d}");

    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 120, "gradient suite took {elapsed:?}");
    println!(
        "ACCEPTANCE 1 PASS: gradient integrity (mcsa {err_a:.2e}, reconstruct {err_b:.2e}, loss {err_d:.2e}) in {elapsed:?}"
    );
}

/// Criterion 2: every attention row, channel attention and spatial attention
/// alike, sums to one within 1e-6 across 10 seeds.
#[test]
fn criterion_02_attention_normalization() {
    let cfg = tiny_model_config(3, DecoderKind::Maa);
    let model = Model::new(&cfg, 0).unwrap();
    let mut checked = 0usize;
    for seed in 0..10u64 {
        let mut rng = SplitMix64::new(seed * 7 + 1);
        let x = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
        let mut probe = Probe::default();
        let mut drop_rng = SplitMix64::new(0);
        model.forward(&x, false, &mut drop_rng, Some(&mut probe)).unwrap();
        let mut saw_esa = false;
        let mut saw_csa = false;
        for (name, probs) in &probe.attention {
            saw_esa |= name.starts_with("encoder.");
            saw_csa |= name.starts_with("uiqa.");
            let s = probs.shape();
            let cols = s[s.len() - 1];
            for row in probs.to_vec().chunks(cols) {
                let sum: f64 = row.iter().map(|v| *v as f64).sum();
                assert!((sum - 1.0).abs() < 1e-6, "seed {seed} {name}: row sum {sum}");
                checked += 1;
            }
        }
        assert!(saw_esa && saw_csa, "probe must cover both attention kinds");
    }
    println!("ACCEPTANCE 2 PASS: {checked} attention rows sum to 1 +- 1e-6 across 10 seeds");
}

/// Criterion 3: shape contracts across input sizes — enhancement preserves
/// pyramid shapes, MAA decodes at stride 8, the all-MLP baseline at stride 4.
#[test]
fn criterion_03_shape_contracts() {
    for &(h, w) in &[(64, 64), (64, 128), (128, 64), (128, 128), (128, 192), (192, 192)] {
        let maa = Model::new(&tiny_model_config(3, DecoderKind::Maa), 1).unwrap();
        let x = Tensor::zeros(&[1, 3, h, w]);
        let mut probe = Probe::default();
        let mut rng = SplitMix64::new(0);

        // the enhanced pyramid preserves the encoder pyramid shapes exactly
        let enc_pyr = maa.encoder.forward(&x, None).unwrap();
        let enhanced = maa.uiqa.as_ref().unwrap().forward(&enc_pyr, false, None).unwrap();
        for i in 0..4 {
            assert_eq!(enhanced.maps[i].shape(), enc_pyr.maps[i].shape(), "{h}x{w} stage {i}");
        }

        let out = maa.forward(&x, false, &mut rng, Some(&mut probe)).unwrap();
        assert_eq!(out.native_stride, 8);
        assert_eq!(out.native.shape(), vec![1, 3, h / 8, w / 8], "{h}x{w}");
        assert_eq!(out.full.shape(), vec![1, 3, h, w]);

        let allmlp = Model::new(&tiny_model_config(3, DecoderKind::AllMlp), 1).unwrap();
        let out = allmlp.forward(&x, false, &mut rng, None).unwrap();
        assert_eq!(out.native_stride, 4);
        assert_eq!(out.native.shape(), vec![1, 3, h / 4, w / 4], "{h}x{w}");
    }
    println!("ACCEPTANCE 3 PASS: shape contracts hold over H,W in {{64,128,192}}");
}

/// Criterion 4: with every enhancement weight zeroed (norm scales left at
/// one), the enhanced pyramid equals the input pyramid bit-for-bit.
#[test]
fn criterion_04_identity_reduction() {
    let mut vars = Vars::new(9);
    let uiqa = Uiqa::new(
        &mut vars,
        "uiqa",
        &TINY_CH,
        &UiqaConfig { patch: 16, n_layers: 2, n_heads: 2, embed: None },
    )
    .unwrap();
    for p in vars.params() {
        if !p.name.ends_with(".gamma") {
            p.tensor.fill(0.0);
        }
    }
    let pyr = tiny_pyramid(10, &TINY_CH, 64, 64);
    for train in [true, false] {
        let out = uiqa.forward(&pyr, train, None).unwrap();
        for i in 0..4 {
            let a = pyr.maps[i].to_vec();
            let b = out.maps[i].to_vec();
            assert!(
                a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "train={train} stage {i} not bit-identical"
            );
        }
    }
    println!("ACCEPTANCE 4 PASS: zeroed enhancement reduces to the identity bit-exactly");
}

/// Criterion 5: the edge operator's kernels, step response, constant-input
/// silence, and bit-exact flip equivariance.
#[test]
fn criterion_05_edge_operator() {
    assert_eq!(SCHARR_KX, [[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]]);
    assert_eq!(SCHARR_KY, [[-3.0, -10.0, -3.0], [0.0, 0.0, 0.0], [3.0, 10.0, 3.0]]);

    // vertical step response is 1/sqrt(2) after normalization
    let (h, w) = (12usize, 12usize);
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 6..w {
            data[y * w + x] = 1.0;
        }
    }
    let m = Tensor::from_vec(data, &[1, 1, h, w]).unwrap();
    let e = scharr_edges(&m).unwrap().to_vec();
    let expect = 1.0 / 2.0f32.sqrt();
    for y in 0..h {
        assert!((e[y * w + 5] - expect).abs() < 1e-5, "row {y}: {}", e[y * w + 5]);
        assert!((e[y * w + 6] - expect).abs() < 1e-5);
        assert_eq!(e[y * w + 2], 0.0);
    }

    // constant input is exactly silent
    let c = scharr_edges(&Tensor::full(&[1, 2, 9, 9], 0.37)).unwrap();
    assert!(c.to_vec().iter().all(|v| *v == 0.0));

    // flip equivariance, bit-exact
    let mut rng = SplitMix64::new(11);
    let m = Tensor::rand_uniform(&[1, 3, 14, 11], 0.0, 1.0, &mut rng);
    let flip = |t: &Tensor| -> Tensor {
        let s = t.shape();
        let (hh, ww) = (s[2], s[3]);
        let v = t.to_vec();
        let mut out = vec![0.0f32; v.len()];
        for p in 0..s[0] * s[1] {
            for y in 0..hh {
                for x in 0..ww {
                    out[p * hh * ww + y * ww + x] = v[p * hh * ww + y * ww + (ww - 1 - x)];
                }
            }
        }
        Tensor::from_vec(out, &s).unwrap()
    };
    let a = scharr_edges(&flip(&m)).unwrap().to_vec();
    let b = flip(&scharr_edges(&m).unwrap()).to_vec();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    println!("ACCEPTANCE 5 PASS: edge operator kernels, step response, and flip equivariance");
}

/// Criterion 6: loss closed forms at the uniform and perfect points.
#[test]
fn criterion_06_loss_closed_forms() {
    // BCE at p = 0.5 equals ln 2
    let p = Tensor::full(&[64], 0.5);
    let mut rng = SplitMix64::new(13);
    let t: Vec<f32> = (0..64).map(|_| if rng.chance(0.5) { 1.0 } else { 0.0 }).collect();
    let t = Tensor::from_vec(t, &[64]).unwrap();
    let l = bce(&p, &t, BCE_EPS).unwrap().item();
    assert!((l - std::f32::consts::LN_2).abs() < 1e-6, "{l}");

    // perfect hard prediction: the total collapses to the clamp floor
    let labels = vec![0u8; 16 * 16];
    let target = one_hot(&labels, 1, 16, 16, 2).unwrap();
    let logits: Vec<f32> = target.to_vec().iter().map(|t| if *t == 1.0 { 30.0 } else { -30.0 }).collect();
    let logits = Tensor::from_vec(logits, &[1, 2, 16, 16]).unwrap();
    let out = total_loss(&logits, &target, &LossWeights::default(), 1).unwrap();
    assert!(out.total.item() <= 1e-5, "perfect-prediction loss {}", out.total.item());

    println!(
        "ACCEPTANCE 6 PASS: BCE(0.5) = ln2 +- 1e-6; perfect prediction loss {:.2e} <= 1e-5",
        out.total.item()
    );
}

/// Criterion 7: mIoU equals a brute-force set-based oracle on 200 random
/// 3-class label pairs, plus the perfect and disjoint endpoints.
#[test]
fn criterion_07_miou_oracle() {
    let mut rng = SplitMix64::new(17);
    for case in 0..200 {
        let gt: Vec<u8> = (0..256).map(|_| rng.below(3) as u8).collect();
        let pred: Vec<u8> = (0..256).map(|_| rng.below(3) as u8).collect();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt, IGNORE_LABEL).unwrap();
        let (per, mean) = miou(&cm).unwrap();
        let mut oracle_sum = 0.0f64;
        let mut defined = 0usize;
        for c in 0..3u8 {
            let inter = gt.iter().zip(&pred).filter(|(g, p)| **g == c && **p == c).count();
            let uni = gt.iter().zip(&pred).filter(|(g, p)| **g == c || **p == c).count();
            if uni == 0 {
                assert!(per[c as usize].is_none());
                continue;
            }
            let iou = inter as f64 / uni as f64;
            assert!((per[c as usize].unwrap() - iou).abs() < 1e-9, "case {case}");
            oracle_sum += iou;
            defined += 1;
        }
        assert!((mean - oracle_sum / defined as f64).abs() < 1e-9, "case {case}");
    }

    let gt: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&gt, &gt, IGNORE_LABEL).unwrap();
    assert_eq!(miou(&cm).unwrap().1, 1.0);

    let pred: Vec<u8> = gt.iter().map(|g| (g + 1) % 3).collect();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &gt, IGNORE_LABEL).unwrap();
    assert_eq!(miou(&cm).unwrap().1, 0.0);

    println!("ACCEPTANCE 7 PASS: mIoU matches the set-based oracle on 200 random pairs");
}

/// Criterion 8: cost trends — decoder FLOPs ordering, MAA width ordering,
/// per-head parameter slope, FLOP linearity in the layer count, and the
/// baseline parameter total.
#[test]
fn criterion_08_cost_trends() {
    let paper_encoder = EncoderConfig {
        depths: [1, 1, 1, 1], // depth does not affect the decoder buckets
        ..Default::default()
    };

    // decoder FLOPs: MAA below ALL-MLP at matched width, and at the
    // published pairing (MAA 128 vs ALL-MLP 256)
    let decoder_flops = |kind: DecoderKind, embed: usize| -> u64 {
        let cfg = ModelConfig {
            encoder: paper_encoder.clone(),
            uiqa: None,
            decoder: kind,
            embed,
            n_cls: 6,
            dropout_p: 0.1,
        };
        let model = Model::new(&cfg, 0).unwrap();
        let report = count_flops(&model, 64, 64).unwrap();
        report
            .per_module
            .iter()
            .find(|m| m.name == "decoder")
            .map(|m| m.flops)
            .unwrap_or(0)
    };
    let maa_128 = decoder_flops(DecoderKind::Maa, 128);
    let allmlp_128 = decoder_flops(DecoderKind::AllMlp, 128);
    let allmlp_256 = decoder_flops(DecoderKind::AllMlp, 256);
    assert!(maa_128 < allmlp_128, "matched width: {maa_128} vs {allmlp_128}");
    assert!(maa_128 < allmlp_256, "published pairing: {maa_128} vs {allmlp_256}");

    // whole-model FLOPs ordering over the MAA width
    let total_flops = |embed: usize| -> u64 {
        let cfg = ModelConfig {
            encoder: paper_encoder.clone(),
            uiqa: None,
            decoder: DecoderKind::Maa,
            embed,
            n_cls: 6,
            dropout_p: 0.1,
        };
        let model = Model::new(&cfg, 0).unwrap();
        count_flops(&model, 64, 64).unwrap().flops
    };
    let (f128, f256, f512) = (total_flops(128), total_flops(256), total_flops(512));
    assert!(f128 < f256 && f256 < f512, "{f128} {f256} {f512}");

    // per-head parameter slope at the published dimensions
    let uiqa_params = |n_heads: usize| -> u64 {
        let mut vars = Vars::new(0);
        let _ = Uiqa::new(
            &mut vars,
            "uiqa",
            &[32, 64, 160, 256],
            &UiqaConfig { patch: 32, n_layers: 4, n_heads, embed: None },
        )
        .unwrap();
        vars.params().iter().map(|p| p.tensor.numel() as u64).sum()
    };
    let counts: Vec<u64> = (1..=5).map(uiqa_params).collect();
    for win in counts.windows(2) {
        assert!(win[1] > win[0], "params must strictly increase in the head count");
    }
    let slope = (counts[4] - counts[0]) as f64 / 4.0;
    assert!(
        (slope - 2.48e6).abs() <= 0.4e6,
        "params/head slope {slope:.0} outside 2.48M +- 0.4M"
    );

    // FLOPs linear in the attention layer count: residual of a linear fit
    // below 1% of the mean
    let flops_at_layers = |n_layers: usize| -> f64 {
        let cfg = ModelConfig {
            encoder: paper_encoder.clone(),
            uiqa: Some(UiqaConfig { patch: 16, n_layers, n_heads: 2, embed: None }),
            decoder: DecoderKind::Maa,
            embed: 128,
            n_cls: 6,
            dropout_p: 0.1,
        };
        let model = Model::new(&cfg, 0).unwrap();
        count_flops(&model, 64, 64).unwrap().flops as f64
    };
    let ys: Vec<f64> = (1..=5).map(flops_at_layers).collect();
    let n = ys.len() as f64;
    let xs: Vec<f64> = (1..=5).map(|v| v as f64).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let slope_fit = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xm) * (y - ym))
        .sum::<f64>()
        / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
    let intercept = ym - slope_fit * xm;
    let max_resid = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope_fit * x)).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_resid / ym < 0.01,
        "FLOPs vs layer count deviates from linear by {:.3}%",
        100.0 * max_resid / ym
    );
    assert!(slope_fit > 0.0, "FLOPs must increase with the layer count");

    // reconstructed baseline (encoder + ALL-MLP at width 256, 6 classes)
    // lands within 15% of the published 3.72M parameters
    let cfg = ModelConfig {
        encoder: EncoderConfig::default(),
        uiqa: None,
        decoder: DecoderKind::AllMlp,
        embed: 256,
        n_cls: 6,
        dropout_p: 0.1,
    };
    let model = Model::new(&cfg, 0).unwrap();
    let total = model.param_count() as f64;
    assert!(
        (total - 3.72e6).abs() / 3.72e6 <= 0.15,
        "baseline params {total} outside 3.72M +- 15%"
    );

    // parameters strictly increase in the layer count as well
    let uiqa_params_layers = |n_layers: usize| -> u64 {
        let mut vars = Vars::new(0);
        let _ = Uiqa::new(
            &mut vars,
            "uiqa",
            &[32, 64, 160, 256],
            &UiqaConfig { patch: 32, n_layers, n_heads: 4, embed: None },
        )
        .unwrap();
        vars.params().iter().map(|p| p.tensor.numel() as u64).sum()
    };
    assert!(uiqa_params_layers(2) > uiqa_params_layers(1));

    println!(
        "ACCEPTANCE 8 PASS: cost trends (decoder {maa_128} < {allmlp_256}; widths {f128} < {f256} < {f512}; slope {:.2}M/head; baseline {:.2}M)",
        slope / 1e6,
        total / 1e6
    );
}

/// Criterion 9: overfit smoke test — a small-capacity model memorizes 8
/// synthetic 128x128 scenes within the iteration and wall-clock budget.
#[test]
fn criterion_09_overfit_smoke() {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            channels: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            sr_ratios: [8, 4, 2, 1],
            heads: [1, 2, 4, 8],
            ffn_expansion: 2,
        },
        uiqa: Some(UiqaConfig { patch: 16, n_layers: 1, n_heads: 1, embed: None }),
        decoder: DecoderKind::Maa,
        embed: 64,
        n_cls: 4,
        dropout_p: 0.1,
    };
    let model = Model::new(&cfg, 7).unwrap();
    let dataset = Dataset::synthetic(7, 4, 128, 8);
    let tc = TrainConfig {
        iters: 2000,
        batch_size: 4,
        base_lr: 1e-3,
        eval_every: 50,
        early_stop_miou: Some(0.95),
        seed: 7,
        ..Default::default()
    };
    let report = train_loop(&model, &dataset, &tc).unwrap();
    let miou = report.final_miou.expect("train mIoU");
    assert!(report.iterations_run <= 2000);
    assert!(miou >= 0.95, "train mIoU {miou}");
    assert!(
        report.final_loss < 0.1 * report.initial_loss,
        "loss {} -> {} is not a 10x reduction",
        report.initial_loss,
        report.final_loss
    );

    // smoothed (window 50) loss decreases from iteration 100 onward when the
    // run lasts long enough to compare
    let smoothed = |trace: &[(usize, f32, f32, f32, f32)], end: usize| -> f32 {
        let lo = end.saturating_sub(50);
        let window = &trace[lo..end];
        window.iter().map(|t| t.2).sum::<f32>() / window.len() as f32
    };
    if report.trace.len() >= 200 {
        let early = smoothed(&report.trace, 150);
        let late = smoothed(&report.trace, report.trace.len());
        assert!(late < early, "smoothed loss {early} -> {late} did not decrease");
    }

    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 900, "overfit run took {elapsed:?}");
    println!(
        "ACCEPTANCE 9 PASS: overfit mIoU {miou:.4}, loss {:.3} -> {:.3} in {} iters, {elapsed:?}",
        report.initial_loss, report.final_loss, report.iterations_run
    );
}

/// Criterion 10: ablation direction — enabling the edge term does not cost
/// test mIoU beyond noise, and boundary-band IoU improves in at least 2 of 3
/// paired seeds.
#[test]
fn criterion_10_edge_loss_ablation() {
    // pinned noise margin for the paired mIoU comparison
    const NOISE_MARGIN: f64 = 0.03;
    let n_cls = 4usize;
    let size = 64usize;

    let train_scenes = |seed: u64| Dataset::synthetic(10_000 + seed * 997, n_cls, size, 200);
    let test_scenes = |seed: u64| Dataset::synthetic(500_000 + seed * 131, n_cls, size, 40);

    let run = |seed: u64, lambda1: f32| -> (f64, f64) {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                channels: [8, 16, 32, 64],
                depths: [1, 1, 1, 1],
                sr_ratios: [8, 4, 2, 1],
                heads: [1, 2, 4, 8],
                ffn_expansion: 2,
            },
            uiqa: Some(UiqaConfig { patch: 16, n_layers: 1, n_heads: 1, embed: None }),
            decoder: DecoderKind::Maa,
            embed: 32,
            n_cls,
            dropout_p: 0.1,
        };
        let model = Model::new(&cfg, seed).unwrap();
        let dataset = train_scenes(seed);
        let tc = TrainConfig {
            iters: 500,
            batch_size: 4,
            base_lr: 2e-3,
            weights: LossWeights { lambda1, lambda2: 3.0 },
            edge_radius: 1,
            seed,
            ..Default::default()
        };
        train_loop(&model, &dataset, &tc).unwrap();
        let test = test_scenes(seed);
        let report = evaluate(&model, &test.samples, Some(2)).unwrap();
        (report.miou, report.band_miou.unwrap())
    };

    let mut base = Vec::new();
    let mut ell = Vec::new();
    for seed in 1..=3u64 {
        base.push(run(seed, 0.0));
        ell.push(run(seed, 1.0));
    }
    let mean = |v: &[(f64, f64)], i: usize| -> f64 {
        v.iter().map(|t| if i == 0 { t.0 } else { t.1 }).sum::<f64>() / v.len() as f64
    };
    let miou_base = mean(&base, 0);
    let miou_ell = mean(&ell, 0);
    let band_wins = base
        .iter()
        .zip(&ell)
        .filter(|((_, b_base), (_, b_ell))| b_ell > b_base)
        .count();

    println!(
        "ablation detail: mIoU base {miou_base:.4} vs ELL {miou_ell:.4}; band IoU pairs {:?} vs {:?}",
        base.iter().map(|t| t.1).collect::<Vec<_>>(),
        ell.iter().map(|t| t.1).collect::<Vec<_>>()
    );
    assert!(
        miou_ell >= miou_base - NOISE_MARGIN,
        "edge loss cost {:.4} mIoU, beyond the {NOISE_MARGIN} noise margin",
        miou_base - miou_ell
    );
    assert!(
        band_wins >= 2,
        "boundary-band IoU improved in only {band_wins} of 3 seeds"
    );
    println!(
        "ACCEPTANCE 10 PASS: edge loss keeps mIoU ({miou_base:.4} -> {miou_ell:.4}) and improves band IoU in {band_wins}/3 seeds"
    );
}

/// Criterion 11: identical seeds produce bit-identical loss traces and
/// checkpoint files.
#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &std::path::Path| {
        let model = Model::new(&tiny_model_config(3, DecoderKind::Maa), 21).unwrap();
        let dataset = Dataset::synthetic(21, 3, 64, 4);
        let tc = TrainConfig {
            iters: 20,
            batch_size: 2,
            base_lr: 5e-4,
            seed: 21,
            out_dir: Some(out.to_path_buf()),
            augment: Some(uwseg::data::AugmentPolicy {
                scale_range: (0.75, 1.5),
                crop: (64, 64),
                hflip_p: 0.5,
            }),
            ..Default::default()
        };
        train_loop(&model, &dataset, &tc).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a.trace, b.trace, "loss traces must be bit-identical");
    let read = |p: &std::path::Path, ext: &str| std::fs::read(p.with_extension(ext)).unwrap();
    let (ca, cb) = (a.checkpoint.unwrap(), b.checkpoint.unwrap());
    assert_eq!(read(&ca, "weights"), read(&cb, "weights"));
    assert_eq!(read(&ca, "manifest"), read(&cb, "manifest"));
    println!("ACCEPTANCE 11 PASS: identical seeds give bit-identical traces and checkpoints");
}

/// Criterion 12: checkpoint round-trips preserve eval logits bit-exactly and
/// corruption is detected with the parameter named.
#[test]
fn criterion_12_checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(&tiny_model_config(3, DecoderKind::Maa), 31).unwrap();
    let stem = dir.path().join("ckpt");
    save_checkpoint(&stem, &model, None).unwrap();

    let restored = Model::new(&tiny_model_config(3, DecoderKind::Maa), 99).unwrap();
    let ckpt = load_checkpoint(&stem).unwrap();
    apply_checkpoint(&restored, &ckpt, None).unwrap();
    let mut rng = SplitMix64::new(1);
    let x = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let a = model.forward_eval(&x).unwrap().full.to_vec();
    let b = restored.forward_eval(&x).unwrap().full.to_vec();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

    // corrupt one tensor's shape in the manifest
    let mpath = stem.with_extension("manifest");
    let text = std::fs::read_to_string(&mpath).unwrap();
    let corrupted: String = text
        .lines()
        .map(|l| {
            if l.starts_with("tensor encoder.stage0.opm.proj.bias") {
                l.replace(" 4 ", " 5 ")
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&mpath, corrupted).unwrap();
    let err = match load_checkpoint(&stem) {
        Err(e) => e.to_string(),
        Ok(c) => apply_checkpoint(&model, &c, None).unwrap_err().to_string(),
    };
    assert!(err.contains("encoder.stage0.opm.proj.bias"), "{err}");

    // predictions on a memorized sample also survive the round trip
    let labels_a = argmax_labels(&model.forward_eval(&x).unwrap().full);
    let labels_b = argmax_labels(&restored.forward_eval(&x).unwrap().full);
    assert_eq!(labels_a, labels_b);

    println!("ACCEPTANCE 12 PASS: checkpoint round-trip is bit-exact; corruption names '{}'", "encoder.stage0.opm.proj.bias");
}

// Keep the boundary-band helper exercised against a direct definition.
#[test]
fn boundary_band_sanity() {
    let mut labels = vec![0u8; 16 * 16];
    for y in 0..16 {
        for x in 8..16 {
            labels[y * 16 + x] = 1;
        }
    }
    // boundary pixels are x in {7, 8}; two cross dilations reach 5..=10
    let band = boundary_band(&labels, 16, 16, 2);
    for y in 0..16 {
        for x in 0..16 {
            let expected = (5..=10).contains(&x);
            assert_eq!(band[y * 16 + x], expected, "({y},{x})");
        }
    }
}

// The evaluation path used by the ablation: model wiring sanity on a couple
// of scenes (fast).
#[test]
fn evaluate_runs_on_synthetic_scenes() {
    let model = Model::new(&tiny_model_config(4, DecoderKind::Maa), 3).unwrap();
    let ds = Dataset::synthetic(3, 4, 64, 2);
    let report = evaluate(&model, &ds.samples, Some(2)).unwrap();
    assert!(report.miou >= 0.0 && report.miou <= 1.0);
    assert!(report.band_miou.unwrap() >= 0.0);
    let _unused: Vec<&Sample> = ds.samples.iter().collect();
}
