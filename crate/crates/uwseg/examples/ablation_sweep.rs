use uwseg::data::Dataset;
use uwseg::encoder::EncoderConfig;
use uwseg::eval::evaluate;
use uwseg::loss::LossWeights;
use uwseg::model::{DecoderKind, Model, ModelConfig};
use uwseg::train::{train_loop, TrainConfig};
use uwseg::uiqa::UiqaConfig;

fn main() {
    uwseg::tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(500);
    let lr: f32 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(2e-3);
    let radius: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(1);
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
            n_cls: 4,
            dropout_p: 0.1,
        };
        let model = Model::new(&cfg, seed).unwrap();
        let dataset = Dataset::synthetic(10_000 + seed * 997, 4, 64, 200);
        let tc = TrainConfig {
            iters,
            batch_size: 4,
            base_lr: lr,
            weights: LossWeights { lambda1, lambda2: 3.0 },
            edge_radius: radius,
            seed,
            ..Default::default()
        };
        train_loop(&model, &dataset, &tc).unwrap();
        let test = Dataset::synthetic(500_000 + seed * 131, 4, 64, 40);
        let report = evaluate(&model, &test.samples, Some(2)).unwrap();
        (report.miou, report.band_miou.unwrap())
    };
    let t0 = std::time::Instant::now();
    println!("iters={iters} lr={lr} radius={radius}");
    let (mut base, mut ell) = (Vec::new(), Vec::new());
    for seed in 1..=3u64 {
        let b = run(seed, 0.0);
        let e = run(seed, 1.0);
        println!("seed {seed}: base {:.4}/{:.4} | ell {:.4}/{:.4}", b.0, b.1, e.0, e.1);
        base.push(b);
        ell.push(e);
    }
    let m = |v: &[(f64, f64)]| v.iter().map(|t| t.0).sum::<f64>() / v.len() as f64;
    let wins = base.iter().zip(&ell).filter(|(b, e)| e.1 > b.1).count();
    println!("mean miou base {:.4} ell {:.4} (delta {:+.4}); band wins {wins}/3; {:?}",
        m(&base), m(&ell), m(&ell) - m(&base), t0.elapsed());
}
