//! Pre-train on a synthetic academic graph, then compare venue ranking
//! after full and frozen fine-tuning against a randomly initialized encoder.
//!
//! cargo run --release --example transfer -- [epochs] [seeds]

use std::time::Instant;

use phe::encoder::EncoderConfig;
use phe::finetune::{build_task, evaluate, finetune, FinetuneConfig, FinetuneMode, Init, Split};
use phe::pretrain::{pretrain, PretrainConfig, SamplerConfig};
use phe::sampler::{temporal_split, SplitSpec};
use phe::structure::StructureConfig;
use phe::synth::{synth_academic, EdgeProbs, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> phe::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let split = SplitSpec::default();
    for seed in 0..seeds {
        let synth = SynthConfig {
            cites: EdgeProbs::NONE,
            ..Default::default()
        };
        let g = synth_academic(&synth, &mut ChaCha8Rng::seed_from_u64(seed))?.graph;
        let views = temporal_split(&g, &split)?;
        let pc = PretrainConfig {
            encoder: EncoderConfig {
                layers: 2,
                heads: 4,
                hidden: 32,
            },
            structure: StructureConfig {
                type_attention_dim: 16,
                ..Default::default()
            },
            sampler: SamplerConfig {
                width: 24,
                depth: 2,
                seeds_per_batch: 16,
                ..Default::default()
            },
            epochs,
            batches_per_epoch: 8,
            lr: 5e-3,
            seed,
            ..Default::default()
        };
        let t = Instant::now();
        let out = pretrain(&views.pretrain, &pc)?;
        let mut line = format!(
            "seed {seed}: pretrain {:.1}s, L1 {:.3} -> {:.3};",
            t.elapsed().as_secs_f64(),
            out.reports[0].l1,
            out.reports.last().map_or(f64::NAN, |r| r.l1)
        );
        let task = build_task(&g, &split, "published_at")?;
        let t = Instant::now();
        for (name, init, mode) in [
            ("scratch", Init::Scratch(pc.encoder), FinetuneMode::Full),
            ("full", Init::Pretrained(&out.best), FinetuneMode::Full),
            ("frozen", Init::Pretrained(&out.best), FinetuneMode::Frozen),
        ] {
            let c = FinetuneConfig {
                mode,
                seed,
                ..Default::default()
            };
            let r = finetune(&task, init, &c)?;
            let e = evaluate(&r.model, &task, Split::Test, &c)?;
            line += &format!(" {name} {:.4}", e.averages.ndcg);
        }
        println!("{line} (fine-tune {:.1}s)", t.elapsed().as_secs_f64());
    }
    Ok(())
}
