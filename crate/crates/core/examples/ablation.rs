//! Trains every ablation variant on one synthetic cohort and prints test
//! metrics plus mean recalibration weights per dilation block.
//!
//! ```text
//! cargo run --release --example ablation -- [cohort] [n_patients] [seeds] [epochs]
//! ```
//! `cohort` is `mixed`, `trend` or `spike`. `VARIANTS=gru,conv` restricts the
//! variants; `FIRST_SEED` offsets the seed range; `SYNTH`, `MODEL` and `TRAIN`
//! take JSON objects merged over the respective configurations.

use adacare::data::{self, SplitFractions, SynthSpec};
use adacare::interpret::{self, Scope};
use adacare::model::{ModelConfig, Variant};
use adacare::seed;
use adacare::training::{self, TrainConfig};

fn main() -> adacare::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cohort = args.first().map(String::as_str).unwrap_or("mixed");
    let n_patients: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(15);

    let variants: Vec<Variant> = match std::env::var("VARIANTS") {
        Ok(list) => list
            .split(',')
            .map(|v| serde_json::from_value(serde_json::Value::String(v.to_string())).expect("variant name"))
            .collect(),
        Err(_) => Variant::ALL.to_vec(),
    };
    let first_seed: u64 = std::env::var("FIRST_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let (chronic, acute) = match cohort {
        "trend" => (0.5, 0.0),
        "spike" => (0.0, 0.5),
        _ => (0.3, 0.3),
    };
    let base: ModelConfig = overridden(
        "MODEL",
        ModelConfig {
            n_features: 20,
            hidden: 16,
            filters: 8,
            ..ModelConfig::default()
        },
    );
    for s in first_seed..first_seed + seeds {
        let spec = SynthSpec {
            seed: seed::derive(s, "synth", &[]),
            ..overridden(
                "SYNTH",
                SynthSpec {
                    n_patients,
                    chronic_fraction: chronic,
                    acute_fraction: acute,
                    ..SynthSpec::default()
                },
            )
        };
        let ds = data::impute(&data::synth_generate(&spec)?)?;
        let (train, valid, test) = data::prepare(&ds, 400, &SplitFractions::default(), seed::derive(s, "split", &[]))?;
        for v in variants.iter().copied() {
            let mcfg = base.clone().with_variant(v);
            let tcfg = TrainConfig {
                seed: seed::derive(s, "train", &[]),
                ..overridden(
                    "TRAIN",
                    TrainConfig {
                        max_epochs: epochs,
                        patience: 10,
                        ..TrainConfig::default()
                    },
                )
            };
            let t0 = std::time::Instant::now();
            let fit = training::fit(&train, &valid, &mcfg, &tcfg)?;
            let m = training::evaluate_dataset(&test, &fit.params, &mcfg)?;
            print!(
                "seed {s} {v:?}: auprc {:.4} auroc {:.4} best epoch {} ({:.1}s)",
                m.auprc,
                m.auroc,
                fit.best_epoch,
                t0.elapsed().as_secs_f64()
            );
            if mcfg.use_conv {
                let outs = training::predict(&test, &fit.params, &mcfg)?;
                let traces: Vec<_> = outs
                    .into_iter()
                    .zip(&test.patients)
                    .map(|(o, p)| (o.trace.with_feature_names(&test.feature_names), p.group.clone().unwrap_or_default()))
                    .collect();
                let conv = interpret::aggregate_importance(&traces, Scope::ConvByRate)?;
                let raw = interpret::aggregate_importance(&traces, Scope::Raw)?;
                for g in &conv.groups {
                    let w: Vec<String> = conv.rows.iter().map(|r| format!("{:.3}", conv.cell(r, g).unwrap())).collect();
                    print!("\n    {g}: conv by rate [{}]", w.join(" "));
                    if mcfg.use_raw_recal {
                        print!("  raw top3 {:?}", &raw.ranking(g).unwrap()[..3]);
                    }
                }
            }
            println!();
        }
    }
    Ok(())
}

fn overridden<T: serde::Serialize + serde::de::DeserializeOwned>(var: &str, base: T) -> T {
    let Ok(patch) = std::env::var(var) else {
        return base;
    };
    let mut doc = serde_json::to_value(base).expect("config serializes");
    let patch: serde_json::Value = serde_json::from_str(&patch).expect("override is JSON");
    for (k, v) in patch.as_object().expect("override is an object") {
        doc[k] = v.clone();
    }
    serde_json::from_value(doc).expect("valid override")
}
