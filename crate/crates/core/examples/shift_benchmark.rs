//! Runs the synthetic shift benchmark for the seeds given on the command
//! line and prints one JSON report per seed. `BENCH_CONFIG` may name a TOML
//! file whose fields overlay the default benchmark settings.

use std::time::Instant;

use semi2i::benchmark::{run, BenchmarkConfig};

fn overlay(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = BenchmarkConfig::default();
    if let Ok(path) = std::env::var("BENCH_CONFIG") {
        let mut table = toml::Table::try_from(&cfg)?;
        overlay(&mut table, toml::from_str(&std::fs::read_to_string(path)?)?);
        cfg = toml::Value::Table(table).try_into()?;
    }
    let seeds: Vec<u64> = std::env::args().skip(1).map(|s| s.parse()).collect::<Result<_, _>>()?;
    for seed in if seeds.is_empty() { vec![0] } else { seeds } {
        let t = Instant::now();
        let r = run(&BenchmarkConfig { seed, ..cfg.clone() })?;
        println!("{}", serde_json::to_string(&r)?);
        eprintln!(
            "seed {seed}: {:.1}s style {:.3} edge {:.3} iou unet {:.3} semi {:.3} gw {:.3} hm {:.3} g {:.3}->{:.3}",
            t.elapsed().as_secs_f64(),
            r.style_ratio(),
            r.edge_ratio(),
            r.iou_unet.overall.unwrap_or(f64::NAN),
            r.iou_semi2i.overall.unwrap_or(f64::NAN),
            r.iou_gray_world.overall.unwrap_or(f64::NAN),
            r.iou_hist_match.overall.unwrap_or(f64::NAN),
            r.first_total_g,
            r.total_g_at_200
        );
    }
    Ok(())
}
