//! Runs the reference pipeline and prints the report table.
//!
//! `cargo run --release --example reference -- [out_dir] [config.toml]`

use std::time::Instant;

use memaudit::par::Exec;
use memaudit::pipeline::{render_table, run_all, PipelineConfig};

fn main() -> memaudit::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "target/reference-run".into());
    let cfg = match args.get(2) {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::reference(),
    };
    let t = Instant::now();
    let report = run_all(&cfg, out.as_ref(), Exec::Parallel)?;
    println!("{}", render_table(&report));
    for d in &report.defenses {
        println!("{:?}", d);
    }
    for d in &report.distributions {
        println!(
            "{} {} member median {:.4} nonmember median {:.4}",
            d.model_tag,
            d.field.name(),
            d.member.median,
            d.nonmember.median
        );
    }
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
