//! Write the bundled demo scenario (and its building description) as JSON,
//! ready for the `thermobench generate` pipeline.
//!
//! Usage: demo_scenario <out_dir> [weeks] [seed]

use thermobench::synth;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| ".".into()));
    let weeks: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(36);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    std::fs::create_dir_all(&out)?;
    let scenario = synth::demo_scenario(weeks, seed);
    std::fs::write(out.join("scenario.json"), scenario.to_json()?)?;
    std::fs::write(out.join("building.json"), scenario.building.to_json()?)?;
    println!("wrote {}", out.join("scenario.json").display());
    Ok(())
}
