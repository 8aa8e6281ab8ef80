//! Run the synthetic end-to-end experiment and print its report as JSON.
//!
//! Usage: `cargo run --release --example desk_run -- [seed]`

use confroute::experiment::{run, DeskConfig};
use confroute::RngSeed;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(1);
    let config = DeskConfig {
        seed: RngSeed(seed),
        ..DeskConfig::default()
    };
    let start = std::time::Instant::now();
    let report = run(&config)?.report(config.per_token_s)?;
    let mut json = serde_json::to_value(&report)?;
    json.as_object_mut().unwrap().remove("curve");
    println!("{}", serde_json::to_string_pretty(&json)?);
    eprintln!("{:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
