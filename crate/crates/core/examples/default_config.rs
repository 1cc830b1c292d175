//! Prints the full default pipeline config as JSON.

fn main() {
    let cfg = intention_monitor::pipeline::PipelineConfig::default();
    println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
}
