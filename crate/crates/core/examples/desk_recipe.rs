//! Runs the desk-scale recipe and prints the method table.
//!
//! `cargo run --release --example desk_recipe -- [train_sequences] [beta] [joint_epochs]`

use adaptive_depth::pipeline::recipe::{run_recipe, RecipeConfig};
use adaptive_depth::Temperature;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = RecipeConfig::default();
    if let Some(n) = std::env::args().nth(1) {
        cfg.train_sequences = n.parse().expect("sequence count");
    }
    if let Some(b) = std::env::args().nth(2) {
        cfg.temperature = Temperature::new(b.parse().expect("beta")).expect("positive beta");
    }
    if let Some(e) = std::env::args().nth(3) {
        cfg.joint.epochs = e.parse().expect("joint epochs");
    }
    let out = run_recipe(&cfg).expect("recipe");
    let steady = cfg.memory_size;
    for (name, trace) in &out.traces {
        let m = trace.metrics(steady).expect("metrics");
        println!(
            "{name:12} rmse {:.4} mae {:.4} soft {:?} hard {:.1}",
            m.rmse, m.mae, m.mean_soft_count, m.mean_hard_count
        );
    }
    let matched = out.matched.metrics(0).unwrap().rmse;
    let mixed = out.mixed.metrics(0).unwrap().rmse;
    println!("matched {matched:.4} mixed {mixed:.4}; {:.0}s", out.seconds);
}
