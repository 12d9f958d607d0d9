use dst_core::bench::{scaling_sweep, to_text, BenchSpec};
use dst_core::encoders::Variant;

fn main() {
    let spec = BenchSpec {
        variants: vec![Variant::Gce, Variant::Glad],
        slot_counts: vec![5, 20, 40],
        warmup: 1,
        iters: 5,
        ..BenchSpec::default()
    };
    let report = scaling_sweep(&spec).unwrap();
    println!("{}", to_text(&report));
}
