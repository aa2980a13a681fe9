use lucid_core::degrade::{sample_parameters, DegradationKind, DegradationLevel};
fn main() {
    let mut best: Vec<(u64, f64)> = (0..200u64)
        .map(|s| (s, sample_parameters(DegradationKind::Noise, DegradationLevel::L2, 48, 48, 2, s).noise_std.unwrap()))
        .collect();
    best.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (s, v) in best.iter().take(8) {
        println!("seed {s}: sigma {v:.4}");
    }
}
