use lucid_core::degrade::degrade_noise;
use lucid_core::fixtures::synth_image;
use lucid_core::metrics::{niqe, piqe, NiqeModel};

fn main() {
    let model = NiqeModel::bundled().unwrap();
    let clean = synth_image(192, 192, 77);
    let noisy = degrade_noise(&clean, 0.15, 7).unwrap();
    println!("clean niqe {:.10}", niqe(&clean, &model).unwrap());
    println!("clean piqe {:.10}", piqe(&clean).unwrap());
    println!("noisy niqe {:.10}", niqe(&noisy, &model).unwrap());
    println!("noisy piqe {:.10}", piqe(&noisy).unwrap());
}
