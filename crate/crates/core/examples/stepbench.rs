//! Rough training-step timing at the two preset scales.
use madanet_core::autodiff::Graph;
use madanet_core::losses::{total_loss, BatchTargets, LossConfig};
use madanet_core::network::{MadaCenterNet, ModelConfig};
use madanet_core::nn::Mode;
use madanet_core::params::{Adam, ParamStore};
use madanet_core::synthdata::{generate_scene, SceneConfig};
use madanet_core::targets::make_targets;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn bench(size: usize, steps: usize) {
    let cfg = ModelConfig::desk(size);
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = MadaCenterNet::new(&mut store, &mut rng, &cfg).unwrap();
    let mut adam = Adam::new(&store, 1e-3, 0.9, 0.999);

    let scfg = SceneConfig { image_size: size, count_range: (5, 20), ..Default::default() };
    let scenes: Vec<_> = (0..4).map(|i| generate_scene(&scfg, i).unwrap()).collect();
    let mut images = ArrayD::<f32>::zeros(IxDyn(&[4, 3, size, size]));
    for (b, s) in scenes.iter().enumerate() {
        for ((c, y, x), &v) in s.image.indexed_iter() {
            images[[b, c, y, x]] = v;
        }
    }
    let lr_t: Vec<_> = scenes.iter().map(|s| make_targets::<f32>(&s.boxes, size, size, 1, 8).unwrap()).collect();
    let hr_t: Vec<_> = scenes.iter().map(|s| make_targets::<f32>(&s.boxes, size, size, 1, 4).unwrap()).collect();
    let lr_b = BatchTargets::stack(&lr_t).unwrap();
    let hr_b = BatchTargets::stack(&hr_t).unwrap();
    let lcfg = LossConfig::default();

    let t0 = Instant::now();
    for _ in 0..steps {
        let mut g = Graph::<f32>::new();
        let x = g.constant(images.clone());
        let out = net.forward(&mut g, &mut store, x, Mode::Train).unwrap();
        let loss = total_loss(&mut g, &out.lr.maps, &out.hr.maps, &lr_b, &hr_b, &lcfg).unwrap();
        g.backward(loss).unwrap();
        g.export_grads(&mut store);
        store.clip_grad_norm(10.0);
        adam.step(&mut store);
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("size {size}: {:.3} s/step (batch 4)", dt);
}

fn main() {
    bench(64, 10);
    bench(128, 6);
}
