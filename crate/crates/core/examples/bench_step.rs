//! Rough per-step timing for sizing toy-scale configs.
use mtuda_core::networks::{GenSpec, Generator, SegNet, SegNetSpec};
use ndarray::Array4;
use std::time::Instant;

fn main() {
    for (hw, w, d, b) in [(32usize, 8usize, 3usize, 4usize), (64, 16, 4, 4), (64, 16, 3, 2)] {
        let spec = SegNetSpec { in_channels: 1, num_classes: 5, base_width: w, depth: d };
        let net = SegNet::new(spec).unwrap();
        let ps = net.init_params(0).unwrap();
        let x = Array4::<f32>::from_elem((b, 1, hw, hw), 0.3);
        let t0 = Instant::now();
        let mut grads = ps.zeros_like();
        let n = 5;
        for _ in 0..n {
            let (y, cache) = net.forward_t(&ps, &x).unwrap();
            net.backward(&ps, &cache, &y, &mut grads).unwrap();
        }
        println!("segnet {hw}x{hw} w{w} d{d} b{b}: fwd+bwd {:.1} ms/step", t0.elapsed().as_secs_f64()*1000.0/n as f64);
    }
    for (hw, w, r, b) in [(64usize, 16usize, 4usize, 1usize), (32, 16, 4, 2), (32, 8, 3, 2)] {
        let spec = GenSpec { channels: 1, base_width: w, res_blocks: r, head_init_std: 0.0 };
        let gen = Generator::new(spec).unwrap();
        let ps = gen.init_params(0).unwrap();
        let x = Array4::<f32>::from_elem((b, 1, hw, hw), 0.3);
        let mut grads = ps.zeros_like();
        let t0 = Instant::now();
        let n = 5;
        for _ in 0..n {
            let (y, cache) = gen.forward_t(&ps, &x).unwrap();
            gen.backward(&ps, &cache, &y, &mut grads).unwrap();
        }
        println!("generator {hw}x{hw} w{w} r{r} b{b}: fwd+bwd {:.1} ms/step", t0.elapsed().as_secs_f64()*1000.0/n as f64);
    }
}
