mod common;

use common::bicubic_oracle;
use lemamba_core::data::{gen_synthetic_dataset, SyntheticSpec};
use lemamba_core::net::{LeMambaNet, NetConfig};
use lemamba_core::train::{bicubic_baseline, predict};
use lemamba_core::Tensor;

fn small() -> NetConfig {
    NetConfig { num_scales: 2, dims: vec![4, 8], blocks_per_scale: vec![1, 1], window: (2, 2), state_dim: 4, ..NetConfig::toy() }
}

fn samples(n: usize, side: usize) -> Vec<lemamba_core::data::FusionSample> {
    gen_synthetic_dataset(&SyntheticSpec { n, bands: 4, height: side, width: side, ratio: 4, pan_bands: 1, seed: 0 }).unwrap()
}

#[test]
fn zero_weights_reproduce_bicubic() {
    for cfg in [small(), NetConfig::toy()] {
        let net = LeMambaNet::new(cfg).unwrap();
        let mut params = net.init_params().unwrap();
        params.zero_all();
        for s in samples(2, 32) {
            let fused = predict(&net, &params, &s).unwrap();
            let oracle = bicubic_oracle(&s.lrms, 4);
            assert!(fused.max_abs_diff(&oracle) <= 1e-6, "{}", fused.max_abs_diff(&oracle));
            assert!(bicubic_baseline(&s).unwrap().max_abs_diff(&oracle) <= 1e-6);
        }
    }
}

#[test]
fn untrained_network_departs_from_bicubic() {
    let net = LeMambaNet::new(small()).unwrap();
    let params = net.init_params().unwrap();
    let s = &samples(1, 16)[0];
    assert!(predict(&net, &params, s).unwrap().max_abs_diff(&bicubic_baseline(s).unwrap()) > 1e-4);
}

#[test]
fn wiring_variants_change_the_output() {
    let s = &samples(1, 16)[0];
    let run = |share: bool, adjacent: bool, skip: bool| -> Tensor {
        let cfg = NetConfig { state_share: share, adjacent_flow: adjacent, skip_flow: skip, ..small() };
        let net = LeMambaNet::new(cfg).unwrap();
        // identical weights across variants where the layouts coincide
        let mut params = net.init_params().unwrap();
        for (_, t) in params.iter_mut() {
            let n = t.numel();
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 37 + n) % 17) as f32 / 40.0 - 0.2);
        }
        predict(&net, &params, s).unwrap()
    };
    let (none, adj, both) = (run(false, false, false), run(true, true, false), run(true, true, true));
    assert!(none.max_abs_diff(&adj) > 0.0);
    assert!(adj.max_abs_diff(&both) > 0.0);
    assert!(none.max_abs_diff(&both) > 0.0);
}

#[test]
fn input_size_must_match_the_architecture() {
    let net = LeMambaNet::new(small()).unwrap();
    let params = net.init_params().unwrap();
    let mut s = samples(1, 16).remove(0);
    s.pan = Tensor::zeros(&[1, 12, 12]);
    assert!(predict(&net, &params, &s).is_err());
}
