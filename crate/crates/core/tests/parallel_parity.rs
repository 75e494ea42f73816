//! The rayon path and the sequential path must agree bit for bit.

use std::sync::Mutex;

use mcl_core::augment::{two_views, AugPolicy};
use mcl_core::optim::{Lars, OptimConfig};
use mcl_core::par;
use mcl_core::pyramid::{NetConfig, NetworkPair};
use mcl_core::ssl::{ssl_step, SslConfig};
use mcl_core::{SeededRng, Tensor};

// the switch is process-global
static SWITCH: Mutex<()> = Mutex::new(());

fn with_parallel<R>(on: bool, f: impl FnOnce() -> R) -> R {
    let _guard = SWITCH.lock().unwrap_or_else(|e| e.into_inner());
    par::set_enabled(on);
    let r = f();
    par::set_enabled(true);
    r
}

#[test]
fn training_steps_identical() {
    let cfg = NetConfig {
        stem_channels: 4,
        stage_channels: vec![4, 8, 8, 8],
        pyramid_channels: 8,
        head_convs: 1,
        proj_hidden: 16,
        embed_dim: 8,
        input_size: (32, 32),
        ..NetConfig::default()
    };
    let batch = Tensor::<f32>::from_fn(&[16, 3, 32, 32], |i| ((i * 7919) % 613) as f32 / 613.0);
    let policies = [AugPolicy::byol((32, 32), 0, true), AugPolicy::byol((32, 32), 1, true)];
    let run = || {
        let (a, b) = two_views(&batch, &policies, 4).unwrap();
        let mut pair = NetworkPair::<f32>::new(&cfg, 2).unwrap();
        let mut opt = Lars::new(OptimConfig::default(), &pair.online).unwrap();
        let mut losses = vec![];
        for step in 0..3 {
            let out = ssl_step(&mut pair, &mut opt, [&a, &b], &SslConfig::default(), 0.1, 0.99, SeededRng::new(step, 0)).unwrap();
            losses.push(out.total);
        }
        (losses, pair.online, pair.target)
    };
    let seq = with_parallel(false, run);
    let par = with_parallel(true, run);
    assert_eq!(seq.0, par.0);
    assert!(seq.1 == par.1 && seq.2 == par.2);
}
