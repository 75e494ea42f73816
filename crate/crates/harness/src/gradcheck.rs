//! Finite-difference check of the complete multi-level loss on a tiny
//! two-level network in `f64`.

use mcl_core::gradcheck::{finite_diff_check, FdOptions, FdReport};
use mcl_core::loss::{LossConfig, MatchMode};
use mcl_core::pyramid::{NetConfig, NetworkPair};
use mcl_core::ssl::{forward_loss, SslConfig};
use mcl_core::{Result, SeededRng, Tensor};

/// Two levels, 16x16 inputs, four channels throughout.
pub fn tiny_net() -> NetConfig {
    NetConfig {
        in_channels: 3,
        stem_channels: 3,
        stage_channels: vec![4, 4],
        pyramid_levels: 2,
        pyramid_channels: 4,
        head_convs: 1,
        proj_hidden: 6,
        embed_dim: 4,
        input_size: (16, 16),
        ..NetConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct LossCheck {
    pub mode: MatchMode,
    pub report: FdReport,
    /// Parameter names of the coordinates classified as exact zeros.
    pub zero_params: Vec<String>,
}

/// Checks the gradient of the symmetric total loss over a batch of four
/// deterministic views with respect to every online parameter.
pub fn full_loss_check(mode: MatchMode) -> Result<LossCheck> {
    let base = NetworkPair::<f64>::new(&tiny_net(), 11)?;
    let view = |k: f64| Tensor::from_fn(&[4, 3, 16, 16], move |i| ((i as f64 * 0.029 + k).sin() + 1.0) / 2.0);
    let (a, b) = (view(0.3), view(2.1));
    let cfg = SslConfig {
        loss: LossConfig {
            mode,
            ..LossConfig::default()
        },
        boundary_smoothing: None,
    };
    let rng = SeededRng::new(5, 0);
    let eval = |params: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut pair = base.clone();
        for (p, v) in pair.online.params.iter_mut().zip(params) {
            p.value = v.clone();
        }
        let lg = forward_loss(&mut pair, [&a, &b], &cfg, rng, false)?;
        let total = lg.total();
        if !grads {
            return Ok((total, vec![]));
        }
        let g = lg.backward()?;
        Ok((total, g.into_iter().map(|g| g.unwrap_or_else(|| Tensor::zeros(&[0]))).collect()))
    };
    let params: Vec<Tensor<f64>> = base.online.params.iter().map(|p| p.value.clone()).collect();
    let (_, analytic) = eval(&params, true)?;
    let report = finite_diff_check(|ps| eval(ps, false).map(|r| r.0), &params, &analytic, &FdOptions::default())?;
    let mut zero_params: Vec<String> = report.zeros.iter().map(|z| base.online.params[z.0].name.clone()).collect();
    zero_params.dedup();
    Ok(LossCheck { mode, report, zero_params })
}
