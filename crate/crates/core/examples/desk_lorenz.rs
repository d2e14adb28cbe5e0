use std::time::Instant;

use fbf_core::filtering::{fbf_filter, FilterOptions};
use fbf_core::flows::FlowConfig;
use fbf_core::latent_ssm::ConditionerConfig;
use fbf_core::model::{ModelConfig, Variant};
use fbf_core::nn::Activation;
use fbf_core::systems::{simulate, SystemConfig};
use fbf_core::training::{fit, smoothed_objective, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map_or(2000, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(5e-4, |s| s.parse().unwrap());
    let units: usize = args.get(3).map_or(64, |s| s.parse().unwrap());
    let m = 10;
    let sys = SystemConfig::Lorenz96 { dim: m, forcing: 8.0, dt: 0.01, obs_var: 1.0 };
    let data = simulate(&sys, 220, 200, 5).unwrap();
    let train = data.slice(0..200);
    let test = data.slice(200..220);
    let flow = FlowConfig { blocks: 4, layers: 3, units, activation: Activation::Relu, ..FlowConfig::default() };
    let mc = ModelConfig {
        state_dim: m,
        meas_dim: m,
        variant: Variant::Fbf,
        state_flow: flow.clone(),
        meas_flow: flow,
        conditioner: ConditionerConfig { layers: 3, units, activation: Activation::Relu },
    };
    let tc = TrainConfig { epochs: iters, lr, seed: 2, ..TrainConfig::default() };
    let t0 = Instant::now();
    let tf = fit(&mc, &train, &tc).unwrap();
    let sm = smoothed_objective(&tf.history, 50);
    println!("train {:.1}s obj start {:.3} end {:.3}", t0.elapsed().as_secs_f64(), sm[49.min(sm.len() - 1)], sm[sm.len() - 1]);
    let mut clim = vec![0.0; m];
    let mut cnt = 0.0;
    for tr in &train.trajectories {
        for k in 0..=tr.k() {
            for j in 0..m {
                clim[j] += tr.state(k)[j];
            }
            cnt += 1.0;
        }
    }
    clim.iter_mut().for_each(|v| *v /= cnt);
    let (mut fe, mut ce, mut n) = (0.0, 0.0, 0.0);
    for tr in &test.trajectories {
        let run = fbf_filter(&tf, &tr.measurements, FilterOptions::default()).unwrap();
        for k in 1..=tr.k() {
            let mean = tf.model.state_flow().inverse_point(&tf.params, run.beliefs[k].mean.as_slice()).unwrap();
            for j in 0..m {
                fe += (mean[j] - tr.state(k)[j]).powi(2);
                ce += (clim[j] - tr.state(k)[j]).powi(2);
                n += 1.0;
            }
        }
    }
    println!("FBF(T^-1 mean) rmse {:.4} clim rmse {:.4}", (fe / n).sqrt(), (ce / n).sqrt());
}
