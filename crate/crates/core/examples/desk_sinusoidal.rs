use std::time::Instant;

use fbf_core::baselines::pf_run;
use fbf_core::filtering::{fbf_filter, sample_posterior, FilterOptions};
use fbf_core::flows::FlowConfig;
use fbf_core::latent_ssm::ConditionerConfig;
use fbf_core::metrics::{crps, rmse, SampleSet};
use fbf_core::model::{ModelConfig, Variant};
use fbf_core::nn::Activation;
use fbf_core::rng;
use fbf_core::systems::{make_ssm_interface, simulate, SystemConfig};
use fbf_core::training::{fit, smoothed_objective, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map_or(2000, |s| s.parse().unwrap());
    let lr: f64 = args.get(2).map_or(5e-4, |s| s.parse().unwrap());
    let variant = if args.get(3).map(|s| s.as_str()) == Some("prime") { Variant::FbfPrime } else { Variant::Fbf };
    let seed: u64 = args.get(4).map_or(1, |s| s.parse().unwrap());
    let sys = SystemConfig::Sinusoidal { q2: 0.1, r2: 0.05 };
    let data = simulate(&sys, 120, 50, seed).unwrap();
    let train = data.slice(0..100);
    let test = data.slice(100..120);
    let flow = FlowConfig { blocks: 4, layers: 3, units: 32, activation: Activation::Relu, ..FlowConfig::default() };
    let mc = ModelConfig {
        state_dim: 2,
        meas_dim: 2,
        variant,
        state_flow: flow.clone(),
        meas_flow: flow,
        conditioner: ConditionerConfig { layers: 3, units: 32, activation: Activation::Relu },
    };
    let tc = TrainConfig { epochs: iters, lr, seed, ..TrainConfig::default() };
    let t0 = Instant::now();
    let tf = fit(&mc, &train, &tc).unwrap();
    let sm = smoothed_objective(&tf.history, 50);
    println!("train {:.1}s obj start {:.3} end {:.3}", t0.elapsed().as_secs_f64(), sm[49.min(sm.len()-1)], sm[sm.len()-1]);
    let ssm = make_ssm_interface(&sys).unwrap();
    let (mut fr, mut fc, mut pr, mut pc) = (0.0, 0.0, 0.0, 0.0);
    for (i, tr) in test.trajectories.iter().enumerate() {
        let run = fbf_filter(&tf, &tr.measurements, FilterOptions::default()).unwrap();
        let k = tr.k();
        let mut data = Vec::new();
        for step in 1..=k {
            let s = sample_posterior(&tf, &run.beliefs[step], 1000, rng::derive_seed(7, "s", (i * 1000 + step) as u64)).unwrap();
            data.extend(s.into_data());
        }
        let truth: Vec<f64> = tr.states[2..].to_vec();
        let ss = SampleSet::new(k, 1000, 2, data).unwrap();
        fr += rmse(&truth, &ss).unwrap();
        fc += crps(&truth, &ss).unwrap();
        let mut pdata = Vec::new();
        let mut r = rng::stream(3, "pfs", i as u64);
        pf_run(&ssm, &tr.measurements, 2000, 11 + i as u64, |c| {
            pdata.extend(c.equal_weight_samples(2000, &mut r));
            Ok(())
        })
        .unwrap();
        let ps = SampleSet::new(k, 2000, 2, pdata).unwrap();
        pr += rmse(&truth, &ps).unwrap();
        pc += crps(&truth, &ps).unwrap();
    }
    println!("FBF rmse {:.4} crps {:.4} | PF rmse {:.4} crps {:.4} | ratio {:.3} {:.3}", fr / 20.0, fc / 20.0, pr / 20.0, pc / 20.0, fr / pr, fc / pc);
}
