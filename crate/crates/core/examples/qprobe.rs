//! Scratch probe: per-channel one-step residual variance. Not part of the build.

use std::collections::HashMap;
use stormsteer_core::dynamics::{generate_dataset, DynamicsConfig};
use stormsteer_core::field::GridSpec;

fn main() {
    let args: HashMap<String, f64> = std::env::args()
        .skip(1)
        .filter_map(|a| {
            let (k, v) = a.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect();
    let get = |k: &str, d: f64| args.get(k).copied().unwrap_or(d);
    let spec = GridSpec::new(get("h", 24.0) as usize, get("w", 24.0) as usize, 2, true, false).unwrap();
    let base = DynamicsConfig::defaults(spec.clone());
    let cfg = DynamicsConfig {
        seed: 7,
        wind_noise: get("noise", base.wind_noise),
        thermal_wind: get("tw", base.thermal_wind),
        wind_relax: get("wr", base.wind_relax),
        storm_rate: get("rate", base.storm_rate),
        ..base
    };
    let traj = generate_dataset(&cfg, get("years", 4.0) as usize, 0).unwrap();
    let ch = spec.num_channels();
    let mut var = vec![0.0f64; ch];
    let mut n = 0usize;
    for t in 0..traj.states.len() - 1 {
        let a = &traj.states[t].data;
        let b = &traj.states[t + 1].data;
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            var[i % ch] += (y - x) * (y - x);
        }
        n += spec.cells();
    }
    let noise_var = cfg.wind_noise * cfg.wind_noise * cfg.dt;
    for c in 0..ch {
        let v = var[c] / n as f64;
        let name = spec.channels[c].name();
        let extra = if name.starts_with('u') || name.starts_with('v') {
            format!("  noise_share={:.2}", noise_var / v)
        } else {
            String::new()
        };
        println!("{name:>4}: res_var={v:.6} res_std={:.4}{extra}", v.sqrt());
    }
}
