//! Scratch probe for training convergence. Not part of the build.

use std::collections::HashMap;
use std::sync::Arc;
use stormsteer_core::dynamics::{generate_dataset, DynamicsConfig};
use stormsteer_core::field::GridSpec;
use stormsteer_core::forecaster::{train, TrainConfig};
use stormsteer_core::schedule::NoiseSchedule;

fn main() {
    let args: HashMap<String, f64> = std::env::args()
        .skip(1)
        .filter_map(|a| {
            let (k, v) = a.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect();
    let get = |k: &str, d: f64| args.get(k).copied().unwrap_or(d);

    let h = get("h", 12.0) as usize;
    let w = get("w", 12.0) as usize;
    let levels = get("lv", 2.0) as usize;
    let years = get("years", 4.0) as usize;
    let spy = get("spy", 32.0) as usize;
    let spec = GridSpec::new(h, w, levels, true, false).unwrap();
    let base = DynamicsConfig::defaults(spec);
    let dyn_cfg = DynamicsConfig {
        seed: 77,
        spinup_steps: 30,
        steps_per_year: spy,
        wind_noise: get("noise", base.wind_noise),
        ..base
    };
    let traj = generate_dataset(&dyn_cfg, years, 0).unwrap();
    eprintln!("dataset: {} states", traj.states.len());

    let cfg = TrainConfig {
        hidden: get("hid", 8.0) as usize,
        iters: get("iters", 420.0) as usize,
        batch: get("batch", 8.0) as usize,
        lr: get("lr", 3e-3),
        sigma_lo: get("slo", 0.02),
        sigma_hi: get("shi", 100.0),
        ..TrainConfig::default()
    };
    let sched = NoiseSchedule::default_schedule();
    let t0 = std::time::Instant::now();
    let (_b, r) = train(&traj.states, &sched, &cfg, get("seed", 31.0) as u64).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "iters={} lr={} hid={} slo={} shi={} | loss {:.4} -> {:.4} (ratio {:.3}) | holdout_rmse {:?} | {:.1}s",
        cfg.iters,
        cfg.lr,
        cfg.hidden,
        cfg.sigma_lo,
        cfg.sigma_hi,
        r.initial_loss,
        r.final_loss,
        r.final_loss / r.initial_loss,
        r.holdout_precip_rmse,
        dt
    );
    // Seasonal per-cell climatology rmse on the same holdout targets.
    let spec = traj.states[0].spec.clone();
    let pc = spec.precipitation();
    let mut slot_sum = vec![0.0; spy * spec.cells()];
    let mut slot_n = vec![0usize; spy];
    for st in &traj.states[..r.train_end] {
        let slot = (st.time_index as usize) % spy;
        slot_n[slot] += 1;
        for row in 0..h {
            for c in 0..w {
                slot_sum[slot * spec.cells() + row * w + c] += st.data[(row, c, pc)];
            }
        }
    }
    let mut sq = 0.0;
    let mut cnt = 0usize;
    for t in r.train_end..traj.states.len() - 1 {
        let target = &traj.states[t + 1];
        let slot = (target.time_index as usize) % spy;
        for row in 0..h {
            for c in 0..w {
                let m = slot_sum[slot * spec.cells() + row * w + c] / slot_n[slot] as f64;
                let d = m - target.data[(row, c, pc)];
                sq += d * d;
                cnt += 1;
            }
        }
    }
    let clim = (sq / cnt as f64).sqrt();
    if let Some(m) = r.holdout_precip_rmse {
        println!("clim_rmse {clim:.6}  model/clim {:.3}", m / clim);
    }
    let _ = Arc::strong_count(&traj.states[0].spec);
}
