use std::collections::HashMap;

use stormsteer_core::dynamics::{generate_dataset, step_truth, DynamicsConfig};
use stormsteer_core::field::GridSpec;
use stormsteer_core::rng::{stream, Purpose};

fn main() {
    let args: HashMap<String, f64> = std::env::args()
        .skip(1)
        .filter_map(|a| {
            let (k, v) = a.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect();
    let h = args.get("h").copied().unwrap_or(12.0) as usize;
    let w = args.get("w").copied().unwrap_or(12.0) as usize;
    let years = args.get("years").copied().unwrap_or(4.0) as usize;
    let spec = GridSpec::new(h, w, 2, true, false).unwrap();
    let mut cfg = DynamicsConfig::defaults(spec.clone());
    cfg.steps_per_year = args.get("spy").copied().unwrap_or(32.0) as usize;
    cfg.spinup_steps = 30;
    let traj = generate_dataset(&cfg, years, 0).unwrap();
    let n = traj.states.len();
    let holdout = (n as f64 * 0.1).ceil() as usize;
    let train_end = n - holdout;

    // Deterministic twin: same dynamics with noise and storms switched off.
    let mut quiet = cfg.clone();
    quiet.wind_noise = 0.0;
    quiet.storm_rate = 0.0;
    let mut rng = stream(999, Purpose::Diagnostics, 0);
    let pc = spec.precipitation();
    let mut sq = 0.0;
    let mut clim_sq = 0.0;
    let mut cnt = 0usize;
    // Slot means from the training segment.
    let spy = cfg.steps_per_year;
    let mut slot_sum = vec![0.0; spy * spec.cells()];
    let mut slot_n = vec![0usize; spy];
    for st in &traj.states[..train_end] {
        let slot = (st.time_index as usize) % spy;
        slot_n[slot] += 1;
        for r in 0..h {
            for c in 0..w {
                slot_sum[slot * spec.cells() + r * w + c] += st.data[(r, c, pc)];
            }
        }
    }
    for t in train_end..n - 1 {
        let pred = step_truth(&traj.states[t], &quiet, &mut rng).unwrap();
        let target = &traj.states[t + 1];
        let slot = (target.time_index as usize) % spy;
        for r in 0..h {
            for c in 0..w {
                let d = pred.data[(r, c, pc)] - target.data[(r, c, pc)];
                sq += d * d;
                let m = slot_sum[slot * spec.cells() + r * w + c] / slot_n[slot] as f64;
                let dc = m - target.data[(r, c, pc)];
                clim_sq += dc * dc;
                cnt += 1;
            }
        }
    }
    let floor = (sq / cnt as f64).sqrt();
    let clim = (clim_sq / cnt as f64).sqrt();
    println!(
        "twin rmse {floor:.6}  clim rmse {clim:.6}  ratio {:.3}",
        floor / clim
    );
}
