use stormsteer_core::dynamics::{generate_dataset, DynamicsConfig};
use stormsteer_core::field::GridSpec;

fn single_storm(cfg: &DynamicsConfig) {
    use stormsteer_core::dynamics::{initial_state, step_truth};
    use stormsteer_core::rng::{stream, Purpose};
    let mut cfg = cfg.clone();
    cfg.storm_rate = 0.0;
    cfg.wind_noise = 0.0;
    let spec = cfg.spec.clone();
    let mut st = initial_state(&cfg);
    let (qc, tc) = (spec.humidity(), spec.temperature(0));
    let (cr, cc) = (12.0, 12.0);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let dy = r as f64 - cr;
            let dx = c as f64 - cc;
            let g = (-(dy * dy + dx * dx) / (2.0 * cfg.storm_sigma * cfg.storm_sigma)).exp();
            st.data[(r, c, tc)] += cfg.storm_amp_t * g;
            st.data[(r, c, qc)] += cfg.storm_amp_q * g;
        }
    }
    let mut rng = stream(0, Purpose::Diagnostics, 0);
    let mut cur = st;
    for k in 1..=14 {
        cur = step_truth(&cur, &cfg, &mut rng).unwrap();
        let p = cur.precip();
        let total: f64 = p.sum();
        let max = p.iter().cloned().fold(0.0, f64::max);
        let argmax = p
            .indexed_iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        println!(
            "k={k:2} totalP={total:.4} maxP={max:.4} at ({},{})",
            argmax.0, argmax.1
        );
    }
}

fn main() {
    let spec = GridSpec::new(24, 24, 3, true, false).unwrap();
    let mut cfg = DynamicsConfig::defaults(spec);
    cfg.seed = 42;
    let args: Vec<String> = std::env::args().collect();
    for a in &args[1..] {
        let (k, v) = a.split_once('=').unwrap();
        let v: f64 = v.parse().unwrap();
        match k {
            "storm_rate" => cfg.storm_rate = v,
            "amp_q" => cfg.storm_amp_q = v,
            "amp_t" => cfg.storm_amp_t = v,
            "sigma" => cfg.storm_sigma = v,
            "cond" => cfg.cond_rate = v,
            "trel" => cfg.thermal_relax = v,
            "qrel" => cfg.q_relax = v,
            "rhref" => {
                cfg.rh_ref = v;
                cfg.rh_init = v;
            }
            "rh" => cfg.rh_init = v,
            "noise" => cfg.wind_noise = v,
            "jet" => cfg.jet_amp = v,
            _ => panic!("unknown key {k}"),
        }
    }
    if std::env::var("SINGLE").is_ok() {
        single_storm(&cfg);
        return;
    }
    let years = 6;
    let traj = generate_dataset(&cfg, years, 0).unwrap();
    let mut maxima: Vec<f64> = traj
        .states
        .iter()
        .map(|s| s.precip().iter().cloned().fold(0.0, f64::max))
        .collect();
    let wet_frac: f64 = traj
        .states
        .iter()
        .map(|s| s.precip().iter().filter(|&&p| p > 1e-9).count() as f64 / 576.0)
        .sum::<f64>()
        / traj.len() as f64;
    let mean_p: f64 =
        traj.states.iter().map(|s| s.precip().sum()).sum::<f64>() / (traj.len() as f64 * 576.0);
    let qc = traj.spec().humidity();
    let mean_q: f64 =
        traj.states.iter().map(|s| s.channel(qc).sum()).sum::<f64>() / (traj.len() as f64 * 576.0);
    let tc = traj.spec().temperature(0);
    let mean_t: f64 =
        traj.states.iter().map(|s| s.channel(tc).sum()).sum::<f64>() / (traj.len() as f64 * 576.0);
    // drift check: first vs last year
    let spy = cfg.steps_per_year;
    let q_first: f64 = traj.states[..spy]
        .iter()
        .map(|s| s.channel(qc).sum())
        .sum::<f64>()
        / (spy as f64 * 576.0);
    let q_last: f64 = traj.states[traj.len() - spy..]
        .iter()
        .map(|s| s.channel(qc).sum())
        .sum::<f64>()
        / (spy as f64 * 576.0);
    let p_first: f64 = traj.states[..spy]
        .iter()
        .map(|s| s.precip().sum())
        .sum::<f64>()
        / (spy as f64 * 576.0);
    let p_last: f64 = traj.states[traj.len() - spy..]
        .iter()
        .map(|s| s.precip().sum())
        .sum::<f64>()
        / (spy as f64 * 576.0);
    maxima.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = maxima[maxima.len() / 2];
    let max = *maxima.last().unwrap();
    let p99 = maxima[(maxima.len() * 99) / 100];
    println!(
        "steps={} max={:.4} p99={:.4} median={:.4} ratio={:.2} wet_frac={:.3} meanP={:.5} meanQ={:.4} meanT={:.2}",
        traj.len(), max, p99, med, if med > 0.0 { max / med } else { f64::INFINITY }, wet_frac, mean_p, mean_q, mean_t
    );
    println!(
        "drift: meanQ year1={:.4} year{}={:.4}  meanP year1={:.5} year{}={:.5}",
        q_first, years, q_last, p_first, years, p_last
    );
}
