//! Shared expensive fixtures for tests that need a trained forecaster and a
//! real event catalog. Built once per test binary.

use crate::catalog::{
    build_climatology, compute_tau, default_land_mask, extract_events, CatalogConfig, Climatology,
    EventRecord, EventThreshold,
};
use crate::dynamics::{generate_dataset, DynamicsConfig, Trajectory};
use crate::field::GridSpec;
use crate::forecaster::{train, ForecasterBundle, TrainConfig};
use crate::schedule::NoiseSchedule;
use std::sync::OnceLock;

pub(crate) struct Fixture {
    pub traj: Trajectory,
    pub bundle: ForecasterBundle,
    pub clim: Climatology,
    pub tau: EventThreshold,
    pub events: Vec<EventRecord>,
}

impl Fixture {
    /// States `(x_prev, x_cur)` such that a lead-2 objective from `x_cur`
    /// lands on the event time.
    pub fn intervention_pair(
        &self,
        ev: &EventRecord,
    ) -> (
        &crate::field::AtmosphericState,
        &crate::field::AtmosphericState,
    ) {
        let base = self.traj.states[0].time_index;
        let idx = (ev.time_index - base) as usize;
        (&self.traj.states[idx - 3], &self.traj.states[idx - 2])
    }
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

pub(crate) fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let spec = GridSpec::new(12, 12, 2, true, false).unwrap();
        let dyn_cfg = DynamicsConfig {
            seed: 77,
            spinup_steps: 30,
            steps_per_year: 32,
            ..DynamicsConfig::defaults(spec)
        };
        let traj = generate_dataset(&dyn_cfg, 4, 0).unwrap();
        let (bundle, _) = train(
            &traj.states,
            &NoiseSchedule::default_schedule(),
            &TrainConfig::default(),
            31,
        )
        .unwrap();
        let clim = build_climatology(&traj).unwrap();
        let tau = compute_tau(&traj, &clim).unwrap();
        let land = default_land_mask(traj.spec());
        let base = traj.states[0].time_index;
        let events: Vec<EventRecord> =
            extract_events(&traj, &clim, tau, &land, &CatalogConfig::default())
                .unwrap()
                .into_iter()
                .filter(|ev| ev.time_index - base >= 3)
                .collect();
        assert!(
            events.len() >= 4,
            "fixture catalog too small: {} events",
            events.len()
        );
        Fixture {
            traj,
            bundle,
            clim,
            tau,
            events,
        }
    })
}
