//! Invariants of closed-loop trials, checked against the event log.

use activeslam::config::TrialConfig;
use activeslam::experiments::{run_trial, TrialResult, TrialSpec};
use activeslam::fsm::Event;

fn trial(world: &str, method: &str, seed: u64, duration: f64) -> TrialResult {
    let spec = TrialSpec {
        world: world.into(),
        method: method.into(),
        seed,
        duration,
    };
    run_trial(&spec, &TrialConfig::default()).unwrap()
}

#[test]
fn interpolated_baseline_follows_path_tangents() {
    let r = trial("toy_room", "INTER_0", 2, 40.0);
    let mut checked = 0;
    for e in &r.events.events {
        if let Event::Dispatch {
            x, y, theta, from, ..
        } = e
        {
            let (dx, dy) = (x - from[0], y - from[1]);
            if dx.hypot(dy) > 1e-9 {
                assert!((dy.atan2(dx) - theta).abs() < 1e-9, "{e:?}");
                checked += 1;
            }
        }
    }
    assert!(checked > 3);
    // No refinement and no feature blend without levels 2 and 3.
    assert_eq!(r.summary.refinements, 0);
    assert_eq!(r.summary.blended_steps, 0);
}

#[test]
fn first_level_only_never_refines_or_blends() {
    let r = trial("toy_room", "A_1", 4, 40.0);
    assert!(r
        .events
        .events
        .iter()
        .any(|e| matches!(e, Event::Dispatch { .. })));
    assert!(!r
        .events
        .events
        .iter()
        .any(|e| matches!(e, Event::Refine { .. })));
    assert!(!r
        .events
        .events
        .iter()
        .any(|e| matches!(e, Event::Heading { blended: true, .. })));
}

#[test]
fn full_method_refines_and_blends() {
    let r = trial("toy_room", "A", 4, 40.0);
    assert!(r.summary.refinements > 0);
    assert!(r.summary.blended_steps > 0);
}

#[test]
fn loops_per_meter_matches_the_event_log() {
    let r = trial("apartment", "A", 5, 60.0);
    let closures = r
        .events
        .events
        .iter()
        .filter(|e| matches!(e, Event::Closure { .. }))
        .count();
    assert_eq!(closures, r.summary.closures);
    let expected = closures as f64 / r.summary.final_path_length;
    assert!((r.summary.loops_per_meter - expected).abs() < 1e-12);
}

#[test]
fn explored_area_drops_only_at_closures_or_new_sessions() {
    for (world, method, seed) in [("toy_room", "A", 1), ("apartment", "OL_2_3", 3)] {
        let r = trial(world, method, seed, 60.0);
        for w in r.raw.windows(2) {
            if w[1].explored_area < w[0].explored_area - 1e-12 {
                let explained = r.events.events.iter().any(|e| match e {
                    Event::Closure { t, .. } | Event::Session { t, .. } => {
                        *t > w[0].t - 1e-9 && *t <= w[1].t + 1e-9
                    }
                    _ => false,
                });
                assert!(
                    explained,
                    "{world} {method}: unexplained drop at t = {}",
                    w[1].t
                );
            }
        }
    }
}

#[test]
fn bucketed_series_matches_the_raw_samples() {
    let r = trial("toy_room", "OL_1", 6, 30.0);
    assert!(!r.rows.is_empty());
    for w in r.rows.windows(2) {
        assert!((w[1].t - w[0].t - 2.0).abs() < 1e-9);
        assert!(w[1].path_length >= w[0].path_length);
    }
    assert_eq!(
        r.rows.last().unwrap().path_length,
        r.raw.last().unwrap().path_length
    );
}
