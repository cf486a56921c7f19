//! Whole-program properties over fuzzer-generated programs.

use lazytensor::compiler::CompileOptions;
use lazytensor::{Device, Runtime, RuntimeConfig};
use lazytensor_cli::fuzz::{execute, generate, lazy_runtime, run_program, same};
use proptest::prelude::*;

const D0: Device = Device(0);

fn config() -> ProptestConfig {
    ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    /// Where barriers go never changes what the program observes.
    #[test]
    fn barrier_placement_is_unobservable(seed in any::<u64>(), mask in any::<u64>()) {
        let p = generate(seed, 25);
        let bare = run_program(&p.without_barriers(), &lazy_runtime(CompileOptions::default(), true));
        let dense = run_program(&p.with_barriers(mask), &lazy_runtime(CompileOptions::default(), true));
        let eager = run_program(&p, &Runtime::new(RuntimeConfig::eager()));
        prop_assert!(same(&bare, &dense), "{p}");
        prop_assert!(same(&bare, &eager), "{p}");
    }

    /// Donation saves memory and nothing else.
    #[test]
    fn donation_changes_only_memory(seed in any::<u64>(), mask in any::<u64>()) {
        let p = generate(seed, 25).with_barriers(mask);
        let on_rt = lazy_runtime(CompileOptions::default(), true);
        let off_rt = lazy_runtime(CompileOptions::default(), false);
        let on = run_program(&p, &on_rt);
        let off = run_program(&p, &off_rt);
        prop_assert!(same(&on, &off), "{p}");
        let (m_on, m_off) = (on_rt.metrics(D0).unwrap(), off_rt.metrics(D0).unwrap());
        prop_assert!(m_on.peak_buffer_slots <= m_off.peak_buffer_slots, "{p}\n{m_on:?}\n{m_off:?}");
        prop_assert_eq!(m_off.aliased_outputs, 0);
        prop_assert_eq!(m_on.compile_count, m_off.compile_count);
    }

    /// The runtime tracks exactly the handles the program still holds.
    #[test]
    fn live_set_matches_held_handles(seed in any::<u64>()) {
        let p = generate(seed, 25);
        let rt = lazy_runtime(CompileOptions::default(), true);
        if let Ok(vars) = execute(&p, &rt) {
            // Held handles plus the bases their views keep alive.
            let mut uids: Vec<u64> = vars.iter().flatten().flat_map(|t| [Some(t.uid()), t.base().map(|b| b.uid())]).flatten().collect();
            uids.sort_unstable();
            uids.dedup();
            let held = uids.len();
            prop_assert_eq!(rt.live_count(D0).unwrap(), held, "{}", p);
            drop(vars);
            prop_assert_eq!(rt.live_count(D0).unwrap(), 0);
        }
    }

    /// Generation is a pure function of the seed.
    #[test]
    fn programs_are_reproducible(seed in any::<u64>()) {
        prop_assert_eq!(generate(seed, 25).to_string(), generate(seed, 25).to_string());
    }
}
