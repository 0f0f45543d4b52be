//! C ABI surface over the streaming forecaster: opaque handles, integer
//! status codes, and caller-provided output buffers. The generated header
//! lives at `include/posl.h`.

use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use posl::engine::{Engine, EngineConfig};
use posl::selector::WeightMode;
use posl::simgen::{build_simulation, Simulation};

/// Call succeeded.
pub const POSL_OK: i32 = 0;
/// The simulated stream is exhausted; no output was produced.
pub const POSL_DONE: i32 = 1;
/// A required pointer argument was null.
pub const POSL_NULL_ARG: i32 = -1;
/// An argument was out of range or a buffer was too small.
pub const POSL_INVALID: i32 = -2;
/// The computation failed.
pub const POSL_RUNTIME: i32 = -3;

/// Opaque handle to one simulated study design.
pub struct PoslSim {
    sim: Simulation,
}

/// Opaque handle to a streaming engine bound to a simulated target stream.
pub struct PoslEngine {
    engine: Engine,
    outcomes: Vec<f64>,
    cursor: usize,
    batch: usize,
}

fn guarded(f: impl FnOnce() -> i32) -> i32 {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(POSL_RUNTIME)
}

/// Version string of the underlying library; static storage, do not free.
#[no_mangle]
pub extern "C" fn posl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds study design `which` (1..=4) with `subjects` historical series of
/// length `tau` under `seed`, returning a handle through `out`.
#[no_mangle]
pub extern "C" fn posl_sim_new(
    which: u8,
    subjects: usize,
    tau: u32,
    seed: u64,
    out: *mut *mut PoslSim,
) -> i32 {
    if out.is_null() {
        return POSL_NULL_ARG;
    }
    guarded(|| match build_simulation(which, subjects, tau, seed) {
        Ok(sim) => {
            unsafe { *out = Box::into_raw(Box::new(PoslSim { sim })) };
            POSL_OK
        }
        Err(_) => POSL_INVALID,
    })
}

/// Releases a simulation handle. Null is ignored.
#[no_mangle]
pub extern "C" fn posl_sim_free(sim: *mut PoslSim) {
    if !sim.is_null() {
        drop(unsafe { Box::from_raw(sim) });
    }
}

/// Creates an engine over the simulation's historical panel, seeded with the
/// first batch of the target stream. `mode` selects the ensembling rule:
/// 0 discrete, 1 convex, 2 conditional.
#[no_mangle]
pub extern "C" fn posl_engine_new(
    sim: *const PoslSim,
    mode: i32,
    out: *mut *mut PoslEngine,
) -> i32 {
    if sim.is_null() || out.is_null() {
        return POSL_NULL_ARG;
    }
    let mode = match mode {
        0 => WeightMode::Discrete,
        1 => WeightMode::Convex,
        2 => WeightMode::Conditional,
        _ => return POSL_INVALID,
    };
    guarded(|| {
        let sim = unsafe { &(*sim).sim };
        let config = EngineConfig { mode, ..EngineConfig::default() };
        let batch = config.batch_size as usize;
        let target = &sim.target;
        if target.len() <= batch {
            return POSL_INVALID;
        }
        let cut = target.first_time() + config.batch_size - 1;
        let Some(seed) = target.truncated(cut) else { return POSL_INVALID };
        match Engine::new(config, sim.historical.clone(), seed) {
            Ok(engine) => {
                let handle = PoslEngine {
                    engine,
                    outcomes: target.outcomes().to_vec(),
                    cursor: batch,
                    batch,
                };
                unsafe { *out = Box::into_raw(Box::new(handle)) };
                POSL_OK
            }
            Err(_) => POSL_RUNTIME,
        }
    })
}

/// Releases an engine handle. Null is ignored.
#[no_mangle]
pub extern "C" fn posl_engine_free(engine: *mut PoslEngine) {
    if !engine.is_null() {
        drop(unsafe { Box::from_raw(engine) });
    }
}

/// Number of candidate learners in the engine's library.
#[no_mangle]
pub extern "C" fn posl_engine_num_learners(
    engine: *const PoslEngine,
    out: *mut usize,
) -> i32 {
    if engine.is_null() || out.is_null() {
        return POSL_NULL_ARG;
    }
    unsafe { *out = (*engine).engine.config().learners.len() };
    POSL_OK
}

/// Absorbs the next batch of the simulated stream and writes the ensemble
/// forecast into `forecast_out` (capacity `forecast_len`). `written` receives
/// the number of values stored. Returns `POSL_DONE` once the stream ends.
#[no_mangle]
pub extern "C" fn posl_engine_step_next(
    engine: *mut PoslEngine,
    forecast_out: *mut f64,
    forecast_len: usize,
    written: *mut usize,
) -> i32 {
    if engine.is_null() || forecast_out.is_null() || written.is_null() {
        return POSL_NULL_ARG;
    }
    guarded(|| {
        let handle = unsafe { &mut *engine };
        if handle.cursor >= handle.outcomes.len() {
            unsafe { *written = 0 };
            return POSL_DONE;
        }
        let upper = (handle.cursor + handle.batch).min(handle.outcomes.len());
        let batch: Vec<(Vec<f64>, f64)> =
            handle.outcomes[handle.cursor..upper].iter().map(|&y| (vec![], y)).collect();
        match handle.engine.step(&batch) {
            Ok(out) => {
                if out.ensemble_forecast.len() > forecast_len {
                    return POSL_INVALID;
                }
                for (i, v) in out.ensemble_forecast.iter().enumerate() {
                    unsafe { *forecast_out.add(i) = *v };
                }
                unsafe { *written = out.ensemble_forecast.len() };
                handle.cursor = upper;
                POSL_OK
            }
            Err(_) => POSL_RUNTIME,
        }
    })
}

/// Copies the current ensemble weights into `buf` (capacity `len`); `written`
/// receives the number of learners.
#[no_mangle]
pub extern "C" fn posl_engine_weights(
    engine: *const PoslEngine,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> i32 {
    if engine.is_null() || buf.is_null() || written.is_null() {
        return POSL_NULL_ARG;
    }
    guarded(|| {
        let handle = unsafe { &*engine };
        let alpha = &handle.engine.weights().alpha;
        if alpha.len() > len {
            return POSL_INVALID;
        }
        for (i, v) in alpha.iter().enumerate() {
            unsafe { *buf.add(i) = *v };
        }
        unsafe { *written = alpha.len() };
        POSL_OK
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn full_round_trip_through_the_c_surface() {
        let mut sim: *mut PoslSim = ptr::null_mut();
        assert_eq!(posl_sim_new(1, 4, 120, 7, &mut sim), POSL_OK);
        let mut engine: *mut PoslEngine = ptr::null_mut();
        assert_eq!(posl_engine_new(sim, 1, &mut engine), POSL_OK);

        let mut k = 0usize;
        assert_eq!(posl_engine_num_learners(engine, &mut k), POSL_OK);
        assert!(k >= 2);

        let mut forecast = [0.0f64; 8];
        let mut written = 0usize;
        let mut steps = 0;
        loop {
            let status =
                posl_engine_step_next(engine, forecast.as_mut_ptr(), forecast.len(), &mut written);
            if status == POSL_DONE {
                break;
            }
            assert_eq!(status, POSL_OK);
            assert!(written >= 1);
            assert!(forecast[..written].iter().all(|v| v.is_finite()));
            steps += 1;
        }
        assert!(steps > 10);

        let mut alpha = vec![0.0f64; k];
        assert_eq!(posl_engine_weights(engine, alpha.as_mut_ptr(), k, &mut written), POSL_OK);
        assert_eq!(written, k);
        let total: f64 = alpha.iter().sum();
        assert!((total - 1.0).abs() < 1e-8);
        assert!(alpha.iter().all(|&a| a >= -1e-12));

        posl_engine_free(engine);
        posl_sim_free(sim);
    }

    #[test]
    fn null_and_range_checks() {
        assert_eq!(posl_sim_new(1, 2, 50, 1, ptr::null_mut()), POSL_NULL_ARG);
        let mut sim: *mut PoslSim = ptr::null_mut();
        assert_eq!(posl_sim_new(9, 2, 50, 1, &mut sim), POSL_INVALID);
        assert_eq!(posl_sim_new(1, 2, 80, 1, &mut sim), POSL_OK);
        let mut engine: *mut PoslEngine = ptr::null_mut();
        assert_eq!(posl_engine_new(ptr::null(), 1, &mut engine), POSL_NULL_ARG);
        assert_eq!(posl_engine_new(sim, 9, &mut engine), POSL_INVALID);
        posl_engine_free(ptr::null_mut());
        posl_sim_free(sim);
    }
}
