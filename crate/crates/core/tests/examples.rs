//! Every example is also run as a test, so none of them rot.

macro_rules! example {
    ($module:ident, $file:literal) => {
        #[allow(dead_code)]
        #[path = $file]
        mod $module;

        #[test]
        fn $module() {
            $module::run_example().expect(concat!($file, " should run"));
        }
    };
}

example!(state_tables, "../examples/state_tables.rs");
example!(sim_trace, "../examples/sim_trace.rs");
example!(wire_dump, "../examples/wire_dump.rs");
example!(loopback_sweep, "../examples/loopback_sweep.rs");
example!(census_watch, "../examples/census_watch.rs");
example!(embedded_server, "../examples/embedded_server.rs");
example!(bench_sweep, "../examples/bench_sweep.rs");
