#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use rscurate_core::fixture::{self, Fixture};
use rscurate_stub::{Route, Stub};

/// Stub serving the fixture images, and the fixture pointing at it.
pub fn fixture_stub() -> (Stub, Fixture) {
    let routes: Vec<(String, Route)> = fixture::build("http://placeholder")
        .payloads
        .into_iter()
        .map(|p| (p.path, Route::sequence(p.statuses, p.body)))
        .collect();
    let stub = Stub::builder().routes(routes).start();
    let f = fixture::build(&stub.base_url(0));
    (stub, f)
}

pub fn rscurate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rscurate"))
        .current_dir(dir)
        .args(args)
        .env_remove("RSCURATE_LOG")
        .output()
        .expect("run rscurate")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}
