use std::sync::Arc;
use std::time::Duration;

use rscurate_core::fetch::{run_fetch, FetchPolicy, FetchStatus, Fetcher};
use rscurate_core::store::{digest_hex, BlobStore};
use rscurate_core::{Disposition, ManifestLine, Source, SourceRecord};
use rscurate_stub::{Route, Stub};

fn one_px_png() -> Vec<u8> {
    let img = image::RgbImage::from_pixel(1, 1, image::Rgb([10, 20, 30]));
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png).unwrap();
    out
}

fn policy() -> FetchPolicy {
    FetchPolicy {
        global_concurrency: 8,
        per_host_concurrency: 4,
        retries: 3,
        backoff_base: Duration::from_millis(5),
        timeout: Duration::from_secs(5),
    }
}

fn line(id: &str, url: String) -> ManifestLine {
    let mut r = SourceRecord::new(id, Source::Laion2b, "satellite image");
    r.url = Some(url);
    ManifestLine::kept(r)
}

fn fetch(policy: FetchPolicy, lines: Vec<ManifestLine>) -> (rscurate_core::fetch::FetchRun, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let fetcher = Arc::new(Fetcher::new(policy, BlobStore::new(dir.path().join("blobs"))).unwrap());
    let rt = tokio::runtime::Runtime::new().unwrap();
    (rt.block_on(run_fetch(fetcher, lines)), dir)
}

#[test]
fn not_found_is_not_retried() {
    let stub = Stub::builder().route("/missing", Route::status(404)).start();
    let (run, _d) = fetch(policy(), vec![line("a", stub.url(0, "/missing"))]);
    let m = &run.manifest[0];
    assert_eq!(m.status, FetchStatus::FetchFailed);
    assert_eq!(m.http_code, Some(404));
    assert_eq!(m.retries, 0);
    assert_eq!(m.line.disposition, Disposition::FetchFailed);
    assert_eq!(stub.hits("/missing"), 1);
}

#[test]
fn png_is_fetched_with_stable_digest() {
    let png = one_px_png();
    let stub = Stub::builder().route("/px.png", Route::ok(png.clone())).start();
    let (run, dir) = fetch(policy(), vec![line("a", stub.url(0, "/px.png"))]);
    let m = &run.manifest[0];
    assert_eq!(m.status, FetchStatus::Fetched);
    assert_eq!((m.width, m.height), (Some(1), Some(1)));
    assert_eq!(m.content_hash.as_deref(), Some(digest_hex(&png).as_str()));
    assert_eq!(m.line.record.image_ref, m.content_hash);
    let stored = BlobStore::new(dir.path().join("blobs")).get(m.content_hash.as_ref().unwrap()).unwrap();
    assert_eq!(stored, png);
    let (again, _d2) = fetch(policy(), vec![line("a", stub.url(0, "/px.png"))]);
    assert_eq!(again.manifest[0].content_hash, m.content_hash);
}

#[test]
fn two_503_then_200_takes_two_retries() {
    let stub = Stub::builder().route("/flaky", Route::sequence(vec![503, 503, 200], one_px_png())).start();
    let (run, _d) = fetch(policy(), vec![line("a", stub.url(0, "/flaky"))]);
    let m = &run.manifest[0];
    assert_eq!(m.status, FetchStatus::Fetched);
    assert_eq!(m.retries, 2);
    let statuses: Vec<u16> = stub.log().iter().filter(|e| e.path == "/flaky").map(|e| e.status).collect();
    assert_eq!(statuses, vec![503, 503, 200]);
}

#[test]
fn retries_exhausted_fails() {
    let stub = Stub::builder().route("/down", Route::status(503)).start();
    let mut p = policy();
    p.retries = 2;
    let (run, _d) = fetch(p, vec![line("a", stub.url(0, "/down"))]);
    assert_eq!(run.manifest[0].status, FetchStatus::FetchFailed);
    assert_eq!(stub.hits("/down"), 3);
}

#[test]
fn timeout_counts_as_failure() {
    let stub = Stub::builder().route("/slow", Route::ok(one_px_png()).with_delay(Duration::from_millis(800))).start();
    let mut p = policy();
    p.timeout = Duration::from_millis(100);
    p.retries = 1;
    let (run, _d) = fetch(p, vec![line("a", stub.url(0, "/slow"))]);
    assert_eq!(run.manifest[0].status, FetchStatus::FetchFailed);
    assert_eq!(stub.hits("/slow"), 2);
}

#[test]
fn per_host_one_serializes_requests() {
    let mut b = Stub::builder().default_delay(Duration::from_millis(15));
    for i in 0..20 {
        b = b.route(format!("/i/{i}"), Route::ok(one_px_png()));
    }
    let stub = b.start();
    let mut p = policy();
    p.per_host_concurrency = 1;
    p.global_concurrency = 16;
    let lines = (0..20).map(|i| line(&format!("r{i}"), stub.url(0, &format!("/i/{i}")))).collect();
    let (run, _d) = fetch(p, lines);
    assert!(run.manifest.iter().all(|m| m.status == FetchStatus::Fetched));
    assert_eq!(stub.peak_in_flight(), 1);
}

#[test]
fn caps_hold_across_hosts() {
    let mut b = Stub::builder().listeners(3).default_delay(Duration::from_millis(10));
    for i in 0..30 {
        b = b.route(format!("/i/{i}"), Route::ok(one_px_png()));
    }
    let stub = b.start();
    let mut p = policy();
    p.per_host_concurrency = 2;
    p.global_concurrency = 5;
    let lines = (0..90).map(|n| line(&format!("r{n}"), stub.url(n % 3, &format!("/i/{}", n / 3)))).collect();
    let (run, _d) = fetch(p, lines);
    assert!(run.manifest.iter().all(|m| m.status == FetchStatus::Fetched));
    assert!(stub.peak_in_flight() <= 5, "global peak {}", stub.peak_in_flight());
    for l in 0..3 {
        assert!(stub.peak_in_flight_on(l) <= 2, "host {l} peak {}", stub.peak_in_flight_on(l));
    }
    assert!(stub.peak_in_flight() > 2, "caps never exercised");
}

#[test]
fn planted_faults_map_to_dispositions() {
    let png = one_px_png();
    let mut b = Stub::builder();
    let mut lines = Vec::new();
    for i in 0..200 {
        let route = match i % 10 {
            0 => Route::status(404),
            1 => Route::ok(Vec::new()),
            2 => Route::ok(b"garbage".to_vec()),
            _ => Route::ok(png.clone()),
        };
        let path = format!("/f/{i}");
        lines.push(line(&format!("r{i}"), String::new()));
        b = b.route(path, route);
    }
    let stub = b.start();
    for (i, l) in lines.iter_mut().enumerate() {
        l.record.url = Some(stub.url(0, &format!("/f/{i}")));
    }
    let (run, _d) = fetch(policy(), lines);
    let count = |d: Disposition| run.output.lines.iter().filter(|l| l.disposition == d).count();
    assert_eq!(count(Disposition::FetchFailed), 20);
    assert_eq!(count(Disposition::RemovedInvalidImage), 40);
    assert_eq!(count(Disposition::Kept), 140);
    run.output.ledger.verify_conservation().unwrap();
}
