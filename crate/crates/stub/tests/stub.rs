use std::time::Duration;

use rscurate_stub::{fake_probability, fake_vector, Route, Stub};

fn get(url: &str) -> (u16, Vec<u8>) {
    let resp = reqwest::blocking::get(url).unwrap();
    (resp.status().as_u16(), resp.bytes().unwrap().to_vec())
}

#[test]
fn status_sequence_then_repeat() {
    let stub = Stub::builder().route("/a", Route::sequence(vec![503, 200], b"ok".to_vec())).start();
    assert_eq!(get(&stub.url(0, "/a")).0, 503);
    assert_eq!(get(&stub.url(0, "/a")), (200, b"ok".to_vec()));
    assert_eq!(get(&stub.url(0, "/a")), (200, b"ok".to_vec()));
    assert_eq!(stub.hits("/a"), 3);
    assert_eq!(get(&stub.url(0, "/unknown")).0, 404);
    stub.reset();
    assert_eq!(get(&stub.url(0, "/a")).0, 503);
    assert_eq!(stub.log().len(), 1);
}

#[test]
fn peaks_are_tracked_per_listener() {
    let stub = Stub::builder().listeners(2).route("/s", Route::ok(Vec::new()).with_delay(Duration::from_millis(150))).start();
    let urls = [stub.url(0, "/s"), stub.url(0, "/s"), stub.url(1, "/s")];
    let threads: Vec<_> = urls.into_iter().map(|u| std::thread::spawn(move || get(&u))).collect();
    for t in threads {
        assert_eq!(t.join().unwrap().0, 200);
    }
    assert_eq!(stub.peak_in_flight(), 3);
    assert_eq!(stub.peak_in_flight_on(0), 2);
    assert_eq!(stub.peak_in_flight_on(1), 1);
}

#[test]
fn fake_vectors_are_deterministic() {
    assert_eq!(fake_vector("m", "text", "x", 4), fake_vector("m", "text", "x", 4));
    assert_ne!(fake_vector("m", "text", "x", 4), fake_vector("m", "image", "x", 4));
    let p = fake_probability("d", "x");
    assert!((0.0..=1.0).contains(&p));
}
