use jule_bench::bench_blobs;

#[test]
fn bench_fixture_has_expected_shape_and_labels() {
    let ds = bench_blobs(4, 50, 8);
    assert_eq!(ds.features.dim(), (200, 8));
    let labels = ds.labels.expect("fixture is labeled");
    assert_eq!(labels.len(), 200);
    assert_eq!(labels.iter().max(), Some(&3));
}

#[test]
fn bench_fixture_is_deterministic() {
    let a = bench_blobs(3, 10, 4);
    let b = bench_blobs(3, 10, 4);
    assert_eq!(a.features, b.features);
    assert_eq!(a.labels, b.labels);
}
