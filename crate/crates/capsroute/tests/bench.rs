use capsroute::bench::{
    bench_input, checksum, monotone_in_n, route, run_bench, run_bench_parallel, to_csv, Algorithm,
    BenchError, BenchCase, CSV_HEADER,
};
use capsroute::core::routing::{dynamic_routing, fm_agreement, DynamicRoutingConfig};

#[test]
fn bench_does_not_change_outputs() {
    let u = bench_input(9, 128, 10, 16).unwrap();
    let direct = [
        checksum(&fm_agreement(&u).unwrap()),
        checksum(&dynamic_routing(&u, DynamicRoutingConfig::default()).unwrap()),
    ];
    let mut case = BenchCase::new(Algorithm::Fm, 128, 10, 16, 1);
    case.seed = 9;
    assert_eq!(
        run_bench(&case).unwrap().checksum.to_bits(),
        direct[0].to_bits()
    );
    case.algorithm = Algorithm::Dynamic;
    case.iters = 3;
    assert_eq!(
        run_bench(&case).unwrap().checksum.to_bits(),
        direct[1].to_bits()
    );
}

#[test]
fn brute_and_linear_routes_agree_on_bench_input() {
    let u = bench_input(1, 40, 10, 16).unwrap();
    let a = route(Algorithm::Fm, 1, &u).unwrap();
    let b = route(Algorithm::Brute, 1, &u).unwrap();
    for (x, y) in a.activation.iter().zip(&b.activation) {
        assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
    }
}

#[test]
fn too_small_workload_is_refused() {
    let case = BenchCase::new(Algorithm::Fm, 1, 1, 1, 1);
    match run_bench(&case) {
        Err(BenchError::TooFast {
            median_ns,
            resolution_ns,
        }) => {
            assert!((median_ns as f64) < 100.0 * resolution_ns as f64)
        }
        other => panic!("expected TooFast, got {other:?}"),
    }
}

#[test]
fn records_are_consistent_and_csv_has_header() {
    let mut records = Vec::new();
    for n in [64, 256, 1024] {
        for (algo, iters) in [
            (Algorithm::Fm, 1),
            (Algorithm::Dynamic, 1),
            (Algorithm::Dynamic, 3),
        ] {
            let mut case = BenchCase::new(algo, n, 10, 16, iters);
            case.repeats = 15;
            let r = run_bench(&case).unwrap();
            assert_eq!(r.repeats, 15);
            assert!(r.median_ns <= r.max_ns);
            records.push(r);
        }
    }
    for (name, ok) in monotone_in_n(&records) {
        assert!(ok, "{name} not monotone in n");
    }
    let csv = to_csv(&records);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert_eq!(lines.count(), records.len());
    assert!(csv.contains("\ndynamic,64,10,16,1,15,"));
    assert!(csv.contains("\ndynamic,64,10,16,3,15,"));
}

#[test]
fn parallel_mode_is_labelled_separately() {
    let case = BenchCase::new(Algorithm::Fm, 256, 10, 16, 1);
    let r = run_bench_parallel(&case, 8, 2).unwrap();
    assert!(r.parallel);
    assert_eq!(r.batch, 8);
    assert!(r.csv_row().starts_with("fm@2t,"));
}
