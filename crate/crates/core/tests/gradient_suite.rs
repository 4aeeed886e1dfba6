use darn::autodiff::GradCheckOptions;
use darn::checks::{full_suite, max_rel_error};
use darn::network::SubNetworkConfig;
use darn::schema::AttributeSchema;

#[test]
fn full_objective_and_primitives_match_central_differences() {
    for seed in 0..4 {
        let opts = GradCheckOptions {
            seed,
            ..Default::default()
        };
        let results = full_suite(&SubNetworkConfig::default(), &AttributeSchema::desk_default(), seed, &opts).unwrap();
        assert_eq!(results.len(), 7);
        for r in &results {
            assert!(!r.report.entries.is_empty(), "{} checked nothing", r.name);
        }
        let worst = max_rel_error(&results);
        assert!(worst < 1e-4, "seed {seed}: {worst:e}");
    }
}
