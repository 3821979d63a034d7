//! Depth-class probes on generated instances.

use semcert::pq::{train_codebook, PqConfig};
use semcert::sim::{generate_instance, stability_depth_probe, SimConfig};

#[test]
fn near_equal_bands_give_similar_class_errors() {
    let sim = SimConfig {
        num_wells: 12,
        docs_per_well: 150,
        queries_per_well: 40,
        dim: 16,
        variance_bands: [0.25, 0.2501, 0.2502],
        seed: 5,
        ..SimConfig::default()
    };
    let inst = generate_instance(&sim).unwrap();
    let cb = train_codebook(&inst.corpus, &PqConfig::default_for_dim(16, 5)).unwrap();
    let report = stability_depth_probe(&inst, &cb).unwrap();
    let errs: Vec<f64> = report.classes.iter().map(|c| c.mean_quantization_error).collect();
    let mean = errs.iter().sum::<f64>() / 3.0;
    // 160 queries per class; the per-query error has a relative spread well
    // under 1, so class means agree to within a few standard errors.
    for e in &errs {
        assert!((e - mean).abs() < 0.25 * mean, "{errs:?}");
    }
}

#[test]
fn separated_bands_order_quantization_error() {
    let sim = SimConfig {
        num_wells: 12,
        docs_per_well: 150,
        queries_per_well: 20,
        dim: 16,
        variance_bands: [0.01, 0.1, 1.0],
        seed: 9,
        ..SimConfig::default()
    };
    let inst = generate_instance(&sim).unwrap();
    let cb = train_codebook(&inst.corpus, &PqConfig::default_for_dim(16, 9)).unwrap();
    let a = stability_depth_probe(&inst, &cb).unwrap();
    assert!(a.error_ordered, "{a:?}");
    assert!(a.classes[0].mean_quantization_error < a.classes[2].mean_quantization_error);
    assert!(a.classes[0].mean_stability > a.classes[2].mean_stability);
    assert_eq!(a, stability_depth_probe(&inst, &cb).unwrap());
}
