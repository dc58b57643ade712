use std::time::Instant;

use fbkws_core::gradcheck::{check, GradCheckConfig, Instance};

#[test]
fn reduced_pipeline_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut inst = Instance::reduced(3).unwrap();
    let total: usize = inst.model.trainable_mut().iter().map(|t| t.len()).sum();
    let report = check(&inst, &GradCheckConfig::default()).unwrap();
    println!(
        "{} elements, worst rel {:.3e}, {} mismatches, {:?}",
        report.checked,
        report.worst,
        report.mismatches.len(),
        start.elapsed()
    );
    for m in report.mismatches.iter().take(10) {
        println!("  {m:?}");
    }
    assert_eq!(report.checked, total);
    assert!(report.passed());
    assert!(start.elapsed().as_secs() < 60);
}
