use zsar_core::gradcheck::{check_all, check_kernel, Kernel};

#[test]
fn analytic_gradients_agree_with_central_differences_on_many_configurations() {
    let reports = check_all(25, 2024).unwrap();
    assert_eq!(reports.len(), Kernel::ALL.len());
    for r in &reports {
        println!(
            "{:<32} configs {:>3} params {:>6} worst {:.2e} kink redraws {:>3} unresolved {:>3}",
            r.kernel.name(),
            r.configs,
            r.parameters_checked,
            r.worst_error,
            r.redraws,
            r.unresolved
        );
        assert!(r.configs >= 20);
        assert!(r.parameters_checked > 0);
        assert!(
            r.worst_error < 1e-4,
            "{}: {:.3e}",
            r.kernel.name(),
            r.worst_error
        );
    }
}

#[test]
fn composed_objective_is_checked_across_independent_seeds() {
    for seed in [1, 2, 3] {
        let r = check_kernel(Kernel::TripletObjective, 20, seed).unwrap();
        assert!(r.worst_error < 1e-4, "seed {seed}: {:.3e}", r.worst_error);
    }
}
