use deltakit::harness::{verify_merge_ratio, OptimizerKind, Variant};

#[test]
fn theorem_holds_for_every_variant_optimizer_and_ratio() {
    let optimizers = [OptimizerKind::Sgd, OptimizerKind::adam(0.0), OptimizerKind::adagrad(0.0)];
    for v in Variant::ALL {
        for kind in optimizers {
            for s in [0.25, 1.0, 4.0, 16.0] {
                let r = verify_merge_ratio(v, s, kind, 100, 1).unwrap();
                assert!(r.max_deviation < 1e-8, "{v} {} s={s}: {:e}", kind.name(), r.max_deviation);
                assert!(r.max_change > 1e3 * r.max_deviation.max(1e-300), "{v} {} s={s}: update did not move", kind.name());
            }
        }
    }
}

#[test]
fn positive_eps_breaks_the_equivalence() {
    for kind in [OptimizerKind::adam(1e-8), OptimizerKind::adagrad(1e-8)] {
        let r = verify_merge_ratio(Variant::Lora, 100.0, kind, 100, 0).unwrap();
        assert!(r.max_deviation > 1e-6, "{}: {:e}", kind.name(), r.max_deviation);
    }
}
