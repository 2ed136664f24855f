mod common;

use common::gradcheck::check_all_variants;

#[test]
fn full_loss_gradients_match_finite_differences() {
    for (variant, worst, kinks, total) in check_all_variants() {
        assert!(worst <= 1e-4, "{variant}: relative error {worst:e}");
        assert!(kinks * 20 < total, "{variant}: {kinks} of {total} entries sat on a kink");
    }
}
