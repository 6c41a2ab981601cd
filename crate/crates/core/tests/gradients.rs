mod support;

use support::gradients;

#[test]
fn every_op_passes_gradcheck() {
    for (name, err) in gradients::op_errors() {
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn toy_training_loss_passes_gradcheck() {
    let err = gradients::toy_full_loss_error();
    assert!(err < 1e-4, "relative error {err:e}");
}
