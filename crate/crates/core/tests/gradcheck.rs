//! Finite-difference gradient checks, one test per case.

mod support;

use support::gradients::{self, TOL};

macro_rules! cases {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                let err = gradients::$name();
                assert!(err <= TOL, "max relative error {err:e}");
            }
        )*
    };
}

cases!(
    matmul,
    add_and_mul,
    scale_tanh_relu,
    bias_sum_mean_reshape,
    gather_rows_with_repeats,
    batched_matvec,
    layer_norm,
    causal_attention,
    softmax_cross_entropy,
    linear_readout,
    attention_readout,
    transformer,
);
