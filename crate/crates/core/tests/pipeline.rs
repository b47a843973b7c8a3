use approx::assert_relative_eq;
use berezin_core::berezin::TraceWeights;
use berezin_core::bergman::{BergmanModel, BlockModel, OperatorMatrix};
use berezin_core::hypgeom::{automorphy_j, enumerate_gamma, mobius_apply, reduce_to_fundamental, HPoint, Sl2z};
use berezin_core::modforms::{delta_qexp, eisenstein_qexp, eval_series, InvariantSymbol, TAIL_TOLERANCE};
use berezin_core::quad::fundamental_rule;
use berezin_core::scalar::{cpowi, cx};
use berezin_core::toeplitz::{level_for, toeplitz_block, toeplitz_matrix, DiskNodes};
use num_bigint::BigInt;
use proptest::prelude::*;

#[test]
fn fundamental_domain_has_area_pi_over_three() {
    let rule = fundamental_rule::<f64>(5).unwrap();
    assert_relative_eq!(rule.total_weight(), std::f64::consts::PI / 3.0, max_relative = 1e-12);
}

#[test]
fn delta_is_the_normalized_discriminant() {
    let (e4, e6) = (eisenstein_qexp(4, 60).unwrap(), eisenstein_qexp(6, 60).unwrap());
    let diff = e4.pow(3).combine(&BigInt::from(1), &e6.pow(2), &BigInt::from(-1)).unwrap();
    let delta = delta_qexp(60);
    for n in 0..=60 {
        assert_eq!(diff.coeffs[n], &delta.coeffs[n] * 1728);
    }
}

#[test]
fn constant_symbol_and_normalized_trace_agree_with_the_identity() {
    let n = 20;
    let nodes = DiskNodes::<f64>::for_level(level_for(n), n).unwrap();
    let model = BergmanModel::<f64>::new(4, n).unwrap();
    let t = toeplitz_matrix(&InvariantSymbol::constant(cx(1.0, 0.0)), &model, &nodes);
    let id = OperatorMatrix::identity(t.rows.clone());
    assert!((t.data - &id.data).norm() < 1e-8);
    let block = BlockModel::scalar(model);
    let tau = TraceWeights::new(&block, &fundamental_rule(4).unwrap()).unwrap().tau(&id).unwrap();
    assert_relative_eq!(tau.value.re, 1.0, epsilon = 1e-8);
}

#[test]
fn cusp_toeplitz_block_maps_between_weights() {
    let n = 20;
    let nodes = DiskNodes::<f64>::for_level(level_for(n), n).unwrap();
    let tf = toeplitz_block(&delta_qexp(80), 4, n, &nodes).unwrap();
    assert_eq!((tf.rows.weights.clone(), tf.cols.weights.clone()), (vec![16], vec![4]));
    assert!(tf.op_norm() > 0.0 && tf.op_norm() < 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reduction_lands_in_the_domain_on_the_same_orbit(x in -4.0f64..4.0, y in 0.02f64..3.0) {
        let z = HPoint::new(x, y).unwrap();
        let red = reduce_to_fundamental(&z).unwrap();
        prop_assert!(red.zstar.in_fundamental_domain(1e-12));
        let image = mobius_apply(&red.gamma, &z);
        prop_assert!((image.z() - red.zstar.z()).norm() < 1e-9 * (1.0 + red.zstar.y));
    }

    #[test]
    fn delta_has_weight_twelve(idx in 0usize..200, x in -0.5f64..0.5, y in 0.9f64..2.0) {
        let group = enumerate_gamma(3, 10_000).unwrap();
        let g: Sl2z = group[idx % group.len()];
        let z = HPoint::new(x, y).unwrap();
        let gz = mobius_apply(&g, &z);
        prop_assume!(gz.y > 0.3);
        let delta = delta_qexp(200);
        let lhs = eval_series(&delta, &gz, TAIL_TOLERANCE).unwrap().value;
        let rhs = cpowi(automorphy_j(&g, &z), 12) * eval_series(&delta, &z, TAIL_TOLERANCE).unwrap().value;
        prop_assert!((lhs - rhs).norm() <= 1e-9 * rhs.norm().max(lhs.norm()));
    }
}
