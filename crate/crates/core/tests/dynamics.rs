use std::sync::Arc;

use approx::assert_relative_eq;
use fracspde::error::Error;
use fracspde::exponents::choose_exponents;
use fracspde::fbm::{sample_qfbm, HurstParam, QFbmPath, TraceClassSpec};
use fracspde::fields::{FieldRef, FieldSet, SineField};
use fracspde::grid::TimeGrid;
use fracspde::malliavin::{
    coordinate_projection, gamma_matrix, malliavin_derivative, malliavin_matrices, reduced_malliavin,
    symmetric_eigenvalues,
};
use fracspde::semigroup::{GalerkinMatrix, GalerkinVector, SpectralSemigroup};
use fracspde::spde::{
    frechet_directional, solve_jacobian, solve_mild, solve_right_inverse, RightInverseScheme, SolutionPath,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hurst() -> HurstParam {
    HurstParam::new(0.8).unwrap()
}

fn constant(v: &[f64]) -> FieldRef {
    Arc::new(SineField::constant(&GalerkinVector::from_column_slice(v)))
}

fn noise(steps: usize, modes: usize, seed: u64) -> QFbmPath {
    let grid = TimeGrid::uniform(0.25, steps).unwrap();
    sample_qfbm(&TraceClassSpec::power_law(modes, 3.0).unwrap(), hurst(), &grid, seed).unwrap()
}

/// Nonlinear sine fields on three modes with two noise modes.
fn smooth_fields(sg: &SpectralSemigroup) -> FieldSet {
    let mut amp = DMatrix::zeros(3, 3);
    amp[(1, 0)] = 0.4;
    amp[(2, 1)] = 0.3;
    let freq = DMatrix::from_element(3, 3, 1.0);
    let g1 = SineField::new(vec![1.0, 0.0, 0.2], None, amp.clone(), freq.clone()).unwrap();
    let g2 = SineField::new(vec![0.0, 1.0, 0.0], None, amp.transpose(), freq.clone()).unwrap();
    let f = SineField::new(vec![0.0; 3], None, DMatrix::identity(3, 3) * 0.2, freq).unwrap();
    FieldSet::new(sg, Arc::new(f), vec![Arc::new(g1), Arc::new(g2)]).unwrap()
}

fn x0() -> GalerkinVector {
    GalerkinVector::from_vec(vec![0.5, -0.25, 0.125])
}

#[test]
fn exponent_examples() {
    let p = choose_exponents(HurstParam::new(0.9).unwrap(), 0.3).unwrap();
    assert!(p.is_valid() && p.violations().is_empty());
    assert!(p.gamma_tilde > p.kappa0 && p.kappa0 > p.kappa && p.kappa > 0.25);
    match choose_exponents(HurstParam::new(0.75).unwrap(), 0.3) {
        Err(Error::Infeasible(msg)) => assert!(msg.contains("eta-interval"), "{msg}"),
        other => panic!("expected infeasibility, got {other:?}"),
    }
}

#[test]
fn homogeneous_solution_is_the_semigroup() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let z = constant(&[0.0; 3]);
    let fields = FieldSet::new(&sg, z.clone(), vec![z.clone(), z]).unwrap();
    let path = noise(32, 2, 1);
    let sol = solve_mild(&x0(), &fields, &sg, &path).unwrap();
    for k in 0..=32 {
        let want = sg.apply_s(path.grid.t(k), &x0()).unwrap();
        assert!((sol.at(k) - &want).amax() < 1e-15);
    }
}

#[test]
fn linear_drift_converges_at_first_order() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let b = [0.5, -1.0, 2.0];
    let drift: FieldRef = Arc::new(SineField::linear_map(DMatrix::from_diagonal(&GalerkinVector::from_column_slice(&b))));
    let fields = FieldSet::new(&sg, drift, vec![constant(&[0.0; 3])]).unwrap();
    let errors: Vec<f64> = [64, 128, 256]
        .iter()
        .map(|&steps| {
            let sol = solve_mild(&x0(), &fields, &sg, &noise(steps, 1, 2)).unwrap();
            (0..3)
                .map(|n| (sol.last()[n] - x0()[n] * ((b[n] - sg.mu(n)) * 0.25).exp()).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    for w in errors.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((order - 1.0).abs() < 0.15, "{errors:?}");
    }
}

#[test]
fn flows_without_gradients() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let fields = FieldSet::new(&sg, constant(&[0.0; 3]), vec![constant(&[1.0, 0.5, 0.0]), constant(&[0.0, 1.0, 1.0])])
        .unwrap();
    let path = noise(16, 2, 3);
    let sol = solve_mild(&x0(), &fields, &sg, &path).unwrap();
    let flows = solve_right_inverse(&sol, &fields, &sg, &path, RightInverseScheme::ProductInverse).unwrap();
    let id = GalerkinMatrix::identity(3, 3);
    for k in 0..=16 {
        let t = path.grid.t(k);
        assert!((&flows.jacobian[k] - sg.matrix(t)).amax() < 1e-15);
        assert_eq!(flows.u(k).amax(), 0.0);
        let v = GalerkinVector::from_vec(vec![1.0, -1.0, 0.5]);
        let back = flows.apply_jplus(&sg, k, &v).unwrap();
        assert!((&flows.jacobian[k] * back - &v).amax() < 1e-12);
        assert_eq!(flows.r[k], id);
    }

    let h = QFbmPath::zeros(path.spec.clone(), path.grid.clone(), hurst());
    let y = frechet_directional(&sol, &fields, &sg, &path, &h).unwrap();
    assert!(y.iter().all(|v| v.amax() == 0.0));
}

fn directional_sum(sol: &SolutionPath, fields: &FieldSet, sg: &SpectralSemigroup, h: &QFbmPath) -> GalerkinVector {
    let k_end = sol.grid.steps();
    let t = sol.grid.t(k_end);
    let mut acc = GalerkinVector::zeros(sg.dim());
    for k in 0..k_end {
        for (i, g) in fields.diffusion.iter().enumerate() {
            let w = h.spec.sqrt_lambda(i) * h.increment(i, k);
            acc += sg.apply_s(t - sol.grid.t(k), &g.value(sol.at(k))).unwrap() * w;
        }
    }
    acc
}

#[test]
fn directional_derivative_reduces_to_a_convolution() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let fields = FieldSet::new(&sg, constant(&[0.0; 3]), vec![constant(&[1.0, 0.5, 0.0]), constant(&[0.0, 1.0, 1.0])])
        .unwrap();
    let path = noise(32, 2, 4);
    let sol = solve_mild(&x0(), &fields, &sg, &path).unwrap();
    let h = QFbmPath::from_values(
        path.spec.clone(),
        path.grid.clone(),
        hurst(),
        vec![
            path.grid.points().iter().map(|t| t.sin()).collect(),
            path.grid.points().iter().map(|t| t * t).collect(),
        ],
    )
    .unwrap();
    let y = frechet_directional(&sol, &fields, &sg, &path, &h).unwrap();
    let want = directional_sum(&sol, &fields, &sg, &h);
    assert!((y.last().unwrap() - want).amax() < 1e-14);
}

#[test]
fn directional_derivative_matches_shifted_noise() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let fields = smooth_fields(&sg);
    let path = noise(32, 2, 5);
    let sol = solve_mild(&x0(), &fields, &sg, &path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dir = QFbmPath::from_values(
        path.spec.clone(),
        path.grid.clone(),
        hurst(),
        (0..2)
            .map(|_| {
                let mut acc = 0.0;
                let mut v = vec![0.0];
                for _ in 0..32 {
                    acc += rng.random_range(-0.1..0.1);
                    v.push(acc);
                }
                v
            })
            .collect(),
    )
    .unwrap();
    let y = frechet_directional(&sol, &fields, &sg, &path, &dir).unwrap();
    let errs: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&eps| {
            let shifted = solve_mild(&x0(), &fields, &sg, &path.shifted(&dir, eps).unwrap()).unwrap();
            ((shifted.last() - sol.last()) / eps - y.last().unwrap()).norm()
        })
        .collect();
    assert!(errs[1] < errs[0] / 5.0 && errs[2] < errs[1] / 5.0, "{errs:?}");
}

#[test]
fn jacobian_is_linear_and_matches_differences() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let fields = smooth_fields(&sg);
    let path = noise(32, 2, 7);
    let sol = solve_mild(&x0(), &fields, &sg, &path).unwrap();
    let jac = solve_jacobian(&sol, &fields, &sg, &path).unwrap();
    let v = GalerkinVector::from_vec(vec![0.3, -0.2, 1.0]);
    let w = GalerkinVector::from_vec(vec![1.0, 0.4, -0.6]);
    let j = jac.last().unwrap();
    assert!((j * (&v * 2.0 + &w) - (j * &v * 2.0 + j * &w)).amax() < 1e-14);
    let eps = 1e-5;
    let plus = solve_mild(&(x0() + &v * eps), &fields, &sg, &path).unwrap();
    let fd = (plus.last() - sol.last()) / eps;
    let jv = j * &v;
    assert!((&fd - &jv).norm() < 1e-3 * jv.norm());
}

#[test]
fn right_inverse_products() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let fields = smooth_fields(&sg);
    let path = noise(32, 2, 8);
    let sol = solve_mild(&x0(), &fields, &sg, &path).unwrap();
    let flows = solve_right_inverse(&sol, &fields, &sg, &path, RightInverseScheme::ProductInverse).unwrap();
    assert!(flows.product_defect() < 1e-6);
    assert!(flows.flow_defect(&sg) < 1e-12);
    let w = GalerkinVector::from_vec(vec![0.2, 1.0, -0.5]);
    for k in [4, 16, 32] {
        let sw = sg.apply_s(path.grid.t(k), &w).unwrap();
        let back = flows.apply_jplus(&sg, k, &sw).unwrap();
        assert!((&flows.jacobian[k] * back - &sw).norm() < 1e-6 * w.norm());
    }
    let euler = solve_right_inverse(&sol, &fields, &sg, &path, RightInverseScheme::Euler).unwrap();
    assert!(euler.product_defect() > flows.product_defect());
}

#[test]
fn malliavin_kernel_and_matrices() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let fields = smooth_fields(&sg);
    let path = noise(16, 2, 9);
    let sol = solve_mild(&x0(), &fields, &sg, &path).unwrap();
    let flows = solve_right_inverse(&sol, &fields, &sg, &path, RightInverseScheme::ProductInverse).unwrap();

    let d = malliavin_derivative(&sol, &flows, &fields, &sg, 10, 10, 1).unwrap();
    let g = fields.diffusion[1].value(sol.at(10));
    assert!((&d - &g).norm() < 1e-10 * g.norm());
    assert_eq!(malliavin_derivative(&sol, &flows, &fields, &sg, 11, 10, 0).unwrap().amax(), 0.0);

    let proj = coordinate_projection(3, &[0, 2]).unwrap();
    let mm = malliavin_matrices(&sol, &flows, &fields, &sg, &path, 16, hurst(), &proj).unwrap();
    assert!((&mm.c - mm.c.transpose()).amax() < 1e-12);
    assert!(mm.c_eigenvalues[0] >= -1e-10 && mm.gamma_eigenvalues[0] >= -1e-10);
    let full = gamma_matrix(&mm.c, &GalerkinMatrix::identity(3, 3), &DMatrix::identity(3, 3)).unwrap();
    assert_eq!(full, mm.c);
    assert_relative_eq!(symmetric_eigenvalues(&full)[2], mm.c_eigenvalues[2], max_relative = 1e-12);
}

#[test]
fn constant_transport_without_gradients() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let g = [1.0, 0.5, -0.25];
    let fields = FieldSet::new(&sg, constant(&[0.0; 3]), vec![constant(&g)]).unwrap();
    let path = noise(16, 1, 10);
    let sol = solve_mild(&x0(), &fields, &sg, &path).unwrap();
    let flows = solve_right_inverse(&sol, &fields, &sg, &path, RightInverseScheme::ProductInverse).unwrap();
    for r in [0, 5, 12] {
        let d = malliavin_derivative(&sol, &flows, &fields, &sg, r, 16, 0).unwrap();
        let want = sg.apply_s(path.grid.t(16) - path.grid.t(r), &GalerkinVector::from_column_slice(&g)).unwrap();
        assert!((&d - &want).amax() < 1e-12 * want.amax());
    }

    let zero = FieldSet::new(&sg, constant(&[0.0; 3]), vec![constant(&[0.0; 3])]).unwrap();
    let sol = solve_mild(&x0(), &zero, &sg, &path).unwrap();
    let flows = solve_right_inverse(&sol, &zero, &sg, &path, RightInverseScheme::ProductInverse).unwrap();
    let c = reduced_malliavin(&sol, &flows, &zero, &sg, &path, 16, hurst()).unwrap();
    assert_eq!(c.amax(), 0.0);
}
