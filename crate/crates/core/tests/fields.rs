use std::sync::Arc;

use approx::assert_relative_eq;
use fracspde::exponents::choose_exponents;
use fracspde::fbm::HurstParam;
use fracspde::fields::{
    assumption_audit, build_hierarchy, lie_bracket, numerical_rank, AuditStatus, Bracket, FieldRef, FieldSet,
    QuadraticField, RangeField, SineField, VectorField,
};
use fracspde::semigroup::{GalerkinVector, SpectralSemigroup};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(n: usize, i: usize) -> GalerkinVector {
    GalerkinVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 })
}

fn random_vector(n: usize, rng: &mut ChaCha8Rng) -> GalerkinVector {
    GalerkinVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn sine(n: usize, seed: u64) -> SineField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lin = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
    let amp = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let freq = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.5..2.0));
    SineField::new(offset, Some(lin), amp, freq).unwrap()
}

/// `G_1 = e_1`, `G_2 = e_2 + x_1 e_3` with zero drift on three modes.
fn coupled_pair(sg: &SpectralSemigroup) -> FieldSet {
    let zero: FieldRef = Arc::new(SineField::constant(&GalerkinVector::zeros(3)));
    let mut l = DMatrix::zeros(3, 3);
    l[(2, 0)] = 1.0;
    let g2 = SineField::new(vec![0.0, 1.0, 0.0], Some(l), DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)).unwrap();
    FieldSet::new(sg, zero, vec![Arc::new(SineField::constant(&unit(3, 0))), Arc::new(g2)]).unwrap()
}

fn fd_check(f: &dyn VectorField, rng: &mut ChaCha8Rng) {
    let n = f.dim();
    let eps = 1e-5;
    for _ in 0..5 {
        let x = random_vector(n, rng);
        let h = random_vector(n, rng);
        let fd = (f.value(&(&x + &h * eps)) - f.value(&(&x - &h * eps))) / (2.0 * eps);
        let jv = f.jvp(&x, &h);
        assert!((&fd - &jv).norm() <= 1e-5 * jv.norm().max(1.0), "{}", f.label());
        let k = random_vector(n, rng);
        let hk = f.derivative(&x, &[&h, &k]);
        let kh = f.derivative(&x, &[&k, &h]);
        assert!((hk - kh).norm() < 1e-10);
    }
}

#[test]
fn derivatives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sg = SpectralSemigroup::dirichlet_laplacian(4).unwrap();
    let u: FieldRef = Arc::new(sine(4, 1));
    let v: FieldRef = Arc::new(sine(4, 2));
    fd_check(u.as_ref(), &mut rng);
    fd_check(&Bracket::new(u.clone(), v.clone()).unwrap(), &mut rng);
    let range = RangeField::new(v, 0.05, sg).unwrap();
    fd_check(&range, &mut rng);
}

#[test]
fn range_field_preimage_is_the_inner_field() {
    let sg = SpectralSemigroup::dirichlet_laplacian(5).unwrap();
    let w = Arc::new(sine(5, 3));
    let v = RangeField::new(w.clone(), 0.1, sg.clone()).unwrap();
    let x = random_vector(5, &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(v.preimage_derivative(&x, &[]).unwrap(), w.value(&x));
    assert!((v.value(&x) - sg.apply_s(0.1, &w.value(&x)).unwrap()).amax() < 1e-15);
    assert_eq!(v.range().unwrap().0, 0.1);
}

#[test]
fn bracket_examples() {
    let n = 4;
    let mut lv = DMatrix::zeros(n, n);
    lv[(0, 1)] = 1.0;
    let mut lw = DMatrix::zeros(n, n);
    lw[(1, 0)] = 1.0;
    let v = SineField::linear_map(lv);
    let w = SineField::linear_map(lw);
    let x = GalerkinVector::from_vec(vec![0.7, -1.3, 2.0, 0.4]);
    let b = lie_bracket(&v, &w, &x);
    assert_eq!(b, GalerkinVector::from_vec(vec![-0.7, -1.3, 0.0, 0.0]));
    assert_eq!(lie_bracket(&w, &v, &x), -b);

    let c1 = SineField::constant(&unit(n, 0));
    let c2 = SineField::constant(&GalerkinVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
    assert_eq!(lie_bracket(&c1, &c2, &x).amax(), 0.0);

    let p = sine(n, 5);
    let q = sine(n, 6);
    assert_eq!(lie_bracket(&p, &q, &x), -lie_bracket(&q, &p, &x));
}

#[test]
fn hierarchy_ranks() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let x0 = GalerkinVector::from_vec(vec![0.5, -0.25, 0.1]);

    let zero: FieldRef = Arc::new(SineField::constant(&GalerkinVector::zeros(3)));
    let constants = FieldSet::new(
        &sg,
        zero,
        vec![Arc::new(SineField::constant(&unit(3, 0))), Arc::new(SineField::constant(&unit(3, 1)))],
    )
    .unwrap();
    let hier = build_hierarchy(&constants, &x0, 3, 512).unwrap();
    for k in 0..=3 {
        assert_eq!(hier.rank_at_level(k, None, 1e-8).unwrap().rank, 2);
    }

    let coupled = coupled_pair(&sg);
    let hier = build_hierarchy(&coupled, &x0, 2, 512).unwrap();
    assert_eq!(hier.rank_at_level(0, None, 1e-8).unwrap().rank, 2);
    assert_eq!(hier.rank_at_level(1, None, 1e-8).unwrap().rank, 3);
    let proj = DMatrix::<f64>::identity(3, 3);
    assert_eq!(hier.rank_at(Some(&proj), 1e-8).unwrap().rank, 3);
    assert!((0..2).all(|k| hier.count_at(k) <= hier.count_at(k + 1)));

    let e3 = lie_bracket(coupled.diffusion[0].as_ref(), coupled.diffusion[1].as_ref(), &x0);
    assert_relative_eq!(e3[2].abs(), 1.0, max_relative = 1e-15);
}

#[test]
fn rank_of_test_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
    assert_eq!(numerical_rank(&m, 1e-8).unwrap().0, 5);
    let col = DMatrix::from_fn(5, 1, |_, _| rng.random_range(-1.0..1.0));
    let dup = DMatrix::from_fn(5, 4, |i, _| col[(i, 0)]);
    assert_eq!(numerical_rank(&dup, 1e-8).unwrap().0, 1);
}

#[test]
fn audit_flags_growth_and_structure() {
    let sg = SpectralSemigroup::dirichlet_laplacian(3).unwrap();
    let profile = choose_exponents(HurstParam::new(0.9).unwrap(), 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let points: Vec<GalerkinVector> = (0..4).map(|_| random_vector(3, &mut rng)).collect();

    let bounded = |w: SineField| -> FieldRef { Arc::new(RangeField::new(Arc::new(w), 0.1, sg.clone()).unwrap()) };
    let mut amp = DMatrix::zeros(3, 3);
    amp[(2, 0)] = 0.5;
    let g = SineField::new(vec![1.0, 0.0, 0.0], None, amp, DMatrix::from_element(3, 3, 1.0)).unwrap();
    let f = SineField::new(vec![0.0; 3], None, DMatrix::identity(3, 3) * 0.2, DMatrix::from_element(3, 3, 1.0)).unwrap();
    let fields = FieldSet::new(&sg, bounded(f), vec![bounded(g)]).unwrap();
    let report = assumption_audit(&fields, &profile, &points);
    assert!(report.all_pass(), "{report:?}");
    for name in ["B1", "C1"] {
        assert_eq!(report.get(name).unwrap().status, AuditStatus::Pass);
    }

    let quad: FieldRef = Arc::new(QuadraticField {
        coeff: DMatrix::from_element(3, 3, 1.0),
    });
    let fields = FieldSet::new(&sg, quad, vec![Arc::new(SineField::constant(&unit(3, 0)))]).unwrap();
    let report = assumption_audit(&fields, &profile, &points);
    assert_eq!(report.get("H1-growth").unwrap().status, AuditStatus::Warn);
    assert_eq!(report.get("B1").unwrap().status, AuditStatus::Warn);
}
