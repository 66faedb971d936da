use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_student::autodiff::{numeric_gradient, relative_error, Tape};
use robust_student::losses::{
    cross_entropy, gradient_match_value, kd_loss, score_margin_loss, total_loss, LossConfig, TeacherTargets,
};
use robust_student::nn::{Network, NetworkSpec, Role};
use robust_student::tensor::Tensor;

fn tiny_spec() -> NetworkSpec {
    "input 1x2x2\nmaxout-dense units=4 pieces=2\ndense units=3\nsoftmax".parse().unwrap()
}

fn conv_spec() -> NetworkSpec {
    "input 1x4x4\nmaxout-conv units=2 kernel=3 pieces=2 pad=1\nmax-pool window=2x2 stride=2x2\ndense units=3\nsoftmax"
        .parse()
        .unwrap()
}

fn batch(seed: u64, n: usize, shape: [usize; 3], classes: usize) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, labels)
}

fn loss_value(student: &Network, x: &Tensor, labels: &[usize], targets: &TeacherTargets, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true);
    let terms = total_loss(&mut tape, student, &params, x, labels, targets, cfg).unwrap();
    tape.value(terms.total).item().unwrap()
}

#[test]
fn gradient_match_is_zero_for_copied_parameters() {
    let teacher = Network::build(tiny_spec(), 1, Role::Teacher).unwrap();
    let student = teacher.clone().with_role(Role::Student);
    let (x, labels) = batch(2, 5, [1, 2, 2], 3);
    let cfg = LossConfig::default();
    let targets = TeacherTargets::compute(&teacher, &x, &labels, &cfg).unwrap();
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true);
    let terms = total_loss(&mut tape, &student, &params, &x, &labels, &targets, &cfg).unwrap();
    assert_eq!(terms.gradient_match, 0.0);
    assert_eq!(terms.mean_margin, 0.0);
    assert!((terms.score_margin - cfg.gamma).abs() < 1e-15);
}

#[test]
fn zero_teacher_leaves_the_student_gradient_norm() {
    let mut teacher = Network::build(tiny_spec(), 3, Role::Teacher).unwrap();
    let zeros = teacher.param_values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    teacher.set_param_values(zeros).unwrap();
    let student = Network::build(tiny_spec(), 4, Role::Student).unwrap();
    let (x, labels) = batch(5, 4, [1, 2, 2], 3);
    let cfg = LossConfig::default();
    let targets = TeacherTargets::compute(&teacher, &x, &labels, &cfg).unwrap();
    assert!(targets.soft_gradient.as_ref().unwrap().data().iter().all(|&g| g == 0.0));

    let g = student.score_gradient(&x, &labels, cfg.tau).unwrap().1;
    let want = g.dot(&g).unwrap() / 4.0;
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true);
    let terms = total_loss(&mut tape, &student, &params, &x, &labels, &targets, &cfg).unwrap();
    assert!((terms.gradient_match - want).abs() < 1e-15 * want.max(1.0));
}

#[test]
fn gradient_match_matches_finite_difference_input_gradients() {
    let teacher = Network::build(tiny_spec(), 10, Role::Teacher).unwrap();
    let student = Network::build(tiny_spec(), 11, Role::Student).unwrap();
    let (x, labels) = batch(12, 3, [1, 2, 2], 3);
    let tau = 3.0;
    let soft_label_prob = |net: &Network, xi: &Tensor, y: usize| {
        let (logits, _) = net.predict(xi).unwrap();
        let z: Vec<f64> = logits.data().iter().map(|a| (a / tau).exp()).collect();
        z[y] / z.iter().sum::<f64>()
    };
    let mut want = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let xi = x.slice_outer(n).unwrap();
        let gs = numeric_gradient(&xi, 1e-6, |z| Ok(soft_label_prob(&student, z, y))).unwrap();
        let gt = numeric_gradient(&xi, 1e-6, |z| Ok(soft_label_prob(&teacher, z, y))).unwrap();
        let d = gs.sub(&gt).unwrap();
        want += d.dot(&d).unwrap();
    }
    want /= labels.len() as f64;
    let got = gradient_match_value(&student, &teacher, &x, &labels, tau).unwrap();
    assert!((got - want).abs() <= 1e-6 * want.max(1e-3), "{got} vs {want}");
}

#[test]
fn gradient_match_is_symmetric() {
    let a = Network::build(conv_spec(), 20, Role::Student).unwrap();
    let b = Network::build(conv_spec(), 21, Role::Teacher).unwrap();
    let (x, labels) = batch(22, 4, [1, 4, 4], 3);
    let ab = gradient_match_value(&a, &b, &x, &labels, 2.0).unwrap();
    let ba = gradient_match_value(&b, &a, &x, &labels, 2.0).unwrap();
    assert!(ab > 0.0);
    assert_eq!(ab, ba);
}

#[test]
fn total_loss_equals_independent_terms() {
    let teacher = Network::build(conv_spec(), 30, Role::Teacher).unwrap();
    let student = Network::build(conv_spec(), 31, Role::Student).unwrap();
    let (x, labels) = batch(32, 5, [1, 4, 4], 3);
    let cfg = LossConfig {
        lambda: 0.7,
        tau: 2.5,
        gamma: 0.3,
        c1: 4.0,
        c2: 1.5,
    };
    let targets = TeacherTargets::compute(&teacher, &x, &labels, &cfg).unwrap();
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true);
    let terms = total_loss(&mut tape, &student, &params, &x, &labels, &targets, &cfg).unwrap();

    let n = labels.len() as f64;
    let (mut kd, mut f_s, mut f_t) = (0.0, vec![], vec![]);
    for (i, &y) in labels.iter().enumerate() {
        let xi = x.slice_outer(i).unwrap();
        let (a_s, o_s) = student.predict(&xi).unwrap();
        let (a_t, o_t) = teacher.predict(&xi).unwrap();
        let (a_s, o_s, a_t) = (a_s.reshape([3]).unwrap(), o_s.reshape([3]).unwrap(), a_t.reshape([3]).unwrap());
        kd += kd_loss(&o_s, &a_s, &a_t, y, &cfg).unwrap() / n;
        f_s.push(o_s.data()[y]);
        f_t.push(o_t.data()[y]);
    }
    let l_s = score_margin_loss(&f_s, &f_t, cfg.gamma).unwrap();
    let l_g = gradient_match_value(&student, &teacher, &x, &labels, cfg.tau).unwrap();
    let want = kd + cfg.c1 * l_g + cfg.c2 * l_s;
    assert!((terms.kd - kd).abs() < 1e-10);
    assert!((terms.gradient_match - l_g).abs() < 1e-10);
    assert!((terms.score_margin - l_s).abs() < 1e-10);
    assert!((tape.value(terms.total).item().unwrap() - want).abs() < 1e-10);
}

#[test]
fn zero_coefficients_reduce_to_cross_entropy_exactly() {
    let teacher = Network::build(tiny_spec(), 40, Role::Teacher).unwrap();
    let student = Network::build(tiny_spec(), 41, Role::Student).unwrap();
    let (x, labels) = batch(42, 6, [1, 2, 2], 3);
    let plain = LossConfig::plain();
    let targets = TeacherTargets::compute(&teacher, &x, &labels, &plain).unwrap();
    assert!(targets.soft_gradient.is_none());
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true);
    let terms = total_loss(&mut tape, &student, &params, &x, &labels, &targets, &plain).unwrap();
    assert_eq!(tape.value(terms.total).item().unwrap(), terms.cross_entropy);

    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let o = student.predict(&x.slice_outer(i).unwrap()).unwrap().1.reshape([3]).unwrap();
        ce += cross_entropy(&o, y).unwrap();
    }
    assert!((terms.cross_entropy - ce / 6.0).abs() < 1e-12);

    let kd_cfg = LossConfig::default().kd_only();
    let targets = TeacherTargets::compute(&teacher, &x, &labels, &kd_cfg).unwrap();
    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true);
    let terms = total_loss(&mut tape, &student, &params, &x, &labels, &targets, &kd_cfg).unwrap();
    assert_eq!(tape.value(terms.total).item().unwrap(), terms.kd);
}

fn check_parameter_gradient(spec: NetworkSpec, seed: u64, shape: [usize; 3]) {
    let teacher = Network::build(spec.clone(), seed, Role::Teacher).unwrap();
    let student = Network::build(spec, seed + 1, Role::Student).unwrap();
    let (x, labels) = batch(seed + 2, 3, shape, 3);
    let cfg = LossConfig {
        lambda: 0.5,
        tau: 2.0,
        gamma: 0.5,
        c1: 5.0,
        c2: 1.0,
    };
    let targets = TeacherTargets::compute(&teacher, &x, &labels, &cfg).unwrap();

    let mut tape = Tape::new();
    let params = student.bind(&mut tape, true);
    let terms = total_loss(&mut tape, &student, &params, &x, &labels, &targets, &cfg).unwrap();
    assert!(terms.gradient_match > 0.0);
    let grads = tape.backward(terms.total, &params, false).unwrap();

    let values = student.param_values();
    for (i, g) in grads.iter().enumerate() {
        let analytic = tape.value(*g).clone();
        let numeric = numeric_gradient(&values[i], 1e-6, |p| {
            let mut probe = student.clone();
            let mut vals = values.clone();
            vals[i] = p.clone();
            probe.set_param_values(vals)?;
            Ok(loss_value(&probe, &x, &labels, &targets, &cfg))
        })
        .unwrap();
        let err = relative_error(&analytic, &numeric, 1e-4);
        assert!(err < 1e-3, "parameter {i}: relative error {err}");
    }
}

#[test]
fn total_loss_parameter_gradient_matches_finite_differences_dense() {
    check_parameter_gradient(tiny_spec(), 50, [1, 2, 2]);
}

#[test]
fn total_loss_parameter_gradient_matches_finite_differences_conv() {
    check_parameter_gradient(conv_spec(), 60, [1, 4, 4]);
}
