#![allow(dead_code)]

//! Central finite-difference checks of the analytic loss gradients. Each
//! check returns the worst relative error over its fixtures.

use osrmix::augment::MixedBatch;
use osrmix::losses::{
    cmi_loss, kl_distill, relabel_loss, tf_mi_loss, tf_relabel_loss, KlDirection, VerifyMode,
};
use osrmix::tensor::{softmax_rows, ImageShape, Images, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
pub const TOL: f64 = 1e-4;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Mat::from_vec(rows, cols, data).unwrap()
}

/// Max relative error between `analytic` and the central difference of `f`.
fn check(x: &Mat, analytic: &Mat, f: impl Fn(&Mat) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.data.len() {
        let mut p = x.clone();
        let mut m = x.clone();
        p.data[i] += H;
        m.data[i] -= H;
        let numeric = (f(&p) - f(&m)) / (2.0 * H);
        let a = analytic.data[i];
        let err = (numeric - a).abs() / (numeric.abs() + a.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn fixture_mixed(rng: &mut ChaCha8Rng, b: usize, c: usize) -> MixedBatch {
    let src_i: Vec<usize> = (0..b).collect();
    let src_j: Vec<usize> = (0..b).map(|n| (n + 1) % b).collect();
    let c1: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let c2: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let lam: Vec<f64> = (0..b).map(|_| rng.random_range(0.05..0.95)).collect();
    let mut y_m = Mat::zeros(b, c);
    for n in 0..b {
        let r = y_m.row_mut(n);
        r[c1[n]] += lam[n];
        r[c2[n]] += 1.0 - lam[n];
    }
    MixedBatch {
        images: Images::zeros(b, ImageShape::new(1, 1, 1)),
        src_i,
        src_j,
        lam,
        mask: vec![true; b],
        y_m,
        c1,
        c2,
    }
}

pub fn kl_worst() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
        for t in [1.0, 2.5] {
            let s = random_mat(&mut rng, 5, 4, 2.0);
            let te = random_mat(&mut rng, 5, 4, 2.0);
            let l = kl_distill(&s, &te, t, dir).unwrap();
            let err = check(&s, &l.grad, |x| kl_distill(x, &te, t, dir).unwrap().value);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn cmi_worst() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..3 {
        let s = random_mat(&mut rng, 5, 6, 1.0);
        let ti = random_mat(&mut rng, 5, 6, 1.0);
        let tj = random_mat(&mut rng, 5, 6, 1.0);
        let lam: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
        let l = cmi_loss(&s, &ti, &tj, &lam, 0.1).unwrap();
        let err = check(&s, &l.grad, |x| cmi_loss(x, &ti, &tj, &lam, 0.1).unwrap().value);
        worst = worst.max(err);
    }
    worst
}

pub fn relabel_worst() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [VerifyMode::Top1Outside, VerifyMode::Top2Outside] {
        let mixed = fixture_mixed(&mut rng, 5, 6);
        let logits = random_mat(&mut rng, 5, 6, 2.0);
        // The teacher rejects even rows: both of its top-2 classes lie
        // outside {c1, c2}. Odd rows are accepted.
        let mut tp = Mat::zeros(5, 6);
        for n in 0..5 {
            let outside: Vec<usize> = (0..6).filter(|k| *k != mixed.c1[n] && *k != mixed.c2[n]).collect();
            let r = tp.row_mut(n);
            r.iter_mut().for_each(|v| *v = 0.02);
            if n % 2 == 0 {
                r[outside[0]] = 0.86;
                r[outside[1]] = 0.06;
            } else {
                r[mixed.c1[n]] = 0.92;
            }
        }
        let l = relabel_loss(&logits, &mixed, &tp, mode).unwrap();
        assert_eq!(l.active_count(), 3);
        let err = check(&logits, &l.grad, |x| relabel_loss(x, &mixed, &tp, mode).unwrap().value);
        worst = worst.max(err);
    }
    worst
}

pub fn tf_mi_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mixed = fixture_mixed(&mut rng, 5, 3);
    let fm = random_mat(&mut rng, 5, 6, 1.0);
    let fr = random_mat(&mut rng, 5, 6, 1.0);
    // Confident on c1 for some rows, c2 for others.
    let mut logits = Mat::zeros(5, 3);
    for n in 0..5 {
        let k = if n % 2 == 0 { mixed.c1[n] } else { mixed.c2[n] };
        logits.set(n, k, 5.0);
    }
    let probs = softmax_rows(&logits);
    let run = |m: &Mat, r: &Mat| {
        tf_mi_loss(m, r, &mixed.src_i, &mixed.src_j, &probs, &mixed.c1, &mixed.c2, 0.8, 0.1).unwrap()
    };
    let l = run(&fm, &fr);
    assert!(l.active_count() > 0);
    let e1 = check(&fm, &l.d_mixed, |x| run(x, &fr).value);
    let e2 = check(&fr, &l.d_raw, |x| run(&fm, x).value);
    e1.max(e2)
}

pub fn tf_relabel_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_mat(&mut rng, 5, 4, 1.0);
    let probs = softmax_rows(&logits);
    let l = tf_relabel_loss(&logits, &probs, 0.5, 4).unwrap();
    assert!(l.active_count() > 0);
    // The gate is evaluated on fixed probabilities, so it stays constant
    // while the logits are perturbed.
    check(&logits, &l.grad, |x| tf_relabel_loss(x, &probs, 0.5, 4).unwrap().value)
}

/// Every check by loss name.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("kl_distill", kl_worst()),
        ("cmi_loss", cmi_worst()),
        ("relabel_loss", relabel_worst()),
        ("tf_mi_loss", tf_mi_worst()),
        ("tf_relabel_loss", tf_relabel_worst()),
    ]
}
