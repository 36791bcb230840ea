//! Monte Carlo behaviour of the unit-root and stationarity tests at n = 500.

use collidenet_core::diagnostics::{adf_critical_values, adf_pvalue, adf_test, kpss_pvalue, kpss_test};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const N: usize = 500;
const RUNS: u64 = 100;

fn white_noise(seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..N).map(|_| StandardNormal.sample(&mut r)).collect()
}

fn random_walk(seed: u64) -> Vec<f64> {
    let mut acc = 0.0;
    white_noise(seed ^ 0x5eed)
        .into_iter()
        .map(|e| {
            acc += e;
            acc
        })
        .collect()
}

fn ar1(seed: u64, phi: f64) -> Vec<f64> {
    let mut y = 0.0;
    white_noise(seed ^ 0xa21)
        .into_iter()
        .map(|e| {
            y = phi * y + e;
            y
        })
        .collect()
}

fn fraction(pred: impl Fn(u64) -> bool) -> f64 {
    (0..RUNS).filter(|&s| pred(s)).count() as f64 / RUNS as f64
}

#[test]
fn adf_rejects_white_noise() {
    let strong = fraction(|s| adf_test(&white_noise(s), None).unwrap().p < 0.01);
    let at_5 = fraction(|s| adf_test(&white_noise(s), None).unwrap().p < 0.05);
    println!("ADF white noise: p<0.01 in {strong:.2}, p<0.05 in {at_5:.2}");
    assert!(strong >= 0.95);
    assert!(at_5 >= 0.95);
}

#[test]
fn adf_keeps_random_walk_unit_root() {
    let at_10 = fraction(|s| adf_test(&random_walk(s), None).unwrap().p > 0.10);
    let at_5 = fraction(|s| adf_test(&random_walk(s), None).unwrap().p >= 0.05);
    println!("ADF random walk: p>0.10 in {at_10:.2}, p>=0.05 in {at_5:.2}");
    assert!(at_10 >= 0.90);
    assert!(at_5 >= 0.90);
}

#[test]
fn adf_strongly_negative_on_stationary_ar1() {
    let mut below = 0;
    for s in 0..20 {
        let r = adf_test(&ar1(s, 0.5), None).unwrap();
        assert!(r.stat < -3.0, "seed {s}: stat {}", r.stat);
        below += (r.p < 0.05) as usize;
    }
    assert!(below >= 19);
}

#[test]
fn kpss_accepts_white_noise() {
    let ceiling = fraction(|s| kpss_test(&white_noise(s), None).unwrap().p == 0.10);
    let at_5 = fraction(|s| kpss_test(&white_noise(s), None).unwrap().p >= 0.05);
    println!("KPSS white noise: p at 0.10 ceiling in {ceiling:.2}, p>=0.05 in {at_5:.2}");
    assert!(ceiling >= 0.90);
    assert!(at_5 >= 0.90);
}

#[test]
fn kpss_rejects_random_walk() {
    let floor = fraction(|s| kpss_test(&random_walk(s), None).unwrap().p == 0.01);
    let at_5 = fraction(|s| kpss_test(&random_walk(s), None).unwrap().p < 0.05);
    println!("KPSS random walk: p at 0.01 floor in {floor:.2}, p<0.05 in {at_5:.2}");
    assert!(floor >= 0.90);
    assert!(at_5 >= 0.95);
}

#[test]
fn kpss_ceiling_is_one_tenth() {
    assert_eq!(kpss_pvalue(0.0), 0.100);
    assert_eq!(kpss_pvalue(0.347), 0.10);
    assert_eq!(kpss_pvalue(10.0), 0.01);
    assert!((kpss_pvalue(0.405) - 0.075).abs() < 1e-12);
}

#[test]
fn adf_pvalue_agrees_with_critical_values() {
    // The response surface and the finite-sample quantiles are separate
    // fits; at large n they should agree to about a percentage point.
    for (level, cv) in adf_critical_values(100_000) {
        let p = adf_pvalue(cv);
        assert!((p - level).abs() < 0.01, "{level}: cv {cv} gives p {p}");
    }
}
