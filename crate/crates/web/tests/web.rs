use diffant_web::{alpha_bar_values, synth_timeline, trajectory_steps};

#[test]
fn alpha_bar_curve_starts_at_one_and_decreases() {
    let v = alpha_bar_values("linear", 1000, 1e-4, 0.02).unwrap();
    assert_eq!(v.len(), 1001);
    assert_eq!(v[0], 1.0);
    assert!(v.windows(2).all(|w| w[1] < w[0]));
    assert!(alpha_bar_values("cosine", 10, 1e-4, 0.02).is_err());
}

#[test]
fn trajectory_matches_the_stride_rule() {
    let t = trajectory_steps(1000, 100).unwrap();
    let expected: Vec<u32> = (0..100).rev().map(|i| 1 + 10 * i).collect();
    assert_eq!(t, expected);
    assert!(trajectory_steps(10, 20).is_err());
}

#[test]
fn timeline_futures_form_a_distribution() {
    let t = synth_timeline(0.5, 7, 0.3).unwrap();
    assert!(t.observed > 0 && t.observed < t.frames.len());
    let total: f64 = t.futures.iter().map(|f| f.0).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let last = *t.frames[..t.observed].last().unwrap();
    assert!(t.futures.iter().all(|f| f.1.first() == Some(&last)));
    assert_eq!(synth_timeline(0.5, 7, 0.3).unwrap(), t);
    assert!(synth_timeline(0.5, 7, 1.0).is_err());
}
