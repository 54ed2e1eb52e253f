use std::collections::BTreeMap;

use diffant::data::{fraction_of, generate_dataset, split_observation, GrammarSpec};
use diffant::eval::{
    diverse_eval, moc, seg_metrics, top1_index, DiversityProtocol, EvalWindow, MetricReport,
    WindowTruth,
};
use proptest::prelude::*;

fn frames(max_class: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..max_class, 1..40)
}

fn single(pred: Vec<usize>, gt: Vec<usize>) -> (BTreeMap<String, Vec<usize>>, Vec<WindowTruth>) {
    let preds = BTreeMap::from([("v".to_string(), pred)]);
    (
        preds,
        vec![WindowTruth {
            video_id: "v".into(),
            frames: gt,
        }],
    )
}

proptest! {
    #[test]
    fn moc_is_a_fraction_and_one_on_truth(gt in frames(5), noise in frames(5)) {
        let pred: Vec<usize> = gt.iter().zip(noise.iter().cycle()).map(|(&g, &n)| if n == 0 { (g + 1) % 5 } else { g }).collect();
        let (p, t) = single(pred, gt.clone());
        let v = moc(&p, &t).unwrap().moc().unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let (p, t) = single(gt.clone(), gt);
        prop_assert_eq!(moc(&p, &t).unwrap().moc().unwrap(), 1.0);
    }

    #[test]
    fn top1_picks_the_most_correct_sample(gt in frames(4), samples in prop::collection::vec(frames(4), 1..6)) {
        let n = gt.len();
        let samples: Vec<Vec<usize>> = samples.into_iter().map(|s| s.into_iter().cycle().take(n).collect()).collect();
        let correct = |s: &Vec<usize>| s.iter().zip(&gt).filter(|(a, b)| a == b).count();
        let best = top1_index(&samples, &gt);
        prop_assert!(samples.iter().all(|s| correct(s) <= correct(&samples[best])));
        prop_assert!(samples[..best].iter().all(|s| correct(s) < correct(&samples[best])));

        let one = BTreeMap::from([("v".to_string(), vec![samples[0].clone()])]);
        let t = vec![WindowTruth { video_id: "v".into(), frames: gt.clone() }];
        prop_assert_eq!(
            diverse_eval(&one, &t, DiversityProtocol::Top1).unwrap(),
            diverse_eval(&one, &t, DiversityProtocol::Averaged).unwrap()
        );
    }

    #[test]
    fn segmentation_scores_are_bounded(pred in frames(4), gt in frames(4)) {
        let m = seg_metrics(&pred, &gt);
        prop_assert!((0.0..=1.0).contains(&m.acc));
        prop_assert!((0.0..=100.0).contains(&m.edit));
        prop_assert!(m.f1.iter().all(|f| (0.0..=100.0).contains(f)));
        let same = seg_metrics(&gt, &gt);
        prop_assert_eq!(same.acc, 1.0);
        prop_assert_eq!(same.edit, 100.0);
        prop_assert!(same.f1.iter().all(|&f| f == 100.0));
    }

    #[test]
    fn window_stays_inside_the_video(alpha in 0.05f64..0.9, beta in 0.05f64..0.9, t in 10usize..500) {
        prop_assume!(alpha + beta <= 1.0);
        let w = EvalWindow::new(alpha, beta).unwrap();
        match w.range(t) {
            Ok(r) => prop_assert!(0 < r.start && r.start < r.end && r.end <= t),
            Err(_) => prop_assert!(fraction_of(t, alpha) == 0 || fraction_of(t, beta) == 0),
        }
    }

    #[test]
    fn observation_splits_are_lossless(seed in 0u64..1000, alpha in 0.1f64..0.9) {
        let spec = GrammarSpec::default_profile(0.5);
        let v = generate_dataset(&spec, 1, seed).unwrap().remove(0).subsample(3);
        let s = split_observation(&v, alpha, None).unwrap();
        let total: f64 = s.relative_segments().iter().map(|r| r.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let rebuilt: Vec<usize> = s.future_segments.iter().flat_map(|&(c, n)| std::iter::repeat(c).take(n)).collect();
        prop_assert_eq!(&rebuilt[..], &v.frame_labels[s.observed.len()..]);
    }
}

#[test]
fn report_text_round_trips() {
    let mut r = MetricReport::new();
    r.header.push("diffant test".into());
    r.put_f64("moc", "value", 0.8125);
    r.put("moc.per_class", "take_cup", "1");
    let parsed = MetricReport::parse(&r.to_text()).unwrap();
    assert_eq!(parsed, r);
    assert_eq!(parsed.get_f64("moc", "value"), Some(0.8125));
}

#[test]
fn dataset_generation_is_a_pure_function_of_the_seed() {
    let spec = GrammarSpec::default_profile(0.5);
    let a = generate_dataset(&spec, 3, 42).unwrap();
    let b = generate_dataset(&spec, 3, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_dataset(&spec, 3, 43).unwrap());
}
