use earlybird::combiner::CombinationSpec;
use earlybird::stats::{
    a12, accuracy, compare, compare_to_baseline, format_mmss, format_speedup, paired_by_seed, speedup, weighted_f1,
    wilcoxon_signed_rank, Magnitude, Metric, PairedSamples, ALPHA,
};
use earlybird::trainer::{RunResult, TrainHyper};
use proptest::prelude::*;

/// Enumerates every sign assignment of the non-zero differences, using
/// floating mid-ranks, and counts those at least as extreme.
fn brute_force_wilcoxon(diffs: &[f64]) -> f64 {
    let d: Vec<f64> = diffs.iter().copied().filter(|&x| x != 0.0).collect();
    if d.is_empty() {
        return 1.0;
    }
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let below = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let tied = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            below + (tied + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let stat = |signs: &dyn Fn(usize) -> bool| {
        let plus: f64 = (0..n).filter(|&i| signs(i)).map(|i| ranks[i]).sum();
        plus.min(total - plus)
    };
    let observed = stat(&|i| d[i] > 0.0);
    let hits = (0..1u32 << n).filter(|mask| stat(&|i| mask & (1 << i) != 0) <= observed + 1e-9).count();
    hits as f64 / (1u64 << n) as f64
}

fn paired(b: &[f64], c: &[f64]) -> PairedSamples {
    PairedSamples::new(b.to_vec(), c.to_vec()).unwrap()
}

#[test]
fn wilcoxon_small_examples() {
    // three seeds can never reach significance
    let p = wilcoxon_signed_rank(&paired(&[0.5, 0.6, 0.7], &[0.9, 0.9, 0.9])).unwrap();
    assert_eq!(p, 0.25);
    let p = wilcoxon_signed_rank(&paired(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
    assert_eq!(p, 2.0 / 32.0);
    let p = wilcoxon_signed_rank(&paired(&[0.0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    assert_eq!(p, 2.0 / 64.0);
    assert!(p < ALPHA);
    // zero differences are dropped before ranking
    let p = wilcoxon_signed_rank(&paired(&[1.0, 1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 2.0, 3.0])).unwrap();
    assert_eq!(p, 0.25);
}

#[test]
fn ten_seed_constant_shift_is_significant() {
    let b: Vec<f64> = (0..10).map(|i| 0.5 + 0.01 * i as f64).collect();
    let c: Vec<f64> = b.iter().map(|x| x + 1.0).collect();
    let r = compare(&paired(&b, &c)).unwrap();
    assert!((r.p_value - 2.0 / 1024.0).abs() < 1e-15);
    assert!(r.significant);
    assert!((r.mean_diff - 1.0).abs() < 1e-12);
    assert_eq!((r.a12, r.magnitude), (1.0, Magnitude::Large));
}

#[test]
fn mismatched_samples_are_rejected() {
    assert!(PairedSamples::new(vec![1.0], vec![]).is_err());
    assert!(PairedSamples::new(vec![], vec![]).is_err());
    assert!(wilcoxon_signed_rank(&paired(&[0.0], &[f64::NAN])).is_err());
}

/// Per-class confusion counts, then support-weighted F1.
fn f1_oracle(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut m = vec![vec![0usize; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    let n = labels.len() as f64;
    (0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let support: f64 = m[c].iter().sum::<usize>() as f64;
            let predicted: f64 = (0..k).map(|r| m[r][c]).sum::<usize>() as f64;
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if support > 0.0 { tp / support } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            f1 * support / n
        })
        .sum()
}

#[test]
fn metric_examples() {
    assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
    // per class: c0 F1 1, c1 F1 2/3, c2 F1 2/3; supports 1, 2, 1
    let f = weighted_f1(&[0, 1, 2, 2], &[0, 1, 1, 2], 3).unwrap();
    assert!((f - (1.0 + 2.0 * 2.0 / 3.0 + 2.0 / 3.0) / 4.0).abs() < 1e-15);
    assert_eq!(weighted_f1(&[1, 1], &[0, 0], 2).unwrap(), 0.0);
}

#[test]
fn a12_examples_and_thresholds() {
    assert_eq!(a12(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.5, Magnitude::Negligible));
    let (v, m) = a12(&[3.0, 1.0], &[2.0, 2.0]).unwrap();
    assert_eq!((v, m), (0.5, Magnitude::Negligible));
    // 0.56 exactly is small, just below is negligible
    let base = [0.0; 25];
    let cand: Vec<f64> = (0..25).map(|i| if i < 14 { 1.0 } else { 0.0 }).collect();
    // wins 14·25, ties 11·25 → (350 + 137.5) / 625 = 0.78
    assert_eq!(a12(&cand, &base).unwrap(), (0.78, Magnitude::Large));
    let cand: Vec<f64> = (0..25).map(|i| if i < 3 { 1.0 } else { 0.0 }).collect();
    assert_eq!(a12(&cand, &base).unwrap(), (0.56, Magnitude::Small));
    let cand: Vec<f64> = (0..25).map(|i| if i < 7 { 1.0 } else { 0.0 }).collect();
    assert_eq!(a12(&cand, &base).unwrap(), (0.64, Magnitude::Medium));
    let cand: Vec<f64> = (0..25).map(|i| if i < 2 { 1.0 } else { 0.0 }).collect();
    assert_eq!(a12(&cand, &base).unwrap(), (0.54, Magnitude::Negligible));
    let (v, m) = a12(&[0.0; 10], &[1.0; 10]).unwrap();
    assert_eq!((v, m), (0.0, Magnitude::Large));
}

#[test]
fn speedup_and_time_formats() {
    assert_eq!(format_mmss(530.0), "8:50");
    assert_eq!(format_mmss(59.6), "1:00");
    assert_eq!(format_mmss(0.4), "0:00");
    assert_eq!(format_mmss(3725.0), "62:05");
    let f = speedup(530.0, 161.0).unwrap();
    assert_eq!(format_speedup(f), "3.3x");
    assert_eq!(format_speedup(speedup(10.0, 5.0).unwrap()), "2.0x");
    assert_eq!(format_speedup(speedup(1.0, 1.0).unwrap()), "1.0x");
    assert!(speedup(0.0, 1.0).is_err());
    assert!(speedup(1.0, -1.0).is_err());
}

fn run(spec: &str, seed: u64, acc: f64, f1w: f64) -> RunResult {
    RunResult {
        spec: spec.parse::<CombinationSpec>().unwrap(),
        seed,
        layers: 4,
        best_epoch: 1,
        test_accuracy: acc,
        test_f1w: f1w,
        epochs: Vec::new(),
        num_classes: 2,
        test_predictions: Vec::new(),
        hyper: TrainHyper::desk(),
    }
}

#[test]
fn runs_pair_by_seed_not_by_order() {
    let base = vec![run("i", 2, 0.3, 0.1), run("i", 0, 0.1, 0.2), run("i", 1, 0.2, 0.3)];
    let cand = vec![run("iii", 0, 0.4, 0.2), run("iii", 1, 0.5, 0.3), run("iii", 2, 0.6, 0.1)];
    let p = paired_by_seed(&base, &cand, Metric::Accuracy).unwrap();
    assert_eq!(p.baseline, vec![0.1, 0.2, 0.3]);
    assert_eq!(p.candidate, vec![0.4, 0.5, 0.6]);
    let r = compare_to_baseline(&base, &cand, Metric::F1w).unwrap();
    assert_eq!(r.mean_diff, 0.0);
    assert_eq!(r.p_value, 1.0);
    assert!(paired_by_seed(&base, &cand[..2], Metric::Accuracy).is_err());
    let dup = vec![run("iii", 0, 0.4, 0.2), run("iii", 0, 0.5, 0.3), run("iii", 2, 0.6, 0.1)];
    assert!(paired_by_seed(&base, &dup, Metric::Accuracy).is_err());
    assert_eq!("f1w".parse::<Metric>().unwrap(), Metric::F1w);
    assert!("auc".parse::<Metric>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn wilcoxon_matches_enumeration(pairs in proptest::collection::vec((-3i32..=3, -3i32..=3), 1..12)) {
        let b: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let c: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let diffs: Vec<f64> = pairs.iter().map(|p| (p.1 - p.0) as f64).collect();
        let got = wilcoxon_signed_rank(&paired(&b, &c)).unwrap();
        let want = brute_force_wilcoxon(&diffs);
        prop_assert!((got - want).abs() < 1e-12, "{:?}: {} vs {}", diffs, got, want);
    }

    #[test]
    fn wilcoxon_is_symmetric_and_bounded(v in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..25)) {
        let b: Vec<f64> = v.iter().map(|p| p.0).collect();
        let c: Vec<f64> = v.iter().map(|p| p.1).collect();
        let p1 = wilcoxon_signed_rank(&paired(&b, &c)).unwrap();
        let p2 = wilcoxon_signed_rank(&paired(&c, &b)).unwrap();
        prop_assert!((p1 - p2).abs() < 1e-12);
        prop_assert!(p1 > 0.0 && p1 <= 1.0);
    }

    #[test]
    fn weighted_f1_matches_confusion_matrix(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let preds: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let got = weighted_f1(&preds, &labels, 4).unwrap();
        prop_assert!((got - f1_oracle(&preds, &labels, 4)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn a12_matches_pair_count(c in proptest::collection::vec(0u8..5, 1..12), b in proptest::collection::vec(0u8..5, 1..12)) {
        let cf: Vec<f64> = c.iter().map(|&x| x as f64).collect();
        let bf: Vec<f64> = b.iter().map(|&x| x as f64).collect();
        let mut wins = 0.0;
        for x in &c {
            for y in &b {
                wins += if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 };
            }
        }
        let want = wins / (c.len() * b.len()) as f64;
        let (got, _) = a12(&cf, &bf).unwrap();
        prop_assert!((got - want).abs() < 1e-12);
        let (flip, _) = a12(&bf, &cf).unwrap();
        prop_assert!((got + flip - 1.0).abs() < 1e-12);
    }
}
