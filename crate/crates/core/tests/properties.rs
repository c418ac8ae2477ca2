use std::collections::BTreeMap;

use proptest::prelude::*;

use discotask::corpus::{Corpus, Document, Labels, Split, TaskKind, TaskSpec};
use discotask::eval::{cohens_kappa, metric_report, ols, prediction_distribution_kl, spearman};
use discotask::heads::hierarchy::{build_hierarchical_labels, Cluster, LabelHierarchy};
use discotask::heads::{crf_decode, crf_loss, crf_marginals};
use discotask::losses::{dice_loss, DiceForm};
use discotask::trainer::{joint_loss, TaskWeighting};

fn matrix(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, k), n)
}

proptest! {
    #[test]
    fn spearman_ignores_monotone_transforms(
        x in prop::collection::vec(-50.0f64..50.0, 3..40),
        y in prop::collection::vec(-50.0f64..50.0, 3..40),
    ) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        let tx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp() + 3.0).collect();
        let ty: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
        match (spearman(x, y), spearman(&tx, &ty)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
        }
    }

    #[test]
    fn macro_is_mean_of_classes_and_confusion_rows_are_supports(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80),
    ) {
        let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let r = metric_report(&gold, &pred, 5).unwrap();
        let mean = r.per_class.iter().map(|c| c.f1).sum::<f64>() / 5.0;
        prop_assert!((r.macro_f1 - mean).abs() < 1e-12);
        for (row, c) in r.confusion.iter().zip(&r.per_class) {
            prop_assert_eq!(row.iter().sum::<usize>(), c.support);
        }
        prop_assert!((0.0..=1.0).contains(&r.micro_f1));
    }

    #[test]
    fn ols_residuals_are_orthogonal_to_the_design(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 6..30),
        noise in prop::collection::vec(-0.5f64..0.5, 30),
    ) {
        let y: Vec<f64> = rows.iter().zip(&noise).map(|(r, e)| 1.0 + 2.0 * r[0] - r[1] + e).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        if let Ok(fit) = ols(&rows, &y, &names) {
            let sum: f64 = fit.residuals.iter().sum();
            prop_assert!(sum.abs() < 1e-8);
            for j in 0..2 {
                let dot: f64 = rows.iter().zip(&fit.residuals).map(|(r, e)| r[j] * e).sum();
                prop_assert!(dot.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn kl_is_non_negative(
        p in prop::collection::vec(0usize..50, 4),
        q in prop::collection::vec(1usize..50, 4),
    ) {
        prop_assume!(p.iter().sum::<usize>() > 0);
        let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let q: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        prop_assert!(prediction_distribution_kl(&p, &q).unwrap().value >= -1e-12);
        prop_assert!(prediction_distribution_kl(&p, &p).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn kappa_is_bounded(pairs in prop::collection::vec((0usize..3, 0usize..3), 2..60)) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        if let Some(k) = cohens_kappa(&a, &b).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
        }
    }

    #[test]
    fn dice_is_symmetric_under_permutation(
        pts in prop::collection::vec((0.01f64..0.99, any::<bool>()), 1..20),
        gamma in 0.1f64..2.0,
        rotate in 0usize..20,
    ) {
        let p: Vec<f64> = pts.iter().map(|x| x.0).collect();
        let y: Vec<f64> = pts.iter().map(|x| f64::from(x.1)).collect();
        let r = rotate % p.len();
        let (mut pr, mut yr) = (p.clone(), y.clone());
        pr.rotate_left(r);
        yr.rotate_left(r);
        for form in [DiceForm::Plain, DiceForm::Squared] {
            let a = dice_loss(&p, &y, gamma, form).unwrap().0;
            let b = dice_loss(&pr, &yr, gamma, form).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }
    }

    #[test]
    fn crf_shift_invariance_and_marginals(e in matrix(4, 3), t in matrix(3, 3), shift in -5.0f64..5.0) {
        let gold = [0usize, 2, 1, 1];
        let shifted: Vec<Vec<f64>> = e.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let a = crf_loss(&e, &t, &gold).unwrap();
        let b = crf_loss(&shifted, &t, &gold).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert_eq!(crf_decode(&e, &t).unwrap(), crf_decode(&shifted, &t).unwrap());
        for row in crf_marginals(&e, &t).unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_loss_matches_weighted_sum(
        l in prop::collection::vec(0.0f64..10.0, 3),
        a in 0.0f64..1.0,
    ) {
        let b = (1.0 - a) / 2.0;
        let w = TaskWeighting::new([("x", a), ("y", b), ("z", 1.0 - a - b)]);
        let losses: BTreeMap<String, f64> = ["x", "y", "z"].iter().map(|s| s.to_string()).zip(l.iter().copied()).collect();
        let direct = a * l[0] + b * l[1] + (1.0 - a - b) * l[2];
        prop_assert!((joint_loss(&losses, &w).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn corpus_round_trips(docs in prop::collection::vec((1usize..6, any::<u8>()), 1..8)) {
        let task = TaskSpec::new("t", TaskKind::Multiclass, vec!["a".into(), "b".into(), "c".into()]);
        let ml = TaskSpec::new("m", TaskKind::Multilabel, vec!["x".into(), "y".into()]);
        let documents: Vec<Document> = docs
            .iter()
            .enumerate()
            .map(|(i, &(n, bits))| {
                let mut d = Document::from_texts(format!("d{i}"), "src", Split::Train, (0..n).map(|j| format!("s {j}, \"q\"")));
                for (j, s) in d.sentences.iter_mut().enumerate() {
                    s.labels.insert("t".into(), Labels::Single((bits as usize + j) % 3));
                    if bits & 1 == 1 {
                        s.labels.insert("m".into(), Labels::multi((0..2).filter(|b| (bits >> (b + j)) & 1 == 1)));
                    }
                }
                d
            })
            .collect();
        let corpus = Corpus::new(vec![task, ml], documents).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        prop_assert_eq!(&Corpus::load(dir.path()).unwrap(), &corpus);
    }
}

#[test]
fn hierarchical_labels_are_injective() {
    let vocab: Vec<String> = ["M1", "M2", "C1", "C2", "E"].iter().map(|s| s.to_string()).collect();
    let clusters = vec![
        Cluster {
            name: "Main".into(),
            labels: vec!["M1".into(), "M2".into()],
        },
        Cluster {
            name: "Context".into(),
            labels: vec!["C1".into(), "C2".into()],
        },
        Cluster {
            name: "Speech".into(),
            labels: vec!["E".into()],
        },
    ];
    let h = LabelHierarchy::resolve(&clusters, &vocab).unwrap();
    let codes: Vec<Vec<f64>> = (0..vocab.len()).map(|y| build_hierarchical_labels(y, &h).unwrap()).collect();
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            assert_ne!(codes[i], codes[j]);
        }
    }
}
