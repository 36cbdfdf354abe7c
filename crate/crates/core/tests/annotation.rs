//! Dual-annotator protocol on the committed fixture campaign and on
//! synthetic campaigns with planted disagreements.

use std::fs;
use std::path::PathBuf;

use lrlm_core::annotation::{
    agreement_report, agreement_stats, export_dataset, kappa_from_pairs, read_items, read_records,
    resolve_agreement, AnnotationItem, AnnotationRecord, AnnotationTask, Campaign,
    ResolutionStatus,
};
use lrlm_core::heads::{LabeledExample, Target};
use lrlm_core::Error;
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;

const ANNOTATORS: [&str; 2] = ["amina", "bashir"];

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/annotation")
        .join(rel)
}

fn fixture_items() -> Vec<AnnotationItem> {
    read_items(&fixture("items.jsonl")).unwrap()
}

fn fixture_records() -> Vec<AnnotationRecord> {
    read_records(&fixture("labels.jsonl")).unwrap()
}

fn record(item: &str, who: &str, stage1: &str, stage2: &[&str]) -> AnnotationRecord {
    AnnotationRecord {
        item_id: item.into(),
        annotator_id: who.into(),
        stage1: stage1.into(),
        stage2: stage2.iter().map(|s| s.to_string()).collect(),
        timestamp: None,
    }
}

fn labeled_fixture() -> Campaign {
    let mut c = Campaign::new(fixture_items(), &ANNOTATORS).unwrap();
    for r in fixture_records() {
        c.submit(r).unwrap();
    }
    c
}

#[test]
fn campaign_construction_rules() {
    let items = fixture_items();
    let c = Campaign::new(items[..10].to_vec(), &ANNOTATORS).unwrap();
    for a in ANNOTATORS {
        let p = c.progress();
        let me = p.annotators.iter().find(|x| x.annotator == a).unwrap();
        assert_eq!((me.labeled, me.remaining), (0, 10));
    }
    assert!(matches!(
        Campaign::new(vec![], &ANNOTATORS),
        Err(Error::Annotation(_))
    ));
    assert!(matches!(
        Campaign::new(items.clone(), &["a", "b", "c"]),
        Err(Error::Annotation(_))
    ));
    assert!(Campaign::new(items.clone(), &["a"]).is_err());
    assert!(Campaign::new(items.clone(), &["a", "a"]).is_err());
    let mut dup = items.clone();
    dup.push(items[3].clone());
    assert!(matches!(
        Campaign::new(dup, &ANNOTATORS),
        Err(Error::Annotation(_))
    ));
}

#[test]
fn next_item_walks_the_queue_in_order() {
    let mut c = Campaign::new(fixture_items(), &ANNOTATORS).unwrap();
    assert_eq!(c.next_item("amina").unwrap().unwrap().id, "a00");
    c.submit(record("a00", "amina", "fake", &[])).unwrap();
    assert_eq!(c.next_item("amina").unwrap().unwrap().id, "a01");
    assert_eq!(c.next_item("bashir").unwrap().unwrap().id, "a00");
    // Labeling out of order leaves the earlier gap first in line.
    c.submit(record("a02", "bashir", "real", &[])).unwrap();
    assert_eq!(c.next_item("bashir").unwrap().unwrap().id, "a00");
    assert!(matches!(c.next_item("carla"), Err(Error::Validation(_))));

    let full = labeled_fixture();
    assert!(full.next_item("amina").unwrap().is_none());
    assert!(full.next_item("bashir").unwrap().is_none());
    assert_eq!(full.progress().complete_items, 12);
}

#[test]
fn submissions_are_validated_and_conflicts_detected() {
    let mut c = Campaign::new(fixture_items(), &ANNOTATORS).unwrap();
    let stored = c
        .submit(record("a06", "amina", "toxic", &["insult"]))
        .unwrap();
    assert_eq!(stored.stage2, ["insult"]);
    let again = c.submit(record("a06", "amina", "non-toxic", &[]));
    assert!(matches!(again, Err(Error::Conflict(_))));
    for bad in [
        record("a07", "amina", "non-toxic", &["insult"]),
        record("a07", "amina", "fake", &[]),
        record("a00", "amina", "toxic", &[]),
        record("zz", "amina", "fake", &[]),
        record("a07", "carla", "toxic", &[]),
    ] {
        assert!(
            matches!(c.submit(bad.clone()), Err(Error::Validation(_))),
            "{bad:?}"
        );
    }
    assert_eq!(c.records().len(), 1);
}

#[test]
fn fixture_resolution_matches_the_hand_count() {
    let items = fixture_items();
    let records = fixture_records();
    let first_ten = resolve_agreement(&items[..10], &records);
    assert_eq!(
        (first_ten.summary.retained, first_ten.summary.discarded),
        (7, 3)
    );
    assert_eq!(first_ten.summary.incomplete, 0);

    let all = labeled_fixture().resolve();
    assert_eq!(
        (
            all.summary.retained,
            all.summary.discarded,
            all.summary.incomplete
        ),
        (7, 5, 0)
    );
    let get = |id: &str| all.labels.iter().find(|l| l.item_id == id).unwrap();
    assert_eq!(get("a00").stage1.as_deref(), Some("fake"));
    assert_eq!(get("a02").status, ResolutionStatus::Discarded);
    assert_eq!(get("a02").stage1, None);
    assert_eq!(get("a06").stage2, Some(vec!["insult".to_string()]));
    assert_eq!(get("a09").stage1.as_deref(), Some("toxic"));
    assert_eq!(get("a09").stage2, Some(vec![]));
    assert_eq!(get("a07").stage2, None);

    // The agreement rule on every fixture pair.
    for label in &all.labels {
        let pair: Vec<&AnnotationRecord> = records
            .iter()
            .filter(|r| r.item_id == label.item_id)
            .collect();
        assert_eq!(pair.len(), 2);
        if pair[0].stage1 == pair[1].stage1 {
            assert_eq!(label.status, ResolutionStatus::Retained);
            assert_eq!(label.stage1.as_deref(), Some(pair[0].stage1.as_str()));
        } else {
            assert_eq!(label.status, ResolutionStatus::Discarded);
        }
    }
}

#[test]
fn items_without_two_records_are_incomplete() {
    let items = fixture_items();
    let mut records = fixture_records();
    records.retain(|r| !(r.item_id == "a03" && r.annotator_id == "bashir"));
    records.push(record("a04", "amina", "fake", &[]));
    let res = resolve_agreement(&items, &records);
    assert_eq!(res.incomplete, ["a03", "a04"]);
    assert_eq!(
        res.summary.retained + res.summary.discarded + res.summary.incomplete,
        items.len()
    );
}

#[test]
fn exports_follow_the_resolution() {
    let c = labeled_fixture();
    let res = c.resolve();
    let items = c.items();
    let ex = |id: &str, target: Target| LabeledExample {
        id: id.into(),
        text: items.iter().find(|i| i.id == id).unwrap().text.clone(),
        target,
    };
    let label = |s: &str| Target::Label(s.into());
    let labels = |s: &[&str]| Target::Labels(s.iter().map(|x| x.to_string()).collect());

    let fake = export_dataset(items, &res, AnnotationTask::Fakenews);
    assert_eq!(
        fake.binary,
        [
            ex("a00", label("fake")),
            ex("a01", label("real")),
            ex("a03", label("real")),
            ex("a04", label("fake"))
        ]
    );
    assert_eq!(fake.multilabel, None);

    let tox = export_dataset(items, &res, AnnotationTask::Toxicity);
    assert_eq!(
        tox.binary,
        [
            ex("a06", label("toxic")),
            ex("a07", label("non-toxic")),
            ex("a09", label("toxic"))
        ]
    );
    assert_eq!(
        tox.multilabel,
        Some(vec![ex("a06", labels(&["insult"])), ex("a09", labels(&[]))])
    );

    // Nothing retained: both toxicity files are empty.
    let none = export_dataset(
        items,
        &resolve_agreement(items, &[]),
        AnnotationTask::Toxicity,
    );
    assert!(none.binary.is_empty());
    assert_eq!(none.multilabel, Some(vec![]));
}

#[test]
fn hand_computed_kappa_for_a_two_by_two_tally() {
    // Rows are annotator A, columns annotator B: yes/yes 20, yes/no 5,
    // no/yes 10, no/no 15. p_o = 35/50 = 0.7. A says yes 25/50 and B says
    // yes 30/50, so p_e = 0.5·0.6 + 0.5·0.4 = 0.5 and kappa = 0.2/0.5 = 0.4.
    let mut pairs = Vec::new();
    pairs.extend(std::iter::repeat_n(("yes", "yes"), 20));
    pairs.extend(std::iter::repeat_n(("yes", "no"), 5));
    pairs.extend(std::iter::repeat_n(("no", "yes"), 10));
    pairs.extend(std::iter::repeat_n(("no", "no"), 15));
    let s = kappa_from_pairs(&pairs).unwrap();
    assert!((s.raw_agreement_rate - 0.7).abs() < 1e-12);
    assert!((s.expected_agreement - 0.5).abs() < 1e-12);
    assert!((s.cohen_kappa.unwrap() - 0.4).abs() < 1e-12);
}

#[test]
fn fixture_agreement_report() {
    let c = labeled_fixture();
    let report = agreement_report(c.items(), c.records());
    assert_eq!(report.summary.retained, 7);
    let overall = report.overall.unwrap();
    assert_eq!((overall.complete_items, overall.agreed), (12, 7));
    assert_eq!(report.per_task[&AnnotationTask::Fakenews].agreed, 4);
    assert_eq!(report.per_task[&AnnotationTask::Toxicity].agreed, 3);
    assert!(agreement_stats(c.items(), &[]).is_err());
}

#[test]
fn log_replay_rebuilds_the_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("logs/labels.jsonl");
    let items = fixture("items.jsonl");
    let mut live = Campaign::load(&items, &ANNOTATORS, Some(&log)).unwrap();
    let records = fixture_records();
    for r in &records[..15] {
        live.submit(r.clone()).unwrap();
    }
    // Rejected submissions never reach the log.
    assert!(live.submit(records[0].clone()).is_err());
    assert!(live
        .submit(record("a07", "amina", "non-toxic", &["threat"]))
        .is_err());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 15);

    let mut replayed = Campaign::load(&items, &ANNOTATORS, Some(&log)).unwrap();
    assert_eq!(replayed, live);
    assert_eq!(replayed.progress(), live.progress());
    assert_eq!(
        replayed.next_item("amina").unwrap(),
        live.next_item("amina").unwrap()
    );
    for r in &records[15..] {
        replayed.submit(r.clone()).unwrap();
    }
    let again = Campaign::load(&items, &ANNOTATORS, Some(&log)).unwrap();
    assert_eq!(again, labeled_fixture());
}

/// A campaign of `n` toxicity items where exactly `disagree` of them, chosen
/// at random, get opposite stage-1 labels.
fn planted(n: usize, disagree: usize, seed: u64) -> Campaign {
    let items: Vec<AnnotationItem> = (0..n)
        .map(|i| AnnotationItem {
            id: format!("s{i:04}"),
            text: format!("faallo {i}"),
            task: AnnotationTask::Toxicity,
            source: "synthetic".into(),
        })
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut flip = vec![false; n];
    for i in sample(&mut rng, n, disagree) {
        flip[i] = true;
    }
    let mut c = Campaign::new(items, &ANNOTATORS).unwrap();
    for i in 0..n {
        let toxic = i % 3 == 0;
        let id = format!("s{i:04}");
        let (a, b) = match (toxic, flip[i]) {
            (true, false) => (
                record(&id, "amina", "toxic", &["abuse"]),
                record(&id, "bashir", "toxic", &[]),
            ),
            (false, false) => (
                record(&id, "amina", "non-toxic", &[]),
                record(&id, "bashir", "non-toxic", &[]),
            ),
            (true, true) => (
                record(&id, "amina", "toxic", &["threat"]),
                record(&id, "bashir", "non-toxic", &[]),
            ),
            (false, true) => (
                record(&id, "amina", "non-toxic", &[]),
                record(&id, "bashir", "toxic", &["insult"]),
            ),
        };
        c.submit(a).unwrap();
        c.submit(b).unwrap();
    }
    c
}

#[test]
fn planted_disagreement_rate_sets_the_retained_fraction() {
    let c = planted(400, 100, 1);
    let res = c.resolve();
    assert_eq!(res.summary.retained as f64 / 400.0, 1.0 - 0.25);
    assert_eq!(res.summary.discarded, 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn retained_fraction_is_one_minus_the_planted_rate(n in 1usize..120, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let disagree = (frac * n as f64).floor() as usize;
        let res = planted(n, disagree, seed).resolve();
        prop_assert_eq!(res.summary.retained, n - disagree);
        prop_assert_eq!(res.summary.discarded, disagree);
    }

    #[test]
    fn partial_campaigns_account_for_every_item(n in 1usize..60, keep in prop::collection::vec(any::<bool>(), 120), seed in any::<u64>()) {
        let full = planted(n, n / 4, seed);
        let kept: Vec<AnnotationRecord> = full.records().iter().zip(keep.iter().cycle()).filter(|(_, &k)| k).map(|(r, _)| r.clone()).collect();
        let res = resolve_agreement(full.items(), &kept);
        prop_assert_eq!(res.summary.retained + res.summary.discarded + res.summary.incomplete, n);
        for l in res.labels.iter().filter(|l| l.status == ResolutionStatus::Retained) {
            let pair: Vec<_> = kept.iter().filter(|r| r.item_id == l.item_id).collect();
            prop_assert!(pair.iter().all(|r| Some(&r.stage1) == l.stage1.as_ref()));
        }
        let tox = export_dataset(full.items(), &res, AnnotationTask::Toxicity);
        for ex in &tox.binary {
            prop_assert!(matches!(&ex.target, Target::Label(l) if l == "toxic" || l == "non-toxic"));
        }
    }
}
