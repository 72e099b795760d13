mod common;

use common::{blob_set, Components};
use mixdefense::attacks::{AttackSpec, Norm};
use mixdefense::data::{self, Image, Split};
use mixdefense::evaluation::{
    acc_detector, acc_rc, adaptive_input_attack, adaptive_latent_attack, export_failures, layer_curves,
    read_curve_csv, sweep_curve, write_curve_csv, BudgetGrid, ConfusionCounts, CurveMetric, FAILURE_SCHEMA,
};
use mixdefense::pipeline::{FinalDecision, Layers, VERDICT_CSV_HEADER};
use proptest::prelude::*;

fn setup() -> (Components, mixdefense::data::LabeledDataset) {
    let calib = blob_set(40, 1, Split::Train);
    (Components::random(&calib, 20), blob_set(60, 2, Split::Test))
}

proptest! {
    #[test]
    fn tally_matches_brute_force(log in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..400)) {
        let clean: Vec<bool> = log.iter().map(|p| p.0).collect();
        let rej: Vec<bool> = log.iter().map(|p| p.1).collect();
        let c = ConfusionCounts::tally(&clean, &rej).unwrap();
        let count = |want_clean: bool, want_rej: bool| log.iter().filter(|&&(a, b)| a == want_clean && b == want_rej).count() as u64;
        prop_assert_eq!((c.tp, c.fn_, c.tn, c.fp), (count(true, false), count(true, true), count(false, true), count(false, false)));
        let acc = acc_detector(&c).unwrap();
        prop_assert_eq!(acc, (c.tp + c.tn) as f64 / log.len() as f64);
    }

    #[test]
    fn acc_rc_is_exact(n in 1u64..2000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let det = (n as f64 * a) as u64;
        let cor = ((n - det) as f64 * b) as u64;
        prop_assert_eq!(acc_rc(n, det, cor).unwrap(), (det + cor) as f64 / n as f64);
        prop_assert!(acc_rc(n, det, n - det + 1).is_err());
    }
}

#[test]
fn closed_form_cases() {
    let c = ConfusionCounts { tp: 450, tn: 480, fp: 50, fn_: 20 };
    assert!((acc_detector(&c).unwrap() - 0.93).abs() < 1e-12);
    assert!((acc_rc(1000, 800, 50).unwrap() - 0.85).abs() < 1e-12);
    assert_eq!(acc_rc(10, 10, 0).unwrap(), 1.0);
    assert!(acc_detector(&ConfusionCounts::default()).is_err());
    assert!(acc_rc(0, 0, 0).is_err());
}

#[test]
fn zero_budget_sweep_matches_a_recount() {
    let (c, ds) = setup();
    let def = c.defense();
    let (n, seed) = (40, 9);
    let curve = sweep_curve(&def, Layers::Both, &BudgetGrid::budgets(&AttackSpec::fgsm(0.0), &[0.0]), &ds, n, seed).unwrap();
    assert!(curve.failures.iter().all(|f| !f.message.contains("failed evaluation")));

    let idx = data::sample_indices(ds.len(), n, seed).unwrap();
    let ae_idx = &idx[n - n / 2..];
    let xs: Vec<Image> = ae_idx.iter().map(|&i| ds.image(i)).collect();
    let vs: Vec<_> = def.verdict_stream(&xs).into_iter().map(Result::unwrap).collect();
    let (mut det, mut cor, mut und) = (0u64, 0u64, 0u64);
    for (v, &i) in vs.iter().zip(ae_idx) {
        match v.decision {
            FinalDecision::Accepted(l) if l == ds.label(i) => cor += 1,
            FinalDecision::Accepted(_) => {}
            _ => det += 1,
        }
        und += u64::from(c.clf.predict(&ds.image(i)).unwrap() == ds.label(i));
    }
    let rc = curve.metric(CurveMetric::AccRc).next().unwrap();
    assert_eq!(rc.value, (det + cor) as f64 / xs.len() as f64);
    assert_eq!(rc.n, xs.len());
    let und_point = curve.metric(CurveMetric::AccUndefended).next().unwrap();
    assert_eq!(und_point.value, und as f64 / xs.len() as f64);
    // the identity attack only "succeeds" on images that were already wrong
    let wrong = ae_idx.iter().filter(|&&i| c.clf.predict(&ds.image(i)).unwrap() != ds.label(i)).count();
    assert_eq!(rc.n_successful, wrong);
    assert_eq!(rc.censored, wrong < 100);
}

#[test]
fn curves_are_deterministic_and_serialisable() {
    let (c, ds) = setup();
    let def = c.defense();
    let grid = BudgetGrid::budgets(&AttackSpec::fgsm(0.0), &[0.1, 0.3]);
    let a = sweep_curve(&def, Layers::Both, &grid, &ds, 30, 4).unwrap();
    let b = sweep_curve(&def, Layers::Both, &grid, &ds, 30, 4).unwrap();
    assert_eq!(a, b);
    assert!(sweep_curve(&def, Layers::Both, &grid, &ds, 0, 4).unwrap().points.is_empty());
    assert!(sweep_curve(&def, Layers::Both, &BudgetGrid::Budgets(vec![]), &ds, 10, 4).is_err());

    let mut buf = Vec::new();
    write_curve_csv(&mut buf, &a.points).unwrap();
    let back = read_curve_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
    let strip = |v: &[mixdefense::evaluation::CurvePoint]| {
        v.iter().map(|p| mixdefense::evaluation::CurvePoint { n_successful: 0, ..p.clone() }).collect::<Vec<_>>()
    };
    assert_eq!(back, strip(&a.points));
    let mut again = Vec::new();
    write_curve_csv(&mut again, &b.points).unwrap();
    assert_eq!(buf, again);
    for p in &a.points {
        assert!((0.0..=1.0).contains(&p.value));
        assert_eq!(p.censored, p.n_successful < 100);
    }
}

#[test]
fn layer_curves_share_their_aes() {
    let (c, ds) = setup();
    let def = c.defense();
    let grid = BudgetGrid::budgets(&AttackSpec::bim(Norm::Linf, 0.0, 3), &[0.2]);
    let lc = layer_curves(&def, &grid, &ds, 30, 5).unwrap();
    let both = sweep_curve(&def, Layers::Both, &grid, &ds, 30, 5).unwrap();
    assert_eq!(lc.both, both);
    let und = |cv: &mixdefense::evaluation::Curve| cv.metric(CurveMetric::AccUndefended).next().map(|p| p.value);
    assert_eq!(und(&lc.lp_only), und(&lc.sp_only));
}

#[test]
fn binned_grids_only_keep_successes_inside_each_bin() {
    let (c, ds) = setup();
    let def = c.defense();
    let spec = AttackSpec::deepfool(Norm::L2, 10, 0.02);
    let edges = vec![0.5, 1.0, 100.0];
    let curve = sweep_curve(&def, Layers::Both, &BudgetGrid::Binned { spec: spec.clone(), edges: edges.clone() }, &ds, 20, 6)
        .unwrap();
    let total: usize = curve.metric(CurveMetric::AccRc).map(|p| p.n).sum();
    assert!(total <= 10);
    for p in curve.metric(CurveMetric::AccRc) {
        assert_eq!(p.n, p.n_successful);
        assert!(edges.contains(&p.budget));
    }
    let bad = BudgetGrid::Binned { spec, edges: vec![1.0, 0.5] };
    assert!(sweep_curve(&def, Layers::Both, &bad, &ds, 20, 6).is_err());
}

#[test]
fn adaptive_attacks_reduce_to_the_plain_pipeline_at_zero() {
    let (c, ds) = setup();
    let def = c.defense();
    let xs: Vec<Image> = (0..10).map(|i| ds.image(i)).collect();
    let targets: Vec<usize> = (0..10).map(|i| (ds.label(i) + 1) % 10).collect();
    let plain = def.verdict_stream(&xs);

    let input = adaptive_input_attack(&def, &xs, &targets, &[0.0, 0.05], 3).unwrap();
    assert_eq!(input.steps[0].verdicts, plain);
    assert_eq!(input.steps.len(), 2);
    assert_eq!(input.originals.len(), 3);
    assert!(input.steps.iter().all(|s| s.adversarial.len() == 3 && s.reconstructions.len() == 3));
    let moved = input.steps[1].adversarial.iter().zip(&xs).any(|(a, x)| a != x);
    assert!(moved);
    assert!(adaptive_input_attack(&def, &xs, &targets, &[0.5], 3).is_err());

    let labels: Vec<usize> = xs.iter().map(|x| c.clf.predict(x).unwrap()).collect();
    let latent = adaptive_latent_attack(&def, &xs, &labels, &[0.0, 0.1], 2).unwrap();
    for (i, d) in latent.steps[0].distances.iter().enumerate() {
        let want = c.sp.detect(&c.cgan, &xs[i], labels[i]).unwrap().distance;
        assert_eq!(d.unwrap(), want);
    }
    assert_eq!(latent.steps[1].row.n, 10);
    assert!(adaptive_latent_attack(&def, &xs, &vec![10; 10], &[0.0], 2).unwrap().steps[0].row.n_errors == 10);
}

#[test]
fn failure_archive_mirrors_the_verdicts() {
    let (c, ds) = setup();
    let def = c.defense();
    let xs: Vec<Image> = (0..30).map(|i| ds.image(i)).collect();
    let vs: Vec<_> = def.verdict_stream(&xs).into_iter().map(Result::unwrap).collect();
    // pretend the second half are AEs so both failure classes are populated
    let clean: Vec<bool> = (0..30).map(|i| i < 15).collect();
    let dir = tempfile::tempdir().unwrap();
    let k = 4;
    let arch = export_failures(&def, &vs, &xs, &clean, k, dir.path()).unwrap();
    let text = std::fs::read_to_string(&arch.manifest).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(FAILURE_SCHEMA));
    assert_eq!(lines.next().unwrap(), format!("class,rank,grid,{VERDICT_CSV_HEADER}"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), arch.false_negatives.min(k) + arch.false_positives.min(k));
    for row in &rows {
        let mut parts = row.splitn(4, ',');
        let (class, _rank, grid, rest) = (parts.next().unwrap(), parts.next(), parts.next().unwrap(), parts.next().unwrap());
        let id: usize = rest.split(',').next().unwrap().parse().unwrap();
        assert_eq!(rest, vs[id].csv_row());
        assert_eq!(class == "false_negative", clean[id]);
        assert!(grid.ends_with(".png"));
    }
    for g in &arch.grids {
        let img = image::open(g).unwrap();
        assert_eq!(img.width() as usize % k, 0);
        assert!(img.height() >= 2 * 28 && img.height() < 3 * 28);
    }

    let empty = tempfile::tempdir().unwrap();
    let a0 = export_failures(&def, &vs, &xs, &clean, 0, empty.path()).unwrap();
    assert!(a0.grids.is_empty());
    assert_eq!(std::fs::read_to_string(a0.manifest).unwrap().lines().count(), 2);
}
