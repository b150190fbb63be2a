use super::*;

fn row(variant: Variant, depth: usize, seed: u64, step: usize, loss: f64) -> ReportRow {
    ReportRow {
        variant,
        depth,
        rank: 32,
        lr: 3e-4,
        seed,
        step,
        train_loss: loss,
        heldout_loss: loss + 0.5,
        wall_seconds: 0.25,
        status: if loss.is_finite() { RowStatus::Ok } else { RowStatus::Nan },
    }
}

fn sample() -> RunReport {
    let mut r = RunReport::default();
    for v in [Variant::Controller, Variant::Static] {
        for d in [1, 4] {
            for seed in 0..2 {
                r.push(row(v, d, seed, 0, 5.0));
                r.push(row(v, d, seed, 10, 4.0 + seed as f64 + d as f64 * 0.1));
            }
        }
    }
    r
}

#[test]
fn results_keep_the_last_row_per_cell() {
    let r = sample();
    assert_eq!(r.results().len(), 8);
    assert!(r.results().iter().all(|x| x.step == 10));
    assert_eq!(r.initial().len(), 8);
}

#[test]
fn tsv_has_every_column() {
    let text = sample().tsv();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split('\t').collect::<Vec<_>>(), COLUMNS);
    for l in lines {
        assert_eq!(l.split('\t').count(), COLUMNS.len());
    }
}

#[test]
fn json_lines_parse_back() {
    let r = sample();
    let text = r.jsonl();
    assert_eq!(text.lines().count(), r.rows.len());
    for (line, want) in text.lines().zip(&r.rows) {
        let back: ReportRow = serde_json::from_str(line).unwrap();
        assert_eq!(&back, want);
    }
}

#[test]
fn pivot_averages_seeds_and_flags_nan() {
    let mut r = sample();
    r.push(row(Variant::Static, 8, 0, 0, f64::NAN));
    let p = r.pivot();
    let lines: Vec<&str> = p.lines().collect();
    assert_eq!(lines[1], "variant\tdepth=1\tdepth=4\tdepth=8");
    // seeds 0 and 1 at depth 1: (4.1 + 5.1) / 2
    assert!(lines[2].starts_with("controller\t4.6000\t4.9000\t-"), "{}", lines[2]);
    assert!(lines[3].ends_with("\tnan*"), "{}", lines[3]);
    let means = r.seed_means();
    assert_eq!(means.iter().filter(|m| m.flagged).count(), 1);
    assert!(r.tsv().contains("\tnan\t"));
}

#[test]
fn merge_orders_by_config_key() {
    let mut a = RunReport::default();
    a.push(row(Variant::Static, 1, 0, 10, 1.0));
    a.push(row(Variant::Controller, 4, 1, 0, 1.0));
    let mut b = RunReport::default();
    b.push(row(Variant::Controller, 4, 0, 10, 1.0));
    b.push(row(Variant::Controller, 1, 0, 0, 1.0));
    let m = RunReport::merge([a, b]);
    let keys: Vec<(Variant, usize, u64)> = m.rows.iter().map(|r| (r.variant, r.depth, r.seed)).collect();
    assert_eq!(
        keys,
        vec![
            (Variant::Controller, 1, 0),
            (Variant::Controller, 4, 0),
            (Variant::Controller, 4, 1),
            (Variant::Static, 1, 0)
        ]
    );
}
