use super::*;

#[test]
fn kv_parsing_is_strict() {
    let m = parse_kv("# comment\n a = 1 \n\nb=two=2\n").unwrap();
    assert_eq!(m["a"], "1");
    assert_eq!(m["b"], "two=2");
    assert!(parse_kv("novalue\n").is_err());
    assert!(parse_kv("=3\n").is_err());
    assert!(parse_kv("a=1\na=2\n").is_err());
}

#[test]
fn unknown_key_names_itself() {
    let err = RunConfig::from_text("depth=2\nlearning_rate=1\n").unwrap_err();
    assert!(err.to_string().contains("learning_rate"));
}

#[test]
fn bad_value_names_the_key() {
    let err = RunConfig::from_text("depth=deep\n").unwrap_err();
    assert!(err.to_string().contains("depth"));
    assert!(RunConfig::from_text("variant=dense\n").is_err());
}

#[test]
fn defaults_are_valid_and_round_trip() {
    let c = RunConfig::default();
    c.validate().unwrap();
    assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);

    let mut c = RunConfig::default();
    c.apply_text("variant=nogate-controller\nsweep_lrs=0.001,0.0003\ncorpus=/tmp/x\nrank=8\nseed=9\n").unwrap();
    assert_eq!(c.ouro.variant, Variant::NogateController);
    assert_eq!(c.sweep.lrs, vec![1e-3, 3e-4]);
    assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    assert_eq!(c.to_text().lines().count(), RunConfig::KEYS.len());
}

#[test]
fn every_listed_key_is_accepted() {
    let text = RunConfig::default().to_text();
    for line in text.lines() {
        let (k, v) = line.split_once('=').unwrap();
        assert!(RunConfig::KEYS.contains(&k));
        RunConfig::default().set(k, v).unwrap();
    }
}

#[test]
fn validation_catches_inconsistent_runs() {
    let mut c = RunConfig::default();
    c.train.seq_len = 1000;
    assert!(c.validate().is_err());
    let c = RunConfig::from_text("prelude=4\ncoda=4\n").unwrap();
    assert!(c.validate().is_err());
    let c = RunConfig::from_text("depth=17\n").unwrap();
    assert!(c.validate().is_err());
}

#[test]
fn default_sweep_is_the_full_grid() {
    assert_eq!(SweepSpec::default().cells(), 2 * 5 * 3 * 2 * 3);
}
