use std::path::PathBuf;

use dynaquant_cli::{apply_seed_override, CliError, DataSource, ModeName, RunConfig};

fn key_of(e: CliError) -> String {
    match e {
        CliError::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn empty_file_gives_defaults() {
    let cfg = RunConfig::parse("# nothing here\n\n").unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn values_are_applied() {
    let cfg = RunConfig::parse(
        "train.lambda = 0.025\n\
         train.gamma = 0.1\n\
         quant.mode = ste\n\
         model.bits = 10, 6, 8\n\
         data.source = dir\n\
         data.path = /tmp/kodak\n\
         output.dir = runs/x\n",
    )
    .unwrap();
    assert_eq!(cfg.lambda, 0.025);
    assert_eq!(cfg.gamma, 0.1);
    assert_eq!(cfg.mode, ModeName::Ste);
    assert_eq!(cfg.model.bits, vec![6, 8, 10]);
    assert_eq!(cfg.data, DataSource::Dir(PathBuf::from("/tmp/kodak")));
    assert_eq!(cfg.output_dir, PathBuf::from("runs/x"));
}

#[test]
fn text_round_trips() {
    let mut cfg = RunConfig::default();
    cfg.lambda = 0.0932;
    cfg.beta_ramp_to = Some(10.0);
    cfg.beta_ramp_steps = 500;
    cfg.model.dynamic = false;
    cfg.data = DataSource::Dir(PathBuf::from("imgs"));
    cfg.sweep_lambdas = vec![0.001, 0.01];
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    let d = RunConfig::default();
    assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
}

#[test]
fn unknown_key_is_named() {
    let e = RunConfig::parse("train.lamda = 0.1\n").unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert_eq!(key_of(e), "train.lamda");
}

#[test]
fn duplicate_key_is_rejected() {
    let e = RunConfig::parse("train.steps = 10\ntrain.steps = 20\n").unwrap_err();
    assert!(e.to_string().contains("line 2"), "{e}");
    assert_eq!(key_of(e), "train.steps");
}

#[test]
fn invalid_values_are_named() {
    for (text, key) in [
        ("train.lambda = -1", "train.lambda"),
        ("train.lambda = abc", "train.lambda"),
        ("train.gamma = -0.5", "train.gamma"),
        ("train.steps = 0", "train.steps"),
        ("quant.mode = exact", "quant.mode"),
        ("quant.beta = 0", "quant.beta"),
        ("model.bits = 4,4,8", "model.bits"),
        ("model.bits = 1,8", "model.bits"),
        ("model.fixed_bits = 40", "model.fixed_bits"),
        ("model.dynamic = maybe", "model.dynamic"),
        ("data.size = 60", "data.size"),
        ("data.kinds = stripes", "data.kinds"),
        ("sweep.lambdas = 0.1,-2", "sweep.lambdas"),
        ("data.source = dir", "data.path"),
        ("quant.mode = ste\nquant.beta_ramp_to = 10\nquant.beta_ramp_steps = 5", "quant.beta_ramp_to"),
        ("model.kernel = 4", "model.kernel"),
    ] {
        let e = RunConfig::parse(text).unwrap_err();
        assert_eq!(key_of(e), key, "{text}");
    }
}

#[test]
fn line_without_equals_reports_the_line() {
    let e = RunConfig::parse("# header\ntrain.steps 10\n").unwrap_err();
    assert_eq!(key_of(e), "line 2");
}

#[test]
fn seed_override() {
    let mut cfg = RunConfig::default();
    apply_seed_override(&mut cfg, None).unwrap();
    assert_eq!(cfg.seed, RunConfig::default().seed);
    apply_seed_override(&mut cfg, Some("42")).unwrap();
    assert_eq!(cfg.seed, 42);
    let e = apply_seed_override(&mut cfg, Some("forty")).unwrap_err();
    assert_eq!(key_of(e), "DYNAQUANT_SEED");
    assert_eq!(cfg.seed, 42);
}
