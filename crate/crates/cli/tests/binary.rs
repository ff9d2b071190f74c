use std::fs;
use std::process::{Command, Output};

fn dynaquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynaquant"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DYNAQUANT_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_and_eval_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out = dir.path().join("run");
    fs::write(
        &cfg,
        "# tiny run\nmodel.channels = 4\nmodel.latent_channels = 4\ntrain.steps = 3\n\
         train.batch_size = 1\ntrain.crop_size = 32\ndata.count = 2\ndata.size = 32\n",
    )
    .unwrap();
    let o = dynaquant(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("bpp"));

    let imgs = dir.path().join("imgs");
    let o = dynaquant(&["synth", "--count", "2", "--size", "32", "--out", imgs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = out.join("checkpoint.dqnt");
    let e = dir.path().join("eval");
    let o = dynaquant(&["eval", "--checkpoint", ck.to_str().unwrap(), "--images", imgs.to_str().unwrap(), "--out", e.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(e.join("eval.json").is_file());
    assert_eq!(fs::read_to_string(e.join("eval.csv")).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.lamda = 0.1\n").unwrap();
    let o = dynaquant(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lamda"), "{}", stderr(&o));

    let cfg = dir.path().join("dir.cfg");
    let out = dir.path().join("never");
    fs::write(&cfg, format!("data.source = dir\ndata.path = {}\n", dir.path().join("missing").display())).unwrap();
    let o = dynaquant(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!out.exists());

    let o = dynaquant(&["train", "--config", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bdrate_prints_two_decimals() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "bpp,psnr_db\n0.1,28\n0.2,31\n0.4,34\n0.8,37\n").unwrap();
    fs::write(&b, "bpp,psnr_db\n0.2,28\n0.4,31\n0.8,34\n1.6,37\n").unwrap();
    let o = dynaquant(&["bdrate", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "100.00");

    fs::write(&b, "bpp,psnr_db\n0.2,28\nnot,a number\n").unwrap();
    let o = dynaquant(&["bdrate", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn proxy_dump_to_stdout() {
    let o = dynaquant(&["proxy-dump", "--beta", "1,5", "--samples-per-unit", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().next(), Some("beta,x,g,g_prime"));
    assert_eq!(text.lines().count(), 1 + 2 * 31);
    let o = dynaquant(&["proxy-dump", "--beta", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let o = dynaquant(&["ablate", "--suite", "everything"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("everything"));
}
