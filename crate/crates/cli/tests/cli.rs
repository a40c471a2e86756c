use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dualgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualgen")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn small_world(dir: &TempDir) -> String {
    let w = p(dir, "w.jsonl");
    let o = dualgen(&["gen-world", "--seed", "3", "--items", "60", "--users", "6", "--outfits", "20", "--out", &w]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    w
}

fn tiny_stage1(w: &str, out: &str) {
    let o = dualgen(&[
        "train", "--data", w, "--stage", "1", "--steps", "3", "--batch-size", "2", "--depth", "1", "--width", "16",
        "--heads", "2", "--seed", "1", "--out", out,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn lines(path: &str) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn gen_world_counts_and_determinism() {
    let dir = TempDir::new().unwrap();
    let a = p(&dir, "a.jsonl");
    let b = p(&dir, "b.jsonl");
    for out in [&a, &b] {
        let o = dualgen(&["gen-world", "--seed", "7", "--items", "1000", "--users", "200", "--outfits", "500", "--out", out]);
        assert_eq!(code(&o), 0);
    }
    assert_eq!(lines(&a).len(), 1 + 1000 + 200 + 500);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn invalid_world_settings_exit_two() {
    let dir = TempDir::new().unwrap();
    let o = dualgen(&["gen-world", "--items", "0", "--out", &p(&dir, "w.jsonl")]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("world spec"));
}

#[test]
fn unwritable_output_is_reported() {
    let o = dualgen(&["gen-world", "--items", "10", "--users", "2", "--outfits", "3", "--out", "/nonexistent/dir/w.jsonl"]);
    assert_ne!(code(&o), 0);
}

#[test]
fn training_is_reproducible_and_later_stages_need_init() {
    let dir = TempDir::new().unwrap();
    let w = small_world(&dir);
    let a = p(&dir, "a.ckpt");
    let b = p(&dir, "b.ckpt");
    tiny_stage1(&w, &a);
    tiny_stage1(&w, &b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = lines(&format!("{a}.log.csv"));
    assert_eq!(log[0], "step,stage,image_loss,text_loss,joint_loss,mean_gap_norm");

    for stage in ["2", "3"] {
        let o = dualgen(&["train", "--data", &w, "--stage", stage, "--steps", "1", "--out", &p(&dir, "c.ckpt")]);
        assert_eq!(code(&o), 2, "stage {stage}");
    }
    let o = dualgen(&["train", "--data", &w, "--stage", "4", "--out", &p(&dir, "c.ckpt")]);
    assert_eq!(code(&o), 2);

    let c = p(&dir, "c.ckpt");
    let o = dualgen(&["train", "--data", &w, "--stage", "2", "--init", &a, "--steps", "2", "--batch-size", "2", "--out", &c]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&c).exists());
}

#[test]
fn default_training_flags() {
    let o = dualgen(&["train", "--help"]);
    let help = String::from_utf8_lossy(&o.stdout);
    for needle in ["[default: 0.00003]", "[default: 0.01]", "[default: 0.2]", "[default: 0.1]", "[default: 0.5]"] {
        assert!(help.contains(needle), "missing {needle}");
    }
}

#[test]
fn infer_and_eval_end_to_end() {
    let dir = TempDir::new().unwrap();
    let w = small_world(&dir);
    let ck = p(&dir, "m.ckpt");
    tiny_stage1(&w, &ck);
    let fast = ["--image-steps", "2", "--text-steps", "2"];

    let pf = p(&dir, "pfitb.jsonl");
    let mut args = vec!["infer", "--data", &w, "--checkpoint", &ck, "--task", "pfitb", "--n", "4", "--seed", "3", "--out", &pf];
    args.extend(fast);
    assert_eq!(code(&dualgen(&args)), 0);
    assert_eq!(lines(&pf).len(), 4);
    let again = p(&dir, "pfitb2.jsonl");
    let args2: Vec<&str> = args.iter().map(|&a| if a == pf { again.as_str() } else { a }).collect();
    assert_eq!(code(&dualgen(&args2)), 0);
    assert_eq!(fs::read(&pf).unwrap(), fs::read(&again).unwrap());

    let gor = p(&dir, "gor.jsonl");
    let mut args = vec![
        "infer", "--data", &w, "--checkpoint", &ck, "--task", "gor", "--n", "2", "--categories", "top,bottom,shoes,bag",
        "--out", &gor,
    ];
    args.extend(fast);
    assert_eq!(code(&dualgen(&args)), 0);
    let recs = lines(&gor);
    assert_eq!(recs.len(), 8);
    for (i, r) in recs.iter().enumerate() {
        assert!(r.contains(&format!("\"round\":{}", i % 4)), "{r}");
    }

    let bad_user = ["infer", "--data", &w, "--checkpoint", &ck, "--task", "pfitb", "--outfit", "0", "--user", "999", "--out", &gor];
    assert_eq!(code(&dualgen(&bad_user)), 2);

    let rep = p(&dir, "report.csv");
    let o = dualgen(&["eval", "--data", &w, "--samples", &pf, "--out", &rep, "--baseline", "random"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&rep).unwrap();
    assert!(text.starts_with("label,task,metric,value,count\n"));
    assert!(text.contains("random,pfitb,alignment,"));
    assert!(text.contains("chance.category_accuracy = 0.2"));
    let rep2 = p(&dir, "report2.csv");
    dualgen(&["eval", "--data", &w, "--samples", &pf, "--out", &rep2, "--baseline", "random"]);
    assert_eq!(fs::read(&rep).unwrap(), fs::read(&rep2).unwrap());

    let broken = p(&dir, "broken.jsonl");
    let mut body = fs::read_to_string(&pf).unwrap();
    body.push_str("{not json}\n");
    fs::write(&broken, body).unwrap();
    let o = dualgen(&["eval", "--data", &w, "--samples", &broken, "--out", &rep]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 5"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let cfg: PathBuf = dir.path().join("run.cfg");
    let out = p(&dir, "w.jsonl");
    fs::write(&cfg, format!("# world\nitems = 0\nusers=4\noutfits=6\nout={out}\n")).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    assert_eq!(code(&dualgen(&["--config", &cfg, "gen-world"])), 2);
    let o = dualgen(&["--config", &cfg, "gen-world", "--items", "30"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out).len(), 1 + 30 + 4 + 6);

    fs::write(dir.path().join("bad.cfg"), "no equals sign\n").unwrap();
    let bad = p(&dir, "bad.cfg");
    assert_eq!(code(&dualgen(&["--config", &bad, "gen-world", "--out", &out])), 2);
}
