use std::path::Path;
use std::process::{Command, Output};

use anchorflow::losses::LossContext;
use anchorflow::nn::train::{record_anchor, AnchorSource};
use anchorflow::pipeline::load_anchor_net;
use anchorflow::skeleton::{JOINT_NAMES, NON_TORSO_IDS, TORSO_IDS};
use anchorflow::synthdata::read_dataset;

const TINY: &[&str] = &[
    "data.n_train=2",
    "data.n_test=2",
    "data.frames=8",
    "model.dim=16",
    "model.blocks=1",
    "train.stage1_epochs=2",
    "train.stage2_epochs=2",
    "train.batch=2",
    "sample.steps=3",
    "ablate.steps=1,2,3",
    "ablate.cfg_scales=1,1.5",
];

fn run(dir: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_anchorflow"));
    cmd.current_dir(dir);
    for kv in TINY.iter().chain(extra) {
        cmd.args(["--set", kv]);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(dir: &Path, extra: &[&str], args: &[&str]) -> Output {
    let out = run(dir, extra, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn trained(dir: &Path) {
    ok(dir, &[], &["gen-data"]);
    ok(dir, &[], &["train", "--stage", "1"]);
    ok(dir, &[], &["train", "--stage", "2"]);
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &[], &["gen-data"]);
    ok(b.path(), &[], &["gen-data"]);
    for f in ["run/train.fmkd", "run/test.fmkd"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["seed=7"], &["gen-data"]);
    assert_ne!(
        std::fs::read(a.path().join("run/test.fmkd")).unwrap(),
        std::fs::read(c.path().join("run/test.fmkd")).unwrap()
    );
}

#[test]
fn empty_split_and_joint_order() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["data.n_test=0"], &["gen-data"]);
    let (m, recs) = read_dataset(&d.path().join("run/test.fmkd")).unwrap();
    assert!(recs.is_empty());
    assert!(m.records.is_empty());
    assert_eq!(m.joint_names, JOINT_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>());
}

#[test]
fn stage2_requires_stage1() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &[], &["gen-data"]);
    let out = run(d.path(), &[], &["train", "--stage", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage-1"));
    ok(d.path(), &["train.gt_anchor=true"], &["train", "--stage", "2"]);
}

#[test]
fn missing_inputs_fail_cleanly() {
    let d = tempfile::tempdir().unwrap();
    for args in [&["infer"][..], &["train", "--stage", "1"], &["eval"]] {
        let out = run(d.path(), &[], args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    assert_eq!(run(d.path(), &["sample.steps=0"], &["show-config"]).status.code(), Some(2));
}

#[test]
fn inference_keeps_anchor_and_varies_completion() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    ok(d.path(), &["paths.pred=run/a.fmkd"], &["infer"]);
    ok(d.path(), &["paths.pred=run/a2.fmkd"], &["infer"]);
    ok(d.path(), &["paths.pred=run/b.fmkd", "seed=1"], &["infer"]);
    let read = |n: &str| read_dataset(&d.path().join("run").join(n)).unwrap();
    let ((ma, a), (_, a2), (_, b)) = (read("a.fmkd"), read("a2.fmkd"), read("b.fmkd"));
    assert_eq!(ma.extra["kind"], "prediction");
    assert_eq!(a, a2);

    let (_, net) = load_anchor_net(&d.path().join("run/stage1.fmkc")).unwrap();
    let (_, test) = read("test.fmkd");
    let q = |x: f64| x as f32 as f64;
    let mut differs = false;
    for ((ra, rb), rt) in a.iter().zip(&b).zip(&test) {
        let anchor = record_anchor(rt, AnchorSource::Stage1(&net), &LossContext::default()).unwrap();
        assert_eq!(ra.gt.shape, rb.gt.shape);
        for (i, b) in ra.gt.shape.beta.iter().enumerate() {
            assert_eq!(b.to_bits(), q(anchor.shape.beta[i]).to_bits());
        }
        for (t, (fa, fb)) in ra.gt.frames.iter().zip(&rb.gt.frames).enumerate() {
            for (k, &j) in TORSO_IDS.iter().enumerate() {
                assert_eq!(fa.body_pose[j - 1], fb.body_pose[j - 1]);
                assert_eq!(fa.body_pose[j - 1], anchor.torso_pose[t][k].map(q));
            }
            assert_eq!(fa.cam_orient, anchor.cam_orient[t].map(q));
            assert_eq!(fa.cam_transl, anchor.cam_transl[t].map(q));
            assert_eq!(fa.cam_transl, fb.cam_transl);
            differs |= NON_TORSO_IDS.iter().any(|&j| fa.body_pose[j - 1] != fb.body_pose[j - 1]);
        }
    }
    assert!(differs);
}

#[test]
fn eval_and_ablation_outputs() {
    let d = tempfile::tempdir().unwrap();
    trained(d.path());
    ok(d.path(), &[], &["eval", "--pred", "run/test.fmkd", "--gt", "run/test.fmkd"]);
    let csv = std::fs::read_to_string(d.path().join("run/eval.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    let headers = rows.headers().unwrap().clone();
    let n = headers.iter().position(|h| h == "non_torso_mpjpe").unwrap();
    let mut count = 0;
    for r in rows.records() {
        let r = r.unwrap();
        assert!(r[n].parse::<f64>().unwrap().abs() < 1e-6);
        count += 1;
    }
    assert_eq!(count, 3);

    ok(d.path(), &[], &["infer"]);
    ok(d.path(), &[], &["ablate-steps"]);
    let lines = |f: &str| std::fs::read_to_string(d.path().join("run").join(f)).unwrap().lines().count();
    assert_eq!(lines("ablate_steps.csv"), 1 + 3);
    assert_eq!(lines("ablate_cfg.csv"), 1 + 2);

    let out = run(d.path(), &[], &["eval", "--pred", "run/pred.fmkd", "--gt", "run/train.fmkd"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &[], &["gradcheck"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("velocity_net"));
    assert!(d.path().join("run/gradcheck.json").exists());
    let bad = run(d.path(), &[], &["gradcheck", "--corrupt", "fk"]);
    assert_eq!(bad.status.code(), Some(1));
}
