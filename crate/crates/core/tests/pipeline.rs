//! Training, checkpoint and evaluation plumbing on a small synthetic set.

use std::path::Path;

use sparse_reid::augment::{fit_images, read_ppm};
use sparse_reid::checkpoint::load_model;
use sparse_reid::config::RunConfig;
use sparse_reid::data::{gen_synth, Manifest, Split, SynthSpec, OCCLUDER_TRAIN_DIR};
use sparse_reid::eval::evaluate;
use sparse_reid::par::Exec;
use sparse_reid::train::{checkpoint_path, train, Role};
use sparse_reid::visualize::visualize;
use sparse_reid::Error;

fn dataset(dir: &Path) {
    let spec = SynthSpec {
        identities: 12,
        images_per_id: 4,
        train_identities: 8,
        occluders: 6,
        ..SynthSpec::default()
    };
    gen_synth(&spec, dir, Exec::default()).unwrap();
}

fn config(root: &Path, out: &str, seed: u64, overrides: &[&str]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data_dir = root.join("ds");
    cfg.out_dir = root.join(out);
    cfg.occluders = Some(root.join("ds").join(OCCLUDER_TRAIN_DIR));
    cfg.teacher = Some(root.join("teacher/teacher.ckpt"));
    cfg.seed = seed;
    cfg.epochs = 1;
    cfg.ids_per_batch = 2;
    cfg.imgs_per_id = 4;
    cfg.apply(overrides).unwrap();
    cfg
}

fn with_teacher() -> tempfile::TempDir {
    let root = tempfile::tempdir().unwrap();
    dataset(&root.path().join("ds"));
    train(&config(root.path(), "teacher", 0, &["noda=false"]), Role::Teacher, Exec::default()).unwrap();
    root
}

#[test]
fn ablation_switches_compose() {
    let root = with_teacher();
    for hts in [false, true] {
        for npkd in [false, true] {
            for noda in [false, true] {
                let sw = [format!("hts={hts}"), format!("npkd={npkd}"), format!("noda={noda}")];
                let sw: Vec<&str> = sw.iter().map(String::as_str).collect();
                let cfg = config(root.path(), &format!("s_{hts}_{npkd}_{noda}"), 0, &sw);
                let out = train(&cfg, Role::Student, Exec::default()).unwrap();
                assert!(out.epoch_loss[0].is_finite(), "{sw:?}");
                assert_eq!(out.model.num_stages() > 0, hts);
                let has_kd = out.log.iter().any(|s| s.kl != 0.0 || s.feat != 0.0);
                assert_eq!(has_kd, npkd, "{sw:?}");
            }
        }
    }
}

#[test]
fn runs_are_deterministic_and_leave_artifacts() {
    let root = with_teacher();
    let a = train(&config(root.path(), "a", 3, &[]), Role::Student, Exec::Parallel).unwrap();
    let b = train(&config(root.path(), "b", 3, &[]), Role::Student, Exec::Sequential).unwrap();
    let c = train(&config(root.path(), "c", 4, &[]), Role::Student, Exec::Parallel).unwrap();
    assert_eq!(a.log, b.log);
    assert_ne!(a.log, c.log);
    let read = |d: &str, f: &str| std::fs::read(root.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "student.ckpt"), read("b", "student.ckpt"));
    assert_eq!(read("a", "student_loss.csv"), read("b", "student_loss.csv"));
    let log = String::from_utf8(read("a", "student_loss.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,L_cls,L_tri,L_KL,L_feat,L_ratio,L_total");
    for f in ["student.cfg", "student_epoch001.ckpt"] {
        assert!(root.path().join("a").join(f).exists(), "{f}");
    }
    let echoed = RunConfig::load(&root.path().join("a/student.cfg")).unwrap();
    assert_eq!(echoed, config(root.path(), "a", 3, &[]));
}

#[test]
fn checkpoints_reload_for_eval_and_visualization() {
    let root = with_teacher();
    let cfg = config(root.path(), "s", 0, &[]);
    let out = train(&cfg, Role::Student, Exec::default()).unwrap();
    let student = load_model(&checkpoint_path(&cfg.out_dir, Role::Student)).unwrap();
    assert_eq!(student, out.model);
    let teacher = load_model(&root.path().join("teacher/teacher.ckpt")).unwrap();
    assert_eq!(teacher.num_stages(), 0);
    assert_eq!(teacher.config.embed_dim, 2 * student.config.embed_dim);

    let manifest = Manifest::load(&cfg.data_dir).unwrap();
    let (qi, qm) = manifest.load_split(Split::Query, Exec::default()).unwrap();
    let (gi, gm) = manifest.load_split(Split::Gallery, Exec::default()).unwrap();
    let r1 = evaluate(&student, (&qi, &qm), (&gi, &gm), 16, Exec::Parallel).unwrap();
    let r2 = evaluate(&student, (&qi, &qm), (&gi, &gm), 7, Exec::Sequential).unwrap();
    assert_eq!((r1.ranks, r1.map), (r2.ranks, r2.map));
    assert_eq!(r1.keep_ratio, 0.7);

    let row = &manifest.rows[0];
    let img = fit_images(vec![read_ppm(&cfg.data_dir.join(&row.path)).unwrap()], 32, 64);
    let views = visualize(&student, &img).unwrap();
    let sched = student.config.sparsify.as_ref().unwrap();
    let n = student.patch.num_patches();
    let want: Vec<usize> = (0..sched.num_stages()).map(|s| n - sched.keep_count(s, n)).collect();
    assert_eq!(views[0].discarded, want);
}

#[test]
fn student_without_teacher_is_a_config_error() {
    let root = tempfile::tempdir().unwrap();
    dataset(&root.path().join("ds"));
    let cfg = config(root.path(), "s", 0, &["teacher=none"]);
    assert!(matches!(train(&cfg, Role::Student, Exec::default()), Err(Error::Config(_))));
    let cfg = config(root.path(), "s", 0, &["npkd=false", "occluders=none"]);
    assert!(matches!(train(&cfg, Role::Student, Exec::default()), Err(Error::Config(_))));
}

#[test]
fn total_loss_falls_over_first_epochs() {
    let root = tempfile::tempdir().unwrap();
    dataset(&root.path().join("ds"));
    let mut falls = 0;
    for seed in 0..3 {
        let cfg = config(root.path(), &format!("s{seed}"), seed, &["npkd=false", "noda=false", "epochs=5", "erase_prob=0", "patch_prob=0"]);
        let out = train(&cfg, Role::Student, Exec::default()).unwrap();
        falls += usize::from(out.epoch_loss.windows(2).all(|w| w[1] < w[0]));
    }
    assert!(falls >= 2, "total loss fell monotonically in only {falls} of 3 seeds");
}
