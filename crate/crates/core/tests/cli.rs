use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xpert::data::Normalization;
use xpert::experiment::{TrainedMask, TrainedModel};
use xpert::hard_concrete::HardConcrete;
use xpert::nn::{Activation, Checkpoint, Classifier, DenseLayer, MaskGenerator};
use xpert::Tensor;

fn xpert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xpert")).args(args).env_remove("XPERT_SEED").output().expect("spawn xpert")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn moons_run(dir: &Path, out: &str) -> PathBuf {
    let out_dir = dir.join(out);
    let cfg = write_config(
        dir,
        &format!("{out}.json"),
        &format!(
            r#"{{"dataset":"moons","method":"xvat","output_dir":"{}","iterations":200,"eval_every":50}}"#,
            out_dir.display()
        ),
    );
    let o = xpert(&["run", cfg.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out_dir
}

#[test]
fn run_writes_artifacts_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let a = moons_run(dir.path(), "a");
    let b = moons_run(dir.path(), "b");
    for f in ["metrics.csv", "checkpoint.xprt", "resolved_config.json"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("iteration,wall_ms,loss,ce,xadv,mask_activity,test_acc\n"));
    assert_eq!(metrics, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("checkpoint.xprt")).unwrap(), std::fs::read(b.join("checkpoint.xprt")).unwrap());
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = moons_run(dir.path(), "base");
    let cfg = dir.path().join("base.json");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"base\"", "\"seeded\"").replace("/base\"", "/seeded\"");
    std::fs::write(&cfg, text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_xpert"))
        .args(["run", cfg.to_str().unwrap(), "--quiet"])
        .env("XPERT_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    let seeded = dir.path().join("seeded");
    let resolved = std::fs::read_to_string(seeded.join("resolved_config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 9"));
    assert_ne!(
        std::fs::read(base.join("metrics.csv")).unwrap(),
        std::fs::read(seeded.join("metrics.csv")).unwrap()
    );
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.json", r#"{"dataset":"moons","method":"xvat","output_dir":"o","epsilon":-1}"#);
    let o = xpert(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon"));

    let unknown = write_config(dir.path(), "unknown.json", r#"{"dataset":"moons","method":"xvat","output_dir":"o","epsilonn":1}"#);
    assert_eq!(xpert(&["run", unknown.to_str().unwrap()]).status.code(), Some(2));

    let missing = dir.path().join("absent.json");
    assert_eq!(xpert(&["run", missing.to_str().unwrap()]).status.code(), Some(1));

    let garbage = write_config(dir.path(), "ck.xprt", "not a checkpoint");
    let o = xpert(&["export-hist", garbage.to_str().unwrap(), "--layer", "x", "--out", "h.csv"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn boundary_has_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let run = moons_run(dir.path(), "m");
    let out = dir.path().join("boundary.csv");
    let o = xpert(&[
        "export-boundary",
        run.join("checkpoint.xprt").to_str().unwrap(),
        "--grid",
        "-1.5,2.5,-1,1.5,13",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 13 * 13);
    for r in rows {
        let p: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn histogram_counts_every_weight() {
    let dir = tempfile::tempdir().unwrap();
    let run = moons_run(dir.path(), "m");
    let ck_path = run.join("checkpoint.xprt");
    let total = Checkpoint::load(&ck_path).unwrap().require("classifier.1.weight").unwrap().len();
    let out = dir.path().join("hist.csv");
    let o = xpert(&[
        "export-hist",
        ck_path.to_str().unwrap(),
        "--layer",
        "classifier.1.weight",
        "--bins",
        "17",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out).unwrap();
    let counts: Vec<usize> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 17);
    assert_eq!(counts.iter().sum::<usize>(), total);
}

fn saturated_model(dir: &Path) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let generator = DenseLayer::new(Tensor::zeros(&[2, 2]).unwrap(), Tensor::full(&[2], 100.0).unwrap(), Activation::Identity).unwrap();
    let model = TrainedModel {
        classifier: Classifier::mlp(&[2, 4, 2], &mut rng).unwrap(),
        mask: TrainedMask::Generator(MaskGenerator::Dense(generator)),
        epsilon: 1.0,
        hard_concrete: HardConcrete::default(),
        sample_shape: vec![2],
        normalization: Normalization::Raw,
    };
    let path = dir.join("saturated.xprt");
    model.save(&path).unwrap();
    path
}

#[test]
fn saturated_masks_reproduce_the_input_image() {
    let dir = tempfile::tempdir().unwrap();
    let ck = saturated_model(dir.path());
    let out = dir.path().join("masks");
    let o = xpert(&["export-masks", ck.to_str().unwrap(), "moons:20:0.1:4", "--indices", "0,7,19", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in [0, 7, 19] {
        let input = std::fs::read(out.join(format!("{i}_input.pgm"))).unwrap();
        let masked = std::fs::read(out.join(format!("{i}_masked.pgm"))).unwrap();
        let mask = std::fs::read(out.join(format!("{i}_mask.pgm"))).unwrap();
        assert_eq!(input, masked);
        assert!(mask.ends_with(&[255, 255]));
    }
}

#[test]
fn out_of_range_index_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ck = saturated_model(dir.path());
    let o = xpert(&["export-masks", ck.to_str().unwrap(), "moons:5", "--indices", "5", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("out of range"));
}
