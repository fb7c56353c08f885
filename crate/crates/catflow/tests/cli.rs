use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use catflow::checkpoint::Checkpoint;
use catflow::dataset;

fn catflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catflow")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const TINY: &str = "\
dataset = eight-gaussians
classes = 6
n_train = 300
n_val = 60
epochs = 2
batch_size = 50
steps = 8
hidden = 8
blocks = 1
flow_layers = 1
iwbo_samples = 4
";

#[test]
fn make_data_is_deterministic_and_file_matches_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let a = catflow(dir.path(), &["make-data", "--n", "50", "--seed", "7", "--out", "a.txt"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = catflow(dir.path(), &["make-data", "--n", "50", "--seed", "7"]);
    let file = fs::read_to_string(dir.path().join("a.txt")).unwrap();
    assert_eq!(file, stdout(&b));
    assert!(file.starts_with("8 2 50 7\n"));
    let parsed = dataset::read(&dir.path().join("a.txt")).unwrap();
    assert_eq!(dataset::to_text(&parsed.data, parsed.seed), file);
    let c = catflow(dir.path(), &["make-data", "--kind", "char-corpus", "--length", "12", "--n", "3"]);
    assert!(stdout(&c).starts_with("27 12 3 0\n"));
}

#[test]
fn sample_writes_the_dataset_format() {
    let dir = tempfile::tempdir().unwrap();
    let o = catflow(dir.path(), &["sample", "--model", "multinomial-diffusion", "-n", "16", "--T", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 17);
    let parsed = dataset::parse(&text, Path::new("-")).unwrap();
    assert_eq!((parsed.data.batch(), parsed.data.dims(), parsed.data.classes()), (16, 2, 8));
    let again = catflow(dir.path(), &["sample", "--model", "multinomial-diffusion", "-n", "16", "--T", "10"]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn usage_and_file_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "epochs = 2\nwidth = 3\n").unwrap();
    let o = catflow(dir.path(), &["train", "--config", "bad.cfg", "--out", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown config key `width`"), "{}", stderr(&o));

    let o = catflow(dir.path(), &["sample", "--posterior", "nope"]);
    assert_eq!(o.status.code(), Some(2));

    let o = catflow(dir.path(), &["eval", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.ckpt: No such file or directory"), "{}", stderr(&o));

    fs::write(dir.path().join("junk.ckpt"), b"CATG\x07\x00\x00\x00").unwrap();
    let o = catflow(dir.path(), &["eval", "--checkpoint", "junk.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unsupported checkpoint version 7"), "{}", stderr(&o));
}

#[test]
fn train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    for model in ["multinomial-diffusion", "argmax-flow"] {
        let o = catflow(
            dir.path(),
            &["train", "--config", "tiny.cfg", "--model", model, "--out", "m.ckpt", "--metrics", "m.csv"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("epoch    2"));
        let e1 = catflow(dir.path(), &["eval", "--checkpoint", "m.ckpt"]);
        let e2 = catflow(dir.path(), &["eval", "--checkpoint", "m.ckpt"]);
        assert!(e1.status.success(), "{}", stderr(&e1));
        assert_eq!(stdout(&e1), stdout(&e2));
        assert!(stdout(&e1).contains("nll") && stdout(&e1).contains("bpd"));
        let ck = Checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
        assert_eq!(ck.config.epochs, 2);
    }
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(csv.matches("epoch,split,metric,value").count(), 1);
    assert!(csv.contains(",val,nll_iwbo,"));

    // Model and data shapes must agree.
    catflow(dir.path(), &["make-data", "--kind", "char-corpus", "--n", "4", "--out", "c.txt"]);
    let o = catflow(dir.path(), &["eval", "--checkpoint", "m.ckpt", "--dataset", "c.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shape mismatch"), "{}", stderr(&o));
}

#[test]
fn denoise_and_pmf_outputs() {
    let dir = tempfile::tempdir().unwrap();
    catflow(dir.path(), &["make-data", "--kind", "char-corpus", "--length", "8", "--n", "40", "--out", "c.txt"]);
    let o = catflow(dir.path(), &["train", "--dataset", "c.txt", "--epochs", "1", "--T", "5", "--hidden", "8", "--out", "c.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = catflow(dir.path(), &["denoise", "--checkpoint", "c.ckpt", "--dataset", "c.txt", "--show", "2", "--rate", "0.3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.matches("original:").count(), 2);
    assert_eq!(text.matches("suggested:").count(), 2);
    assert!(text.contains("corrupted positions"));
    let o = catflow(dir.path(), &["denoise", "--checkpoint", "c.ckpt", "--text", "too long for the model"]);
    assert_eq!(o.status.code(), Some(2));

    catflow(dir.path(), &["make-data", "--n", "500", "--classes", "4", "--out", "g.txt"]);
    let o = catflow(dir.path(), &["pmf", "--dataset", "g.txt", "--out", "grid", "--scale", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("total mass 1.000000"));
    let pgm = fs::read(dir.path().join("grid.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), 11 + 64);
    let csv = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn verify_quick_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = catflow(dir.path(), &["verify", "--quick"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("max_error"));
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 5);
    assert!(text.contains(", 0 failed"));
}
