//! End-to-end tests of the spectrarec binary: every subcommand, exit codes,
//! and the file formats the commands exchange.

use std::path::PathBuf;
use std::process::{Command, Output};

use spectrarec_core::cube;
use spectrarec_core::metrics::parse_csv;
use spectrarec_core::nn;
use spectrarec_core::synth::{self, Split};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spectrarec"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process not killed")
}

const SCENE_CFG: &str = "\
height = 12
width = 12
lambda_min = 600
lambda_max = 775
lambda_step = 25
endmember_count = 3
blob_count = 4
noise_sigma = 0.003
seed = 7
scene_count = 6
train_frac = 0.5
val_frac = 0.25
test_frac = 0.25
";

const TRAIN_CFG: &str = "\
epochs = 2
lr0 = 1e-3
patch = 6
seed = 1
fine_tune_epochs = 2
";

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("scene.cfg"), SCENE_CFG).unwrap();
        std::fs::write(root.join("train.cfg"), TRAIN_CFG).unwrap();
        Fixture { dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn gen(&self) {
        let out = run(&["gen", "--config", &self.arg("scene.cfg"), "--out", &self.arg("data")]);
        assert_eq!(exit_code(&out), 0, "gen failed: {}", stderr(&out));
    }

    fn train(&self) {
        let out = run(&[
            "train",
            "--model",
            "pixel_feature_net",
            "--dataset",
            &self.arg("data"),
            "--config",
            &self.arg("train.cfg"),
            "--out",
            &self.arg("model.hsw1"),
            "--no-augment",
        ]);
        assert_eq!(exit_code(&out), 0, "train failed: {}", stderr(&out));
    }
}

#[test]
fn gen_writes_manifest_and_prints_split_counts() {
    let fx = Fixture::new();
    let out = run(&["gen", "--config", &fx.arg("scene.cfg"), "--out", &fx.arg("data")]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("train 3"), "{}", text);
    assert!(text.contains("val 1"), "{}", text);
    assert!(text.contains("test 2"), "{}", text);
    let manifest = std::fs::read_to_string(fx.path("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 6, "header plus one row per scene");
}

#[test]
fn gen_rejects_bad_fractions_with_exit_2() {
    let fx = Fixture::new();
    std::fs::write(
        fx.path("bad.cfg"),
        "train_frac = 0.5\nval_frac = 0.2\ntest_frac = 0.2\n",
    )
    .unwrap();
    let out = run(&["gen", "--config", &fx.arg("bad.cfg"), "--out", &fx.arg("data")]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("sum to 1"), "{}", stderr(&out));
}

#[test]
fn gen_same_seed_is_byte_identical() {
    let fx = Fixture::new();
    for dir in ["a", "b"] {
        let out = run(&["gen", "--config", &fx.arg("scene.cfg"), "--out", &fx.arg(dir)]);
        assert_eq!(exit_code(&out), 0);
    }
    let mut names: Vec<String> = std::fs::read_dir(fx.path("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = std::fs::read(fx.path("a").join(&name)).unwrap();
        let b = std::fs::read(fx.path("b").join(&name)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", name);
    }
}

#[test]
fn train_writes_checkpoint_history_and_epoch_lines() {
    let fx = Fixture::new();
    fx.gen();
    let out = run(&[
        "train",
        "--model",
        "pixel_feature_net",
        "--dataset",
        &fx.arg("data"),
        "--config",
        &fx.arg("train.cfg"),
        "--out",
        &fx.arg("model.hsw1"),
        "--no-augment",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let epoch_lines: Vec<&str> = text
        .lines()
        .filter(|l| l.split(' ').count() == 4 && l.starts_with(|c: char| c.is_ascii_digit()))
        .collect();
    assert_eq!(epoch_lines.len(), 2, "one line per epoch: {}", text);
    // checkpoint loads and matches the dataset
    let (spec, _) = nn::load_weights(&fx.path("model.hsw1")).unwrap();
    assert_eq!(spec.output_channels, 8);
    let history = std::fs::read_to_string(fx.path("model.hsw1.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2);
    // atomic writes leave no temp files behind
    let leftovers: Vec<_> = std::fs::read_dir(&fx.root)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".tmp."))
        .collect();
    assert!(leftovers.is_empty(), "temp files left: {:?}", leftovers);
}

#[test]
fn train_unknown_model_lists_valid_names() {
    let fx = Fixture::new();
    fx.gen();
    let out = run(&[
        "train",
        "--model",
        "resnet50",
        "--dataset",
        &fx.arg("data"),
        "--out",
        &fx.arg("model.hsw1"),
    ]);
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    for name in ["pixel_feature_net", "local_feature_net", "spectral_attention_net"] {
        assert!(err.contains(name), "{}", err);
    }
}

#[test]
fn eval_writes_reports_with_consistent_ranges() {
    let fx = Fixture::new();
    fx.gen();
    fx.train();
    let out = run(&[
        "eval",
        "--checkpoint",
        &fx.arg("model.hsw1"),
        "--dataset",
        &fx.arg("data"),
        "--split",
        "test",
        "--out",
        &fx.arg("report"),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    let metrics_text = std::fs::read_to_string(fx.path("report/metrics.csv")).unwrap();
    assert!(metrics_text.starts_with("metric,mean,std\n"), "{}", metrics_text);
    let rows = parse_csv(&metrics_text, "metric,mean,std").unwrap();
    assert_eq!(rows.len(), 6);

    // full MAE equals the element-count-weighted combination of visible and
    // extended (4 channels each on this grid)
    let ranges = parse_csv(
        &std::fs::read_to_string(fx.path("report/ranges.csv")).unwrap(),
        "range,mae_mean,mae_std",
    )
    .unwrap();
    assert_eq!(ranges.len(), 3);
    let full = ranges[0].1[0];
    let vis = ranges[1].1[0];
    let ext = ranges[2].1[0];
    let combined = (vis * 4.0 + ext * 4.0) / 8.0;
    assert!(
        (full - combined).abs() < 1e-12,
        "full {} vs combined {}",
        full,
        combined
    );

    let per_channel = parse_csv(
        &std::fs::read_to_string(fx.path("report/per_channel.csv")).unwrap(),
        "channel,wavelength_nm,mae_mean,mae_std,psnr_mean,psnr_std",
    )
    .unwrap();
    assert_eq!(per_channel.len(), 8, "one row per channel");

    let chart = std::fs::read_to_string(fx.path("report/chart.svg")).unwrap();
    for id in ["mae_mean", "psnr_mean"] {
        let line = chart
            .lines()
            .find(|l| l.contains(&format!("id=\"{}\"", id)))
            .unwrap_or_else(|| panic!("{} polyline missing", id));
        let points = line.split("points=\"").nth(1).unwrap();
        assert_eq!(points.split('"').next().unwrap().split(' ').count(), 8);
    }
}

#[test]
fn eval_channel_mismatch_suggests_finetune() {
    let fx = Fixture::new();
    fx.gen();
    fx.train();
    // second dataset with a different channel count
    std::fs::write(
        fx.path("scene6.cfg"),
        "height = 12\nwidth = 12\nlambda_min = 600\nlambda_max = 725\nlambda_step = 25\n\
         endmember_count = 2\nscene_count = 4\ntrain_frac = 0.5\nval_frac = 0.25\ntest_frac = 0.25\nseed = 3\n",
    )
    .unwrap();
    let out = run(&["gen", "--config", &fx.arg("scene6.cfg"), "--out", &fx.arg("data6")]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let out = run(&[
        "eval",
        "--checkpoint",
        &fx.arg("model.hsw1"),
        "--dataset",
        &fx.arg("data6"),
        "--out",
        &fx.arg("report6"),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("finetune"), "{}", stderr(&out));
}

#[test]
fn eval_on_own_predictions_reports_zero_mae() {
    let fx = Fixture::new();
    fx.gen();
    fx.train();
    // rebuild the dataset with cubes replaced by the model's own predictions
    let (spec, weights) = nn::load_weights(&fx.path("model.hsw1")).unwrap();
    let dataset = synth::load_dataset(&fx.path("data")).unwrap();
    let wavelengths = dataset.wavelengths();
    let mut self_pairs = Vec::new();
    for pair in &dataset.pairs {
        let pred = nn::forward(&spec, &weights, &pair.rgb)
            .unwrap()
            .with_wavelengths(wavelengths.clone())
            .unwrap()
            .quantized_to_f32();
        self_pairs.push(synth::DatasetPair {
            cube: pred,
            ..pair.clone()
        });
    }
    synth::write_dataset(&synth::Dataset { pairs: self_pairs }, &fx.path("self"))
        .unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        &fx.arg("model.hsw1"),
        "--dataset",
        &fx.arg("self"),
        "--split",
        "test",
        "--out",
        &fx.arg("selfreport"),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let rows = parse_csv(
        &std::fs::read_to_string(fx.path("selfreport/metrics.csv")).unwrap(),
        "metric,mean,std",
    )
    .unwrap();
    assert_eq!(rows[0].0, "mae");
    // labels are the f32-quantized predictions, so the error is bounded by
    // the quantization step of ~1e-2 scale values
    assert!(rows[0].1[0] < 1e-6, "self-prediction MAE {}", rows[0].1[0]);
}

#[test]
fn eval_sam_degrees_flag_scales_sam_row() {
    let fx = Fixture::new();
    fx.gen();
    fx.train();
    for (dir, flag) in [("rad", false), ("deg", true)] {
        let mut args = vec![
            "eval".to_string(),
            "--checkpoint".into(),
            fx.arg("model.hsw1"),
            "--dataset".into(),
            fx.arg("data"),
            "--out".into(),
            fx.arg(dir),
        ];
        if flag {
            args.push("--sam-degrees".into());
        }
        let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        let out = run(&args);
        assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    }
    let sam_of = |dir: &str| {
        let rows = parse_csv(
            &std::fs::read_to_string(fx.path(dir).join("metrics.csv")).unwrap(),
            "metric,mean,std",
        )
        .unwrap();
        rows.iter().find(|r| r.0 == "sam").unwrap().1[0]
    };
    let ratio = sam_of("deg") / sam_of("rad");
    assert!(
        (ratio - 180.0 / std::f64::consts::PI).abs() < 1e-9,
        "degrees/radians ratio {}",
        ratio
    );
}

#[test]
fn finetune_adapts_head_and_caps_history() {
    let fx = Fixture::new();
    fx.gen();
    fx.train();
    std::fs::write(
        fx.path("scene6.cfg"),
        "height = 12\nwidth = 12\nlambda_min = 600\nlambda_max = 725\nlambda_step = 25\n\
         endmember_count = 2\nscene_count = 4\ntrain_frac = 0.5\nval_frac = 0.25\ntest_frac = 0.25\nseed = 3\n",
    )
    .unwrap();
    let out = run(&["gen", "--config", &fx.arg("scene6.cfg"), "--out", &fx.arg("data6")]);
    assert_eq!(exit_code(&out), 0);
    let out = run(&[
        "finetune",
        "--checkpoint",
        &fx.arg("model.hsw1"),
        "--dataset",
        &fx.arg("data6"),
        "--config",
        &fx.arg("train.cfg"),
        "--out",
        &fx.arg("tuned.hsw1"),
        "--no-augment",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let (spec, _) = nn::load_weights(&fx.path("tuned.hsw1")).unwrap();
    assert_eq!(spec.output_channels, 6);
    let history = std::fs::read_to_string(fx.path("tuned.hsw1.history.csv")).unwrap();
    let rows = history.lines().count() - 1;
    assert!(rows <= 50, "history has {} rows", rows);
    assert_eq!(rows, 2, "fine_tune_epochs = 2 in the config");
    // evaluation of the tuned checkpoint on the new dataset now works
    let out = run(&[
        "eval",
        "--checkpoint",
        &fx.arg("tuned.hsw1"),
        "--dataset",
        &fx.arg("data6"),
        "--out",
        &fx.arg("report_tuned"),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
}

#[test]
fn spectra_exports_matching_label_and_prediction_columns() {
    let fx = Fixture::new();
    fx.gen();
    fx.train();
    let out = run(&[
        "spectra",
        "--checkpoint",
        &fx.arg("model.hsw1"),
        "--cube",
        &fx.arg("data/scene_0004.cube.hsc1"),
        "--rgb",
        &fx.arg("data/scene_0004.rgb.hsc1"),
        "--point",
        "2,3",
        "--point",
        "0,0",
        "--point",
        "11,11",
        "--out",
        &fx.arg("spectra"),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let label = cube::load_cube(&fx.path("data/scene_0004.cube.hsc1")).unwrap();
    let (spec, weights) = nn::load_weights(&fx.path("model.hsw1")).unwrap();
    let rgb = synth::storage_cube_as_rgb(
        &cube::load_cube(&fx.path("data/scene_0004.rgb.hsc1")).unwrap(),
    )
    .unwrap();
    let pred = nn::forward(&spec, &weights, &rgb).unwrap();
    for (h, w) in [(2usize, 3usize), (0, 0), (11, 11)] {
        let text =
            std::fs::read_to_string(fx.path(&format!("spectra/spectrum_{}_{}.csv", h, w)))
                .unwrap();
        let rows = parse_csv(&text, "wavelength_nm,label,prediction").unwrap();
        assert_eq!(rows.len(), 8, "one row per channel");
        let label_spec = cube::extract_spectrum(&label, h, w).unwrap();
        for (c, row) in rows.iter().enumerate() {
            assert_eq!(row.0.parse::<f64>().unwrap(), label.wavelengths()[c]);
            assert_eq!(row.1[0], label_spec[c], "label column is extract_spectrum");
            assert_eq!(row.1[1], pred.value(h, w, c), "prediction column is the forward pass");
        }
    }
}

#[test]
fn spectra_out_of_bounds_point_is_usage_error() {
    let fx = Fixture::new();
    fx.gen();
    fx.train();
    let out = run(&[
        "spectra",
        "--checkpoint",
        &fx.arg("model.hsw1"),
        "--cube",
        &fx.arg("data/scene_0000.cube.hsc1"),
        "--point",
        "12,0",
        "--out",
        &fx.arg("spectra"),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("outside"), "{}", stderr(&out));
}

#[test]
fn check_passes_clean_and_fails_under_fault_injection() {
    let out = run(&["check"]);
    assert_eq!(exit_code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(
        text.contains("param_count pixel_feature_net C=27: 1611"),
        "{}",
        text
    );

    let out = bin()
        .args(["check"])
        .env("SPECTRAREC_FAULT", "gradient")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);
    let text = stdout(&out);
    assert!(text.contains("FAIL gradient"), "{}", text);
}

#[test]
fn help_documents_every_subcommand() {
    let out = run(&["--help"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    for sub in ["gen", "train", "finetune", "eval", "spectra", "check"] {
        assert!(text.contains(sub), "{} missing from help", sub);
    }
    for sub in ["gen", "train", "finetune", "eval", "spectra"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(exit_code(&out), 0, "{} --help", sub);
    }
}

#[test]
fn threads_env_var_is_respected() {
    let fx = Fixture::new();
    fx.gen();
    fx.train();
    let out = bin()
        .args([
            "eval",
            "--checkpoint",
            &fx.arg("model.hsw1"),
            "--dataset",
            &fx.arg("data"),
            "--out",
            &fx.arg("report1"),
        ])
        .env("SPECTRAREC_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    // same results as the default-parallel run
    let out2 = run(&[
        "eval",
        "--checkpoint",
        &fx.arg("model.hsw1"),
        "--dataset",
        &fx.arg("data"),
        "--out",
        &fx.arg("reportN"),
    ]);
    assert_eq!(exit_code(&out2), 0);
    let a = std::fs::read_to_string(fx.path("report1/metrics.csv")).unwrap();
    let b = std::fs::read_to_string(fx.path("reportN/metrics.csv")).unwrap();
    assert_eq!(a, b, "thread count must not change results");
}

#[test]
fn dataset_path_helper_types_load() {
    // the Fixture-generated dataset loads through the library too
    let fx = Fixture::new();
    fx.gen();
    let dataset = synth::load_dataset(&fx.path("data")).unwrap();
    assert_eq!(dataset.pairs.len(), 6);
    assert_eq!(dataset.split(Split::Train).len(), 3);
    assert_eq!(dataset.channels(), 8);
}
