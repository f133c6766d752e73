use std::fs;
use std::path::Path;

use tacforge::imaging::{BinaryImage, MarkerFamily};
use tacforge::m2m::DEFAULT_LAMBDA;
use tacforge::scenario::TrajectoryConfig;
use tacforge::workbench::*;
use tacforge::Error;

fn small_generate(sensor: SensorDescriptor) -> GenerateConfig {
    let mut cfg = GenerateConfig::desk(sensor);
    cfg.scenario.indenters = vec!["sphere".into()];
    cfg.scenario.trajectory = TrajectoryConfig {
        contact_points: 1,
        depth_step: 0.6,
        max_depth: 0.6,
        shear_distance: 0.25,
        ..TrajectoryConfig::default()
    };
    cfg
}

#[test]
fn config_file_overlays_desk_defaults() {
    let cfg = ConfigFile::parse(
        r#"
dataset_id = "probe"
[sensor]
id = "d3"
pattern = "Diamond3"
[material]
youngs_modulus = 2.9e5
[scenario]
indenters = ["prism"]
[scenario.trajectory]
max_depth = 0.9
"#,
    )
    .unwrap();
    let g = cfg.generate(5).unwrap();
    assert_eq!(g.dataset_id, "probe");
    assert_eq!(g.sensor.pattern, MarkerFamily::Diamond(3));
    assert_eq!(g.material.youngs_modulus, 2.9e5);
    assert_eq!(g.scenario.indenters, ["prism"]);
    assert_eq!(g.scenario.trajectory.max_depth, 0.9);
    assert_eq!(g.scenario.trajectory.depth_step, TrajectoryConfig::default().depth_step);
    assert_eq!(g.seed, 5);
    g.validate().unwrap();

    assert!(ConfigFile::parse("[sensor]\nid = \"x\"\npattern = \"array2\"\n[material]\nstiffness = 1\n")
        .unwrap()
        .generate(0)
        .is_err());
    assert!(ConfigFile::parse("[bogus]\n").is_err());
}

#[test]
fn generated_dataset_validates_and_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a2");
    let m = cmd_generate(&small_generate(SensorDescriptor::new("a2", MarkerFamily::Array(2))), &out, None).unwrap();
    assert_eq!(m.sequences.len(), 1);
    let (loaded, dir) = DatasetManifest::load(&out).unwrap();
    assert_eq!(loaded, m);
    loaded.validate(&dir).unwrap();

    let s = &m.sequences[0];
    let rows = read_forces(&out.join(&s.forces)).unwrap();
    assert_eq!(rows.len(), s.frames.len());
    assert!(rows.iter().any(|r| r.fz > 0.05));
    let reference = fs::read(out.join(REFERENCE_FILE)).unwrap();
    assert_eq!(fs::read(out.join(&s.frames[0])).unwrap(), reference);

    // Dropping a force row breaks the frame/row count check.
    let text = fs::read_to_string(out.join(&s.forces)).unwrap();
    let trimmed: Vec<&str> = text.lines().collect();
    fs::write(out.join(&s.forces), trimmed[..trimmed.len() - 1].join("\n") + "\n").unwrap();
    assert!(matches!(DatasetManifest::load(&out), Err(Error::Manifest(_))));
}

#[test]
fn translation_scores_against_paired_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    cmd_generate(&small_generate(SensorDescriptor::new("a2", MarkerFamily::Array(2))), &t.join("a2"), None).unwrap();
    let d3 = SensorDescriptor::new("d3", MarkerFamily::Diamond(3));
    cmd_generate(&small_generate(d3.clone()), &t.join("d3"), None).unwrap();
    let cfg = TranslateConfig {
        dataset_id: "a2_d3".into(),
        source: t.join("a2"),
        target: d3.clone(),
        lambda: DEFAULT_LAMBDA,
        truth: Some(t.join("d3")),
        compensation: None,
        seed: 0,
    };
    let m = cmd_translate(&cfg, &t.join("tr")).unwrap();
    DatasetManifest::load(&t.join("tr")).unwrap();
    assert_eq!(m.sensor, d3);

    let mut r = csv::Reader::from_path(t.join("tr/translation_report.csv")).unwrap();
    let rows: Vec<TranslationRow> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), m.sequences[0].frames.len());
    for row in &rows {
        assert_eq!(row.status, "ok", "{row:?}");
        assert!(row.mean_err_px.unwrap() < 1.5, "{row:?}");
        assert!(row.iou.unwrap() > 0.8, "{row:?}");
    }
    // The no-contact frame is the target reference, bit for bit.
    let first = BinaryImage::read_pnm(&t.join("tr").join(&m.sequences[0].frames[0])).unwrap();
    assert_eq!(first, d3.reference_image().unwrap());

    // Labels pass through untouched without compensation.
    let src = read_forces(&t.join("a2").join(&m.sequences[0].forces)).unwrap();
    let dst = read_forces(&t.join("tr").join(&m.sequences[0].forces)).unwrap();
    assert_eq!(src, dst);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = DatasetManifest::load(&tmp.path().join("absent")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(!err.is_numerical());
    assert!(!Path::new(&tmp.path().join("absent")).exists());
}
