//! Round-trip and precedence tests for the file formats, checkpoints, and
//! configuration layering.

use std::collections::BTreeMap;

use proptest::prelude::*;

use scenestreamer_core::map_codec::segment_polylines;
use scenestreamer_core::model::{Model, ModelConfig};
use scenestreamer_core::scenario::{synth_scenario, Template};
use scenestreamer_core::sequence::{build_sequence, BuildOptions, SequenceMode};
use scenestreamer_core::train::{TrainConfig, Trainer};

use scenestreamer::checkpoint::{load_checkpoint, save_checkpoint};
use scenestreamer::config::{parse_config_text, RunConfig};
use scenestreamer::error::AppError;
use scenestreamer::eval::{evaluate, Protocol};
use scenestreamer::format::{scenario_from_json_str, scenario_to_json};
use scenestreamer::plot::render_svg;
use scenestreamer::tokens::stream_summary;

fn template_of(i: u8) -> Template {
    match i % 3 {
        0 => Template::Straight,
        1 => Template::Curve,
        _ => Template::Intersection,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scenario_json_round_trip(tmpl in 0u8..3, agents in 1usize..4, seed in 0u64..1000) {
        let s = synth_scenario(template_of(tmpl), agents, seed).unwrap();
        let text = serde_json::to_string(&scenario_to_json(&s)).unwrap();
        let back = scenario_from_json_str(&text).unwrap();
        prop_assert_eq!(&s, &back);
        // and a second trip is byte-stable
        let text2 = serde_json::to_string(&scenario_to_json(&back)).unwrap();
        prop_assert_eq!(text, text2);
    }
}

#[test]
fn unknown_scenario_keys_are_ignored() {
    let s = synth_scenario(Template::Straight, 1, 5).unwrap();
    let mut v = scenario_to_json(&s);
    v["vendor_extension"] = serde_json::json!({"a": 1});
    v["agents"][0]["debug_note"] = serde_json::json!("x");
    let back = scenario_from_json_str(&serde_json::to_string(&v).unwrap()).unwrap();
    assert_eq!(s, back);
}

#[test]
fn malformed_scenario_reports_the_path() {
    let s = synth_scenario(Template::Straight, 1, 5).unwrap();
    let mut v = scenario_to_json(&s);
    v["agents"][0]["states"][2] = serde_json::json!([1.0, 2.0]);
    let err = scenario_from_json_str(&serde_json::to_string(&v).unwrap()).unwrap_err();
    assert!(err.contains("$.agents[0].states[2]"), "unhelpful error: {err}");
}

#[test]
fn checkpoint_resume_is_bit_compatible() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_scenario(Template::Intersection, 2, 9).unwrap();
    let (cx, cy) = s.map_bbox_centroid();
    let segs = segment_polylines(&s, cx, cy).unwrap();
    let seq = build_sequence(&s, &segs, SequenceMode::Full, &BuildOptions::default()).unwrap();
    let batch = [(&seq, segs.as_slice())];

    let cfg = ModelConfig::toy();
    let tcfg = TrainConfig { warmup_steps: 2, total_steps: 20, ..TrainConfig::default() };

    // straight run: 6 steps
    let mut a = Trainer::new(Model::new(cfg.clone(), 77).unwrap(), tcfg.clone()).unwrap();
    for _ in 0..6 {
        a.train_step(&batch).unwrap();
    }

    // interrupted run: 3 steps, save, load, 3 more
    let mut b = Trainer::new(Model::new(cfg, 77).unwrap(), tcfg).unwrap();
    for _ in 0..3 {
        b.train_step(&batch).unwrap();
    }
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&b, &path).unwrap();
    let mut b = load_checkpoint(&path).unwrap();
    for _ in 0..3 {
        b.train_step(&batch).unwrap();
    }

    assert_eq!(a.step, b.step);
    for (pa, pb) in a.model.params.iter().zip(&b.model.params) {
        for (x, y) in pa.data.iter().zip(&pb.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "resume drifted");
        }
    }
}

#[test]
fn checkpoint_rejects_wrong_magic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"NOPE rest of file").unwrap();
    match load_checkpoint(&path) {
        Err(AppError::Validation(_)) => {}
        Err(e) => panic!("expected a validation error, got {e:?}"),
        Ok(_) => panic!("bad magic was accepted"),
    }
}

#[test]
fn config_precedence_flags_over_file_over_defaults() {
    let mut cfg = RunConfig::default();
    let defaults = cfg.clone();

    let file = parse_config_text("# comment\nd_model = 32\nbase_lr = 0.01\n").unwrap();
    cfg.apply(&file).unwrap();
    let mut flags = BTreeMap::new();
    flags.insert("base_lr".to_string(), "0.02".to_string());
    flags.insert("range_vx".to_string(), "0,25".to_string());
    cfg.apply(&flags).unwrap();

    assert_eq!(cfg.model.d_model, 32);
    assert_eq!(cfg.train.base_lr, 0.02);
    assert_eq!(cfg.ranges.fields[6], (0.0, 25.0));
    assert_eq!(cfg.model.n_heads, defaults.model.n_heads);

    let mut bad = BTreeMap::new();
    bad.insert("no_such_key".to_string(), "1".to_string());
    assert!(cfg.apply(&bad).is_err(), "unknown keys must be rejected");
}

#[test]
fn eval_of_gt_against_itself_is_zero() {
    let gt: Vec<_> = (0..3)
        .map(|i| synth_scenario(Template::Straight, 2, 60 + i).unwrap())
        .collect();
    let preds: BTreeMap<String, _> =
        gt.iter().map(|s| (s.scenario_id.clone(), s.clone())).collect();
    let report = evaluate(&[preds], &gt, Protocol::Relaxed).unwrap();
    for key in ["ade_avg", "ade_min", "fde_avg", "fde_min", "add", "fdd"] {
        assert_eq!(report[key].as_f64().unwrap(), 0.0, "{key} nonzero for gt vs gt");
    }
    for key in ["mmd_position", "mmd_heading", "mmd_size", "mmd_velocity"] {
        assert!(report[key].as_f64().unwrap() <= 1e-12, "{key} nonzero for gt vs gt");
    }
}

#[test]
fn token_summary_counts_add_up() {
    let s = synth_scenario(Template::Intersection, 2, 3).unwrap();
    let (cx, cy) = s.map_bbox_centroid();
    let segs = segment_polylines(&s, cx, cy).unwrap();
    let seq = build_sequence(&s, &segs, SequenceMode::Full, &BuildOptions::default()).unwrap();
    let v = stream_summary(&seq);
    let total = v["num_tokens"].as_u64().unwrap();
    let by_group: u64 = v["by_group"]
        .as_object()
        .unwrap()
        .values()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(total, seq.len() as u64);
    assert_eq!(total, by_group);
}

#[test]
fn svg_render_is_well_formed_enough() {
    let s = synth_scenario(Template::Curve, 2, 8).unwrap();
    let svg = render_svg(&s);
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count() >= s.polylines.len(), true);
}
