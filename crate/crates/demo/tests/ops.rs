use ovformer_demo::ops::{assign_levels, run_nms, score_ap};
use serde_json::Value;

#[test]
fn nms_keeps_the_best_of_an_overlapping_pair() {
    let dets = r#"[{"start":1,"end":10,"class_id":0,"score":0.9},
                   {"start":2,"end":10,"class_id":0,"score":0.8},
                   {"start":2,"end":10,"class_id":1,"score":0.7}]"#;
    let v: Value = serde_json::from_str(&run_nms(dets, 0.5, true).unwrap()).unwrap();
    assert_eq!(v["suppressed"], 1);
    assert_eq!(v["kept"][1]["class_id"], 1);
    let v: Value = serde_json::from_str(&run_nms(dets, 0.5, false).unwrap()).unwrap();
    assert_eq!(v["suppressed"], 2);
    assert!(run_nms("[{]", 0.5, true).is_err());
    assert!(run_nms(r#"[{"start":3,"end":3,"class_id":0,"score":1}]"#, 0.5, true).is_err());
}

#[test]
fn assignment_offsets_reconstruct_the_segment() {
    let out = assign_levels(r#"[{"start":10,"end":20,"class_id":2}]"#, 32, 3, 0.5).unwrap();
    let levels: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(levels.as_array().unwrap().len(), 3);
    let mut seen = 0;
    for lvl in levels.as_array().unwrap() {
        let stride = lvl["stride"].as_f64().unwrap();
        for p in lvl["positives"].as_array().unwrap() {
            let pos = p["position"].as_f64().unwrap();
            let ds = p["offsets"][0].as_f64().unwrap();
            let de = p["offsets"][1].as_f64().unwrap();
            assert_eq!(pos - ds * stride, 10.0);
            assert_eq!(pos + de * stride, 20.0);
            assert_eq!(p["classes"][0], 2);
            seen += 1;
        }
    }
    assert!(seen > 0);
    assert!(assign_levels("[]", 0, 3, 0.5).is_err());
}

#[test]
fn ap_of_a_perfect_ranking_is_one() {
    let gt = r#"[{"start":0,"end":10},{"start":20,"end":30}]"#;
    let dets = r#"[{"start":0,"end":10,"score":0.9},{"start":40,"end":50,"score":0.8},{"start":20,"end":30,"score":0.1}]"#;
    let v: Value = serde_json::from_str(&score_ap(dets, gt, 0.5).unwrap()).unwrap();
    assert!((v["ap"].as_f64().unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(v["tp"], serde_json::json!([true, false, true]));
    let v: Value = serde_json::from_str(&score_ap("[]", "[]", 0.5).unwrap()).unwrap();
    assert!(v["ap"].is_null());
    assert!(score_ap("[]", "[]", 0.0).is_err());
}
