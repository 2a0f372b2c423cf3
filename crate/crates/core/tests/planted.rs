mod common;

use tam_core::dump::load_dump;
use tam_core::fuse::{explain_all, ExplainConfig, PipelineStage};
use tam_core::metrics::{evaluate_dump, otsu_threshold, placebo_test, EntryKind, EvalOptions, EvalReport};
use tam_core::synth::{self, planted};
use tam_core::FeatureDump;

fn fixture(name: &str) -> FeatureDump {
    load_dump(common::fixture_root().join(name)).unwrap()
}

fn eval(d: &FeatureDump, stage: PipelineStage) -> EvalReport {
    evaluate_dump("planted", d, &ExplainConfig::default().with_stage(stage), &EvalOptions::default()).unwrap()
}

fn token_iou(r: &EvalReport, answer_index: usize) -> f64 {
    r.per_token
        .iter()
        .find(|e| e.answer_index == answer_index && e.kind != EntryKind::Skipped)
        .and_then(|e| e.iou)
        .unwrap()
}

#[test]
fn checked_in_planted_fixture_is_the_builder_output() {
    assert_eq!(fixture("planted"), synth::planted_interference());
}

#[test]
fn causal_step_recovers_the_dog() {
    let d = fixture("planted");
    let cam = token_iou(&eval(&d, PipelineStage::CamOnly), planted::DOG);
    let full = token_iou(&eval(&d, PipelineStage::Full), planted::DOG);
    assert!(full - cam >= 0.20, "cam {cam} full {full}");
}

#[test]
fn function_word_improves_under_causal_step() {
    let d = fixture("planted");
    let cam = token_iou(&eval(&d, PipelineStage::CamOnly), planted::AND);
    let eci = token_iou(&eval(&d, PipelineStage::EciOnly), planted::AND);
    assert!(eci > cam, "cam {cam} eci {eci}");
}

#[test]
fn stage_ablation_is_ordered() {
    let d = fixture("planted");
    let f1 = |s| eval(&d, s).f1_iou;
    let (cam, eci, filt, full) = (
        f1(PipelineStage::CamOnly),
        f1(PipelineStage::EciOnly),
        f1(PipelineStage::FilterOnly),
        f1(PipelineStage::Full),
    );
    assert!(cam <= eci && cam <= filt, "{cam} {eci} {filt}");
    assert!(eci <= full && filt <= full, "{eci} {filt} {full}");
    assert!(full > cam);
}

#[test]
fn placebo_targets_score_far_lower() {
    let d = fixture("planted");
    for seed in 0..20 {
        let p = placebo_test(&d, &ExplainConfig::default(), &EvalOptions::default(), seed).unwrap();
        assert!(p.real_obj_iou > 0.0);
        assert_eq!(p.substitutes.len(), d.n_answer());
        for (i, &k) in p.substitutes.iter().enumerate() {
            assert!(k < d.n_prompt() + i);
        }
        match p.ratio {
            Some(r) => assert!(r >= 2.0, "seed {seed}: ratio {r}"),
            None => assert_eq!(p.placebo_obj_iou, 0.0),
        }
    }
}

#[test]
fn placebo_is_seed_deterministic() {
    let d = fixture("planted");
    let cfg = ExplainConfig::default();
    let a = placebo_test(&d, &cfg, &EvalOptions::default(), 9).unwrap();
    let b = placebo_test(&d, &cfg, &EvalOptions::default(), 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn feature_scale_changes_nothing_on_fixtures() {
    for (name, _) in synth::corpus() {
        let d = fixture(name);
        let mut scaled = d.clone();
        scaled.scale_features(7.3);
        for stage in [PipelineStage::CamOnly, PipelineStage::EciOnly, PipelineStage::FilterOnly, PipelineStage::Full] {
            let cfg = ExplainConfig::default().with_stage(stage);
            let a = explain_all(&d, &cfg).unwrap();
            let b = explain_all(&scaled, &cfg).unwrap();
            for (x, y) in a.iter().zip(&b) {
                for (p, q) in x.visual.iter().zip(&y.visual).chain(x.textual.iter().zip(&y.textual)) {
                    assert!((p - q).abs() <= 1e-6, "{name} {stage:?}");
                }
                let fa = otsu_threshold(&x.visual).unwrap().binarize(&x.visual);
                let fb = otsu_threshold(&y.visual).unwrap().binarize(&y.visual);
                assert_eq!(fa, fb, "{name} {stage:?} token {}", x.token_index);
            }
            let ra = evaluate_dump(name, &d, &cfg, &EvalOptions::default()).unwrap();
            let rb = evaluate_dump(name, &scaled, &cfg, &EvalOptions::default()).unwrap();
            for (ea, eb) in ra.per_token.iter().zip(&rb.per_token) {
                assert_eq!(ea.iou, eb.iou, "{name} {stage:?} {}", ea.text);
            }
        }
    }
}

#[test]
fn first_token_substitution_touches_only_the_first_token() {
    let d = fixture("planted");
    let cfg = ExplainConfig::default();
    let on = evaluate_dump("p", &d, &cfg, &EvalOptions { first_token_substitution: true }).unwrap();
    let off = evaluate_dump("p", &d, &cfg, &EvalOptions { first_token_substitution: false }).unwrap();
    assert_eq!(on.per_token.len(), off.per_token.len());
    for (a, b) in on.per_token.iter().zip(&off.per_token) {
        if a.answer_index == 0 {
            assert_ne!(a.iou, b.iou);
        } else {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn conversations_without_masks_are_reported_not_fatal() {
    let mut d = fixture("planted");
    d.masks.clear();
    let r = evaluate_dump("bare", &d, &ExplainConfig::default(), &EvalOptions::default()).unwrap();
    assert_eq!(r.o, 0);
    assert!(!r.issues.is_empty());
}
