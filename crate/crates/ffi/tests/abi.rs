use std::ffi::{CStr, CString};
use std::ptr;

use hadkit_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut libc::c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    hadkit_string_free(p);
    s
}

unsafe fn last_error() -> String {
    CStr::from_ptr(hadkit_last_error()).to_str().unwrap().to_string()
}

#[test]
fn prompt_and_parse_round_trip() {
    unsafe {
        let tax = hadkit_taxonomy_builtin();
        let mut prompt = ptr::null_mut();
        let st = hadkit_build_detection_prompt(tax, HadkitMode::FineGrained, c("Q?").as_ptr(), c("A.").as_ptr(), &mut prompt);
        assert_eq!(st, HadkitStatus::Ok);
        let prompt = take(prompt);
        assert!(prompt.ends_with("### Your Detection ###"));
        assert!(prompt.contains("A."));

        let raw = "**Hallucination Type:**\nFactual Recall Error\n**Hallucination Span:**\nParis\n**Correction:**\nLyon";
        let mut d = ptr::null_mut();
        assert_eq!(hadkit_detection_parse(tax, HadkitMode::FineGrained, c(raw).as_ptr(), &mut d), HadkitStatus::Ok);
        assert_eq!(hadkit_detection_kind(d), HadkitLabelKind::Type);
        assert_eq!(CStr::from_ptr(hadkit_detection_label(d)).to_str().unwrap(), "Factual Recall Error");
        assert_eq!(CStr::from_ptr(hadkit_detection_span(d)).to_str().unwrap(), "Paris");
        assert_eq!(CStr::from_ptr(hadkit_detection_correction(d)).to_str().unwrap(), "Lyon");
        hadkit_detection_free(d);

        let mut d = ptr::null_mut();
        assert_eq!(hadkit_detection_parse(tax, HadkitMode::Binary, c("no idea").as_ptr(), &mut d), HadkitStatus::Ok);
        assert_eq!(hadkit_detection_kind(d), HadkitLabelKind::Invalid);
        hadkit_detection_free(d);
        hadkit_taxonomy_free(tax);
    }
}

#[test]
fn labels_and_errors() {
    unsafe {
        let tax = hadkit_taxonomy_builtin();
        let mut kind = HadkitLabelKind::Invalid;
        let mut name = ptr::null_mut();
        assert_eq!(hadkit_parse_label(tax, c(" no hallucination ").as_ptr(), &mut kind, &mut name), HadkitStatus::Ok);
        assert_eq!(kind, HadkitLabelKind::NoHallucination);
        assert_eq!(take(name), "No Hallucination");

        assert_eq!(hadkit_parse_label(tax, c("Made Up Errors").as_ptr(), &mut kind, &mut name), HadkitStatus::UnknownType);
        assert!(name.is_null());
        assert!(last_error().contains("Made Up Errors"));

        assert_eq!(hadkit_parse_label(tax, ptr::null(), &mut kind, &mut name), HadkitStatus::NullPointer);
        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(hadkit_parse_label(tax, bad.as_ptr().cast(), &mut kind, &mut name), HadkitStatus::InvalidUtf8);

        let mut t = ptr::null_mut();
        assert_eq!(hadkit_taxonomy_from_toml(c("not = [toml").as_ptr(), &mut t), HadkitStatus::Schema);
        assert!(t.is_null());
        hadkit_taxonomy_free(tax);
        hadkit_taxonomy_free(ptr::null_mut());
        hadkit_string_free(ptr::null_mut());
    }
}

#[test]
fn word_prf_matches_hand_case() {
    let mut out = HadkitPrf { precision: 0.0, recall: 0.0, f1: 0.0 };
    let st = unsafe { hadkit_word_prf(c("the red fox").as_ptr(), c("red").as_ptr(), &mut out) };
    assert_eq!(st, HadkitStatus::Ok);
    assert!((out.precision - 1.0).abs() < 1e-12);
    assert!((out.recall - 1.0 / 3.0).abs() < 1e-12);
    assert!((out.f1 - 0.5).abs() < 1e-12);
}

#[test]
fn evaluate_jsonl_reports_and_rejects_misalignment() {
    let gold = r#"{"id":"a","source_id":"s","task_kind":"short_form_qa","task_input":"q","output":"Paris is big","label":"Factual Recall Error","span":"Paris","correction":"Lyon","provenance":null,"status":"annotated_pass"}"#;
    let pred = r#"{"record_id":"a","predicted":"Factual Recall Error","span":"Paris","correction":"Lyon","raw":""}"#;
    unsafe {
        let mut out = ptr::null_mut();
        let st = hadkit_evaluate_jsonl(c(gold).as_ptr(), c(pred).as_ptr(), &mut out);
        assert_eq!(st, HadkitStatus::Ok, "{}", last_error());
        let report: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(report["n_items"], 1);

        let other = pred.replace("\"a\"", "\"b\"");
        assert_eq!(hadkit_evaluate_jsonl(c(gold).as_ptr(), c(&other).as_ptr(), &mut out), HadkitStatus::Alignment);
        assert_eq!(hadkit_evaluate_jsonl(c("{").as_ptr(), c(pred).as_ptr(), &mut out), HadkitStatus::Parse);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/hadkit.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}
