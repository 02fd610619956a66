use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use deepcare::data::{generate_cohort, write_jsonl, GeneratorConfig};
use deepcare::network::{next_diagnosis_distributions, predict_risk, CellKind, ModelConfig};
use deepcare::training::{init_model, save_checkpoint, Checkpoint};
use deepcare_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    model: PathBuf,
    data: PathBuf,
    checkpoint: Checkpoint,
    records: Vec<deepcare::data::PatientRecord>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generate_cohort(&GeneratorConfig { n_patients: 12, seed: 5, ..GeneratorConfig::default() }).unwrap();
    let vocab = cohort.vocabulary.clone();
    let config = ModelConfig {
        embed_dim: 4,
        hidden_dim: 6,
        init_scale: 0.3,
        ..ModelConfig::new(CellKind::DeepCare, vocab.n_diagnoses(), vocab.n_interventions())
    };
    let checkpoint = Checkpoint::new(init_model(config, 9).unwrap(), vocab);
    let model = dir.path().join("m.ckpt");
    let data = dir.path().join("d.jsonl");
    save_checkpoint(&checkpoint, &model).unwrap();
    write_jsonl(std::fs::File::create(&data).unwrap(), &cohort.records, &checkpoint.vocabulary).unwrap();
    Fixture { _dir: dir, model, data, checkpoint, records: cohort.records }
}

fn c(path: &Path) -> CString {
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn scores_match_the_library() {
    let f = fixture();
    let mut model: *mut DcModel = ptr::null_mut();
    let mut records: *mut DcRecords = ptr::null_mut();
    unsafe {
        assert_eq!(dc_model_load(c(&f.model).as_ptr(), &mut model), DcStatus::Ok);
        assert_eq!(dc_records_load(model, c(&f.data).as_ptr(), &mut records), DcStatus::Ok);
        let n = dc_records_len(records);
        assert_eq!(n, f.records.len());

        let mut risk = vec![0.0; n];
        assert_eq!(dc_predict_risk(model, records, risk.as_mut_ptr(), n), DcStatus::Ok);
        for (p, r) in risk.iter().zip(&f.records) {
            assert_eq!(p.to_bits(), predict_risk(&f.checkpoint.model, r).unwrap().to_bits());
        }
        assert_eq!(dc_predict_risk(model, records, risk.as_mut_ptr(), n - 1), DcStatus::OutOfRange);

        let mut top = [0usize; 3];
        assert_eq!(dc_next_diagnoses(model, records, 2, top.as_mut_ptr(), 3), DcStatus::Ok);
        let last = next_diagnosis_distributions(&f.checkpoint.model, &f.records[2]).unwrap().pop().unwrap();
        assert_eq!(top.to_vec(), deepcare::baselines::rank_codes(last.as_slice())[..3].to_vec());
        assert_eq!(dc_next_diagnoses(model, records, n, top.as_mut_ptr(), 3), DcStatus::OutOfRange);

        let mut needed = 0usize;
        let mut buf = [0 as std::ffi::c_char; 2];
        assert_eq!(dc_model_diagnosis_code(model, top[0], buf.as_mut_ptr(), 2, &mut needed), DcStatus::OutOfRange);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(dc_model_diagnosis_code(model, top[0], buf.as_mut_ptr(), needed, ptr::null_mut()), DcStatus::Ok);
        let code = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert_eq!(code, f.checkpoint.vocabulary.diagnosis_codes[top[0]]);

        dc_records_free(records);
        dc_model_free(model);
    }
}

#[test]
fn corrupt_checkpoint_is_rejected_with_a_message() {
    let f = fixture();
    let mut bytes = std::fs::read(&f.model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&f.model, bytes).unwrap();
    let mut model: *mut DcModel = ptr::null_mut();
    unsafe {
        assert_eq!(dc_model_load(c(&f.model).as_ptr(), &mut model), DcStatus::Checkpoint);
        assert!(model.is_null());
        let msg = CStr::from_ptr(dc_last_error()).to_str().unwrap();
        assert!(msg.contains("m.ckpt"), "{msg}");
    }
}

#[test]
fn gradcheck_reports_its_worst_error() {
    let mut worst = f64::NAN;
    let status = unsafe { dc_gradcheck(deepcare::gradients::GRADCHECK_SEED, 1e-5, 0.0, &mut worst) };
    assert_eq!(status, DcStatus::GradcheckFailed);
    assert!(worst > 0.0 && worst < 1e-4, "{worst}");
}

/// Compiles a C program against the generated header and the static
/// library, then runs it on the fixture. Skipped when no C compiler exists.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // The copy next to the test binary is rebuilt with it; the one a level
    // up is only refreshed by `cargo build`.
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    let lib = [deps, deps.parent().unwrap()].map(|d| d.join("libdeepcare_ffi.a")).into_iter().find(|p| p.exists());
    let lib = lib.expect("static library next to the test binary");

    let f = fixture();
    let src = f._dir.path().join("main.c");
    let bin = f._dir.path().join("main");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "deepcare.h"

int main(int argc, char **argv) {
    DcModel *model = NULL;
    DcRecords *records = NULL;
    if (dc_model_load(argv[1], &model) != DC_STATUS_OK) { fprintf(stderr, "%s\n", dc_last_error()); return 1; }
    if (dc_records_load(model, argv[2], &records) != DC_STATUS_OK) { fprintf(stderr, "%s\n", dc_last_error()); return 1; }
    size_t n = dc_records_len(records);
    double risk[64];
    if (n > 64 || dc_predict_risk(model, records, risk, n) != DC_STATUS_OK) return 1;
    for (size_t i = 0; i < n; i++) printf("%.17g\n", risk[i]);
    if (dc_model_load("/nonexistent", &model) != DC_STATUS_IO) return 2;
    dc_records_free(records);
    dc_model_free(model);
    return 0;
}
"#,
    )
    .unwrap();
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).arg(&f.model).arg(&f.data).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: Vec<f64> = String::from_utf8(out.stdout).unwrap().lines().map(|l| l.parse().unwrap()).collect();
    let expected: Vec<f64> = f.records.iter().map(|r| predict_risk(&f.checkpoint.model, r).unwrap()).collect();
    assert_eq!(printed, expected);
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/deepcare.h")).unwrap();
    for name in [
        "dc_last_error",
        "dc_version",
        "dc_model_load",
        "dc_model_free",
        "dc_model_n_diagnoses",
        "dc_model_diagnosis_code",
        "dc_records_load",
        "dc_records_free",
        "dc_records_len",
        "dc_predict_risk",
        "dc_next_diagnoses",
        "dc_gradcheck",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}
