//! Compiles and runs a small C program against the generated header and the
//! static library, when a C compiler is available.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "hadkit.h"

int main(void) {
    HadkitTaxonomy *tax = hadkit_taxonomy_builtin();
    HadkitDetection *d = NULL;
    const char *raw = "**Hallucination Type:**\nNo Hallucination\n**Hallucination Span:**\n\n**Correction:**\n";
    if (hadkit_detection_parse(tax, HADKIT_MODE_FINE_GRAINED, raw, &d) != HADKIT_STATUS_OK) return 1;
    if (hadkit_detection_kind(d) != HADKIT_LABEL_KIND_NO_HALLUCINATION) return 2;
    hadkit_detection_free(d);
    HadkitPrf prf;
    if (hadkit_word_prf("a b", "a", &prf) != HADKIT_STATUS_OK) return 3;
    if (prf.precision != 1.0 || prf.recall != 0.5) return 4;
    char *name = NULL;
    HadkitLabelKind kind;
    if (hadkit_parse_label(tax, "nonsense", &kind, &name) != HADKIT_STATUS_UNKNOWN_TYPE) return 5;
    if (hadkit_last_error() == NULL) return 6;
    hadkit_taxonomy_free(tax);
    puts("ok");
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests/<exe> lives in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let Ok(cc) = std::env::var("CC").or_else(|_| which("cc")) else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let lib = target_dir().join("libhadkit_ffi.a");
    if !lib.exists() {
        eprintln!("static library not built at {}; skipping", lib.display());
        return;
    }
    let dir = tempfile_dir();
    let src = dir.join("main.c");
    let bin = dir.join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-I", include])
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

fn which(name: &str) -> Result<String, std::env::VarError> {
    let path = std::env::var("PATH")?;
    path.split(':')
        .map(|d| PathBuf::from(d).join(name))
        .find(|p| p.is_file())
        .map(|p| p.to_string_lossy().into_owned())
        .ok_or(std::env::VarError::NotPresent)
}

fn tempfile_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hadkit-ffi-c-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
