use std::path::PathBuf;
use std::process::Command;

const SMOKE: &str = r#"
#include <stdio.h>
#include "xpert.h"

int main(void) {
    XpertHardConcrete d = xpert_hard_concrete_default();
    double p = -1.0;
    if (xpert_hard_concrete_active_probability(d, 0.0, &p) != XPERT_STATUS_OK) return 1;
    if (p <= 0.0 || p >= 1.0) return 2;
    XpertModel *m = NULL;
    if (xpert_model_load(NULL, &m) != XPERT_STATUS_NULL_POINTER) return 3;
    if (xpert_last_error() == NULL) return 4;
    printf("%s\n", xpert_version());
    return 0;
}
"#;

fn static_lib() -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    let lib = deps.parent()?.join("libxpert_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn header_compiles_and_links_from_c() {
    let Some(lib) = static_lib() else {
        eprintln!("static library not built, skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, SMOKE).unwrap();
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
