use std::path::Path;
use std::process::Command;

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/arithrl.h")).unwrap();
    for sym in ["arl_model_load", "arl_model_free", "arl_model_evaluate", "arl_last_error", "ARL_STATUS_BUFFER_TOO_SMALL"] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"arithrl.h\"\nint main(void) { ArlModel *m = 0; arl_model_free(m); return (int)ARL_STATUS_OK; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let Ok(out) = Command::new(&cc)
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", dir.join("include").display()))
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler ({cc}); syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
