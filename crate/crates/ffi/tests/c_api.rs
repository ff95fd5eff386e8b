use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use splitvault::token_store::{self, Mode};
use splitvault_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sv_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn split_combine_and_bad_arguments() {
    let key = [0x5au8; 16];
    let (mut a, mut b, mut back) = ([0u8; 16], [0u8; 16], [0u8; 16]);
    unsafe {
        assert_eq!(
            sv_split(key.as_ptr(), 16, a.as_mut_ptr(), b.as_mut_ptr()),
            SvStatus::Ok
        );
        assert_eq!(
            sv_combine(a.as_ptr(), b.as_ptr(), 16, back.as_mut_ptr()),
            SvStatus::Ok
        );
        assert_eq!(back, key);
        assert_eq!(
            sv_split(ptr::null(), 16, a.as_mut_ptr(), b.as_mut_ptr()),
            SvStatus::InvalidArgument
        );
        assert!(last_error().contains("null"));
        assert_eq!(
            sv_split(key.as_ptr(), 0, a.as_mut_ptr(), b.as_mut_ptr()),
            SvStatus::InvalidArgument
        );
    }
}

#[test]
fn vault_round_trip_and_token_failures() {
    let dir = tempfile::tempdir().unwrap();
    let server =
        token_store::serve("127.0.0.1:0", Mode::Wristband, dir.path().join("token")).unwrap();
    let addr = CString::new(server.local_addr().to_string()).unwrap();
    let path = CString::new(dir.path().join("phone.svlt").to_str().unwrap()).unwrap();
    let id = CString::new("doc").unwrap();
    let pw = b"pw";
    let doc = b"payroll";
    unsafe {
        let mut token = ptr::null_mut();
        assert_eq!(
            sv_token_connect(addr.as_ptr(), ptr::null(), &mut token),
            SvStatus::Ok
        );
        let mut vault = ptr::null_mut();
        assert_eq!(
            sv_vault_create(path.as_ptr(), pw.as_ptr(), 2, 1000, &mut vault),
            SvStatus::Ok
        );
        assert_eq!(
            sv_vault_encrypt(vault, token, id.as_ptr(), doc.as_ptr(), doc.len()),
            SvStatus::Ok
        );

        let mut buf = ptr::null_mut();
        assert_eq!(
            sv_vault_read(vault, token, id.as_ptr(), &mut buf),
            SvStatus::Ok
        );
        let mut len = 0;
        let data = sv_buffer_data(buf, &mut len);
        assert_eq!(std::slice::from_raw_parts(data, len), doc);
        sv_buffer_destroy(buf);

        server.shutdown();
        let mut buf = ptr::null_mut();
        assert_eq!(
            sv_vault_read(vault, token, id.as_ptr(), &mut buf),
            SvStatus::TokenUnreachable
        );
        assert!(buf.is_null());
        sv_vault_free(vault);
        sv_token_free(token);

        let mut other = ptr::null_mut();
        assert_eq!(
            sv_token_connect(addr.as_ptr(), ptr::null(), &mut other),
            SvStatus::TokenUnreachable
        );
        assert!(other.is_null());
    }
}

#[test]
fn entropy_matches_core() {
    let mut e = SvEntropy::default();
    assert_eq!(
        unsafe { sv_entropy_estimate(50, 0, 4, &mut e) },
        SvStatus::Ok
    );
    assert!(e.combined_asymptotic_log2 >= 187.0);
    let core = splitvault::keygen_audit::entropy_estimate(50, 0, 4).unwrap();
    assert_eq!(e.combined_exact_log2, core.combined_exact_log2);
}

/// Directory holding this build's library artifacts.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = artifact_dir().join("libsplitvault_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let compiled = match Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
    {
        Ok(out) => out,
        Err(e) => {
            eprintln!("skipping: no C compiler ({cc}: {e})");
            return;
        }
    };
    assert!(
        compiled.status.success(),
        "{}",
        String::from_utf8_lossy(&compiled.stderr)
    );

    let server =
        token_store::serve("127.0.0.1:0", Mode::Wristband, dir.path().join("token")).unwrap();
    let out = Command::new(&exe)
        .arg(server.local_addr().to_string())
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
