mod common;

use std::fs;

use common::{error_line, Cli, TokenProcess};
use splitvault::cli::exit;

#[test]
fn encrypt_read_remove_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let token = TokenProcess::start("wristband", &dir.path().join("token"));
    let cli = Cli::new(dir.path(), &token.addr, None);
    cli.ok(&["vault", "init"]);

    let input = dir.path().join("f.txt");
    fs::write(&input, b"quarterly numbers\n").unwrap();
    let out = cli.ok(&[
        "vault",
        "encrypt",
        "--id",
        "a",
        "--in",
        input.to_str().unwrap(),
    ]);
    assert!(out.starts_with("encrypted id=a bytes=18"));
    assert_eq!(
        cli.ok(&["vault", "read", "--id", "a"]),
        "quarterly numbers\n"
    );
    assert!(cli
        .ok(&["vault", "list"])
        .starts_with("document id=a bytes=18"));

    let dup = cli.run(&[
        "vault",
        "encrypt",
        "--id",
        "a",
        "--in",
        input.to_str().unwrap(),
    ]);
    assert_eq!(dup.status.code(), Some(exit::CONFLICT));

    cli.ok(&["vault", "rm", "--id", "a"]);
    let gone = cli.run(&["vault", "read", "--id", "a"]);
    assert_eq!(gone.status.code(), Some(exit::NOT_FOUND));
    assert!(error_line(&gone).starts_with("error code=not_found exit=7"));
}

#[test]
fn read_with_token_stopped_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut token = TokenProcess::start("wristband", &dir.path().join("token"));
    let cli = Cli::new(dir.path(), &token.addr, None);
    cli.ok(&["vault", "init"]);
    let input = dir.path().join("f");
    fs::write(&input, b"secret").unwrap();
    cli.ok(&[
        "vault",
        "encrypt",
        "--id",
        "x",
        "--in",
        input.to_str().unwrap(),
    ]);
    token.stop();

    let out = cli.run(&["vault", "read", "--id", "x"]);
    assert_eq!(out.status.code(), Some(exit::TOKEN_UNREACHABLE));
    assert!(out.stdout.is_empty());
    assert!(error_line(&out).starts_with("error code=token_unreachable"));

    // The token's data survives a restart.
    let token = TokenProcess::start("wristband", &dir.path().join("token"));
    let cli = Cli::new(dir.path(), &token.addr, None);
    assert_eq!(cli.ok(&["vault", "read", "--id", "x"]), "secret");
}

#[test]
fn wrong_password_and_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let token = TokenProcess::start("wristband", &dir.path().join("token"));
    let cli = Cli::new(dir.path(), &token.addr, None);
    cli.ok(&["vault", "init"]);
    let again = cli.run(&["vault", "init"]);
    assert_eq!(again.status.code(), Some(exit::CONFLICT));

    let out = std::process::Command::new(common::bin())
        .args(["--json", "vault", "list"])
        .env("SPLITVAULT_CONFIG", &cli.config)
        .env("SPLITVAULT_PASSWORD", "nope")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::AUTH));
    let v: serde_json::Value = serde_json::from_str(&error_line(&out)).unwrap();
    assert_eq!(v["error"]["code"], "auth");
}

#[test]
fn missing_password_without_terminal() {
    let dir = tempfile::tempdir().unwrap();
    let cli = Cli::new(dir.path(), "127.0.0.1:1", None);
    let out = std::process::Command::new(common::bin())
        .args(["vault", "init"])
        .env("SPLITVAULT_CONFIG", &cli.config)
        .env_remove("SPLITVAULT_PASSWORD")
        .stdin(std::process::Stdio::null())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit::AUTH));
    assert!(!dir.path().join("phone.svlt").exists());
}

#[test]
fn enterprise_revocation_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let token_dir = dir.path().join("token");
    let token = TokenProcess::start("enterprise", &token_dir);
    let cli = Cli::new(dir.path(), &token.addr, Some("phone-7"));
    cli.ok(&["vault", "init"]);
    let input = dir.path().join("f");
    fs::write(&input, b"board minutes").unwrap();
    cli.ok(&[
        "vault",
        "encrypt",
        "--id",
        "m",
        "--in",
        input.to_str().unwrap(),
    ]);

    cli.ok(&["token", "revoke", "--device", "phone-7"]);
    let out = cli.run(&["vault", "read", "--id", "m"]);
    assert_eq!(out.status.code(), Some(exit::TOKEN_DENIED));
    assert!(out.stdout.is_empty());

    cli.ok(&["token", "enroll", "--device", "phone-7"]);
    assert_eq!(cli.ok(&["vault", "read", "--id", "m"]), "board minutes");

    // Another device sees its own, empty key space.
    let other = cli.run(&["vault", "read", "--id", "m", "--device", "phone-8"]);
    assert_eq!(other.status.code(), Some(exit::NOT_FOUND));
}

#[test]
fn keysets_provision_install_status() {
    let dir = tempfile::tempdir().unwrap();
    let token = TokenProcess::start("wristband", &dir.path().join("token"));
    let cli = Cli::new(dir.path(), &token.addr, None);
    let ks = dir.path().join("ks");
    let out = cli.ok(&[
        "keysets",
        "provision",
        "--employees",
        "4",
        "--sets",
        "3",
        "--out",
        ks.to_str().unwrap(),
    ]);
    assert!(out.contains("entries=18"));
    let out = cli.ok(&[
        "keysets",
        "install",
        "--token-file",
        ks.join("token-2.svks").to_str().unwrap(),
    ]);
    assert!(out.starts_with("installed owner=2 parts=9"));
    let status = cli.ok(&[
        "keysets",
        "status",
        "--keyring",
        ks.join("phone-2.svks").to_str().unwrap(),
    ]);
    let lines: Vec<_> = status.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "peer owner=2 peer=0 fresh=3 in_use=0 consumed=0");
    assert_eq!(lines[3], "pending token_deletes=0");

    let bad = cli.run(&[
        "keysets",
        "provision",
        "--employees",
        "1",
        "--sets",
        "3",
        "--out",
        "x",
    ]);
    assert_eq!(bad.status.code(), Some(exit::INVALID_INPUT));
}

#[test]
fn keysets_call_sim() {
    let dir = tempfile::tempdir().unwrap();
    let cli = Cli::new(dir.path(), "127.0.0.1:1", None);
    for simple in [false, true] {
        let mut args = vec![
            "--json", "keysets", "call-sim", "--sets", "3", "--bytes", "4096",
        ];
        if simple {
            args.push("--simple");
        }
        let out = cli.ok(&args);
        let rows: Vec<serde_json::Value> = out
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(rows.len(), 6);
        for call in &rows[1..4] {
            assert_eq!(call["keys_agree"], true);
            assert_eq!(call["stream_ok"], true);
            assert_eq!(call["reopen_refused"], true);
        }
        assert_eq!(rows[4]["result"], "exhausted");
        assert_eq!(rows[5]["fresh_left"], 0);
    }
}

#[test]
fn keygen_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cli = Cli::new(dir.path(), "127.0.0.1:1", None);
    let out = cli.ok(&["--json", "keygen", "entropy", "--n", "25", "--passes", "4"]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(v["combined_asymptotic_log2"].as_f64().unwrap() >= 187.0);

    let transcript = dir.path().join("cards.txt");
    let pass = |n: usize, off: usize| -> String {
        (0..n)
            .map(|i| if (i + off) % 2 == 0 { 'r' } else { 'b' })
            .collect()
    };
    fs::write(
        &transcript,
        format!(
            "{}\n{}\n{}\n{}\n",
            pass(51, 0),
            pass(51, 1),
            pass(51, 0),
            pass(50, 1)
        ),
    )
    .unwrap();
    let key = dir.path().join("key.bin");
    let t = transcript.to_str().unwrap();
    let k = key.to_str().unwrap();
    let out = cli.ok(&["keygen", "cards", "--transcript", t, "--out", k]);
    assert_eq!(
        out.trim(),
        format!("key bits=203 bytes=26 pad_bits=5 out={k}")
    );
    assert_eq!(fs::read(&key).unwrap().len(), 26);
    let short = cli.run(&[
        "keygen",
        "cards",
        "--transcript",
        t,
        "--bits",
        "256",
        "--out",
        k,
    ]);
    assert_eq!(short.status.code(), Some(exit::INVALID_INPUT));
    assert!(error_line(&short).contains("insufficient entropy"));
    cli.ok(&["keygen", "cards", "--csprng", "--bits", "256", "--out", k]);
    assert_eq!(fs::read(&key).unwrap().len(), 32);

    let out = cli.ok(&[
        "keygen",
        "audit",
        "--generator",
        "shrunken",
        "--space-bits",
        "8",
        "--claimed",
        "16",
        "--samples",
        "512",
    ]);
    assert!(out.contains("verdict=FRAUD_SUSPECTED"), "{out}");
    let out = cli.ok(&["keygen", "audit", "--claimed", "256", "--samples", "1024"]);
    assert!(out.contains("verdict=CONSISTENT"), "{out}");
}
