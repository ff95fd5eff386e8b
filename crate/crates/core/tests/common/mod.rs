//! Helpers shared by the integration tests: a token service running as a
//! separate process and a CLI runner bound to a scratch config.

#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub const PASSWORD: &str = "correct horse battery staple";

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_splitvault")
}

/// `splitvault token serve` in a child process, killed on drop.
pub struct TokenProcess {
    child: Child,
    pub addr: String,
    pub dir: PathBuf,
}

impl TokenProcess {
    pub fn start(mode: &str, dir: &Path) -> Self {
        let mut child = Command::new(bin())
            .args([
                "token",
                "serve",
                "--bind",
                "127.0.0.1:0",
                "--mode",
                mode,
                "--dir",
            ])
            .arg(dir)
            .env_remove("SPLITVAULT_CONFIG")
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .expect("spawn token service");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .expect("read listening line");
        let addr = line
            .split_whitespace()
            .find_map(|f| f.strip_prefix("addr="))
            .unwrap_or_else(|| panic!("no address in {line:?}"))
            .to_string();
        Self {
            child,
            addr,
            dir: dir.to_path_buf(),
        }
    }

    pub fn stop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for TokenProcess {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Runs the CLI binary with a scratch config file.
pub struct Cli {
    pub config: PathBuf,
}

impl Cli {
    /// Writes a config with cheap KDF settings pointing at `token_addr`.
    pub fn new(dir: &Path, token_addr: &str, device: Option<&str>) -> Self {
        let config = dir.join("splitvault.toml");
        let device = device
            .map(|d| format!("device = \"{d}\"\n"))
            .unwrap_or_default();
        std::fs::write(
            &config,
            format!(
                "[kdf]\niterations = 1000\n\n[token]\naddress = \"{token_addr}\"\n{device}\n[paths]\nvault = \"{}\"\ntoken_dir = \"{}\"\n",
                dir.join("phone.svlt").display(),
                dir.join("token").display(),
            ),
        )
        .unwrap();
        Self { config }
    }

    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(bin())
            .args(args)
            .env("SPLITVAULT_CONFIG", &self.config)
            .env("SPLITVAULT_PASSWORD", PASSWORD)
            .stdin(Stdio::null())
            .output()
            .expect("run splitvault")
    }

    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

/// The last stderr line, which carries the machine-readable error.
pub fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or("")
        .to_string()
}
