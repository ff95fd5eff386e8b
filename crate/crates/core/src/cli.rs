//! The `splitvault` command line.
//!
//! Output is one record per line, `kind key=value ...`, or one JSON object per
//! line with `--json`. Failures end with a single stderr line of the form
//! `error code=<name> exit=<n>: <message>`.

use std::ffi::OsString;
use std::fs;
use std::io::{self, IsTerminal, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::Deserialize;
use serde_json::{json, Map, Value};
use zeroize::Zeroizing;

use crate::call_keysets::{
    self, CallError, CallOutcome, Distribution, Keyring, SimpleDistribution, TokenCleanup,
    TokenExport,
};
use crate::cipher_suite::{CipherError, Registry, RoleBindings};
use crate::document_vault::{KdfParams, Vault, VaultError};
use crate::keygen_audit::{
    self, CsprngSource, KeySource, KeygenError, KeygenMethod, ShrunkenSource,
};
use crate::token_store::{
    self, MemoryToken, Mode, RegistryError, ServeError, TokenClient, TokenError,
};

pub const CONFIG_ENV: &str = "SPLITVAULT_CONFIG";
pub const PASSWORD_ENV: &str = "SPLITVAULT_PASSWORD";

/// Exit codes, one per error class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const AUTH: i32 = 4;
    pub const TOKEN_UNREACHABLE: i32 = 5;
    pub const TOKEN_DENIED: i32 = 6;
    pub const NOT_FOUND: i32 = 7;
    pub const CORRUPT: i32 = 8;
    pub const CONFLICT: i32 = 9;
    pub const CONSUMED: i32 = 10;
    pub const INVALID_INPUT: i32 = 11;
    pub const IO: i32 = 12;
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub roles: RoleBindings,
    /// Also registers the toy key-space ciphers.
    pub test_mode: bool,
    pub kdf: KdfParams,
    pub token: TokenConfig,
    pub paths: PathsConfig,
    pub audit: AuditConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenConfig {
    pub address: String,
    /// Device id sent in HELLO; required by enterprise-mode tokens.
    pub device: Option<String>,
    pub mode: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub vault: PathBuf,
    pub token_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub alpha: f64,
}

impl Default for TokenConfig {
    fn default() -> Self {
        Self {
            address: "127.0.0.1:7878".into(),
            device: None,
            mode: "wristband".into(),
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            vault: "splitvault.svlt".into(),
            token_dir: "splitvault-token".into(),
        }
    }
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            alpha: keygen_audit::DEFAULT_ALPHA,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text)
            .map_err(|e| CliError::new("config", exit::CONFIG, e.to_string()))?;
        cfg.registry()?;
        if cfg.kdf.iterations == 0 {
            return Err(CliError::new(
                "config",
                exit::CONFIG,
                "kdf.iterations must be positive",
            ));
        }
        if !(cfg.audit.alpha > 0.0 && cfg.audit.alpha < 1.0) {
            return Err(CliError::new(
                "config",
                exit::CONFIG,
                "audit.alpha must be in (0, 1)",
            ));
        }
        cfg.token
            .mode
            .parse::<Mode>()
            .map_err(|e| CliError::new("config", exit::CONFIG, e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::new("config", exit::CONFIG, format!("{}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn registry(&self) -> Result<Registry, CliError> {
        Registry::with_bindings(&self.roles, self.test_mode)
            .map_err(|e| CliError::new("config", exit::CONFIG, e.to_string()))
    }
}

/// A failed command: a stable code name, its exit status and a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: &'static str,
    pub exit: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, exit: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            exit,
            message: message.into(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new("io", exit::IO, e.to_string())
    }
}

impl From<VaultError> for CliError {
    fn from(e: VaultError) -> Self {
        let (code, exit) = match &e {
            VaultError::VaultLocked | VaultError::BadPassword => ("auth", exit::AUTH),
            VaultError::CorruptStore(_) | VaultError::CorruptTokenRecord(_) => {
                ("corrupt", exit::CORRUPT)
            }
            VaultError::AlreadyExists(_) | VaultError::DuplicateDocId(_) => {
                ("conflict", exit::CONFLICT)
            }
            VaultError::NoStore(_)
            | VaultError::UnknownDocument(_)
            | VaultError::TokenRecordMissing(_) => ("not_found", exit::NOT_FOUND),
            VaultError::InvalidDocId(_) => ("invalid_input", exit::INVALID_INPUT),
            VaultError::TokenUnreachable(_) | VaultError::TokenRejected(_) => {
                ("token_unreachable", exit::TOKEN_UNREACHABLE)
            }
            VaultError::TokenDenied => ("token_denied", exit::TOKEN_DENIED),
            VaultError::Io(_) => ("io", exit::IO),
            VaultError::AlreadyDestroyed
            | VaultError::Cipher(_)
            | VaultError::Split(_)
            | VaultError::InjectedFailure(_) => ("internal", exit::INTERNAL),
        };
        CliError::new(code, exit, e.to_string())
    }
}

impl From<TokenError> for CliError {
    fn from(e: TokenError) -> Self {
        let (code, exit) = match e {
            TokenError::Denied => ("token_denied", exit::TOKEN_DENIED),
            TokenError::NotFound => ("not_found", exit::NOT_FOUND),
            _ => ("token_unreachable", exit::TOKEN_UNREACHABLE),
        };
        CliError::new(code, exit, e.to_string())
    }
}

impl From<CallError> for CliError {
    fn from(e: CallError) -> Self {
        let (code, exit) = match &e {
            CallError::InvalidParameters(_) => ("invalid_input", exit::INVALID_INPUT),
            CallError::AlreadyConsumed { .. } | CallError::SessionClosed => {
                ("consumed", exit::CONSUMED)
            }
            CallError::MissingEntry { .. } => ("not_found", exit::NOT_FOUND),
            CallError::TokenUnreachable(_) => ("token_unreachable", exit::TOKEN_UNREACHABLE),
            CallError::CorruptKeyring(_) => ("corrupt", exit::CORRUPT),
            CallError::UnsuitableCipher(_) => ("config", exit::CONFIG),
            CallError::Io(_) => ("io", exit::IO),
            CallError::Cipher(_) | CallError::Split(_) => ("internal", exit::INTERNAL),
        };
        CliError::new(code, exit, e.to_string())
    }
}

impl From<KeygenError> for CliError {
    fn from(e: KeygenError) -> Self {
        let (code, exit) = match &e {
            KeygenError::GeneratorFailure(_) => ("internal", exit::INTERNAL),
            _ => ("invalid_input", exit::INVALID_INPUT),
        };
        CliError::new(code, exit, e.to_string())
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        let (code, exit) = match &e {
            RegistryError::UnknownDevice(_) => ("not_found", exit::NOT_FOUND),
            RegistryError::InvalidDeviceId(_) => ("invalid_input", exit::INVALID_INPUT),
            RegistryError::Corrupt { .. } => ("corrupt", exit::CORRUPT),
            RegistryError::Io(_) => ("io", exit::IO),
        };
        CliError::new(code, exit, e.to_string())
    }
}

impl From<ServeError> for CliError {
    fn from(e: ServeError) -> Self {
        let (code, exit) = match &e {
            ServeError::BindFailure { .. } | ServeError::StoreDir(..) => ("io", exit::IO),
            ServeError::StoreCorrupt(_) => ("corrupt", exit::CORRUPT),
            ServeError::Registry(_) => ("corrupt", exit::CORRUPT),
        };
        CliError::new(code, exit, e.to_string())
    }
}

impl From<CipherError> for CliError {
    fn from(e: CipherError) -> Self {
        CliError::new("config", exit::CONFIG, e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "splitvault",
    version,
    about = "Split-key document vault, token service, call keysets and key generation audit"
)]
struct Cli {
    /// Emit one JSON object per output line.
    #[arg(long, global = true)]
    json: bool,
    /// Config file (TOML). Defaults to $SPLITVAULT_CONFIG, then built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Documents encrypted under split keys (phone side).
    #[command(subcommand)]
    Vault(VaultCmd),
    /// The token service holding the off-phone halves.
    #[command(subcommand)]
    Token(TokenCmd),
    /// Pre-distributed one-time call keysets.
    #[command(subcommand)]
    Keysets(KeysetsCmd),
    /// Card-deck key generation, entropy accounting and collision audit.
    #[command(subcommand)]
    Keygen(KeygenCmd),
}

#[derive(Args, Debug)]
struct VaultTarget {
    /// Vault store file (overrides paths.vault).
    #[arg(long, value_name = "PATH")]
    vault: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TokenTarget {
    /// Token address (overrides token.address).
    #[arg(long, value_name = "HOST:PORT")]
    token: Option<String>,
    /// Device id for enterprise tokens (overrides token.device).
    #[arg(long)]
    device: Option<String>,
}

#[derive(Subcommand, Debug)]
enum VaultCmd {
    /// Create an empty, password-protected store.
    Init {
        #[command(flatten)]
        target: VaultTarget,
    },
    /// Encrypt a file into the vault, sending the token its part.
    Encrypt {
        #[arg(long)]
        id: String,
        /// Input file, `-` for stdin.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        #[command(flatten)]
        target: VaultTarget,
        #[command(flatten)]
        token: TokenTarget,
    },
    /// Decrypt a document with the token's help.
    Read {
        #[arg(long)]
        id: String,
        /// Output file; stdout if omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[command(flatten)]
        target: VaultTarget,
        #[command(flatten)]
        token: TokenTarget,
    },
    /// Remove a document from the vault and the token.
    Rm {
        #[arg(long)]
        id: String,
        #[command(flatten)]
        target: VaultTarget,
        #[command(flatten)]
        token: TokenTarget,
    },
    /// List stored documents.
    List {
        #[command(flatten)]
        target: VaultTarget,
    },
}

#[derive(Subcommand, Debug)]
enum TokenCmd {
    /// Run the token service until killed.
    Serve {
        /// Listen address (overrides token.address).
        #[arg(long, value_name = "HOST:PORT")]
        bind: Option<String>,
        /// wristband or enterprise (overrides token.mode).
        #[arg(long)]
        mode: Option<String>,
        /// Store directory (overrides paths.token_dir).
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
    },
    /// Revoke a device; takes effect on its next request.
    Revoke {
        #[arg(long)]
        device: String,
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
    },
    /// Enroll (or re-enroll) a device.
    Enroll {
        #[arg(long)]
        device: String,
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum KeysetsCmd {
    /// Generate keysets for every employee pair and write per-device files.
    Provision {
        #[arg(long)]
        employees: u32,
        #[arg(long)]
        sets: u32,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Plain per-pair keys on the phone, no token part.
        #[arg(long)]
        simple: bool,
    },
    /// Load a token export file onto the token.
    Install {
        #[arg(long, value_name = "PATH")]
        token_file: PathBuf,
        #[command(flatten)]
        token: TokenTarget,
    },
    /// Run full call cycles between two loopback endpoints.
    CallSim {
        #[arg(long, default_value_t = 2)]
        employees: u32,
        #[arg(long, default_value_t = 3)]
        sets: u32,
        /// Calls between employees 0 and 1; defaults to all sets plus one.
        #[arg(long)]
        calls: Option<u32>,
        /// Voice bytes per direction per call.
        #[arg(long, default_value_t = 64 * 1024)]
        bytes: usize,
        /// Every n-th call ends with a failed connection.
        #[arg(long, value_name = "N")]
        fail_every: Option<u32>,
        #[arg(long)]
        simple: bool,
    },
    /// Fresh and consumed keysets per peer in a phone keyring.
    Status {
        #[arg(long, value_name = "PATH")]
        keyring: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum GeneratorKind {
    Csprng,
    /// Seeds drawn from 2^space-bits values, stretched to full-length keys.
    Shrunken,
}

#[derive(Subcommand, Debug)]
enum KeygenCmd {
    /// Build a key from a card transcript (or the system CSPRNG).
    Cards {
        /// Transcript file: one pass of r/b per line.
        #[arg(long, value_name = "PATH", required_unless_present = "csprng")]
        transcript: Option<PathBuf>,
        #[arg(long, conflicts_with = "transcript")]
        csprng: bool,
        /// Key length in bits; the whole transcript if omitted.
        #[arg(long)]
        bits: Option<usize>,
        /// Where to write the packed key bytes.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Entropy of card-deck keys for a 2n-card deck.
    Entropy {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        passes: u32,
        #[arg(long, default_value_t = 0)]
        discarded: usize,
    },
    /// Birthday-collision audit of a key generator against a claimed space.
    Audit {
        #[arg(long, value_enum, default_value_t = GeneratorKind::Csprng)]
        generator: GeneratorKind,
        /// True space of the shrunken generator, in bits.
        #[arg(long, default_value_t = 40)]
        space_bits: u32,
        /// Advertised key space, in bits.
        #[arg(long)]
        claimed: f64,
        /// Number of keys to draw.
        #[arg(long)]
        samples: u64,
        #[arg(long, default_value_t = 32)]
        key_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Significance level (overrides audit.alpha).
        #[arg(long)]
        alpha: Option<f64>,
    },
}

/// Writes records either as `kind k=v ...` lines or JSON objects.
struct Out<'a> {
    json: bool,
    w: &'a mut dyn Write,
}

impl Out<'_> {
    fn record(&mut self, kind: &str, fields: Value) -> io::Result<()> {
        let Value::Object(map) = fields else {
            unreachable!("records are objects")
        };
        if self.json {
            let mut obj = Map::new();
            obj.insert("kind".into(), kind.into());
            obj.extend(map);
            writeln!(self.w, "{}", Value::Object(obj))
        } else {
            let mut line = kind.to_string();
            for (k, v) in map {
                let v = match v {
                    Value::String(s) => s,
                    Value::Null => "-".into(),
                    other => other.to_string(),
                };
                line.push_str(&format!(" {k}={v}"));
            }
            writeln!(self.w, "{line}")
        }
    }
}

/// Runs the CLI with real stdio. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs the CLI against the given output streams.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return exit::OK;
            }
            let _ = write!(stderr, "{}", e.render());
            // The first paragraph of clap's message, on one line.
            let text = e.to_string();
            let summary = text
                .lines()
                .take_while(|l| !l.trim().is_empty())
                .map(str::trim)
                .collect::<Vec<_>>()
                .join(" ");
            let summary = summary
                .strip_prefix("error: ")
                .unwrap_or(&summary)
                .to_string();
            report(stderr, false, &CliError::new("usage", exit::USAGE, summary));
            return exit::USAGE;
        }
    };
    let json = cli.json;
    let mut out = Out { json, w: stdout };
    match dispatch(cli, &mut out) {
        Ok(()) => {
            let _ = out.w.flush();
            exit::OK
        }
        Err(e) => {
            let _ = out.w.flush();
            report(stderr, json, &e);
            e.exit
        }
    }
}

fn report(stderr: &mut dyn Write, json: bool, e: &CliError) {
    let line = if json {
        json!({"error": {"code": e.code, "exit": e.exit, "message": e.message}}).to_string()
    } else {
        format!(
            "error code={} exit={}: {}",
            e.code,
            e.exit,
            e.message.replace('\n', " ")
        )
    };
    let _ = writeln!(stderr, "{line}");
}

fn load_config(explicit: Option<&Path>) -> Result<Config, CliError> {
    match explicit {
        Some(p) => Config::load(p),
        None => match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Config::load(Path::new(&p)),
            _ => Ok(Config::default()),
        },
    }
}

fn dispatch(cli: Cli, out: &mut Out<'_>) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Vault(cmd) => vault(cmd, &cfg, out),
        Command::Token(cmd) => token(cmd, &cfg, out),
        Command::Keysets(cmd) => keysets(cmd, &cfg, out),
        Command::Keygen(cmd) => keygen(cmd, &cfg, out),
    }
}

fn password(confirm: bool) -> Result<Zeroizing<String>, CliError> {
    if let Ok(p) = std::env::var(PASSWORD_ENV) {
        return Ok(Zeroizing::new(p));
    }
    if !io::stdin().is_terminal() {
        return Err(CliError::new(
            "auth",
            exit::AUTH,
            format!("no terminal for the password prompt and {PASSWORD_ENV} is not set"),
        ));
    }
    let p = Zeroizing::new(rpassword::prompt_password("vault password: ")?);
    if confirm {
        let again = Zeroizing::new(rpassword::prompt_password("repeat password: ")?);
        if *again != *p {
            return Err(CliError::new("auth", exit::AUTH, "passwords do not match"));
        }
    }
    Ok(p)
}

fn connect(cfg: &Config, t: &TokenTarget) -> Result<TokenClient, CliError> {
    let addr = t.token.as_deref().unwrap_or(&cfg.token.address);
    let device = t.device.as_deref().or(cfg.token.device.as_deref());
    Ok(TokenClient::connect(addr, device)?)
}

fn vault_path<'a>(cfg: &'a Config, t: &'a VaultTarget) -> &'a Path {
    t.vault.as_deref().unwrap_or(&cfg.paths.vault)
}

fn open_vault(cfg: &Config, t: &VaultTarget) -> Result<Vault, CliError> {
    let mut v = Vault::open(vault_path(cfg, t), Arc::new(cfg.registry()?))?;
    v.unlock(password(false)?.as_bytes())?;
    Ok(v)
}

fn vault(cmd: VaultCmd, cfg: &Config, out: &mut Out<'_>) -> Result<(), CliError> {
    match cmd {
        VaultCmd::Init { target } => {
            let path = vault_path(cfg, &target);
            if path.exists() {
                return Err(VaultError::AlreadyExists(path.to_path_buf()).into());
            }
            let pw = password(true)?;
            Vault::create(path, pw.as_bytes(), cfg.kdf, Arc::new(cfg.registry()?))?;
            out.record(
                "vault-init",
                json!({"path": path.display().to_string(), "kdf_iterations": cfg.kdf.iterations}),
            )?;
        }
        VaultCmd::Encrypt {
            id,
            input,
            target,
            token,
        } => {
            let data = Zeroizing::new(if input.as_os_str() == "-" {
                let mut buf = Vec::new();
                io::stdin().read_to_end(&mut buf)?;
                buf
            } else {
                fs::read(&input)?
            });
            let mut v = open_vault(cfg, &target)?;
            let mut t = connect(cfg, &token)?;
            let rec = v.encrypt_document(&mut t, &id, &data, &mut OsRng)?;
            out.record(
                "encrypted",
                json!({"id": id, "bytes": data.len(), "cipher": rec.d_prime.cipher_id}),
            )?;
        }
        VaultCmd::Read {
            id,
            out: dest,
            target,
            token,
        } => {
            let v = open_vault(cfg, &target)?;
            let mut t = connect(cfg, &token)?;
            let mut plain = v.read_document(&mut t, &id)?;
            let bytes = plain.bytes()?;
            match dest {
                Some(path) => {
                    fs::write(&path, bytes)?;
                    out.record(
                        "read",
                        json!({"id": id, "bytes": bytes.len(), "out": path.display().to_string()}),
                    )?;
                }
                None if out.json => {
                    let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
                    out.record(
                        "read",
                        json!({"id": id, "bytes": bytes.len(), "data_hex": hex}),
                    )?;
                }
                None => out.w.write_all(bytes)?,
            }
            v.destroy_plaintext(&mut plain)?;
        }
        VaultCmd::Rm { id, target, token } => {
            let mut v = open_vault(cfg, &target)?;
            let mut t = connect(cfg, &token)?;
            v.remove_document(&mut t, &id)?;
            out.record("removed", json!({"id": id}))?;
        }
        VaultCmd::List { target } => {
            let v = open_vault(cfg, &target)?;
            for r in v.records()? {
                out.record(
                    "document",
                    json!({"id": r.doc_id, "bytes": r.d_prime.body.len(), "created_at": r.created_at}),
                )?;
            }
        }
    }
    Ok(())
}

fn token(cmd: TokenCmd, cfg: &Config, out: &mut Out<'_>) -> Result<(), CliError> {
    match cmd {
        TokenCmd::Serve { bind, mode, dir } => {
            let mode: Mode = mode
                .as_deref()
                .unwrap_or(&cfg.token.mode)
                .parse()
                .map_err(|e: String| CliError::new("usage", exit::USAGE, e))?;
            let bind = bind.unwrap_or_else(|| cfg.token.address.clone());
            let dir = dir.unwrap_or_else(|| cfg.paths.token_dir.clone());
            let server = token_store::serve(bind.as_str(), mode, &dir)?;
            out.record(
                "listening",
                json!({"addr": server.local_addr().to_string(), "mode": mode.to_string(), "dir": dir.display().to_string()}),
            )?;
            out.w.flush()?;
            server.wait();
        }
        TokenCmd::Revoke { device, dir } => {
            token_store::revoke(dir.as_deref().unwrap_or(&cfg.paths.token_dir), &device)?;
            out.record("revoked", json!({"device": device}))?;
        }
        TokenCmd::Enroll { device, dir } => {
            token_store::enroll(dir.as_deref().unwrap_or(&cfg.paths.token_dir), &device)?;
            out.record("enrolled", json!({"device": device}))?;
        }
    }
    Ok(())
}

fn keysets(cmd: KeysetsCmd, cfg: &Config, out: &mut Out<'_>) -> Result<(), CliError> {
    let registry = cfg.registry()?;
    match cmd {
        KeysetsCmd::Provision {
            employees,
            sets,
            out: dir,
            simple,
        } => {
            fs::create_dir_all(&dir)?;
            let count = if simple {
                let dist = call_keysets::provision_simple(employees, sets, &registry, &mut OsRng)?;
                for i in 0..employees {
                    dist.phone_keyring(i)?
                        .save_to(dir.join(format!("phone-{i}.svks")))?;
                }
                dist.entries.len()
            } else {
                let dist = call_keysets::provision(employees, sets, &registry, &mut OsRng)?;
                for i in 0..employees {
                    dist.phone_keyring(i)?
                        .save_to(dir.join(format!("phone-{i}.svks")))?;
                    dist.token_export(i)?
                        .save(dir.join(format!("token-{i}.svks")))?;
                }
                dist.entries.len()
            };
            out.record(
                "provisioned",
                json!({"employees": employees, "sets": sets, "entries": count, "simple": simple, "dir": dir.display().to_string()}),
            )?;
        }
        KeysetsCmd::Install { token_file, token } => {
            let export = TokenExport::load(&token_file)?;
            let mut t = connect(cfg, &token)?;
            let n = export.install(&mut t)?;
            out.record("installed", json!({"owner": export.owner, "parts": n}))?;
        }
        KeysetsCmd::CallSim {
            employees,
            sets,
            calls,
            bytes,
            fail_every,
            simple,
        } => call_sim(
            &registry, employees, sets, calls, bytes, fail_every, simple, out,
        )?,
        KeysetsCmd::Status { keyring } => {
            let ring = Keyring::load(&keyring)?;
            for (peer, st) in ring.status() {
                out.record(
                    "peer",
                    json!({"owner": ring.owner(), "peer": peer, "fresh": st.fresh, "in_use": st.in_use, "consumed": st.consumed}),
                )?;
            }
            out.record(
                "pending",
                json!({"token_deletes": ring.pending_deletes().count()}),
            )?;
        }
    }
    Ok(())
}

struct SimEndpoint {
    ring: Keyring,
    token: MemoryToken,
}

#[allow(clippy::too_many_arguments)]
fn call_sim(
    registry: &Registry,
    employees: u32,
    sets: u32,
    calls: Option<u32>,
    bytes: usize,
    fail_every: Option<u32>,
    simple: bool,
    out: &mut Out<'_>,
) -> Result<(), CliError> {
    let mut eps: Vec<SimEndpoint> = if simple {
        let dist: SimpleDistribution =
            call_keysets::provision_simple(employees, sets, registry, &mut OsRng)?;
        (0..2)
            .map(|i| {
                Ok(SimEndpoint {
                    ring: dist.phone_keyring(i)?,
                    token: MemoryToken::new(),
                })
            })
            .collect::<Result<_, CallError>>()?
    } else {
        let dist: Distribution = call_keysets::provision(employees, sets, registry, &mut OsRng)?;
        (0..2)
            .map(|i| {
                let mut token = MemoryToken::new();
                dist.token_export(i)?.install(&mut token)?;
                Ok(SimEndpoint {
                    ring: dist.phone_keyring(i)?,
                    token,
                })
            })
            .collect::<Result<_, CallError>>()?
    };
    out.record(
        "provisioned",
        json!({"employees": employees, "sets": sets, "entries": call_keysets::keyset_count(employees, sets), "simple": simple}),
    )?;

    const FRAME: usize = 160;
    let calls = calls.unwrap_or(sets + 1);
    let (mut completed, mut failed) = (0u32, 0u32);
    for call in 1..=calls {
        let (a, b) = eps.split_at_mut(1);
        let (a, b) = (&mut a[0], &mut b[0]);
        let k = match a.ring.next_fresh(1) {
            Ok(k) => k,
            Err(e @ CallError::MissingEntry { .. }) => {
                out.record(
                    "call",
                    json!({"n": call, "result": "exhausted", "detail": e.to_string()}),
                )?;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut sa = a.ring.open_call(registry, Some(&mut a.token), 1, k)?;
        let mut sb = b.ring.open_call(registry, Some(&mut b.token), 0, k)?;
        let keys_agree = sa.call_key()? == sb.call_key()?;

        let mut voice = vec![0u8; bytes];
        rand::rng().fill_bytes(&mut voice);
        let mut ok = keys_agree;
        for frame in voice.chunks(FRAME) {
            let wire = sa.stream_chunk(sa.outgoing(), frame)?;
            ok &= sb.stream_chunk(sb.incoming(), &wire)? == frame;
            let wire = sb.stream_chunk(sb.outgoing(), frame)?;
            ok &= sa.stream_chunk(sa.incoming(), &wire)? == frame;
        }

        let outcome = match fail_every {
            Some(n) if n > 0 && call % n == 0 => CallOutcome::ConnectionFailed,
            _ => CallOutcome::Completed,
        };
        let ra = a.ring.close_call(&mut sa, outcome, Some(&mut a.token));
        let rb = b.ring.close_call(&mut sb, outcome, Some(&mut b.token));
        let reopen_refused = a
            .ring
            .open_call(registry, Some(&mut a.token), 1, k)
            .is_err();
        match outcome {
            CallOutcome::Completed => completed += 1,
            CallOutcome::ConnectionFailed => failed += 1,
        }
        let cleanup = |t: &TokenCleanup| match t {
            TokenCleanup::NotNeeded => "none".to_string(),
            TokenCleanup::Deleted => "deleted".to_string(),
            TokenCleanup::Queued(e) => format!("queued({e})"),
        };
        out.record(
            "call",
            json!({
                "n": call,
                "pair": ra.pair.to_string(),
                "index": k,
                "outcome": match outcome { CallOutcome::Completed => "completed", CallOutcome::ConnectionFailed => "connection_failed" },
                "keys_agree": keys_agree,
                "stream_ok": ok,
                "bytes_each_way": bytes,
                "token_cleanup": cleanup(&ra.token),
                "peer_token_cleanup": cleanup(&rb.token),
                "reopen_refused": reopen_refused,
            }),
        )?;
        if !ok || !reopen_refused {
            return Err(CliError::new(
                "internal",
                exit::INTERNAL,
                format!("call {call} failed its checks"),
            ));
        }
    }
    let status = eps[0].ring.status().get(&1).copied().unwrap_or_default();
    out.record(
        "summary",
        json!({"completed": completed, "connection_failed": failed, "fresh_left": status.fresh, "consumed": status.consumed}),
    )?;
    Ok(())
}

fn keygen(cmd: KeygenCmd, cfg: &Config, out: &mut Out<'_>) -> Result<(), CliError> {
    match cmd {
        KeygenCmd::Cards {
            transcript,
            csprng,
            bits,
            out: dest,
        } => {
            let key = if csprng {
                let bits = bits
                    .ok_or_else(|| CliError::new("usage", exit::USAGE, "--csprng needs --bits"))?;
                keygen_audit::generate_key(KeygenMethod::Csprng, bits, &mut OsRng)?
            } else {
                let path = transcript.expect("required by clap");
                let passes = keygen_audit::parse_transcript(&fs::read_to_string(path)?)?;
                let available: usize = passes.iter().map(|p| p.colors().len()).sum();
                keygen_audit::generate_key(
                    KeygenMethod::CardTranscript(&passes),
                    bits.unwrap_or(available),
                    &mut OsRng,
                )?
            };
            fs::write(
                &dest,
                key.key
                    .expose()
                    .map_err(|e| CliError::new("internal", exit::INTERNAL, e.to_string()))?,
            )?;
            out.record(
                "key",
                json!({"bits": key.bit_len, "bytes": key.key.len(), "pad_bits": key.pad_bits, "out": dest.display().to_string()}),
            )?;
        }
        KeygenCmd::Entropy {
            n,
            passes,
            discarded,
        } => {
            let deck = n.checked_mul(2).ok_or_else(|| {
                CliError::new("invalid_input", exit::INVALID_INPUT, "n too large")
            })?;
            let r = keygen_audit::entropy_estimate(deck, discarded, passes)?;
            out.record("entropy", serde_json::to_value(r).expect("plain struct"))?;
        }
        KeygenCmd::Audit {
            generator,
            space_bits,
            claimed,
            samples,
            key_len,
            seed,
            alpha,
        } => {
            let mut source: Box<dyn KeySource> = match generator {
                GeneratorKind::Csprng => Box::new(CsprngSource { key_len }),
                GeneratorKind::Shrunken => {
                    Box::new(ShrunkenSource::new(space_bits, key_len, seed)?)
                }
            };
            let r = keygen_audit::collision_audit(
                &mut *source,
                claimed,
                samples,
                alpha.unwrap_or(cfg.audit.alpha),
            )?;
            out.record("audit", serde_json::to_value(r).expect("plain struct"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut o = Vec::new();
        let mut e = Vec::new();
        let code = run_with(
            std::iter::once("splitvault").chain(args.iter().copied()),
            &mut o,
            &mut e,
        );
        (
            code,
            String::from_utf8(o).unwrap(),
            String::from_utf8(e).unwrap(),
        )
    }

    #[test]
    fn entropy_command() {
        let (code, out, _) = run_capture(&["keygen", "entropy", "--n", "25", "--passes", "4"]);
        assert_eq!(code, 0);
        assert!(out.starts_with("entropy "));
        let (_, out, _) =
            run_capture(&["--json", "keygen", "entropy", "--n", "25", "--passes", "4"]);
        let v: Value = serde_json::from_str(out.trim()).unwrap();
        assert!(v["combined_asymptotic_log2"].as_f64().unwrap() >= 187.0);
    }

    #[test]
    fn usage_errors_exit_2() {
        let (code, _, err) = run_capture(&["vault", "frobnicate"]);
        assert_eq!(code, exit::USAGE);
        assert!(err
            .lines()
            .last()
            .unwrap()
            .starts_with("error code=usage exit=2"));
        let (_, _, err) = run_capture(&["keygen", "audit", "--samples", "9"]);
        assert_eq!(
            err.lines().last().unwrap(),
            "error code=usage exit=2: the following required arguments were not provided: --claimed <CLAIMED>"
        );
        let (code, _, _) = run_capture(&[]);
        assert_eq!(code, exit::USAGE);
    }

    #[test]
    fn help_lists_every_group() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        for g in ["vault", "token", "keysets", "keygen"] {
            assert!(out.contains(g));
        }
        let (_, out, _) = run_capture(&["keysets", "--help"]);
        for s in ["provision", "install", "call-sim", "status"] {
            assert!(out.contains(s), "{s}");
        }
    }

    #[test]
    fn invalid_entropy_input() {
        let (code, _, err) = run_capture(&["keygen", "entropy", "--n", "101"]);
        assert_eq!(code, exit::INVALID_INPUT);
        assert!(err.contains("code=invalid_input"));
    }

    #[test]
    fn call_sim_runs_to_exhaustion() {
        let (code, out, err) = run_capture(&[
            "keysets",
            "call-sim",
            "--sets",
            "2",
            "--bytes",
            "1000",
            "--fail-every",
            "2",
        ]);
        assert_eq!(code, 0, "{err}");
        let lines: Vec<_> = out.lines().collect();
        assert!(lines[1].contains("outcome=completed") && lines[1].contains("reopen_refused=true"));
        assert!(lines[2].contains("outcome=connection_failed"));
        assert!(lines[3].contains("result=exhausted"));
        assert!(lines[4].starts_with("summary completed=1 connection_failed=1 fresh_left=0"));
    }

    #[test]
    fn config_rejects_conflicting_roles() {
        let err = Config::from_toml("[roles]\ndocument = \"aes128-ctr\"\n").unwrap_err();
        assert_eq!(err.exit, exit::CONFIG);
        assert!(Config::from_toml("bogus = 1").is_err());
        let cfg =
            Config::from_toml("[kdf]\niterations = 1000\n[token]\naddress = \"127.0.0.1:1\"\n")
                .unwrap();
        assert_eq!(cfg.kdf.iterations, 1000);
        assert_eq!(cfg.roles, RoleBindings::default());
    }
}
