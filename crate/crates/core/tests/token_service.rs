mod common;

use std::io::Write;
use std::net::TcpStream;

use common::{Cli, TokenProcess};
use splitvault::token_store::{Frame, Request, Response, TokenClient, TokenError, TokenStore};

#[test]
fn put_get_delete_list_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let token = TokenProcess::start("wristband", dir.path());
    let mut c = TokenClient::connect(&token.addr, None).unwrap();
    c.put(b"k1", b"blob one", false).unwrap();
    c.put(b"k2", &[0u8; 70_000], false).unwrap();
    assert_eq!(&*c.get(b"k1").unwrap(), b"blob one");
    assert!(matches!(
        c.put(b"k1", b"again", false),
        Err(TokenError::Server(_))
    ));
    c.put(b"k1", b"replaced", true).unwrap();
    assert_eq!(&*c.get(b"k1").unwrap(), b"replaced");
    let mut keys = c.list().unwrap();
    keys.sort();
    assert_eq!(keys, [b"k1".to_vec(), b"k2".to_vec()]);
    c.delete(b"k1").unwrap();
    assert_eq!(c.get(b"k1").unwrap_err(), TokenError::NotFound);
    assert_eq!(c.delete(b"k1").unwrap_err(), TokenError::NotFound);

    // A second client sees the same store.
    let mut d = TokenClient::connect(&token.addr, None).unwrap();
    assert_eq!(d.get(b"k2").unwrap().len(), 70_000);
}

#[test]
fn records_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let token = TokenProcess::start("wristband", dir.path());
        let mut c = TokenClient::connect(&token.addr, None).unwrap();
        for i in 0..50u32 {
            c.put(format!("k{i}").as_bytes(), &i.to_be_bytes(), false)
                .unwrap();
        }
        for i in 0..25u32 {
            c.delete(format!("k{i}").as_bytes()).unwrap();
        }
    }
    let token = TokenProcess::start("wristband", dir.path());
    let mut c = TokenClient::connect(&token.addr, None).unwrap();
    assert_eq!(c.list().unwrap().len(), 25);
    assert_eq!(&*c.get(b"k30").unwrap(), &30u32.to_be_bytes());
}

#[test]
fn enterprise_hello_and_revocation() {
    let dir = tempfile::tempdir().unwrap();
    let token = TokenProcess::start("enterprise", dir.path());
    let cli = Cli::new(dir.path(), &token.addr, None);

    // Anything before HELLO is denied.
    let mut raw = TcpStream::connect(&token.addr).unwrap();
    Request::List
        .to_frame()
        .unwrap()
        .write_to(&mut raw)
        .unwrap();
    raw.flush().unwrap();
    let resp = Response::from_frame(Frame::read_from(&mut raw).unwrap().unwrap()).unwrap();
    assert_eq!(resp, Response::Denied);

    let mut a = TokenClient::connect(&token.addr, Some("dev-a")).unwrap();
    let mut b = TokenClient::connect(&token.addr, Some("dev-b")).unwrap();
    a.put(b"shared-name", b"a's", false).unwrap();
    b.put(b"shared-name", b"b's", false).unwrap();
    assert_eq!(&*a.get(b"shared-name").unwrap(), b"a's");
    assert_eq!(a.list().unwrap(), [b"shared-name".to_vec()]);

    cli.ok(&[
        "token",
        "revoke",
        "--device",
        "dev-a",
        "--dir",
        dir.path().to_str().unwrap(),
    ]);
    // Revocation applies to the already-open connection.
    assert_eq!(a.get(b"shared-name").unwrap_err(), TokenError::Denied);
    assert!(matches!(
        TokenClient::connect(&token.addr, Some("dev-a")),
        Err(TokenError::Denied)
    ));
    assert_eq!(&*b.get(b"shared-name").unwrap(), b"b's");

    let unknown = cli.run(&[
        "token",
        "revoke",
        "--device",
        "nobody",
        "--dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        unknown.status.code(),
        Some(splitvault::cli::exit::NOT_FOUND)
    );
}

#[test]
fn garbage_does_not_kill_the_service() {
    let dir = tempfile::tempdir().unwrap();
    let token = TokenProcess::start("wristband", dir.path());
    let mut raw = TcpStream::connect(&token.addr).unwrap();
    raw.write_all(&[0xFF, 0xFF, 0xFF, 0xFF, 0x01]).unwrap();
    drop(raw);
    let mut raw = TcpStream::connect(&token.addr).unwrap();
    raw.write_all(&[0, 0, 0, 1, 0x7E]).unwrap();
    let resp = Response::from_frame(Frame::read_from(&mut raw).unwrap().unwrap()).unwrap();
    assert!(matches!(resp, Response::Err(_)));
    let mut c = TokenClient::connect(&token.addr, None).unwrap();
    c.put(b"still", b"alive", false).unwrap();
}
