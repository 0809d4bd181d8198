//! The daemon binary: startup, a transfer through it, SIGINT shutdown.

use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use xdfs::client::{transfer, TransferSpec, Url};

#[test]
fn serves_until_sigint_then_exits_cleanly() {
    let root = tempfile::tempdir().unwrap();
    let log = root.path().join("xferd.log");
    let mut child = Command::new(env!("CARGO_BIN_EXE_xferd"))
        .args(["serve", "--bind", "127.0.0.1:0", "--disk-mode", "async", "--log"])
        .arg(&log)
        .arg("--root")
        .arg(root.path())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let ep = line.trim().strip_prefix("xferd listening on ").expect("banner").to_string();

    let url = Url::parse(&format!("xdfs://{ep}/zero:3000000")).unwrap();
    let mut spec = TransferSpec::new(url, Url::Null);
    spec.channels = 3;
    assert_eq!(transfer(&spec).unwrap().bytes_transferred, 3_000_000);

    unsafe { libc::kill(child.id() as libc::pid_t, libc::SIGINT) };
    let t0 = Instant::now();
    let status = loop {
        if let Some(s) = child.try_wait().unwrap() {
            break s;
        }
        assert!(t0.elapsed() < Duration::from_secs(15), "xferd ignored SIGINT");
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.contains("completed"), "{text}");
}

#[test]
fn bad_arguments_exit_2() {
    let st = Command::new(env!("CARGO_BIN_EXE_xferd"))
        .args(["serve", "--disk-mode", "sideways", "--root", "."])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    let st = Command::new(env!("CARGO_BIN_EXE_xferd"))
        .args(["serve", "--bind", "127.0.0.1:0", "--root", "/definitely/not/here"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_ne!(st.code(), Some(0));
}
