//! Subprocess execution with a wall-clock deadline.
//!
//! On Unix the child is reaped with `wait4`, which also yields its peak
//! resident set size.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct ProcessOutput {
    /// Exit code; `None` when killed by a signal or on timeout.
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub elapsed: Duration,
    pub peak_rss_kb: Option<u64>,
}

impl ProcessOutput {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0)
    }

    pub fn combined(&self) -> String {
        let mut s = self.stdout.clone();
        if !self.stderr.is_empty() {
            if !s.is_empty() && !s.ends_with('\n') {
                s.push('\n');
            }
            s.push_str(&self.stderr);
        }
        s
    }
}

/// Locates an executable: `override_var` first, then each name on `PATH`.
pub fn find_tool(override_var: Option<&str>, names: &[&str]) -> Option<PathBuf> {
    if let Some(var) = override_var {
        if let Ok(p) = std::env::var(var) {
            let p = PathBuf::from(p);
            if p.is_file() {
                return Some(p);
            }
        }
    }
    let path = std::env::var_os("PATH")?;
    for dir in std::env::split_paths(&path) {
        for name in names {
            let candidate = dir.join(name);
            if candidate.is_file() {
                return Some(candidate);
            }
        }
    }
    None
}

fn drain<R: Read + Send + 'static>(r: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut r) = r {
            let _ = r.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

pub fn run_with_timeout(
    program: &Path,
    args: &[String],
    cwd: Option<&Path>,
    timeout: Duration,
) -> std::io::Result<ProcessOutput> {
    let mut cmd = Command::new(program);
    cmd.args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    #[cfg(unix)]
    {
        // own process group, so a timeout kills tool-spawned helpers too
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());
    let (exit_code, timed_out, peak_rss_kb) = wait(&mut child, start, timeout)?;
    let elapsed = start.elapsed();
    Ok(ProcessOutput {
        exit_code,
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
        timed_out,
        elapsed,
        peak_rss_kb,
    })
}

#[cfg(unix)]
fn wait(
    child: &mut std::process::Child,
    start: Instant,
    timeout: Duration,
) -> std::io::Result<(Option<i32>, bool, Option<u64>)> {
    let pid = child.id() as libc::pid_t;
    let mut timed_out = false;
    loop {
        let mut status: libc::c_int = 0;
        // SAFETY: zeroed rusage is a valid bit pattern; pid belongs to our child.
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        let flags = if timed_out { 0 } else { libc::WNOHANG };
        let r = unsafe { libc::wait4(pid, &mut status, flags, &mut usage) };
        if r == pid {
            let code = if libc::WIFEXITED(status) && !timed_out {
                Some(libc::WEXITSTATUS(status))
            } else {
                None
            };
            // ru_maxrss is in kilobytes on Linux
            let rss = u64::try_from(usage.ru_maxrss).ok().filter(|&v| v > 0);
            return Ok((code, timed_out, rss));
        }
        if r < 0 {
            let e = std::io::Error::last_os_error();
            if e.kind() == std::io::ErrorKind::Interrupted {
                continue;
            }
            return Err(e);
        }
        if start.elapsed() >= timeout && !timed_out {
            unsafe {
                libc::kill(-pid, libc::SIGKILL);
            }
            let _ = child.kill();
            timed_out = true;
            continue;
        }
        thread::sleep(Duration::from_millis(5));
    }
}

#[cfg(not(unix))]
fn wait(
    child: &mut std::process::Child,
    start: Instant,
    timeout: Duration,
) -> std::io::Result<(Option<i32>, bool, Option<u64>)> {
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((status.code(), false, None));
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Ok((None, true, None));
        }
        thread::sleep(Duration::from_millis(5));
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;

    #[test]
    fn captures_output_and_exit_code() {
        let out = run_with_timeout(
            Path::new("/bin/sh"),
            &["-c".into(), "echo hi; echo err 1>&2; exit 3".into()],
            None,
            Duration::from_secs(10),
        )
        .unwrap();
        assert_eq!(out.exit_code, Some(3));
        assert_eq!(out.stdout, "hi\n");
        assert_eq!(out.stderr, "err\n");
        assert!(!out.timed_out);
        assert!(out.peak_rss_kb.is_some());
    }

    #[test]
    fn kills_on_timeout() {
        let out = run_with_timeout(
            Path::new("/bin/sh"),
            &["-c".into(), "sleep 5".into()],
            None,
            Duration::from_millis(100),
        )
        .unwrap();
        assert!(out.timed_out);
        assert_eq!(out.exit_code, None);
        assert!(out.elapsed < Duration::from_secs(4));
    }

    #[test]
    fn missing_tool_not_found() {
        assert!(find_tool(Some("P2S_TEST_NO_SUCH_VAR"), &["definitely-not-a-tool-xyz"]).is_none());
    }
}
